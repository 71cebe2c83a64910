//! Exponential-cost reference computations.
//!
//! Everything here works on explicit state spaces: Pauli-string operators are
//! expanded into dense `2^q` matrices, `T_r` is formed by matrix products in the
//! unperturbed eigenbasis, and the walk sum behind the automaton is enumerated
//! walk by walk. Only meant for small systems (at most 14 spins).

use std::collections::BTreeMap;
use std::fmt;

use faer::{c64, Mat, Side};

use crate::config::format_f64;
use crate::error::{Error, Result};
use crate::model::{classify, validate_z, EnergyCombination, ModelConfig, Subspace, SubsystemSpectrum, TransitionModel};

pub const MAX_SPINS: usize = 14;
pub const HERMITICITY_TOL: f64 = 1e-12;
pub const MAX_SUBSYSTEM_DIM: usize = 256;
/// Matrix elements at or below this magnitude count as absent.
pub const COUPLING_TOL: f64 = 1e-12;
/// Relative tolerance for grouping eigenvalues into levels.
pub const LEVEL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn symbol(self) -> char {
        match self {
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }
}

/// `coefficient * P_{s1} P_{s2} ...` with distinct spins, stored sorted by spin.
/// Spin `k` is bit `k` of a computational basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliTerm {
    coefficient: f64,
    factors: Vec<(usize, Pauli)>,
}

impl PauliTerm {
    pub fn new(coefficient: f64, mut factors: Vec<(usize, Pauli)>) -> Result<Self> {
        if !coefficient.is_finite() {
            return Err(Error::Config(format!("coefficient {coefficient} is not finite")));
        }
        factors.sort_by_key(|&(s, _)| s);
        if let Some(w) = factors.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!("spin {} appears twice in one Pauli string", w[0].0)));
        }
        Ok(Self { coefficient, factors })
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn factors(&self) -> &[(usize, Pauli)] {
        &self.factors
    }

    /// Number of non-identity factors.
    pub fn locality(&self) -> usize {
        self.factors.len()
    }

    pub fn max_spin(&self) -> Option<usize> {
        self.factors.last().map(|&(s, _)| s)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.coefficient * factor, self.factors.clone())
    }

    pub fn relabeled(&self, map: impl Fn(usize) -> usize) -> Result<Self> {
        Self::new(self.coefficient, self.factors.iter().map(|&(s, p)| (map(s), p)).collect())
    }

    /// Image of basis state `j` as `(index, amplitude)`, coefficient included.
    pub fn apply(&self, j: usize) -> (usize, c64) {
        let mut out = j;
        let mut phase = c64::new(self.coefficient, 0.0);
        for &(s, p) in &self.factors {
            let bit = (j >> s) & 1;
            match p {
                Pauli::X => out ^= 1 << s,
                Pauli::Y => {
                    out ^= 1 << s;
                    phase *= if bit == 0 { c64::new(0.0, 1.0) } else { c64::new(0.0, -1.0) };
                }
                Pauli::Z => {
                    if bit == 1 {
                        phase = -phase;
                    }
                }
            }
        }
        (out, phase)
    }
}

impl fmt::Display for PauliTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_f64(self.coefficient))?;
        for (i, &(s, p)) in self.factors.iter().enumerate() {
            let sep = if i == 0 { " * " } else { " " };
            write!(f, "{sep}{}{s}", p.symbol())?;
        }
        Ok(())
    }
}

/// Square complex matrix.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    mat: Mat<c64>,
}

impl DenseOperator {
    pub fn from_mat(mat: Mat<c64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch {
                expected: mat.nrows(),
                found: mat.ncols(),
            });
        }
        Ok(Self { mat })
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            mat: Mat::from_fn(n, n, |i, j| if i == j { c64::new(diag[i], 0.0) } else { c64::new(0.0, 0.0) }),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { mat: Mat::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &Mat<c64> {
        &self.mat
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        self.mat[(i, j)]
    }

    /// `max |A_ij - conj(A_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in j..n {
                worst = worst.max((self.mat[(i, j)] - self.mat[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// True when every off-diagonal entry is exactly zero.
    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| i == j || self.mat[(i, j)] == c64::new(0.0, 0.0)))
    }

    pub fn sum(&self, other: &DenseOperator) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(Self {
            mat: &self.mat + &other.mat,
        })
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        if self.is_diagonal() {
            let mut d: Vec<f64> = (0..self.dim()).map(|i| self.mat[(i, i)].re).collect();
            d.sort_by(f64::total_cmp);
            return Ok(d);
        }
        self.mat
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Numerical(format!("eigenvalue solver failed: {e:?}")))
    }

    /// `||A||_2` of a Hermitian operator.
    pub fn spectral_norm(&self) -> Result<f64> {
        let ev = self.eigenvalues()?;
        Ok(ev.iter().fold(0.0f64, |m, x| m.max(x.abs())))
    }

    /// Largest absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.mat)
    }
}

pub fn inf_norm(a: &Mat<c64>) -> f64 {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn two_norm(a: &Mat<c64>) -> Result<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(0.0);
    }
    let s = a
        .singular_values()
        .map_err(|e| Error::Numerical(format!("singular value solver failed: {e:?}")))?;
    Ok(s.first().copied().unwrap_or(0.0))
}

/// `sum_k coeff_k * P_k` on `q` spins.
pub fn build_operator(terms: &[PauliTerm], q: usize) -> Result<DenseOperator> {
    if q > MAX_SPINS {
        return Err(Error::Size(format!(
            "{q} spins exceeds the dense limit of {MAX_SPINS} (dimension {})",
            1usize << MAX_SPINS
        )));
    }
    if let Some(s) = terms.iter().filter_map(PauliTerm::max_spin).max() {
        if s >= q {
            return Err(Error::Config(format!("term acts on spin {s} but the system has {q} spins")));
        }
    }
    let dim = 1usize << q;
    let mut mat = Mat::<c64>::zeros(dim, dim);
    for term in terms {
        for j in 0..dim {
            let (i, amp) = term.apply(j);
            mat[(i, j)] += amp;
        }
    }
    let op = DenseOperator { mat };
    let dev = op.hermiticity_error();
    let scale = terms.iter().map(|t| t.coefficient.abs()).sum::<f64>().max(1.0);
    if dev > HERMITICITY_TOL * scale {
        return Err(Error::NonHermitian(dev));
    }
    Ok(op)
}

/// Eigen-decomposition used by the oracle. A diagonal operator keeps the
/// computational basis (so degenerate levels are not rotated).
#[derive(Debug, Clone)]
pub struct Eigenbasis {
    values: Vec<f64>,
    vectors: Option<Mat<c64>>,
}

impl Eigenbasis {
    pub fn of(op: &DenseOperator) -> Result<Self> {
        if op.is_diagonal() {
            return Ok(Self {
                values: (0..op.dim()).map(|i| op.get(i, i).re).collect(),
                vectors: None,
            });
        }
        let dev = op.hermiticity_error();
        if dev > HERMITICITY_TOL * op.inf_norm().max(1.0) {
            return Err(Error::NonHermitian(dev));
        }
        let eig = op
            .matrix()
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Numerical(format!("eigen solver failed: {e:?}")))?;
        let s = eig.S();
        let values = (0..op.dim()).map(|i| s[i].re).collect();
        Ok(Self {
            values,
            vectors: Some(eig.U().to_owned()),
        })
    }

    /// Eigenvalues in basis order (ascending unless the operator was diagonal).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_computational(&self) -> bool {
        self.vectors.is_none()
    }

    /// `U^dagger A U`.
    pub fn transform(&self, op: &DenseOperator) -> Result<Mat<c64>> {
        if op.dim() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: op.dim(),
            });
        }
        Ok(match &self.vectors {
            None => op.matrix().clone(),
            Some(u) => {
                let au = op.matrix() * u;
                u.adjoint() * &au
            }
        })
    }
}

#[derive(Debug, Clone)]
struct Csr {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<c64>,
}

#[derive(Debug, Clone)]
enum Block {
    Dense(Mat<c64>),
    Sparse(Csr),
}

impl Block {
    fn extract(a: &Mat<c64>, rows: &[usize], cols: &[usize]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cs = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for &i in rows {
            for (k, &j) in cols.iter().enumerate() {
                let v = a[(i, j)];
                if v != c64::new(0.0, 0.0) {
                    cs.push(k);
                    vals.push(v);
                }
            }
            row_ptr.push(cs.len());
        }
        let total = rows.len() * cols.len();
        if total > 0 && (vals.len() as f64) < 0.1 * total as f64 {
            Block::Sparse(Csr {
                ncols: cols.len(),
                row_ptr,
                cols: cs,
                vals,
            })
        } else {
            Block::Dense(Mat::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])]))
        }
    }

    fn mul(&self, x: &Mat<c64>) -> Mat<c64> {
        match self {
            Block::Dense(a) => a * x,
            Block::Sparse(s) => {
                debug_assert_eq!(s.ncols, x.nrows());
                let nrows = s.row_ptr.len() - 1;
                let mut out = Mat::<c64>::zeros(nrows, x.ncols());
                for c in 0..x.ncols() {
                    for i in 0..nrows {
                        let mut acc = c64::new(0.0, 0.0);
                        for k in s.row_ptr[i]..s.row_ptr[i + 1] {
                            acc += s.vals[k] * x[(s.cols[k], c)];
                        }
                        out[(i, c)] = acc;
                    }
                }
                out
            }
        }
    }
}

/// Both norms of one exact term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermNorms {
    pub inf_norm: f64,
    pub two_norm: f64,
}

/// `||sum_{r > R} T_r||_2` estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfEnergyError {
    /// `truncated + tail`.
    pub value: f64,
    /// `||T_{R+1} + ... + T_{last}||_2`.
    pub truncated: f64,
    /// Geometric bound on the orders beyond `last_order`.
    pub tail: f64,
    pub last_order: usize,
    /// Set when some `||T_r||_2` grew with `r`, the stopping rule never fired,
    /// or the geometric ratio is not below 1.
    pub convergence_suspect: bool,
}

/// `H` and `V` prepared for repeated evaluation of `T_r(z)`.
#[derive(Debug, Clone)]
pub struct ExactSeries {
    energies: Vec<f64>,
    cutoff: f64,
    low: Vec<usize>,
    high: Vec<usize>,
    v_ll: Mat<c64>,
    v_hl: Block,
    v_lh: Block,
    v_hh: Block,
    v: DenseOperator,
}

impl ExactSeries {
    /// `cutoff` is measured from the ground energy; `None` means half of the
    /// first excitation energy.
    pub fn new(h: &DenseOperator, v: &DenseOperator, cutoff: Option<f64>) -> Result<Self> {
        if h.dim() != v.dim() {
            return Err(Error::DimensionMismatch {
                expected: h.dim(),
                found: v.dim(),
            });
        }
        let dev = v.hermiticity_error();
        if dev > HERMITICITY_TOL * v.inf_norm().max(1.0) {
            return Err(Error::NonHermitian(dev));
        }
        let basis = Eigenbasis::of(h)?;
        let ground = basis.values().iter().copied().fold(f64::INFINITY, f64::min);
        let energies: Vec<f64> = basis.values().iter().map(|e| e - ground).collect();
        let cutoff = match cutoff {
            Some(c) => c,
            None => {
                let scale = energies.iter().fold(0.0f64, |m, e| m.max(*e)).max(1.0);
                let first = energies
                    .iter()
                    .copied()
                    .filter(|&e| e > LEVEL_TOL * scale)
                    .fold(f64::INFINITY, f64::min);
                if first.is_finite() {
                    first / 2.0
                } else {
                    f64::INFINITY
                }
            }
        };
        let low: Vec<usize> = (0..energies.len()).filter(|&i| energies[i] < cutoff).collect();
        let high: Vec<usize> = (0..energies.len()).filter(|&i| energies[i] >= cutoff).collect();
        let vt = basis.transform(v)?;
        Ok(Self {
            v_ll: Mat::from_fn(low.len(), low.len(), |i, j| vt[(low[i], low[j])]),
            v_hl: Block::extract(&vt, &high, &low),
            v_lh: Block::extract(&vt, &low, &high),
            v_hh: Block::extract(&vt, &high, &high),
            energies,
            cutoff,
            low,
            high,
            v: v.clone(),
        })
    }

    /// Unperturbed energies in basis order, ground shifted to 0.
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn low_dim(&self) -> usize {
        self.low.len()
    }

    pub fn high_dim(&self) -> usize {
        self.high.len()
    }

    /// Basis indices of the low subspace.
    pub fn low_states(&self) -> &[usize] {
        &self.low
    }

    pub fn perturbation(&self) -> &DenseOperator {
        &self.v
    }

    /// `min |z - E|` over high states; errors when `z` hits a high eigenvalue.
    pub fn min_distance(&self, z: f64) -> Result<f64> {
        let scale = self.high.iter().map(|&i| self.energies[i]).fold(f64::INFINITY, f64::min);
        let eps = crate::model::RESOLVENT_EPS * if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        let mut min = f64::INFINITY;
        for &i in &self.high {
            let d = (z - self.energies[i]).abs();
            if d < eps {
                return Err(Error::ResolventPole {
                    energy: self.energies[i],
                    distance: d,
                });
            }
            min = min.min(d);
        }
        Ok(min)
    }

    /// `T_1 = V_{--}`.
    pub fn first_order(&self) -> &Mat<c64> {
        &self.v_ll
    }

    /// `T_2, ..., T_{r_max}` as low-by-low matrices in basis order.
    pub fn terms(&self, z: f64, r_max: usize) -> Result<Vec<Mat<c64>>> {
        self.min_distance(z)?;
        let g: Vec<f64> = self.high.iter().map(|&i| 1.0 / (z - self.energies[i])).collect();
        let resolve = |mut x: Mat<c64>| {
            for c in 0..x.ncols() {
                for (i, gi) in g.iter().enumerate() {
                    x[(i, c)] *= *gi;
                }
            }
            x
        };
        let mut out = Vec::new();
        if r_max < 2 {
            return Ok(out);
        }
        let mut x = resolve(dense_of(&self.v_hl, self.high.len(), self.low.len()));
        out.push(self.v_lh.mul(&x));
        for _ in 3..=r_max {
            x = resolve(self.v_hh.mul(&x));
            out.push(self.v_lh.mul(&x));
        }
        Ok(out)
    }

    /// Norms of `T_2 ... T_{r_max}`.
    pub fn term_norms(&self, z: f64, r_max: usize) -> Result<Vec<TermNorms>> {
        self.terms(z, r_max)?
            .iter()
            .map(|t| {
                Ok(TermNorms {
                    inf_norm: inf_norm(t),
                    two_norm: two_norm(t)?,
                })
            })
            .collect()
    }

    /// `||V||_2`.
    pub fn v_norm(&self) -> Result<f64> {
        self.v.spectral_norm()
    }

    /// Error of truncating the self-energy after order `big_r`: the exact sum
    /// of the following orders up to the first one whose norm drops below
    /// `1e-3` of the running total (at most `r_max`), plus a geometric tail
    /// `||V||^{r+1} / d^r / (1 - q)` with `q = ||V|| / d`.
    pub fn self_energy_error(&self, z: f64, big_r: usize, r_max: usize) -> Result<SelfEnergyError> {
        if big_r < 1 || r_max <= big_r {
            return Err(Error::Config(format!(
                "need 1 <= R < r_max, got R = {big_r}, r_max = {r_max}"
            )));
        }
        let d = self.min_distance(z)?;
        let vnorm = self.v_norm()?;
        let terms = self.terms(z, r_max)?;
        let n = self.low.len();
        let mut sum = Mat::<c64>::zeros(n, n);
        let mut suspect = false;
        let mut prev = f64::INFINITY;
        let mut last = r_max;
        let mut stopped = false;
        for r in (big_r + 1).max(2)..=r_max {
            let t = &terms[r - 2];
            sum += t;
            let tn = two_norm(t)?;
            if tn > prev * (1.0 + 1e-12) && prev > 0.0 {
                suspect = true;
            }
            prev = tn;
            if tn <= 1e-3 * two_norm(&sum)? {
                last = r;
                stopped = true;
                break;
            }
        }
        if !stopped {
            suspect = true;
        }
        let truncated = two_norm(&sum)?;
        let q = vnorm / d;
        let tail = if vnorm == 0.0 {
            0.0
        } else if q < 1.0 {
            vnorm.powi(last as i32 + 1) / d.powi(last as i32) / (1.0 - q)
        } else {
            suspect = true;
            f64::INFINITY
        };
        Ok(SelfEnergyError {
            value: truncated + tail,
            truncated,
            tail,
            last_order: last,
            convergence_suspect: suspect,
        })
    }
}

fn dense_of(b: &Block, nrows: usize, ncols: usize) -> Mat<c64> {
    match b {
        Block::Dense(a) => a.clone(),
        Block::Sparse(s) => {
            let mut out = Mat::<c64>::zeros(nrows, ncols);
            for i in 0..nrows {
                for k in s.row_ptr[i]..s.row_ptr[i + 1] {
                    out[(i, s.cols[k])] = s.vals[k];
                }
            }
            out
        }
    }
}

/// `||T_r||_inf` and `||T_r||_2` for a single order.
pub fn exact_term(h: &DenseOperator, v: &DenseOperator, cutoff: Option<f64>, z: f64, r: usize) -> Result<TermNorms> {
    if r < 2 {
        return Err(Error::UnsupportedOrder(r));
    }
    let series = ExactSeries::new(h, v, cutoff)?;
    Ok(*series.term_norms(z, r)?.last().expect("r >= 2"))
}

/// `||V||^r / d^{r-1}`.
pub fn geometric_bound(v_norm: f64, d: f64, r: usize) -> f64 {
    v_norm.powi(r as i32) / d.powi(r as i32 - 1)
}

/// The part of `V` that couples one subsystem to the rest. Spin `k` of the
/// subsystem operator is global spin `subsystem_spins[k]`; every other spin a
/// term touches belongs to the environment.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub subsystem_spins: Vec<usize>,
    pub terms: Vec<PauliTerm>,
}

/// Subsystem eigenstates grouped into levels, with the nonzero couplings a
/// fragment induces between them.
#[derive(Debug, Clone)]
pub struct EigenstateGraph {
    /// Level of each eigenstate (basis order).
    pub level_of: Vec<usize>,
    /// Level energies, ground shifted to 0.
    pub levels: Vec<f64>,
    /// `(u, v, ||<u|V|v>||_inf)` for every pair above the coupling tolerance.
    pub couplings: Vec<(usize, usize, f64)>,
}

impl EigenstateGraph {
    /// Directed edge set `u -> v`, `u != v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.couplings.iter().filter(|c| c.0 != c.1).map(|c| (c.0, c.1)).collect()
    }
}

/// Groups sorted values into levels; returns the level of each input value and
/// the level means.
pub fn cluster_levels(values: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = LEVEL_TOL * scale;
    let mut level_of = vec![0; values.len()];
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if k > 0 {
            let gap = values[i] - values[order[k - 1]];
            if gap > tol && gap < 1e3 * tol {
                return Err(Error::DegeneracyAmbiguous { gap });
            }
            if gap > tol {
                sums.push((0.0, 0));
            }
        } else {
            sums.push((0.0, 0));
        }
        let last = sums.last_mut().expect("pushed above");
        last.0 += values[i];
        last.1 += 1;
        level_of[i] = sums.len() - 1;
    }
    Ok((level_of, sums.iter().map(|(s, c)| s / *c as f64).collect()))
}

/// Diagonalizes `hsub` and measures `fragment` between its eigenstates.
pub fn eigenstate_graph(hsub: &DenseOperator, fragment: &Fragment) -> Result<EigenstateGraph> {
    let dim = hsub.dim();
    if dim > MAX_SUBSYSTEM_DIM {
        return Err(Error::Size(format!(
            "subsystem dimension {dim} exceeds {MAX_SUBSYSTEM_DIM}"
        )));
    }
    let qsub = fragment.subsystem_spins.len();
    if 1usize << qsub != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: 1 << qsub,
        });
    }
    let basis = Eigenbasis::of(hsub)?;
    let (level_of, means) = cluster_levels(basis.values())?;
    let ground = means[0];
    let levels = means.iter().map(|e| e - ground).collect();

    let local: BTreeMap<usize, usize> = fragment
        .subsystem_spins
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, k))
        .collect();
    let env_spins: Vec<usize> = {
        let mut s: Vec<usize> = fragment
            .terms
            .iter()
            .flat_map(|t| t.factors().iter().map(|f| f.0))
            .filter(|s| !local.contains_key(s))
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let env_index = |s: usize| env_spins.binary_search(&s).expect("collected above");

    // Group terms by environment string: <u|V|v> = sum_B C_B[u, v] * B.
    let mut groups: BTreeMap<Vec<(usize, Pauli)>, Vec<PauliTerm>> = BTreeMap::new();
    for t in &fragment.terms {
        let mut sub = Vec::new();
        let mut env = Vec::new();
        for &(s, p) in t.factors() {
            match local.get(&s) {
                Some(&k) => sub.push((k, p)),
                None => env.push((env_index(s), p)),
            }
        }
        groups
            .entry(env)
            .or_default()
            .push(PauliTerm::new(t.coefficient(), sub)?);
    }
    let mut parts = Vec::with_capacity(groups.len());
    for (env, sub_terms) in groups {
        let c = basis.transform(&build_operator(&sub_terms, qsub)?)?;
        let b = build_operator(&[PauliTerm::new(1.0, env)?], env_spins.len())?;
        parts.push((c, b));
    }

    let env_dim = 1usize << env_spins.len();
    let mut couplings = Vec::new();
    for u in 0..dim {
        for v in 0..dim {
            let mut o = Mat::<c64>::zeros(env_dim, env_dim);
            let mut any = false;
            for (c, b) in &parts {
                let w = c[(u, v)];
                if w.norm() > 0.0 {
                    any = true;
                    o += b.matrix() * faer::Scale(w);
                }
            }
            if !any {
                continue;
            }
            let norm = inf_norm(&o);
            if norm > COUPLING_TOL {
                couplings.push((u, v, norm));
            }
        }
    }
    Ok(EigenstateGraph {
        level_of,
        levels,
        couplings,
    })
}

/// Spectrum and transition summary from one subsystem Hamiltonian and the
/// coupling fragment of each subsystem.
///
/// `M_st` is the most level-`t` eigenstates any level-`s` eigenstate couples
/// to (over all fragments), `lambda_i` the largest off-diagonal
/// `||<u|V_i|v>||_inf`, and `omega` the sum over fragments of the largest
/// diagonal element norm.
pub fn derive_transition_model(
    hsub: &DenseOperator,
    fragments: &[Fragment],
) -> Result<(SubsystemSpectrum, TransitionModel)> {
    if fragments.is_empty() {
        return Err(Error::Config("at least one subsystem fragment is required".into()));
    }
    let mut spectrum: Option<SubsystemSpectrum> = None;
    let mut m: Vec<Vec<u32>> = Vec::new();
    let mut lambdas = Vec::with_capacity(fragments.len());
    let mut omega = 0.0;
    for f in fragments {
        let g = eigenstate_graph(hsub, f)?;
        let l = g.levels.len();
        if spectrum.is_none() {
            let mut deg = vec![0usize; l];
            for &lv in &g.level_of {
                deg[lv] += 1;
            }
            spectrum = Some(SubsystemSpectrum::new(g.levels.clone())?.with_degeneracies(deg)?);
            m = vec![vec![0; l]; l];
        }
        let dim = g.level_of.len();
        let mut counts = vec![vec![0u32; l]; dim];
        let mut lambda = 0.0f64;
        let mut diag = 0.0f64;
        for &(u, v, w) in &g.couplings {
            if u == v {
                diag = diag.max(w);
            } else {
                counts[u][g.level_of[v]] += 1;
                lambda = lambda.max(w);
            }
        }
        for u in 0..dim {
            let s = g.level_of[u];
            for t in 0..l {
                m[s][t] = m[s][t].max(counts[u][t]);
            }
        }
        lambdas.push(lambda);
        omega += diag;
    }
    let spectrum = spectrum.expect("at least one fragment");
    let neighbor = (0..m.len()).all(|s| (0..m.len()).all(|t| s.abs_diff(t) <= 1 || m[s][t] == 0));
    let transitions = if neighbor {
        TransitionModel::new(lambdas, omega, m)?
    } else {
        TransitionModel::unrestricted(lambdas, omega, m)?
    };
    Ok((spectrum, transitions))
}

/// Sum with a running compensation term.
#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Direct enumeration of every `r`-step walk on subsystem-labelled level
/// configurations. Each move of subsystem `i` from level `s` to `t` weighs
/// `lambda_i * M_st`, a diagonal move weighs `omega`, and every intermediate
/// configuration (which must be high) contributes `1/|z - E|`. Walks start at
/// each low configuration and end at any low one; configurations sharing an
/// energy combination are summed and the largest such sum is returned.
pub fn walk_sum_oracle(cfg: &ModelConfig, r: usize) -> Result<f64> {
    let m = cfg.subsystems();
    let l = cfg.levels();
    if m > 3 || l > 3 || r > 6 {
        return Err(Error::Size(format!(
            "walk enumeration is limited to m <= 3, l <= 3, r <= 6 (got m = {m}, l = {l}, r = {r})"
        )));
    }
    if r < 2 {
        return Err(Error::UnsupportedOrder(r));
    }
    validate_z(cfg)?;
    let t = cfg.transitions();
    let levels = cfg.spectrum().levels();
    let total = l.pow(m as u32);
    let decode = |mut k: usize| {
        let mut c = vec![0usize; m];
        for slot in c.iter_mut() {
            *slot = k % l;
            k /= l;
        }
        c
    };
    let encode = |c: &[usize]| c.iter().rev().fold(0, |acc, &x| acc * l + x);
    let configs: Vec<Vec<usize>> = (0..total).map(decode).collect();
    let occupation = |c: &[usize]| {
        let mut n = vec![0u32; l];
        for &x in c {
            n[x] += 1;
        }
        EnergyCombination::new(n)
    };
    let mut low = vec![false; total];
    let mut resolvent = vec![0.0; total];
    for (k, c) in configs.iter().enumerate() {
        let e: f64 = c.iter().map(|&x| levels[x]).sum();
        low[k] = classify(&occupation(c), cfg)? == Subspace::Low;
        resolvent[k] = 1.0 / (cfg.z() - e).abs();
    }

    struct Walker<'a> {
        configs: &'a [Vec<usize>],
        low: &'a [bool],
        resolvent: &'a [f64],
        lambdas: &'a [f64],
        omega: f64,
        counts: Vec<Vec<f64>>,
        encode: &'a dyn Fn(&[usize]) -> usize,
    }

    impl Walker<'_> {
        fn step(&self, k: usize, weight: f64, left: usize, acc: &mut Neumaier) {
            if left == 0 {
                if self.low[k] {
                    acc.add(weight);
                }
                return;
            }
            let mut next = |k2: usize, w: f64| {
                if left == 1 {
                    if self.low[k2] {
                        self.step(k2, w, 0, acc);
                    }
                } else if !self.low[k2] {
                    self.step(k2, w * self.resolvent[k2], left - 1, acc);
                }
            };
            let c = &self.configs[k];
            for (i, &s) in c.iter().enumerate() {
                for (t, &count) in self.counts[s].iter().enumerate() {
                    if count == 0.0 {
                        continue;
                    }
                    let mut c2 = c.clone();
                    c2[i] = t;
                    next((self.encode)(&c2), weight * self.lambdas[i] * count);
                }
            }
            if self.omega > 0.0 {
                next(k, weight * self.omega);
            }
        }
    }

    let walker = Walker {
        configs: &configs,
        low: &low,
        resolvent: &resolvent,
        lambdas: t.lambdas(),
        omega: t.omega(),
        counts: (0..l).map(|s| (0..l).map(|d| t.count(s, d) as f64).collect()).collect(),
        encode: &encode,
    };
    let mut by_start: BTreeMap<EnergyCombination, Neumaier> = BTreeMap::new();
    for k in (0..total).filter(|&k| low[k]) {
        walker.step(k, 1.0, r, by_start.entry(occupation(&configs[k])).or_default());
    }
    Ok(by_start.values().map(Neumaier::total).fold(0.0, f64::max))
}

/// Largest deviation between the lowest `sector_dim` eigenvalues of `htilde`
/// and the spectrum of `heff`, each eigenvalue of `heff` repeated
/// `sector_dim / dim(heff)` times. Both lists are shifted to zero mean first.
pub fn spectral_error(htilde: &DenseOperator, heff: &DenseOperator, sector_dim: usize) -> Result<f64> {
    let n = heff.dim();
    if n == 0 || sector_dim % n != 0 || sector_dim > htilde.dim() {
        return Err(Error::DimensionMismatch {
            expected: sector_dim,
            found: n,
        });
    }
    let copies = sector_dim / n;
    let mut low = htilde.eigenvalues()?;
    low.truncate(sector_dim);
    let target: Vec<f64> = heff
        .eigenvalues()?
        .into_iter()
        .flat_map(|e| std::iter::repeat_n(e, copies))
        .collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (a, b) = (mean(&low), mean(&target));
    Ok(low
        .iter()
        .zip(&target)
        .map(|(x, y)| ((x - a) - (y - b)).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> c64 {
        c64::new(re, im)
    }

    fn term(coeff: f64, f: &[(usize, Pauli)]) -> PauliTerm {
        PauliTerm::new(coeff, f.to_vec()).unwrap()
    }

    #[test]
    fn single_spin_paulis() {
        let z = build_operator(&[term(1.0, &[(0, Pauli::Z)])], 1).unwrap();
        assert_eq!(z.get(0, 0), c(1.0, 0.0));
        assert_eq!(z.get(1, 1), c(-1.0, 0.0));
        assert_eq!(z.get(0, 1), c(0.0, 0.0));
        let y = build_operator(&[term(1.0, &[(0, Pauli::Y)])], 1).unwrap();
        assert_eq!(y.get(0, 1), c(0.0, -1.0));
        assert_eq!(y.get(1, 0), c(0.0, 1.0));
    }

    #[test]
    fn xx_is_antidiagonal() {
        let xx = build_operator(&[term(1.0, &[(0, Pauli::X), (1, Pauli::X)])], 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i + j == 3 { 1.0 } else { 0.0 };
                assert_eq!(xx.get(i, j), c(want, 0.0));
            }
        }
    }

    #[test]
    fn three_spin_zz_ring_spectrum() {
        let terms = [
            term(0.25, &[(0, Pauli::Z), (1, Pauli::Z)]),
            term(0.25, &[(1, Pauli::Z), (2, Pauli::Z)]),
            term(0.25, &[(0, Pauli::Z), (2, Pauli::Z)]),
        ];
        let ev = build_operator(&terms, 3).unwrap().eigenvalues().unwrap();
        let want = [-0.25, -0.25, -0.25, -0.25, -0.25, -0.25, 0.75, 0.75];
        for (a, b) in ev.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn size_guard_and_term_validation() {
        assert!(matches!(build_operator(&[], 15), Err(Error::Size(_))));
        assert!(matches!(
            build_operator(&[term(1.0, &[(3, Pauli::X)])], 2),
            Err(Error::Config(_))
        ));
        assert!(PauliTerm::new(1.0, vec![(1, Pauli::X), (1, Pauli::Z)]).is_err());
        assert!(PauliTerm::new(f64::NAN, vec![]).is_err());
    }

    #[test]
    fn pauli_term_display() {
        let t = term(-0.5, &[(7, Pauli::Z), (3, Pauli::X)]);
        assert_eq!(t.to_string(), "-0.5 * X3 Z7");
        assert_eq!(term(2.0, &[]).to_string(), "2");
    }

    #[test]
    fn y_products_stay_hermitian() {
        let terms = [
            term(0.3, &[(0, Pauli::Y), (1, Pauli::Y)]),
            term(-1.1, &[(0, Pauli::X), (1, Pauli::Y), (2, Pauli::Z)]),
            term(0.7, &[(2, Pauli::Y)]),
        ];
        let op = build_operator(&terms, 3).unwrap();
        assert!(op.hermiticity_error() < 1e-15);
    }

    #[test]
    fn non_hermitian_matrix_is_rejected() {
        let mut m = Mat::<c64>::zeros(2, 2);
        m[(0, 1)] = c(1.0, 0.0);
        let h = DenseOperator::from_real_diagonal(&[0.0, 1.0]);
        let v = DenseOperator::from_mat(m).unwrap();
        assert!(matches!(ExactSeries::new(&h, &v, None), Err(Error::NonHermitian(_))));
    }

    fn two_level(v: f64) -> (DenseOperator, DenseOperator) {
        let h = DenseOperator::from_real_diagonal(&[0.0, 1.0]);
        let v = build_operator(&[term(v, &[(0, Pauli::X)])], 1).unwrap();
        (h, v)
    }

    #[test]
    fn two_by_two_second_order() {
        let (h, v) = two_level(0.3);
        let n = exact_term(&h, &v, None, -0.5, 2).unwrap();
        assert!((n.inf_norm - 0.09 / 1.5).abs() < 1e-15);
        assert!((n.two_norm - 0.09 / 1.5).abs() < 1e-15);
        // No high-high coupling, so every higher order vanishes.
        assert_eq!(exact_term(&h, &v, None, -0.5, 3).unwrap().inf_norm, 0.0);
    }

    #[test]
    fn zero_perturbation_gives_zero() {
        let (h, _) = two_level(0.0);
        let v = DenseOperator::zeros(2);
        let s = ExactSeries::new(&h, &v, None).unwrap();
        for n in s.term_norms(0.0, 5).unwrap() {
            assert_eq!(n.inf_norm, 0.0);
            assert_eq!(n.two_norm, 0.0);
        }
        let e = s.self_energy_error(0.0, 2, 8).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn resolvent_pole_is_reported() {
        let (h, v) = two_level(0.1);
        assert!(matches!(
            exact_term(&h, &v, None, 1.0, 2),
            Err(Error::ResolventPole { .. })
        ));
    }

    #[test]
    fn rotated_basis_matches_diagonal_basis_norms() {
        // H = Z on one spin written as X after a Hadamard: same spectrum, basis rotated.
        let h_diag = build_operator(&[term(-0.5, &[(0, Pauli::Z)])], 1).unwrap();
        let v_diag = build_operator(&[term(0.2, &[(0, Pauli::X)])], 1).unwrap();
        let h_rot = build_operator(&[term(-0.5, &[(0, Pauli::X)])], 1).unwrap();
        let v_rot = build_operator(&[term(0.2, &[(0, Pauli::Z)])], 1).unwrap();
        let a = exact_term(&h_diag, &v_diag, None, 0.0, 2).unwrap();
        let b = exact_term(&h_rot, &v_rot, None, 0.0, 2).unwrap();
        assert!((a.two_norm - b.two_norm).abs() < 1e-14);
        assert!((a.two_norm - 0.04).abs() < 1e-14);
    }

    #[test]
    fn geometric_bound_values() {
        assert_eq!(geometric_bound(1.0, 2.0, 3), 0.25);
        assert_eq!(geometric_bound(0.5, 0.25, 2), 1.0);
    }

    #[test]
    fn clustering() {
        let (lv, means) = cluster_levels(&[1.0, 0.0, 1.0 + 1e-13, 0.0]).unwrap();
        assert_eq!(lv, vec![1, 0, 1, 0]);
        assert!((means[1] - 1.0).abs() < 1e-12);
        assert!(matches!(
            cluster_levels(&[0.0, 1.0, 1.0 + 1e-8]),
            Err(Error::DegeneracyAmbiguous { .. })
        ));
    }

    #[test]
    fn ferromagnetic_triple_graph() {
        let h = build_operator(
            &[
                term(-0.25, &[(0, Pauli::Z), (1, Pauli::Z)]),
                term(-0.25, &[(1, Pauli::Z), (2, Pauli::Z)]),
                term(-0.25, &[(0, Pauli::Z), (2, Pauli::Z)]),
            ],
            3,
        )
        .unwrap();
        // Subsystem on global spins 5, 6, 7; environment spins 0, 1, 2.
        let fragment = Fragment {
            subsystem_spins: vec![5, 6, 7],
            terms: vec![
                term(0.1, &[(0, Pauli::X), (5, Pauli::X)]),
                term(0.1, &[(1, Pauli::X), (6, Pauli::X)]),
                term(0.1, &[(2, Pauli::X), (7, Pauli::X)]),
            ],
        };
        let g = eigenstate_graph(&h, &fragment).unwrap();
        assert_eq!(g.levels.len(), 2);
        assert!((g.levels[1] - 1.0).abs() < 1e-15);
        // 000 and 111 are the two ground states.
        assert_eq!(g.level_of[0], 0);
        assert_eq!(g.level_of[7], 0);
        let mut from_001: Vec<usize> = g.edges().iter().filter(|e| e.0 == 0b001).map(|e| e.1).collect();
        from_001.sort_unstable();
        assert_eq!(from_001, vec![0b000, 0b011, 0b101]);
        assert!(g.couplings.iter().all(|c| (c.2 - 0.1).abs() < 1e-15));

        let (spec, t) = derive_transition_model(&h, &[fragment.clone(), fragment]).unwrap();
        assert_eq!(spec.degeneracies(), Some(&[2, 6][..]));
        assert_eq!(t.matrix(), vec![vec![0, 3], vec![1, 2]]);
        assert_eq!(t.lambdas(), &[0.1, 0.1]);
        assert_eq!(t.omega(), 0.0);
    }

    #[test]
    fn diagonal_subsystem_without_coupling() {
        let h = DenseOperator::from_real_diagonal(&[0.0, 1.0]);
        let f = Fragment {
            subsystem_spins: vec![0],
            terms: vec![],
        };
        let (_, t) = derive_transition_model(&h, &[f]).unwrap();
        assert_eq!(t.matrix(), vec![vec![0, 0], vec![0, 0]]);
        assert_eq!(t.lambdas(), &[0.0]);
    }

    #[test]
    fn diagonal_coupling_goes_to_omega() {
        let h = DenseOperator::from_real_diagonal(&[0.0, 1.0]);
        let f = Fragment {
            subsystem_spins: vec![0],
            terms: vec![term(0.2, &[(0, Pauli::Z), (1, Pauli::X)]), term(0.3, &[(0, Pauli::X)])],
        };
        let (_, t) = derive_transition_model(&h, &[f]).unwrap();
        assert_eq!(t.omega(), 0.2);
        assert_eq!(t.lambdas(), &[0.3]);
        assert_eq!(t.matrix(), vec![vec![0, 1], vec![1, 0]]);
    }

    fn single_chain(v: f64, z: f64) -> ModelConfig {
        let spectrum = SubsystemSpectrum::new(vec![0.0, 1.0, 2.5]).unwrap();
        let t = TransitionModel::new(vec![v], 0.0, vec![vec![0, 1, 0], vec![1, 0, 1], vec![0, 1, 0]]).unwrap();
        ModelConfig::new(spectrum, t, z).unwrap()
    }

    #[test]
    fn walk_oracle_single_subsystem() {
        let (v, z) = (0.2, -0.3);
        let cfg = single_chain(v, z);
        let r2 = walk_sum_oracle(&cfg, 2).unwrap();
        assert!((r2 - v * v / 1.3).abs() < 1e-16);
        // 0 -> 1 -> 2 -> 1 -> 0 is the only walk at r = 4.
        let r4 = walk_sum_oracle(&cfg, 4).unwrap();
        assert!((r4 - v.powi(4) / (1.3 * 2.8 * 1.3)).abs() < 1e-16);
        assert_eq!(walk_sum_oracle(&cfg, 3).unwrap(), 0.0);
    }

    #[test]
    fn walk_oracle_guards() {
        let spectrum = SubsystemSpectrum::new(vec![0.0, 1.0]).unwrap();
        let t = TransitionModel::new(vec![0.1; 4], 0.0, vec![vec![0, 1], vec![1, 0]]).unwrap();
        let cfg = ModelConfig::new(spectrum, t, 0.0).unwrap();
        assert!(matches!(walk_sum_oracle(&cfg, 2), Err(Error::Size(_))));
        let cfg = single_chain(0.1, 0.0);
        assert!(matches!(walk_sum_oracle(&cfg, 7), Err(Error::Size(_))));
        assert!(matches!(walk_sum_oracle(&cfg, 1), Err(Error::UnsupportedOrder(1))));
    }

    #[test]
    fn walk_oracle_zero_matrix() {
        let spectrum = SubsystemSpectrum::new(vec![0.0, 1.0]).unwrap();
        let t = TransitionModel::new(vec![0.4, 0.9], 0.0, vec![vec![0, 0], vec![0, 0]]).unwrap();
        let cfg = ModelConfig::new(spectrum, t, 0.0).unwrap();
        for r in 2..=6 {
            assert_eq!(walk_sum_oracle(&cfg, r).unwrap(), 0.0);
        }
    }

    #[test]
    fn spectral_error_of_exact_embedding_is_zero() {
        let heff = build_operator(&[term(0.3, &[(0, Pauli::X)])], 1).unwrap();
        // heff on spin 0, a far-away penalty on spin 1 selects the sector.
        let htilde = build_operator(&[term(0.3, &[(0, Pauli::X)]), term(-5.0, &[(1, Pauli::Z)])], 2).unwrap();
        assert!(spectral_error(&htilde, &heff, 2).unwrap() < 1e-14);
        assert!(matches!(
            spectral_error(&htilde, &heff, 3),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sparse_and_dense_blocks_agree() {
        let mut a = Mat::<c64>::zeros(6, 6);
        a[(0, 3)] = c(1.0, 0.5);
        a[(4, 1)] = c(-2.0, 0.0);
        let rows = [0, 2, 4];
        let cols = [1, 3, 5];
        let sparse = Block::extract(&a, &rows, &cols);
        assert!(matches!(sparse, Block::Dense(_)));
        let mut big = Mat::<c64>::zeros(40, 40);
        big[(0, 21)] = c(1.0, 0.5);
        big[(3, 30)] = c(0.0, 2.0);
        let rows: Vec<usize> = (0..20).collect();
        let cols: Vec<usize> = (20..40).collect();
        let b = Block::extract(&big, &rows, &cols);
        assert!(matches!(b, Block::Sparse(_)));
        let x = Mat::from_fn(20, 3, |i, j| c(i as f64 + 1.0, j as f64));
        let dense = Mat::from_fn(20, 20, |i, j| big[(rows[i], cols[j])]);
        let want = &dense * &x;
        let got = b.mul(&x);
        assert_eq!(want, got);
    }
}
