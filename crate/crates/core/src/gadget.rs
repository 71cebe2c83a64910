//! The 11-spin three-body gadget.
//!
//! Two target terms `alpha1 X0 X1 X2 + alpha2 X1 Y3 Z4` on five logical spins
//! are produced at third order by two ancilla triples with ferromagnetic
//! `-Delta/4 (ZZ + ZZ + ZZ)` interactions and two-body couplings of strength
//! `mu_i = (alpha_i Delta^2 / 6)^{1/3}`.
//!
//! Spin numbering: logical spins are 0..=4, the first ancilla triple (`u`) is
//! 5, 6, 7 and the second (`v`) is 8, 9, 10.

use faer::{c64, Mat};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::oracle::{build_operator, derive_transition_model, two_norm, ExactSeries, Fragment, Pauli, PauliTerm};

pub const SPINS: usize = 11;
pub const LOGICAL_SPINS: usize = 5;
pub const U_SPINS: [usize; 3] = [5, 6, 7];
pub const V_SPINS: [usize; 3] = [8, 9, 10];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GadgetSpec {
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta: f64,
}

impl GadgetSpec {
    pub fn new(alpha1: f64, alpha2: f64, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive and finite, got {delta}")));
        }
        if !alpha1.is_finite() || !alpha2.is_finite() {
            return Err(Error::Config("alpha values must be finite".into()));
        }
        Ok(Self { alpha1, alpha2, delta })
    }

    pub fn mu1(&self) -> f64 {
        (self.alpha1 * self.delta * self.delta / 6.0).cbrt()
    }

    pub fn mu2(&self) -> f64 {
        (self.alpha2 * self.delta * self.delta / 6.0).cbrt()
    }

    /// `max |mu_i| / Delta`; the construction is only meaningful when small.
    pub fn mu_ratio(&self) -> f64 {
        self.mu1().abs().max(self.mu2().abs()) / self.delta
    }
}

#[derive(Debug, Clone)]
pub struct Gadget {
    pub spec: GadgetSpec,
    /// Ancilla interactions.
    pub h: Vec<PauliTerm>,
    /// Two-body couplings between logical spins and ancillas.
    pub v: Vec<PauliTerm>,
    /// Target on the five logical spins.
    pub heff: Vec<PauliTerm>,
    /// Interaction of one ancilla triple on local spins 0, 1, 2.
    pub hsub: Vec<PauliTerm>,
    pub fragments: [Fragment; 2],
    /// Derived model at `z = 0`.
    pub model: ModelConfig,
}

impl Gadget {
    /// `H + V`.
    pub fn htilde(&self) -> Vec<PauliTerm> {
        self.h.iter().chain(&self.v).cloned().collect()
    }
}

fn t(coeff: f64, f: &[(usize, Pauli)]) -> PauliTerm {
    PauliTerm::new(coeff, f.to_vec()).expect("distinct spins, finite coefficient")
}

fn triple_zz(coeff: f64, s: [usize; 3]) -> Vec<PauliTerm> {
    use Pauli::Z;
    vec![
        t(coeff, &[(s[0], Z), (s[1], Z)]),
        t(coeff, &[(s[1], Z), (s[2], Z)]),
        t(coeff, &[(s[0], Z), (s[2], Z)]),
    ]
}

pub fn build_gadget(spec: GadgetSpec) -> Result<Gadget> {
    use Pauli::{X, Y, Z};
    let spec = GadgetSpec::new(spec.alpha1, spec.alpha2, spec.delta)?;
    let j = -spec.delta / 4.0;
    let (mu1, mu2) = (spec.mu1(), spec.mu2());
    let [u1, u2, u3] = U_SPINS;
    let [v1, v2, v3] = V_SPINS;

    let mut h = triple_zz(j, U_SPINS);
    h.extend(triple_zz(j, V_SPINS));
    let v1_terms = vec![
        t(mu1, &[(0, X), (u1, X)]),
        t(mu1, &[(1, X), (u2, X)]),
        t(mu1, &[(2, X), (u3, X)]),
    ];
    let v2_terms = vec![
        t(mu2, &[(1, X), (v2, X)]),
        t(mu2, &[(3, Y), (v1, X)]),
        t(mu2, &[(4, Z), (v3, X)]),
    ];
    let v: Vec<PauliTerm> = v1_terms.iter().chain(&v2_terms).cloned().collect();
    let heff = vec![
        t(spec.alpha1, &[(0, X), (1, X), (2, X)]),
        t(spec.alpha2, &[(1, X), (3, Y), (4, Z)]),
    ];
    let hsub = triple_zz(j, [0, 1, 2]);
    let fragments = [
        Fragment {
            subsystem_spins: U_SPINS.to_vec(),
            terms: v1_terms,
        },
        Fragment {
            subsystem_spins: V_SPINS.to_vec(),
            terms: v2_terms,
        },
    ];
    let (spectrum, transitions) = derive_transition_model(&build_operator(&hsub, 3)?, &fragments)?;
    let cutoff = spectrum.gap() / 2.0;
    let model = ModelConfig::with_cutoff(spectrum, transitions, 0.0, cutoff)?;
    Ok(Gadget {
        spec,
        h,
        v,
        heff,
        hsub,
        fragments,
        model,
    })
}

/// Outcome of comparing `T_1 + T_2 + T_3` with `H_eff` on the sector where
/// both ancilla triples sit in `(|000> + |111>)/sqrt(2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadingOrderReport {
    pub z: f64,
    /// `||P (T_1 + T_2 + T_3) P - H_eff - c||_2` on that sector.
    pub distance: f64,
    /// `10 * (mu_max / Delta) * ||H_eff||_2`.
    pub tolerance: f64,
    /// The constant shift `c` removed by mean alignment.
    pub shift: f64,
    pub heff_norm: f64,
    /// `||T_1||_2` over the whole low subspace.
    pub t1_norm: f64,
    pub pass: bool,
}

/// Builds the gadget, forms the first three self-energy orders exactly and
/// compares them with `H_eff` up to a constant.
pub fn verify_leading_orders(spec: GadgetSpec, z: f64) -> Result<LeadingOrderReport> {
    let g = build_gadget(spec)?;
    let h = build_operator(&g.h, SPINS)?;
    let v = build_operator(&g.v, SPINS)?;
    let series = ExactSeries::new(&h, &v, Some(g.model.cutoff()))?;
    let terms = series.terms(z, 3)?;
    let mut s = series.first_order().clone();
    for t in &terms {
        s += t;
    }

    // Isometry from the 5 logical spins into the low subspace.
    let low = series.low_states();
    let n = 1usize << LOGICAL_SPINS;
    let mut w = Mat::<c64>::zeros(low.len(), n);
    let all = |spins: [usize; 3]| spins.iter().fold(0usize, |m, &s| m | (1 << s));
    for x in 0..n {
        for a in [0, all(U_SPINS)] {
            for b in [0, all(V_SPINS)] {
                let idx = x | a | b;
                let row = low
                    .binary_search(&idx)
                    .map_err(|_| Error::Logic(format!("basis state {idx} is not in the low subspace")))?;
                w[(row, x)] = c64::new(0.5, 0.0);
            }
        }
    }
    let sw = &s * &w;
    let p = w.adjoint() * &sw;
    let heff = build_operator(&g.heff, LOGICAL_SPINS)?;
    let mut diff = &p - heff.matrix();
    let shift = (0..n).map(|i| diff[(i, i)].re).sum::<f64>() / n as f64;
    for i in 0..n {
        diff[(i, i)] -= c64::new(shift, 0.0);
    }
    let distance = two_norm(&diff)?;
    let heff_norm = heff.spectral_norm()?;
    let tolerance = 10.0 * spec.mu_ratio() * heff_norm;
    Ok(LeadingOrderReport {
        z,
        distance,
        tolerance,
        shift,
        heff_norm,
        t1_norm: two_norm(series.first_order())?,
        pass: distance <= tolerance,
    })
}
