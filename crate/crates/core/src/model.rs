//! The unperturbed system: identical subsystem spectra, scalar transition
//! summaries of the perturbation, and the energy combinations that label
//! automaton cells.

use std::fmt;

use crate::error::{Error, Result};

/// Resolvent singularity threshold, relative to the first excitation energy.
pub const RESOLVENT_EPS: f64 = 1e-9;

/// Energy levels `E_0 < E_1 < ... < E_{l-1}` shared by every subsystem, with the
/// ground level shifted to exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemSpectrum {
    levels: Vec<f64>,
    degeneracies: Option<Vec<usize>>,
}

impl SubsystemSpectrum {
    /// Builds a spectrum from raw level energies, subtracting `E_0` from all of them.
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Config(format!(
                "spectrum needs at least two levels, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("spectrum levels must be finite".into()));
        }
        let ground = levels[0];
        let levels: Vec<f64> = levels.into_iter().map(|e| e - ground).collect();
        if let Some(w) = levels.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "spectrum levels must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            levels,
            degeneracies: None,
        })
    }

    pub fn with_degeneracies(mut self, degeneracies: Vec<usize>) -> Result<Self> {
        if degeneracies.len() != self.levels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.levels.len(),
                found: degeneracies.len(),
            });
        }
        if degeneracies.contains(&0) {
            return Err(Error::Config("degeneracies must be positive".into()));
        }
        self.degeneracies = Some(degeneracies);
        Ok(self)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn degeneracies(&self) -> Option<&[usize]> {
        self.degeneracies.as_deref()
    }

    /// Number of levels `l`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `Delta = E_1`, the gap above the ground level.
    pub fn gap(&self) -> f64 {
        self.levels[1]
    }
}

/// Scalar summary of the perturbation `V`: per-subsystem off-diagonal bounds
/// `lambda_i`, the diagonal bound `omega`, and the branching counts `M_st`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    lambdas: Vec<f64>,
    omega: f64,
    levels: usize,
    multiplicity: Vec<u32>,
    neighbor_only: bool,
}

impl TransitionModel {
    /// A model whose transitions only connect neighbouring levels (`|s - t| <= 1`).
    pub fn new(lambdas: Vec<f64>, omega: f64, multiplicity: Vec<Vec<u32>>) -> Result<Self> {
        Self::build(lambdas, omega, multiplicity, true)
    }

    /// A model that allows transitions between arbitrary pairs of levels.
    pub fn unrestricted(lambdas: Vec<f64>, omega: f64, multiplicity: Vec<Vec<u32>>) -> Result<Self> {
        Self::build(lambdas, omega, multiplicity, false)
    }

    fn build(
        lambdas: Vec<f64>,
        omega: f64,
        multiplicity: Vec<Vec<u32>>,
        neighbor_only: bool,
    ) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::Config("at least one subsystem (lambda) is required".into()));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("lambdas must be finite and nonnegative".into()));
        }
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(Error::Config("omega must be finite and nonnegative".into()));
        }
        let levels = multiplicity.len();
        if levels == 0 {
            return Err(Error::Config("transition matrix M is empty".into()));
        }
        let mut flat = Vec::with_capacity(levels * levels);
        for (s, row) in multiplicity.iter().enumerate() {
            if row.len() != levels {
                return Err(Error::Config(format!(
                    "transition matrix M must be square: row {s} has {} entries, expected {levels}",
                    row.len()
                )));
            }
            for (t, &count) in row.iter().enumerate() {
                if neighbor_only && count > 0 && s.abs_diff(t) > 1 {
                    return Err(Error::Config(format!(
                        "M[{s}][{t}] = {count} connects non-neighbouring levels"
                    )));
                }
                flat.push(count);
            }
        }
        Ok(Self {
            lambdas,
            omega,
            levels,
            multiplicity: flat,
            neighbor_only,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Number of subsystems `m`.
    pub fn subsystems(&self) -> usize {
        self.lambdas.len()
    }

    /// Number of levels the matrix `M` is defined over.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// `M_st`.
    pub fn count(&self, s: usize, t: usize) -> u32 {
        self.multiplicity[s * self.levels + t]
    }

    pub fn matrix(&self) -> Vec<Vec<u32>> {
        self.multiplicity
            .chunks(self.levels)
            .map(|row| row.to_vec())
            .collect()
    }

    pub fn neighbor_only(&self) -> bool {
        self.neighbor_only
    }

    /// Returns a copy with a different coupling vector (same `omega` and `M`).
    pub fn with_lambdas(&self, lambdas: Vec<f64>) -> Result<Self> {
        Self::build(lambdas, self.omega, self.matrix(), self.neighbor_only)
    }

    pub fn with_omega(&self, omega: f64) -> Result<Self> {
        Self::build(self.lambdas.clone(), omega, self.matrix(), self.neighbor_only)
    }
}

/// Occupation counts `n = (n_0, ..., n_{l-1})`: how many subsystems sit in each level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnergyCombination(Vec<u32>);

impl EnergyCombination {
    pub fn new(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    /// All `m` subsystems in the ground level.
    pub fn ground(levels: usize, subsystems: usize) -> Self {
        let mut counts = vec![0; levels];
        counts[0] = subsystems as u32;
        Self(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    /// The combination reached by moving one subsystem from level `s` to `t`,
    /// or `None` if level `s` is empty.
    pub fn moved(&self, s: usize, t: usize) -> Option<Self> {
        if self.0[s] == 0 {
            return None;
        }
        let mut counts = self.0.clone();
        counts[s] -= 1;
        counts[t] += 1;
        Some(Self(counts))
    }

    /// Symbolic energy label such as `E_1`, `2E_1` or `E_1+E_2`.
    pub fn energy_label(&self) -> String {
        let parts: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &n)| n > 0)
            .map(|(i, &n)| if n == 1 { format!("E_{i}") } else { format!("{n}E_{i}") })
            .collect();
        if parts.is_empty() {
            "0".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for EnergyCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subspace {
    Low,
    High,
}

/// Everything the automaton needs for one run at a fixed expansion point `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    spectrum: SubsystemSpectrum,
    transitions: TransitionModel,
    cutoff: f64,
    z: f64,
}

impl ModelConfig {
    /// Uses the default cutoff `E_* = E_1 / 2`.
    pub fn new(spectrum: SubsystemSpectrum, transitions: TransitionModel, z: f64) -> Result<Self> {
        let cutoff = spectrum.gap() / 2.0;
        Self::with_cutoff(spectrum, transitions, z, cutoff)
    }

    pub fn with_cutoff(
        spectrum: SubsystemSpectrum,
        transitions: TransitionModel,
        z: f64,
        cutoff: f64,
    ) -> Result<Self> {
        if transitions.levels() != spectrum.len() {
            return Err(Error::DimensionMismatch {
                expected: spectrum.len(),
                found: transitions.levels(),
            });
        }
        if !(cutoff.is_finite() && cutoff > 0.0) {
            return Err(Error::Config(format!("cutoff E_* must be positive, got {cutoff}")));
        }
        if !z.is_finite() {
            return Err(Error::Config("z must be finite".into()));
        }
        Ok(Self {
            spectrum,
            transitions,
            cutoff,
            z,
        })
    }

    pub fn spectrum(&self) -> &SubsystemSpectrum {
        &self.spectrum
    }

    pub fn transitions(&self) -> &TransitionModel {
        &self.transitions
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn subsystems(&self) -> usize {
        self.transitions.subsystems()
    }

    pub fn levels(&self) -> usize {
        self.spectrum.len()
    }

    pub fn at_z(&self, z: f64) -> Result<Self> {
        Self::with_cutoff(self.spectrum.clone(), self.transitions.clone(), z, self.cutoff)
    }

    pub fn with_transitions(&self, transitions: TransitionModel) -> Result<Self> {
        Self::with_cutoff(self.spectrum.clone(), transitions, self.z, self.cutoff)
    }

    /// `E(n) = sum_i n_i E_i`.
    pub fn energy(&self, n: &EnergyCombination) -> Result<f64> {
        energy_of(n, &self.spectrum)
    }
}

/// All vectors of `levels` nonnegative integers summing to `subsystems`, in
/// lexicographic order.
pub fn enumerate_combinations(levels: usize, subsystems: usize) -> Vec<EnergyCombination> {
    fn fill(prefix: &mut Vec<u32>, levels: usize, remaining: u32, out: &mut Vec<EnergyCombination>) {
        if prefix.len() + 1 == levels {
            prefix.push(remaining);
            out.push(EnergyCombination(prefix.clone()));
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            fill(prefix, levels, remaining - k, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if levels == 0 {
        return out;
    }
    fill(&mut Vec::with_capacity(levels), levels, subsystems as u32, &mut out);
    out
}

pub fn energy_of(n: &EnergyCombination, spectrum: &SubsystemSpectrum) -> Result<f64> {
    if n.levels() != spectrum.len() {
        return Err(Error::DimensionMismatch {
            expected: spectrum.len(),
            found: n.levels(),
        });
    }
    Ok(n.0
        .iter()
        .zip(spectrum.levels())
        .fold(0.0, |acc, (&k, &e)| acc + k as f64 * e))
}

/// `Low` iff `E(n) < E_*`.
pub fn classify(n: &EnergyCombination, cfg: &ModelConfig) -> Result<Subspace> {
    let e = cfg.energy(n)?;
    Ok(if e < cfg.cutoff() { Subspace::Low } else { Subspace::High })
}

/// Checks that no high-subspace energy sits on `z` and returns
/// `min_{n high} |z - E(n)|`.
pub fn validate_z(cfg: &ModelConfig) -> Result<f64> {
    let eps = RESOLVENT_EPS * cfg.spectrum().gap();
    let mut min = f64::INFINITY;
    for n in enumerate_combinations(cfg.levels(), cfg.subsystems()) {
        if classify(&n, cfg)? == Subspace::Low {
            continue;
        }
        let distance = (cfg.z() - cfg.energy(&n)?).abs();
        if distance < eps {
            return Err(Error::SingularResolvent {
                combination: n,
                distance,
            });
        }
        min = min.min(distance);
    }
    Ok(min)
}
