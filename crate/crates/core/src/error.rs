use thiserror::Error;

use crate::model::EnergyCombination;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// `z` sits on (or within tolerance of) a high-subspace energy.
    #[error("singular resolvent at n = {combination}: |z - E(n)| = {distance:e}")]
    SingularResolvent {
        combination: EnergyCombination,
        distance: f64,
    },

    /// Same as [`Error::SingularResolvent`] for an explicit spectrum.
    #[error("singular resolvent at eigenvalue {energy}: |z - E| = {distance:e}")]
    ResolventPole { energy: f64, distance: f64 },

    #[error("arity error: partition has {parts} parts but only {variables} variables")]
    Arity { parts: usize, variables: usize },

    #[error("corrupt tuple state: {0}")]
    CorruptState(String),

    #[error("logic error: {0}")]
    Logic(String),

    #[error("unsupported perturbation order {0} (walk bounds start at r = 2)")]
    UnsupportedOrder(usize),

    #[error("size guard exceeded: {0}")]
    Size(String),

    #[error("operator is not Hermitian (max deviation {0:e})")]
    NonHermitian(f64),

    #[error("ambiguous level clustering: eigenvalue gap {gap:e} is neither degenerate nor resolved")]
    DegeneracyAmbiguous { gap: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}
