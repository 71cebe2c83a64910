//! Upper bounds on the terms of a self-energy perturbation expansion.
//!
//! The r-th order term `T_r = V_{-+} (G_{++} V_{++})^{r-2} G_{++} V_{+-}` is bounded
//! entry-wise by a sum over walks on unperturbed eigenstates. Permutation symmetry
//! among identical subsystems turns that sum into a linear combination of monomial
//! symmetric polynomials in the per-subsystem coupling strengths, which the
//! [`automaton`] assembles by passing weighted 4-tuples between cells labelled by
//! energy combinations. The cost is polynomial in the number of subsystems.
//!
//! [`oracle`] holds the exponential-cost reference computations used to check the
//! bounds, and [`gadget`] builds the 11-spin three-body gadget used as the
//! end-to-end example.

pub mod automaton;
pub mod config;
pub mod error;
pub mod gadget;
pub mod model;
pub mod oracle;
pub mod sympoly;

pub use automaton::{Automaton, BoundResult, TailBound};
pub use error::{Error, Result};
pub use model::{EnergyCombination, ModelConfig, Subspace, SubsystemSpectrum, TransitionModel};
pub use sympoly::{Partition, WalkTuple};
