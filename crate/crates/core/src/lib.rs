//! Inference of flow parameters (diffusivity, velocity gradient) from two
//! snapshots of indistinguishable particles.
//!
//! The likelihood of a parameter choice is the permanent of the pairwise
//! matching-weight matrix. This crate estimates its logarithm four ways:
//!
//! * [`bp`] — belief propagation: an interior stationary point of the Bethe
//!   free energy under doubly stochastic constraints;
//! * [`saddle`] — a multiplicative loop-series correction to the belief
//!   estimate, evaluated by a saddle-point approximation of a contour
//!   integral (Gaussian term plus fourth-order term);
//! * [`mcmc`] — annealed importance sampling over permutations;
//! * [`oracle`] — exact computation at small sizes (Ryser's method, exact
//!   marginals, exhaustive loop enumeration) used to validate the others.
//!
//! [`flow`] defines the advection–diffusion weight model and synthetic data
//! generation, [`matcher`] the exact maximum-weight matching, and
//! [`learning`] the parameter sweeps that locate the likelihood maximum.

pub mod bp;
pub mod error;
pub mod flow;
pub mod io;
pub mod learning;
pub mod matcher;
pub mod mcmc;
pub mod oracle;
pub mod saddle;

pub use bp::{BeliefState, BpConfig, InitMode, Polarization, PrunedProblem};
pub use error::{Error, Result};
pub use flow::{
    build_weight_matrix, generate_snapshots, pairwise_weight, FlowParams, PairWeight,
    SnapshotPair, Truth, WeightMatrix,
};
pub use learning::{Method, SweepConfig, SweepParam, SweepResult, SweepRow, SweepSpec};
pub use matcher::{max_weight_matching, Matching};
pub use mcmc::{McmcConfig, McmcResult};
pub use saddle::{CorrectedEstimate, CorrectorConfig, SaddleSolution, Sign};
