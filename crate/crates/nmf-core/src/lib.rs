//! Neural mean-field (NMF) dynamics for diffusion networks.
//!
//! This crate learns the structure of a continuous-time diffusion network
//! (edge set and infection rates) together with per-node infection
//! probabilities directly from cascade data. The model is a structured
//! recurrence: a mean-field drift driven by a learnable rate matrix, plus a
//! neural correction fed by a learnable memory of past states. Gradients are
//! computed exactly by a backward co-state recursion, so no autodiff
//! framework is required.
//!
//! The crate also ships the exact small-network oracles (a 2^n-state Markov
//! chain and the equivalent moment closure) used to validate everything
//! else, a cascade simulator, evaluation metrics, and greedy influence
//! maximization on top of any influence estimator.
//!
//! Numeric kernels are generic over the scalar type (see [`Scalar`]);
//! `f64` aliases are exported at the crate root and are what the CLI uses.

pub mod cascade;
pub mod dynamics;
pub mod eval;
pub mod graph;
pub mod gradient;
pub mod im;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod train;

pub use scalar::Scalar;

use thiserror::Error;

/// Default scalar type for end-user entry points.
pub type Real = f64;

/// Model parameters instantiated at the default precision.
pub type Params = model::NmfParameters<Real>;
/// Gradient bundle at the default precision.
pub type Gradients = gradient::GradientBundle<Real>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("combinatorial budget exceeded: {0}")]
    CombinatorialBudget(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("no data: {0}")]
    NoData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
