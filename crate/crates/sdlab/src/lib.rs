//! Desk-scale laboratory for score-distillation experiments on worlds where
//! everything is analytically tractable.
//!
//! A [`world::World`] is a labelled family of Gaussian mixtures over `R^d`
//! together with a variance-preserving noise schedule. Because the noised
//! marginals of a Gaussian mixture stay Gaussian mixtures, the score field,
//! denoiser outputs, probability-flow trajectories and transport couplings
//! can all be computed exactly and compared against their estimated
//! counterparts.
//!
//! Module map:
//!
//! - [`schedule`]: VP diffusion schedules (`alpha_t`, `sigma_t`, `beta`).
//! - [`mixture`]: Gaussian mixtures, corruption operators, exact
//!   densities/scores, sampling.
//! - [`world`]: labelled class tables, conditions, world configuration.
//! - [`oracle`]: exact conditional score / epsilon queries, CFG, DSM loss.
//! - [`flow`]: probability-flow ODE solvers, inversion, two-way translation,
//!   dual bridge endpoints.
//! - [`estimator`]: fitted source models (moment fit, EM mixtures, KDE).
//! - [`distill`]: the gradient family, particle systems and the
//!   optimization loop.
//! - [`transport`]: entropic OT plans and bridge-coupling diagnostics.
//! - [`metrics`]: distribution distances and likelihood reports.
//! - [`bench`]: packaged benchmark worlds and experiment runners.

pub mod bench;
pub mod distill;
pub mod estimator;
pub mod flow;
mod linalg;
pub mod metrics;
pub mod mixture;
pub mod oracle;
pub mod schedule;
pub mod transport;
pub mod world;

use thiserror::Error;

/// Dense column vector used throughout (`f64`, dynamic size).
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout (`f64`, dynamic size).
pub type Matrix = nalgebra::DMatrix<f64>;

/// Unified error type for the whole laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("unknown class label `{0}`")]
    UnknownClass(String),
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("invalid time t={t}: {reason}")]
    InvalidTime { t: f64, reason: String },
    #[error("non-finite state at step {step} (t={t:.6}): {detail}")]
    NonFinite { step: usize, t: f64, detail: String },
    #[error("estimator failure: {0}")]
    Fit(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
