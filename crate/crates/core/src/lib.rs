//! Posterior-mode estimation of sparse Gaussian graphical models under a
//! spike-and-slab prior on the off-diagonal precision entries.
//!
//! The crate is organised around a single ECM (expectation conditional
//! maximisation) engine:
//!
//! * [`model`] holds the shared data containers, hyperparameters and graph
//!   thresholding rules.
//! * [`ecm`] implements the E-step (inclusion probabilities, adaptive ridge
//!   weights, missing-cell moments), the conditional maximisation steps and
//!   the [`fit_ecm`] driver.
//! * [`copula`] wraps the engine in a stochastic-approximation loop over the
//!   latent Gaussian scores of the extended rank likelihood.
//! * [`glasso`] is the graphical lasso baseline.
//! * [`simulate`], [`metrics`] and [`select`] provide the synthetic designs,
//!   recovery metrics, regularization paths and cross-validation.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod copula;
pub mod ecm;
pub mod error;
pub mod glasso;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod select;
pub mod simulate;

pub use copula::{fit_copula, SaemSchedule};
pub use ecm::{fit_ecm, EStepResult};
pub use error::{Error, Result};
pub use glasso::{glasso_fit, GlassoFit, GlassoOptions};
pub use model::{
    Dataset, EcmState, GraphEstimate, Hyperparams, InitStrategy, ThresholdRule, TracePoint,
    ValidationReport, VariableKind,
};
pub use select::{Method, PathResult};

/// Re-exported so downstream crates can name matrix types without a direct
/// nalgebra dependency.
pub use nalgebra::{DMatrix, DVector};
