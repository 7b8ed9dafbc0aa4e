//! Small-initialization gradient flow of deep homogeneous networks and the
//! rank-one KKT points of the sphere-constrained neural correlation function.
//!
//! - [`net`]: networks with activation `max(x, αx)^p`, forward passes, exact gradients
//! - [`loss`]: square and logistic losses
//! - [`flow`]: RK4 flows, gradient descent, projected and adaptive-step ascent
//! - [`ncf`]: correlation values, gradients and KKT reports
//! - [`kink`]: projected ascent that holds first-layer kinks of piecewise-linear nets
//! - [`kkt`]: constructive rank-one KKT points and their verification
//! - [`metrics`]: spectral norm, rank-one and non-negativity measures
//! - [`harness`]: reproducible experiments and their output files

pub mod error;
pub mod flow;
pub mod harness;
pub mod kink;
pub mod kkt;
pub mod loss;
pub mod metrics;
pub mod ncf;
pub mod net;

pub use error::{Error, Result};
pub use flow::{IntegratorConfig, Termination, Trajectory};
pub use kkt::{RankOneKkt, Verdict};
pub use loss::LossKind;
pub use ncf::{KktReport, NcfProblem};
pub use net::{Activation, Dataset, NetSpec, Weights};
