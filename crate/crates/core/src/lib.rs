//! Natural-gradient actor-critic with Kronecker-factored curvature and
//! trust-region step control, plus the brute-force oracles that check it.
//!
//! Module map:
//! - [`linalg`]: dense matrices, Cholesky inversion, Kronecker helpers
//! - [`net`]: feed-forward networks with per-layer activation capture
//! - [`distributions`]: categorical, diagonal Gaussian and critic Gaussian
//! - [`kfac`]: Kronecker factors, damping, natural gradient, step scaling
//! - [`rl`]: environments, rollouts, k-step returns
//! - [`agent`]: actor-critic models, the ACKTR and A2C updates, training loop
//! - [`oracle`]: exact Fisher, dense natural gradient, exact KL, value iteration
//! - [`harness`]: config files, metrics CSV, sweeps and reports

pub mod agent;
pub mod distributions;
pub mod error;
pub mod harness;
pub mod kfac;
pub mod linalg;
pub mod net;
pub mod oracle;
pub mod rl;

pub use error::{Error, Result};

/// Matrix type used throughout the agent.
pub type Matrix = linalg::Mat<f64>;
/// Single-precision matrix, for callers that want it.
pub type Matrix32 = linalg::Mat<f32>;
