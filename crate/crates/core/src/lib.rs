//! Joint imputation-and-inference for simulation-based inference (SBI)
//! under missing data.
//!
//! The crate bundles everything needed to train and evaluate the method at
//! desk scale:
//!
//! - [`graph`]: a minimal reverse-mode autodiff tape over dense f64 tensors
//!   plus Adam ([`adam`]) and parameter storage ([`params`]);
//! - [`sim`]: benchmark simulators (Ricker, OUP, GLM, GLU) and their priors;
//! - [`mask`]: MCAR/MAR/MNAR mask generation and observed/missing splits;
//! - [`np`]: a latent neural-process imputation model with an optional
//!   self-masking head for MNAR data;
//! - [`flow`]: a masked autoregressive flow with optional summary networks;
//! - [`train`]: the joint loss, training loops (plain, meta over the
//!   missingness level, and two-phase separate), and the baselines;
//! - [`metrics`]: MMD, C2ST, NLPP, RMSE, expected coverage, R²;
//! - [`experiment`]: benchmark orchestration and CSV/JSON outputs.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod np;
pub mod params;
pub mod rng;
pub mod sim;
pub mod standardize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
