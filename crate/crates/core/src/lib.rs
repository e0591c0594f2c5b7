//! Gradient inversion against multi-step FedAVG clients.
//!
//! A client trains a small classifier for `T` local steps from `w0` to `wT`;
//! an attacker who sees only `(w0, wT, N)` recovers the client's images by
//! matching the direction of dummy-data gradients, taken at a surrogate
//! point on a linear or quadratic-Bézier path between the two weight
//! vectors, against `w0 − wT`.
//!
//! Modules, bottom-up:
//! - [`autodiff`]: reverse-mode tape with double-backprop support
//! - [`model`]: flat-parameter MLP classifier
//! - [`fedsim`]: client-side local training and observations
//! - [`surrogate`]: linear and Bézier weight-space trajectories
//! - [`attack`]: DLG, IG, SME and NL-SME losses and the optimizer loop
//! - [`metrics`]: PSNR, SSIM and optimal batch matching
//! - [`harness`]: datasets, experiment sweeps and output files

pub mod attack;
pub mod autodiff;
pub mod fedsim;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod surrogate;

pub use attack::{AttackConfig, AttackError, AttackResult, AttackState, Variant};
pub use autodiff::{AutodiffError, Tape, Tensor, Var};
pub use fedsim::{ClientConfig, FedError, Observation, OptimizerKind};
pub use image::ImageBatch;
pub use metrics::MatchResult;
pub use model::{Activation, ModelError, ModelSpec, ParamVector};
pub use surrogate::{BezierTrajectory, LinearTrajectory};
