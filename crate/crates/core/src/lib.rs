//! Weight-dropout Bayesian prediction trained with synthetic likelihoods.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: f64 tensors, a reverse-mode graph and the primitive layers.
//! * [`optim`]: Adam.
//! * [`dropout`]: Bernoulli weight-dropout layers, model sampling, Monte-Carlo
//!   ensembles, the KL regulariser and patch/weight counting.
//! * [`head`]: heteroscedastic Gaussian outputs, reparameterised samples,
//!   class probabilities and likelihoods.
//! * [`synthetic`]: discriminator, hybrid objective and the alternating
//!   training step.
//! * [`metrics`]: oracle top-k%, mIoU, calibration and mode coverage.
//! * [`experiments`]: datasets, configs, rollout and the experiment runner.

pub mod dropout;
pub mod error;
pub mod experiments;
pub mod head;
pub mod metrics;
pub mod optim;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
