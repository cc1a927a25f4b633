//! Shortcut debiasing for classifiers trained on biased data.
//!
//! Bias information is routed into controllable per-bias shortcut vectors
//! appended to the learned representation; at inference every sample gets
//! the mean shortcut vector, which removes the bias path without needing
//! test-time bias labels.
//!
//! Modules:
//! - [`diffcore`]: reverse-mode autodiff over dense matrices
//! - [`data`]: biased dataset generation, IDX ingestion, resampling
//! - [`model`]: encoder, affine head, shortcut bank, intervention inference
//! - [`train`]: vanilla, naive/active shortcut debiasing, adversarial baseline
//! - [`eval`]: Equalodds, bias/fair accuracy, Counter@P, reports

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod train;

pub use data::{BiasSpec, Dataset, Example};
pub use diffcore::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use eval::{evaluate, FairnessReport};
pub use model::{FairModel, ModelConfig, ShortcutBank, ShortcutMode};
pub use train::{TrainConfig, TrainLog, TrainMode};
