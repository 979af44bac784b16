//! Surface anomaly detection with a fully convolutional residual triplet
//! network.
//!
//! The network is trained on non-defective texture patches, with negatives
//! synthesized by random erasing. At evaluation time each class gets a
//! prototype feature map; test images are scored by their per-cell feature
//! distance to it, the (mean, max) of that distance map is separated by a
//! hard-margin linear SVM, and detection quality is reported as ROC-AUC.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;

pub use error::{CheckpointError, Error, Result};
