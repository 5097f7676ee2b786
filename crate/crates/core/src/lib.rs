//! Partial adversarial domain adaptation.
//!
//! A source domain with labels over `C_s` classes is adapted to an unlabeled
//! target domain whose classes are a subset of `C_s`. Plain adversarial
//! alignment also matches the source-only ("outlier") classes and hurts the
//! target. Here the classifier's average prediction on target data gives a
//! per-class weight that down-weights outlier classes in both the
//! classification loss and the adversarial loss.
//!
//! Modules, bottom up:
//!
//! * [`matrix`] and [`autodiff`]: dense `f64` matrices and a reverse-mode tape.
//! * [`model`]: feature extractor, classifier and domain discriminator.
//! * [`weighting`]: class-weight estimation and normalization.
//! * [`train`]: schedules, the weighted minimax step and full training runs.
//! * [`datagen`]: synthetic partial-label-space datasets and CSV I/O.
//! * [`eval`]: accuracy, weight statistics and target-class sweeps.
//! * [`config`]: flat `key=value` experiment configuration.

pub mod autodiff;
pub mod config;
pub mod datagen;
mod error;
pub mod eval;
pub mod matrix;
pub mod model;
mod textio;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
pub use matrix::Matrix;
