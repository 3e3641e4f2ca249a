//! Discriminative-feature posterior regularization (DeGPR) for multi-class
//! cell detection and counting.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`]: boxes, grayscale images, PGM and annotation I/O, tiling and
//!   patch cropping.
//! - [`features`]: explicit size/intensity features and per-image
//!   discriminative vectors.
//! - [`encoder`]: contrastively pretrained patch encoder and PCA reduction
//!   (implicit features).
//! - [`density`]: diagonal Gaussian mixtures, EM fitting and Monte-Carlo KL.
//! - [`regularizer`]: the pairwise KL losses, their gradients and the total
//!   training loss.
//! - [`synth`]: synthetic cell scenes and a small trainable grid detector.
//! - [`eval`]: detection, counting and Q-ratio classification metrics.
//! - [`experiment`]: paired-seed baseline versus regularized training and
//!   the ablation table.

pub mod data;
pub mod density;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod regularizer;
pub mod rng;
pub mod synth;

pub use data::{BoundingBox, Detection, GoldBox, GrayImage, ImageRecord};
pub use error::{Error, Result};
