//! Desk-scale, end-to-end semi-supervised detection of table-like
//! objects in synthetic document images.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] — dense f64 tensors, an operation tape with reverse-mode
//!   gradients, a finite-difference verifier, and binary checkpoints.
//! - [`attn`] — multi-scale deformable attention over feature pyramids.
//! - [`model`] — the detector: tiny convolutional backbone, deformable
//!   encoder, query decoder, class/box heads. No post-processing; the
//!   model emits exactly N raw predictions.
//! - [`matching`] / [`loss`] — optimal bipartite matching between
//!   predictions and targets, and the matched set-prediction loss.
//! - [`augment`] — weak/strong augmentation with invertible box
//!   co-transforms.
//! - [`evalm`] — IoU, PR-curve AP, mAP(0.5:0.95), AR, and P/R/F1.
//! - [`data`] — synthetic document generation, dataset splits, COCO-style
//!   annotation IO, PGM image IO.
//! - [`train`] — the teacher-student engine: burn-in, confidence-filtered
//!   pseudo-labels, EMA teacher updates, two-stage schedule.
//! - [`runner`] — run configs and the generate/train/eval/ablate entry
//!   points used by the CLI.

pub mod augment;
pub mod attn;
pub mod data;
pub mod error;
pub mod evalm;
pub mod loss;
pub mod matching;
pub mod model;
pub mod optim;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
