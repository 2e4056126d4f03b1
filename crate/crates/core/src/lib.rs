//! Intermediate-supervision U-Net variants for small-object segmentation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors and a define-by-run reverse-mode tape.
//! - [`nn`]: parameter registry, weight sharing and weight tying, conv blocks.
//! - [`losses`]: BCE, Dice, MSE and the composite objectives built from them.
//! - [`models`]: six architectures (plain U-Net and five supervised variants).
//! - [`data`]: seeded synthetic small-object datasets and the NTSR file format.
//! - [`train`]: Adam, the step-decay schedule, early stopping, checkpoints.
//! - [`report`]: Dice/IoU metrics, small-object buckets, convergence tables.
//! - [`cli`]: the `isunet` command line.

#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
