//! missu: a transformer-augmented 3D encoder-decoder segmentation network
//! whose multi-scale local refinement is transferred into the main stem by
//! self-distillation during training and removed at inference.
//!
//! The crate is self-contained and desk-scale: all numerics are 64-bit with
//! a fixed evaluation order (bit-reproducible), training data comes from a
//! seeded synthetic phantom generator, and every architectural claim is
//! backed by an executable check (finite-difference gradients, impulse-probe
//! receptive fields, analytic complexity accounting).
//!
//! Top-level layout:
//! - [`tensor`] / [`tape`] / [`kernels`]: the f64 autodiff core.
//! - [`config`] / [`volume`] / [`checkpoint`]: configs, file formats, state.
//! - [`phantom`]: synthetic nested-lesion volumes plus the preprocessing and
//!   augmentation protocol.
//! - [`encoder`], [`transformer`], [`msf`], [`decoder`], [`model`]: the
//!   network itself.
//! - [`train`]: Adam + poly schedule training loop and the ablation harness.
//! - [`metrics`] / [`complexity`]: evaluation metrics and the train-vs-
//!   inference graph audit.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod msf;
pub mod params;
pub mod phantom;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod volume;

pub use config::{ModelConfig, MsfMode, TrainConfig, STAGES};
pub use error::{Error, Result};
pub use tensor::Tensor;
