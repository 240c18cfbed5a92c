//! Desk-scale text-conditioned segmentation pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: a dense f64 tensor type and a reverse-mode
//!   autodiff tape; every later module builds its forward pass on these.
//! - [`nn`], [`conv`], [`fft`]: the neural-network primitives (softmax,
//!   layer norm, activations, convolutions, pooling, pixel shuffle, FFT
//!   magnitude) with hand-written backward rules.
//! - [`check`]: finite-difference gradient checking and reference oracles.
//! - [`attention`], [`ssmix`], [`modab`]: the fusion stack — positional
//!   encodings, multi-head self/cross attention, the selective state-space
//!   mixer, and the attention block that joins visual and text features.
//! - [`model`]: encoder stubs, the four-stage decoder, and full assembly.
//! - [`loss`]: the Dice + spectral + entropy objective and the BCE baseline.
//! - [`data`], [`tensor_io`], [`pgm`], [`metrics`]: synthetic referring
//!   datasets, portable tensor/mask file formats, and overlap metrics.
//! - [`optim`], [`config`], [`trainer`], [`ablation`]: AdamW, cosine
//!   schedule, the early-stopped training loop, evaluation, and the
//!   ablation runner.

pub mod ablation;
pub mod attention;
pub mod catalog;
pub mod check;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod fft;
pub mod loss;
pub mod metrics;
pub mod modab;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod ssmix;
pub mod tape;
pub mod tensor;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
