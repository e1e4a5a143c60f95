//! Masked-autoencoder pretraining and few-shot fine-tuning for fine-grained
//! image recognition, self-contained on CPU.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: dense arrays with reverse-mode automatic differentiation
//! - [`nn`]: transformer building blocks (patching, attention, blocks,
//!   positional tables, stochastic depth)
//! - [`mae`]: random patch masking, visible-only encoding, mask-token
//!   decoding, and the masked reconstruction loss
//! - [`classifier`]: encoder + bottleneck head fine-tuning with
//!   label-smoothed cross-entropy
//! - [`optim`]: AdamW, cosine schedule with warmup, linear LR scaling,
//!   layer-wise LR decay, gradient accumulation
//! - [`imaging`]: background-matched square padding, augmentation, dataset
//!   statistics
//! - [`data`]: manifests, stratified k-fold splits, limited-label subsets,
//!   and a synthetic fine-grained dataset generator
//! - [`eval`]: accuracy, confusion matrices, cross-fold aggregation
//! - [`ckpt`], [`config`], [`run`]: checkpoint format, run configuration,
//!   and the pretrain/finetune/eval/preprocess/synth drivers behind the CLI
//!
//! Every source of randomness flows from named, seeded streams ([`rng`]), so
//! serial runs are bit-reproducible and resumable.

pub mod ckpt;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, GradGraph, Tensor};
