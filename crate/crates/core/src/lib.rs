//! Workbench for dissecting a small Vision Transformer trained on a synthetic
//! object-counting task.
//!
//! The crate is organised around the experiment pipeline:
//!
//! - [`tensor`] — dense tensors with reverse-mode autodiff and Adam, enough to
//!   express and train the model and the probes;
//! - [`data`] — the patch-aligned counting dataset, clean/corrupted scene
//!   pairs, and an independent count oracle;
//! - [`vit`] — the transformer itself, with per-layer residual-stream capture
//!   and a patched forward pass that transplants activations between runs;
//! - [`train`] — mini-batch training and evaluation;
//! - [`checkpoint`] — binary parameter serialization;
//! - [`patching`] — layer-sweep activation-patching experiments and their
//!   logit-difference curves;
//! - [`probe`] — per-layer linear probes over object/CLS/background tokens.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod patching;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
