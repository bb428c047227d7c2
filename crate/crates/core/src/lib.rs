//! All-in-one transformer for semi-supervised video object segmentation.
//!
//! The crate implements a single vision transformer that performs feature
//! extraction, reference/current matching, multi-object mask propagation and
//! token-memory management in one stack of hybrid-attention layers:
//!
//! - [`tensor`] — a minimal dense-tensor engine with reverse-mode automatic
//!   differentiation and an Adam optimizer (CPU, 64-bit test mode / 32-bit
//!   training mode).
//! - [`embedding`] — patch embedding, convolutional mask embedding and the
//!   multi-scale stem that feeds decoder skip connections.
//! - [`attention`] — the hybrid attention block: reference tokens attend only
//!   to themselves while current tokens attend jointly to memory, reference
//!   and themselves; includes a naive full-attention reference path and
//!   attention-mass decomposition diagnostics.
//! - [`memory`] — layer-wise key/value token memory with FIFO (whole-frame)
//!   and top-k (per-token, attention-scored) retention policies.
//! - [`dts`] — the dynamic token selector: per-layer scoring of reference
//!   tokens, straight-through Gumbel-Softmax sampling during training and
//!   argmax selection at inference, plus selection-ratio tracking.
//! - [`decoder`] — pyramid mask decoding from final current-frame tokens to
//!   per-object logits and multi-object label aggregation.
//! - [`model`], [`pipeline`] — model assembly, losses, the training loop and
//!   streaming per-frame inference with memory updates.
//! - [`synth`], [`metrics`] — synthetic moving-shape videos with pixel-exact
//!   ground truth, and region-similarity / boundary-accuracy metrics.
//! - [`io`] — checkpoints, raster I/O, CSV exports and run manifests.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod dts;
pub mod embedding;
pub mod error;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use config::{FpMode, MemoryKind, ModelConfig, RunConfig, SynthConfig, TrainConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
