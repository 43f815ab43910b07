//! Flexible multimodal transformer for image and text classification.
//!
//! The model embeds an image and a token sequence into one composite
//! sequence, runs it through a shared encoder under three attention masks
//! (joint, image-only, text-only), fuses the per-task CLS outputs, and
//! classifies them with a cascade of expert layers gated by a GRU.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pin the common choices.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use data::{GenConfig, Record, SplitSpec};
pub use embedding::{Modality, ModalityTag};
pub use encoder::{build_mask, AttentionMask, DropoutPolicy, EncoderConfig, TaskKind};
pub use error::{FmtError, Result};
pub use metrics::{ConfusionCounts, MetricReport};
pub use model::{FmtConfig, FmtModel, Variant};
pub use params::{Graph, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::TrainConfig;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type FmtModel64 = FmtModel<f64>;
pub type FmtModel32 = FmtModel<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
