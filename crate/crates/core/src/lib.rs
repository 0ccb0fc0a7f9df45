//! Masked diffusion language model training with learnability-informed
//! token selection.
//!
//! The crate covers the whole desk-scale workflow:
//!
//! - [`corpus`]: synthetic reasoning tasks, text ingestion, vocabulary and batching
//! - [`tensor`] / [`autodiff`]: dense arrays with a reverse-mode tape
//! - [`model`] / [`checkpoint`]: the bidirectional transformer denoiser and its file format
//! - [`diffusion`]: timestep / secondary-ratio sampling and Bernoulli masking
//! - [`objectives`]: vanilla NELBO, LIFT, LIFT-A, ablations, GIFT and CART
//! - [`trainer`] / [`optim`]: AdamW loop with accumulation, clipping and resume
//! - [`sampler`] / [`eval`]: reverse-diffusion decoding, exact match and pass@k
//! - [`analysis`]: confidence binning by token frequency and diffusion time
//! - [`config`]: the run-config file shared with the command-line front end

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, Param, ParamId, ParamStore, Var};
pub use checkpoint::Checkpoint;
pub use corpus::{Batch, Task, TokenSequence, Tokenization, Vocabulary};
pub use diffusion::{CorruptedSequence, RhoStrategy, TimestepDraw};
pub use error::{Error, Result};
pub use model::{Denoiser, DenoiserOutput, ModelConfig};
pub use objectives::{LossValue, ObjectiveKind, ObjectiveSpec, Regime, SelectionResult};
pub use tensor::Tensor;
pub use trainer::{RunManifest, TrainConfig};

