//! Desk-scale masked-language-model encoder for artist connection
//! prediction from biography pairs.
//!
//! Pipeline: build a word vocabulary, pretrain with masked-LM on generic
//! text, continue pretraining on art text, fine-tune a pair classifier under
//! k-fold cross-validation, compare with non-fine-tuned baselines, and diff
//! predicted artist graphs against ground truth.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use data_io::{BiographyPair, Document};
pub use error::{Error, ErrorKind, Result};
pub use model::{EncoderModel, ModelConfig};
pub use tokenizer::Vocabulary;
pub use train::{OptimizerKind, TrainConfig};
