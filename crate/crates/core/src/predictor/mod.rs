//! Byte-level encoder-decoder that predicts deduplicated unit sequences
//! directly from raw text.

mod check;
mod checkpoint;
mod config;
mod decode;
mod model;
mod tokenizer;
mod train;

pub use check::{model_grad_check, GradCheckSetup};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, parse_checkpoint,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, TrainConfig};
pub use decode::greedy_decode;
pub use model::{ForwardCache, Seq2SeqModel};
pub use tokenizer::{
    byte_tokenize, decode_unit_tokens, encode_units_target, TargetTokens, TokenizerSpec, BOS_ID,
    BYTE_OFFSET, EOS_ID, PAD_ID, TEXT_VOCAB,
};
pub use train::{prepare_dataset, train, LossCurve, StepLog, TrainExample};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("source of {len} tokens exceeds max_src_len {max}")]
    SourceTooLong { len: usize, max: usize },
    #[error("target of {len} tokens exceeds max_tgt_len {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("unit {unit} is outside the codebook of {k} units")]
    UnitOutOfRange { unit: u32, k: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("utterance {id:?}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<PredictorError>,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{path}: bad checkpoint magic")]
    BadMagic { path: String },
    #[error("{path}: unknown checkpoint version {version}")]
    UnknownVersion { path: String, version: u32 },
    #[error("{path}: truncated checkpoint")]
    TruncatedFile { path: String },
    #[error("{path}: checkpoint does not match model layout: {reason}")]
    ShapeMismatchOnLoad { path: String, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PredictorError {
    pub fn for_utterance(self, id: &str) -> Self {
        Self::Utterance {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = PredictorError> = std::result::Result<T, E>;
