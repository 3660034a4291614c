use serde::{Deserialize, Serialize};

use super::tokenizer::TEXT_VOCAB;
use super::{PredictorError, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub text_vocab: usize,
    /// Codebook size plus the three special tokens.
    pub unit_vocab: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 512,
            text_vocab: TEXT_VOCAB,
            unit_vocab: 503,
            max_src_len: 512,
            max_tgt_len: 1024,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized for a codebook of `k` units.
    pub fn for_units(k: usize) -> Self {
        Self {
            unit_vocab: k + 3,
            ..Self::default()
        }
    }

    /// Number of real (non-special) units.
    pub fn k(&self) -> usize {
        self.unit_vocab.saturating_sub(3)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PredictorError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive");
        }
        if self.text_vocab != TEXT_VOCAB {
            return bad("text_vocab must be 259 for byte-level input");
        }
        if self.unit_vocab < 4 {
            return bad("unit_vocab must be at least 4");
        }
        if self.max_src_len == 0 || self.max_tgt_len == 0 {
            return bad("max_src_len and max_tgt_len must be positive");
        }
        Ok(())
    }
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub shuffle_seed: u64,
    pub log_every: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            max_steps: 2000,
            shuffle_seed: 0,
            log_every: 100,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(PredictorError::InvalidConfig("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(PredictorError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(PredictorError::InvalidConfig(
                "clip_norm must be > 0".into(),
            ));
        }
        Ok(())
    }
}
