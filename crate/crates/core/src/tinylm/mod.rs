//! Byte-level GPT-style language model trained with the summed next-token
//! objective, small enough to fine-tune on a laptop CPU.

mod checkpoint;
mod gradcheck;
mod model;
mod tokenizer;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_loss_csv, save_checkpoint, write_loss_csv};
pub use gradcheck::{fd_residual, grad_check, GradCheckReport};
pub use model::{ForwardOutput, TinyLm};
pub use tokenizer::{detokenize, fit_document, tokenize, tokenize_fit, TokenStream, BOS, BYTE_VOCAB, N_SPECIAL};
pub use train::{train, LossRecord, Schedule, TrainConfig, TrainOutcome};

use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("empty token sequence")]
    EmptyInput,
    #[error("sequence of {0} tokens has nothing to predict (need at least 2)")]
    TooShort(usize),
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenRange { token: u32, vocab: usize },
    #[error("logits have {rows} rows but there are {tokens} tokens")]
    Shape { rows: usize, tokens: usize },
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("no trainable documents (each needs at least 2 tokens)")]
    EmptyCorpus,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { n_layers: 4, hidden_dim: 128, n_heads: 4, context_len: 1024, vocab_size: BYTE_VOCAB as usize, seed: 0 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let err = |m: &str| Err(LmError::Config(m.to_string()));
        if self.n_layers < 1 {
            return err("n_layers must be at least 1");
        }
        if self.hidden_dim < 2 {
            return err("hidden_dim must be at least 2");
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return err("n_heads must divide hidden_dim");
        }
        if self.context_len < 2 {
            return err("context_len must be at least 2");
        }
        if self.vocab_size < BYTE_VOCAB as usize {
            return err("vocab_size must cover all bytes plus BOS (257)");
        }
        Ok(())
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28);
        for v in [self.n_layers, self.hidden_dim, self.n_heads, self.context_len, self.vocab_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }
}

/// Summed next-token negative log-likelihood: row `t - 1` of `logits` scores
/// `tokens[t]` for every `t ≥ 1`.
pub fn ntp_loss(logits: &Matrix, tokens: &[u32]) -> Result<f64, LmError> {
    if tokens.len() < 2 {
        return Err(LmError::TooShort(tokens.len()));
    }
    if logits.rows != tokens.len() {
        return Err(LmError::Shape { rows: logits.rows, tokens: tokens.len() });
    }
    let mut loss = 0.0;
    for t in 1..tokens.len() {
        let target = tokens[t] as usize;
        if target >= logits.cols {
            return Err(LmError::TokenRange { token: tokens[t], vocab: logits.cols });
        }
        let row = logits.row(t - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[target];
    }
    Ok(loss)
}
