// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer with activation capture and substitution.
//!
//! The architecture is pre-LayerNorm with GELU MLPs. Each block exposes three
//! hook sites, visited in forward order:
//!
//! ```text
//! x ─ LN1 ─ attn ─(+)─▶ PostAttnResidual ─ LN2 ─ W1 ─ GELU ─▶ MlpActivation ─ W2 ─(+)─▶ PostMlpResidual
//! ```
//!
//! `W2` of layer `l` has shape `(d_model, d_mlp)`; column `i` is the write
//! direction of MLP neuron `i`.

mod capture;
mod hooks;
mod model;
mod tokenizer;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use capture::{capture_activations, capture_matrix, ActivationRecord, CaptureInput, Position};
pub use hooks::{Clamp, FnHook, ForwardHook, NoHook, Recorder, Substitution};
pub use model::{gelu, Model, Params};
pub use tokenizer::{split_words, Tokenizer, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID};
pub use train::{
    answer_prob, answer_prob_with, answer_probs_from_logits, finetune_config, greedy_first_token,
    greedy_first_token_with, perplexity, train_lm, EpochStats, TrainConfig, TrainExample,
    TrainMode, TrainReport,
};

/// Activation sites available for capture and substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSite {
    PostAttnResidual,
    MlpActivation,
    PostMlpResidual,
}

impl CaptureSite {
    pub const ALL: [CaptureSite; 3] = [
        CaptureSite::PostAttnResidual,
        CaptureSite::MlpActivation,
        CaptureSite::PostMlpResidual,
    ];

    /// Vector width at this site.
    pub fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            CaptureSite::MlpActivation => cfg.d_mlp,
            _ => cfg.d_model,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaptureSite::PostAttnResidual => "post_attn_residual",
            CaptureSite::MlpActivation => "mlp_activation",
            CaptureSite::PostMlpResidual => "post_mlp_residual",
        }
    }
}

impl fmt::Display for CaptureSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptureSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaptureSite::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown capture site `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// MLP intermediate width (`W2` has this many columns).
    pub d_mlp: usize,
    pub vocab_size: usize,
    /// Longest sequence the learned position table covers.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 256,
            vocab_size,
            max_seq_len: 48,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
