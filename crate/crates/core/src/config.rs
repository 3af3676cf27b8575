use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-block target mass `v_user` is derived from `gamma`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FilterTargetMode {
    /// `v_user = I * gamma` for every gated block.
    #[default]
    #[value(name = "per_block")]
    PerBlock,
    /// `v_user = I * L * gamma`, taken verbatim.
    #[value(name = "paper_literal")]
    PaperLiteral,
}

/// How inactive tokens are excluded from attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AttentionExclusion {
    /// Inactive keys get `-inf` logits; softmax renormalizes over active keys.
    #[default]
    #[value(name = "additive_mask")]
    AdditiveMask,
    /// Inactive rows are zero but still participate as keys.
    #[value(name = "literal")]
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder block count `L`.
    pub blocks: usize,
    /// Token sequence length `I`, CLS included.
    pub seq_len: usize,
    /// Hidden width `J`.
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub classes: usize,
    /// When false the stack runs without any gate (baseline).
    pub gated: bool,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_filter: f64,
    pub lambda_bi: f64,
    pub filter_target_mode: FilterTargetMode,
    pub attention_exclusion: AttentionExclusion,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            seq_len: 16,
            hidden: 32,
            heads: 2,
            ffn_dim: 128,
            vocab: 32,
            classes: 2,
            gated: true,
            alpha: 0.5,
            gamma: 0.5,
            lambda_filter: 0.01,
            lambda_bi: 2.0,
            filter_target_mode: FilterTargetMode::PerBlock,
            attention_exclusion: AttentionExclusion::AdditiveMask,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn gated_blocks(&self) -> usize {
        self.blocks - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.seq_len", self.seq_len),
            ("model.hidden", self.hidden),
            ("model.heads", self.heads),
            ("model.ffn_dim", self.ffn_dim),
            ("model.vocab", self.vocab),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.blocks < 2 {
            return Err(Error::config("model.blocks", "need at least 2 blocks (block 1 is ungated)"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("model.seq_len", "need CLS plus at least one token"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2 classes"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("hidden {} not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("model.alpha", format!("{} not in (0, 1)", self.alpha)));
        }
        check_gamma(self.gamma)?;
        for (field, v) in [
            ("model.lambda_filter", self.lambda_filter),
            ("model.lambda_bi", self.lambda_bi),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("{v} must be finite and non-negative")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be positive"));
        }
        Ok(())
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::config("model.gamma", format!("{gamma} not in [0, 1]")))
    }
}
