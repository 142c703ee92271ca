// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture hyperparameters for a decoder-only transformer.

use serde::{Deserialize, Serialize};

use crate::error::{FixlabError, Result};

/// How attention and MLP outputs join the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualVariant {
    /// `x + attn(ln1(x)) + mlp(ln2(x))` (GPT-NeoX / Pythia).
    Parallel,
    /// `h = x + attn(ln1(x)); h + mlp(ln2(h))` (Llama, Qwen).
    Sequential,
}

/// Normalization flavour used by every norm in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Mean-centred, variance-scaled, with weight and bias.
    Layernorm,
    /// Root-mean-square scaled, weight only.
    Rmsnorm,
}

/// Feed-forward block flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// `W_out · gelu(W_in x + b_in) + b_out` with the exact (erf) GELU.
    Gelu,
    /// `W_down · (silu(W_gate x) ⊙ W_up x)`.
    Swiglu,
}

/// Whether the tokenizer prepends BOS on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BosPolicy {
    /// BOS is inserted by the encode call (Llama-3).
    AutoPrepend,
    /// Nothing is inserted (Pythia, Qwen).
    #[default]
    None,
}

/// Llama-3 style frequency rescaling of the rotary inverse frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeScaling {
    /// Divisor applied to the low-frequency band.
    pub factor: f64,
    /// Low-frequency boundary factor.
    pub low_freq_factor: f64,
    /// High-frequency boundary factor.
    pub high_freq_factor: f64,
    /// Context length the unscaled frequencies were trained for.
    pub original_max_position: f64,
}

/// Positional encoding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Positional {
    /// Learned absolute embeddings added after the token embedding.
    Learned,
    /// Rotary embedding on the first `rotary_fraction · d_head` dims of Q and K.
    Rotary {
        /// Fraction of each head's dims that rotate, in (0, 1].
        rotary_fraction: f64,
        /// Base of the inverse-frequency ladder.
        #[serde(default = "default_rope_base")]
        base: f64,
        /// Optional Llama-3 frequency rescaling.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scaling: Option<RopeScaling>,
    },
}

fn default_rope_base() -> f64 {
    10_000.0
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub residual_variant: ResidualVariant,
    pub norm_kind: NormKind,
    pub positional: Positional,
    pub mlp_kind: MlpKind,
    pub layernorm_eps: f32,
    #[serde(default)]
    pub bos_policy: BosPolicy,
}

impl ModelConfig {
    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(FixlabError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(FixlabError::Config(format!(
                "d_model ({}) != n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(FixlabError::Config(format!(
                "n_heads ({}) not divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !(self.layernorm_eps.is_finite() && self.layernorm_eps > 0.0) {
            return Err(FixlabError::Config("layernorm_eps must be positive".into()));
        }
        if let Positional::Rotary {
            rotary_fraction, base, ..
        } = self.positional
        {
            if !(rotary_fraction > 0.0 && rotary_fraction <= 1.0) {
                return Err(FixlabError::Config(format!(
                    "rotary_fraction {rotary_fraction} outside (0, 1]"
                )));
            }
            if !(base.is_finite() && base > 1.0) {
                return Err(FixlabError::Config(format!("rotary base {base} must exceed 1")));
            }
            let dims = self.rotary_dims();
            if dims == 0 || !dims.is_multiple_of(2) {
                return Err(FixlabError::Config(format!(
                    "rotary dims {dims} must be a positive even number"
                )));
            }
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Number of rotating dims per head (0 for learned positions).
    pub fn rotary_dims(&self) -> usize {
        match self.positional {
            Positional::Learned => 0,
            Positional::Rotary { rotary_fraction, .. } => (rotary_fraction * self.d_head as f64).round() as usize,
        }
    }

    /// Width of the key/value projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Small GPT-NeoX-shaped config for tests and benches.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 256,
            vocab_size,
            max_seq: 512,
            residual_variant: ResidualVariant::Parallel,
            norm_kind: NormKind::Layernorm,
            positional: Positional::Rotary {
                rotary_fraction: 0.25,
                base: 10_000.0,
                scaling: None,
            },
            mlp_kind: MlpKind::Gelu,
            layernorm_eps: 1e-5,
            bos_policy: BosPolicy::None,
        }
    }

    /// Small Llama-shaped config (sequential residual, RMSNorm, SwiGLU, GQA).
    pub fn toy_llama(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size,
            max_seq: 512,
            residual_variant: ResidualVariant::Sequential,
            norm_kind: NormKind::Rmsnorm,
            positional: Positional::Rotary {
                rotary_fraction: 1.0,
                base: 500_000.0,
                scaling: Some(RopeScaling {
                    factor: 32.0,
                    low_freq_factor: 1.0,
                    high_freq_factor: 4.0,
                    original_max_position: 8192.0,
                }),
            },
            mlp_kind: MlpKind::Swiglu,
            layernorm_eps: 1e-5,
            bos_policy: BosPolicy::AutoPrepend,
        }
    }
}
