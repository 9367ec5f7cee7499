use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What replaces the feed-forward sublayer of an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Plain two-matrix feed-forward block.
    Standard,
    /// Feed-forward block replaced by retrieval plus knowledge attention.
    Dpm,
    /// Knowledge attention added alongside the feed-forward block.
    Fuse,
}

impl LayerKind {
    pub fn uses_memory(self) -> bool {
        !matches!(self, LayerKind::Standard)
    }

    pub fn has_ffn(self) -> bool {
        !matches!(self, LayerKind::Dpm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub max_knowledge_len: usize,
    pub layer_kinds: Vec<LayerKind>,
    pub top_n: usize,
    pub dropout: f64,
}

pub const LN_EPS: f64 = 1e-12;

impl ModelConfig {
    /// Small CPU-friendly model: 4 layers of width 64, last layer on memory.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 256,
            max_seq_len: 64,
            max_knowledge_len: 32,
            layer_kinds: top_layers(4, 1, LayerKind::Dpm),
            top_n: 5,
            dropout: 0.0,
        }
    }

    /// BERT-base sized preset with the top layer on memory.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ffn: 3072,
            max_seq_len: 512,
            max_knowledge_len: crate::text::DEFAULT_MAX_KNOWLEDGE_LEN,
            layer_kinds: top_layers(12, 1, LayerKind::Dpm),
            top_n: 5,
            dropout: 0.1,
        }
    }

    pub fn with_layer_kinds(mut self, kinds: Vec<LayerKind>) -> Self {
        self.n_layers = kinds.len();
        self.layer_kinds = kinds;
        self
    }

    pub fn uses_memory(&self) -> bool {
        self.layer_kinds.iter().any(|k| k.uses_memory())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.layer_kinds.len() != self.n_layers {
            return fail(format!(
                "{} layer kinds for {} layers",
                self.layer_kinds.len(),
                self.n_layers
            ));
        }
        if self.top_n == 0 {
            return fail("top_n must be at least 1".into());
        }
        if self.vocab_size <= crate::text::RESERVED.len() {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.max_seq_len < 2 || self.max_knowledge_len == 0 {
            return fail("sequence bounds too small".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `n_layers` kinds where the top `top` layers are `kind`, the rest Standard.
pub fn top_layers(n_layers: usize, top: usize, kind: LayerKind) -> Vec<LayerKind> {
    (0..n_layers)
        .map(|i| if i + top >= n_layers { kind } else { LayerKind::Standard })
        .collect()
}
