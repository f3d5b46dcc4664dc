use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Architecture hyperparameters. Defaults are the full-size model; the
/// vocabulary size and class count normally come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_segments: usize,
    /// Length of the fused KG pair vector (two drug embeddings).
    pub kg_dim: usize,
    pub kg_heads: usize,
    pub conv_blocks: usize,
    pub conv_kernel: usize,
    pub pool_stride: usize,
    pub mlp1_hidden: usize,
    pub mlp1_out: usize,
    pub mlp2_hidden: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            d_ff: 256,
            max_len: 500,
            n_segments: 2,
            kg_dim: 800,
            kg_heads: 4,
            conv_blocks: 8,
            conv_kernel: 3,
            pool_stride: 2,
            mlp1_hidden: 256,
            mlp1_out: 256,
            mlp2_hidden: 512,
            n_classes: 65,
            dropout: 0.1,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_segments", self.n_segments),
            ("kg_dim", self.kg_dim),
            ("kg_heads", self.kg_heads),
            ("conv_kernel", self.conv_kernel),
            ("pool_stride", self.pool_stride),
            ("mlp1_hidden", self.mlp1_hidden),
            ("mlp1_out", self.mlp1_out),
            ("mlp2_hidden", self.mlp2_hidden),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.kg_dim % 2 != 0 || (self.kg_dim / 2) % self.kg_heads != 0 {
            return Err(CoreError::Config(format!(
                "model.kg_dim {} must split into two drug halves divisible by model.kg_heads {}",
                self.kg_dim, self.kg_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(CoreError::Config("model.conv_kernel must be odd for same padding".into()));
        }
        if self.n_segments < 2 {
            return Err(CoreError::Config("model.n_segments must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("model.dropout {} is outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CoreError::Config(format!("model.bn_momentum {} is outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Sequence length after each conv block, starting with `max_len`.
    pub fn conv_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.max_len];
        for _ in 0..self.conv_blocks {
            let l = *out.last().expect("non-empty");
            out.push(l.div_ceil(self.pool_stride));
        }
        out
    }

    /// Width of the flattened conv features.
    pub fn conv_flat(&self) -> usize {
        self.conv_lengths().last().expect("non-empty") * self.d_model
    }

    /// Width entering the classifier MLP.
    pub fn fused_width(&self) -> usize {
        self.mlp1_out + self.kg_dim
    }
}
