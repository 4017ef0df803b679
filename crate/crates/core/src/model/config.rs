use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LAYERNORM_EPS;
use crate::tokenizer::VOCAB_SIZE;

/// Hyper-parameters of the toy decoder and its vision path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab: usize,
    /// Flattened `P × P` patch grid.
    pub n_patches: usize,
    /// Learned queries in the query transformer.
    pub n_queries: usize,
    /// Per-head width, `d_model / n_heads`.
    pub d_k: usize,
    /// Width of one raw patch feature vector.
    pub patch_dim: usize,
    pub layernorm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 512,
            vocab: VOCAB_SIZE,
            n_patches: 64,
            n_queries: 8,
            d_k: 16,
            patch_dim: 32,
            layernorm_eps: LAYERNORM_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Param(msg.into()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_k != self.d_model / self.n_heads {
            return bad("d_k must equal d_model / n_heads");
        }
        if self.vocab != VOCAB_SIZE {
            return bad("vocab must match the byte tokenizer (260)");
        }
        if self.max_seq == 0 || self.d_ff == 0 || self.patch_dim == 0 || self.n_queries == 0 {
            return bad("max_seq, d_ff, patch_dim and n_queries must be positive");
        }
        let g = self.patch_grid();
        if g == 0 || g * g != self.n_patches {
            return bad("n_patches must be a positive perfect square");
        }
        if self.layernorm_eps.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return bad("layernorm_eps must be positive");
        }
        Ok(())
    }

    /// Side length `P` of the patch grid.
    pub fn patch_grid(&self) -> usize {
        let mut g = 0;
        while (g + 1) * (g + 1) <= self.n_patches {
            g += 1;
        }
        g
    }
}
