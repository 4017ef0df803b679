use alloc::vec::Vec;

use super::ModelConfig;
use crate::numerics::Tensor2D;

/// Per-layer keys and values for positions `[0, len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    keys: Vec<Tensor2D>,
    values: Vec<Tensor2D>,
    len: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: (0..config.n_layers).map(|_| Tensor2D::zeros(0, config.d_model)).collect(),
            values: (0..config.n_layers).map(|_| Tensor2D::zeros(0, config.d_model)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer(&self, layer: usize) -> (&Tensor2D, &Tensor2D) {
        (&self.keys[layer], &self.values[layer])
    }

    pub(crate) fn append(&mut self, layer: usize, k: &Tensor2D, v: &Tensor2D) -> crate::Result<()> {
        self.keys[layer].append_rows(k)?;
        self.values[layer].append_rows(v)
    }

    /// Records that every layer has been extended by `n` positions.
    pub(crate) fn commit(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self.keys.iter().all(|k| k.rows() == self.len));
    }
}
