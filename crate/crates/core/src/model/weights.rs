use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::rng::Xoshiro256StarStar;

/// Named parameter tensors. Vectors are stored as `1 × n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    tensors: BTreeMap<String, Tensor2D>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Random,
    Ones,
    Zeros,
}

/// Every tensor the model expects, in canonical initialisation order.
pub(crate) fn layout(c: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = c.d_model;
    let mut v = Vec::new();
    let mut add = |name: String, shape, init| v.push((name, shape, init));
    add("tok_emb".into(), (c.vocab, d), Init::Random);
    add("pos_emb".into(), (c.max_seq, d), Init::Random);
    for l in 0..c.n_layers {
        let p = format!("layers.{l}");
        add(format!("{p}.ln1.gain"), (1, d), Init::Ones);
        add(format!("{p}.ln1.bias"), (1, d), Init::Zeros);
        add(format!("{p}.attn.wq"), (d, d), Init::Random);
        add(format!("{p}.attn.wk"), (d, d), Init::Random);
        add(format!("{p}.attn.wv"), (d, d), Init::Random);
        add(format!("{p}.attn.wo"), (d, d), Init::Random);
        add(format!("{p}.ln2.gain"), (1, d), Init::Ones);
        add(format!("{p}.ln2.bias"), (1, d), Init::Zeros);
        add(format!("{p}.mlp.w1"), (d, c.d_ff), Init::Random);
        add(format!("{p}.mlp.b1"), (1, c.d_ff), Init::Zeros);
        add(format!("{p}.mlp.w2"), (c.d_ff, d), Init::Random);
        add(format!("{p}.mlp.b2"), (1, d), Init::Zeros);
    }
    add("ln_f.gain".into(), (1, d), Init::Ones);
    add("ln_f.bias".into(), (1, d), Init::Zeros);
    add("head".into(), (d, c.vocab), Init::Random);
    add("vision.patch_proj".into(), (c.patch_dim, d), Init::Random);
    add("qformer.queries".into(), (c.n_queries, d), Init::Random);
    add("qformer.wq".into(), (d, d), Init::Random);
    add("qformer.wk".into(), (c.patch_dim, d), Init::Random);
    add("qformer.wv".into(), (c.patch_dim, d), Init::Random);
    add("qformer.wo".into(), (d, d), Init::Random);
    v
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deterministic weights from a 64-bit seed.
    ///
    /// One xoshiro256** stream fills the random tensors in canonical order
    /// with values uniform in `[-s, s)`, `s = 0.02 / sqrt(d_model)`. Norm
    /// gains are one and biases zero.
    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let scale = 0.02 / libm::sqrtf(config.d_model as f32);
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut ws = WeightSet::new();
        for (name, (r, c), init) in layout(config) {
            let data = match init {
                Init::Random => (0..r * c).map(|_| rng.next_f32_symmetric() * scale).collect(),
                Init::Ones => alloc::vec![1.0; r * c],
                Init::Zeros => alloc::vec![0.0; r * c],
            };
            ws.insert(name, Tensor2D::new(r, c, data)?);
        }
        Ok(ws)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor2D) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor2D)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks names, shapes and finiteness against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let expected = layout(config);
        for (name, shape, _) in &expected {
            let t = self.tensors.get(name).ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
            if t.shape() != *shape {
                return Err(Error::Weights(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), shape)));
            }
            if !t.is_finite() {
                return Err(Error::Weights(format!("tensor {name} has non-finite values")));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.iter().any(|e| &e.0 == *k)) {
            return Err(Error::Weights(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}
