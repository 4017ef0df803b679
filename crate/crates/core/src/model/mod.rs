//! Pre-norm decoder-only transformer with a patch projection and a
//! one-layer query transformer for images.

mod config;
mod kv;
mod weights;

pub use config::ModelConfig;
pub use kv::KVCache;
pub use weights::WeightSet;

use alloc::vec::Vec;

use crate::activation::{apply_bias, AttentionBias};
use crate::error::{shape, Error, Result};
use crate::numerics::{
    add_in_place, add_row_bias, gelu, layernorm, layernorm_rows, matmul, matmul_transposed, LogitVector, Tensor2D,
};
use crate::tokenizer::TokenId;

/// Observer of the attention probabilities used in a forward pass.
pub trait AttentionHook {
    /// Called once per layer and head. `probs` is `new positions × keys`
    /// and its row `r` belongs to query position `first_query + r`.
    fn on_attention(&mut self, layer: usize, head: usize, first_query: usize, probs: &Tensor2D);
}

#[derive(Debug, Clone)]
struct Block {
    ln1_gain: Vec<f32>,
    ln1_bias: Vec<f32>,
    wq: Tensor2D,
    wk: Tensor2D,
    wv: Tensor2D,
    wo: Tensor2D,
    ln2_gain: Vec<f32>,
    ln2_bias: Vec<f32>,
    w1: Tensor2D,
    b1: Vec<f32>,
    w2: Tensor2D,
    b2: Vec<f32>,
}

#[derive(Debug, Clone)]
struct QFormer {
    queries: Tensor2D,
    wq: Tensor2D,
    wk: Tensor2D,
    wv: Tensor2D,
    wo: Tensor2D,
}

/// Output of the query transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct QFormerOutput {
    /// `n_queries × d_model` embeddings that stand in for the image.
    pub embeddings: Tensor2D,
    /// Per head, `n_queries × n_patches` cross-attention probabilities.
    pub attention: Vec<Tensor2D>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: WeightSet,
    tok_emb: Tensor2D,
    pos_emb: Tensor2D,
    blocks: Vec<Block>,
    lnf_gain: Vec<f32>,
    lnf_bias: Vec<f32>,
    head: Tensor2D,
    patch_proj: Tensor2D,
    qformer: QFormer,
}

impl Model {
    pub fn new(config: ModelConfig, weights: WeightSet) -> Result<Self> {
        weights.validate(&config)?;
        let t = |name: &str| weights.get(name).cloned().expect("validated");
        let v = |name: &str| t(name).into_data();
        let blocks = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| alloc::format!("layers.{l}.{s}");
                Block {
                    ln1_gain: v(&n("ln1.gain")),
                    ln1_bias: v(&n("ln1.bias")),
                    wq: t(&n("attn.wq")),
                    wk: t(&n("attn.wk")),
                    wv: t(&n("attn.wv")),
                    wo: t(&n("attn.wo")),
                    ln2_gain: v(&n("ln2.gain")),
                    ln2_bias: v(&n("ln2.bias")),
                    w1: t(&n("mlp.w1")),
                    b1: v(&n("mlp.b1")),
                    w2: t(&n("mlp.w2")),
                    b2: v(&n("mlp.b2")),
                }
            })
            .collect();
        Ok(Self {
            tok_emb: t("tok_emb"),
            pos_emb: t("pos_emb"),
            blocks,
            lnf_gain: v("ln_f.gain"),
            lnf_bias: v("ln_f.bias"),
            head: t("head"),
            patch_proj: t("vision.patch_proj"),
            qformer: QFormer {
                queries: t("qformer.queries"),
                wq: t("qformer.wq"),
                wk: t("qformer.wk"),
                wv: t("qformer.wv"),
                wo: t("qformer.wo"),
            },
            config,
            weights,
        })
    }

    /// Model with [`WeightSet::seeded`] weights.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, WeightSet::seeded(&config, seed)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(&self.config)
    }

    /// Rows of the token embedding table `f(x)`, without positions.
    pub fn token_embeddings(&self, tokens: &[TokenId]) -> Result<Tensor2D> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id as usize >= self.config.vocab {
                return Err(Error::Vocab { id, vocab: self.config.vocab });
            }
            out.extend_from_slice(self.tok_emb.row(id as usize));
        }
        Tensor2D::new(tokens.len(), d, out)
    }

    /// Adds positional embeddings for positions `start..start + x.rows()`.
    pub fn add_positions(&self, x: &mut Tensor2D, start: usize) -> Result<()> {
        let end = start + x.rows();
        if end > self.config.max_seq {
            return Err(Error::Capacity { needed: end, max_seq: self.config.max_seq });
        }
        if x.cols() != self.config.d_model {
            return Err(shape("embedding width differs from d_model"));
        }
        for r in 0..x.rows() {
            for (a, p) in x.row_mut(r).iter_mut().zip(self.pos_emb.row(start + r)) {
                *a += p;
            }
        }
        Ok(())
    }

    /// `f(x_i) + pos(i)` for a sequence starting at position 0.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor2D> {
        let mut x = self.token_embeddings(tokens)?;
        self.add_positions(&mut x, 0)?;
        Ok(x)
    }

    /// Runs `inputs` (embeddings including positions) after the cached
    /// prefix and returns next-token logits for the last input row.
    ///
    /// `bias` covers every key position, cached and new, and is added to the
    /// scaled scores of every head in every layer.
    pub fn forward_step(
        &self,
        cache: &mut KVCache,
        inputs: &Tensor2D,
        bias: Option<&AttentionBias>,
        mut hook: Option<&mut dyn AttentionHook>,
    ) -> Result<LogitVector> {
        let c = &self.config;
        let n = inputs.rows();
        if n == 0 {
            return Err(shape("forward_step needs at least one position"));
        }
        if inputs.cols() != c.d_model {
            return Err(shape("input width differs from d_model"));
        }
        let start = cache.len();
        let total = start + n;
        if total > c.max_seq {
            return Err(Error::Capacity { needed: total, max_seq: c.max_seq });
        }
        if let Some(b) = bias {
            if b.len() != total {
                return Err(shape(alloc::format!("attention bias of length {} for {total} positions", b.len())));
            }
        }
        let scale = 1.0 / libm::sqrtf(c.d_k as f32);
        let mut x = inputs.clone();
        for (l, block) in self.blocks.iter().enumerate() {
            let h = layernorm_rows(&x, &block.ln1_gain, &block.ln1_bias, c.layernorm_eps)?;
            let q = matmul(&h, &block.wq)?;
            let k = matmul(&h, &block.wk)?;
            let v = matmul(&h, &block.wv)?;
            cache.append(l, &k, &v)?;
            let (keys, values) = cache.layer(l);
            let mut attn = Tensor2D::zeros(n, c.d_model);
            for head in 0..c.n_heads {
                let qh = head_columns(&q, head, c.d_k);
                let kh = head_columns(keys, head, c.d_k);
                let vh = head_columns(values, head, c.d_k);
                let mut scores = matmul_transposed(&qh, &kh)?;
                scores.data_mut().iter_mut().for_each(|s| *s *= scale);
                let probs = apply_bias(&scores, bias, true)?;
                if let Some(hk) = hook.as_deref_mut() {
                    hk.on_attention(l, head, start, &probs);
                }
                let out = matmul(&probs, &vh)?;
                for r in 0..n {
                    attn.row_mut(r)[head * c.d_k..(head + 1) * c.d_k].copy_from_slice(out.row(r));
                }
            }
            add_in_place(&mut x, &matmul(&attn, &block.wo)?)?;

            let h = layernorm_rows(&x, &block.ln2_gain, &block.ln2_bias, c.layernorm_eps)?;
            let mut ff = matmul(&h, &block.w1)?;
            add_row_bias(&mut ff, &block.b1)?;
            ff.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let mut ff = matmul(&ff, &block.w2)?;
            add_row_bias(&mut ff, &block.b2)?;
            add_in_place(&mut x, &ff)?;
        }
        cache.commit(n);
        let last = layernorm(x.row(n - 1), &self.lnf_gain, &self.lnf_bias, c.layernorm_eps)?;
        let last = Tensor2D::new(1, c.d_model, last)?;
        Ok(matmul(&last, &self.head)?.into_data())
    }

    /// Linear per-patch projection into the embedding space, no bias.
    ///
    /// Row `i` corresponds to patch `(i / P, i % P)`.
    pub fn project_patches(&self, patches: &Tensor2D) -> Result<Tensor2D> {
        if patches.shape() != (self.config.n_patches, self.config.patch_dim) {
            return Err(shape(alloc::format!(
                "patch grid {:?}, expected {}x{}",
                patches.shape(),
                self.config.n_patches,
                self.config.patch_dim
            )));
        }
        matmul(patches, &self.patch_proj)
    }

    /// Query cross-attention over patch features.
    ///
    /// Highlighted patches get `ln(beta_q)` added to their scaled scores in
    /// every head and query row, so their unnormalised attention weight is
    /// multiplied by `beta_q`. `beta_q = 1` or no mask is the plain forward.
    pub fn qformer_forward(
        &self,
        patches: &Tensor2D,
        patch_mask: Option<&[bool]>,
        beta_q: f32,
    ) -> Result<QFormerOutput> {
        let c = &self.config;
        if patches.cols() != c.patch_dim || patches.rows() == 0 {
            return Err(shape("patch features must be N x patch_dim with N > 0"));
        }
        if !(beta_q > 0.0 && beta_q.is_finite()) {
            return Err(Error::Param(alloc::format!("beta_q must be positive, got {beta_q}")));
        }
        let bias = match patch_mask {
            Some(m) if m.len() != patches.rows() => {
                return Err(shape(alloc::format!("patch mask of {} bits for {} patches", m.len(), patches.rows())))
            }
            Some(m) => {
                let lb = libm::logf(beta_q);
                Some(AttentionBias::from_values(m.iter().map(|&b| if b { lb } else { 0.0 }).collect()))
            }
            None => None,
        };
        let qf = &self.qformer;
        let q = matmul(&qf.queries, &qf.wq)?;
        let k = matmul(patches, &qf.wk)?;
        let v = matmul(patches, &qf.wv)?;
        let scale = 1.0 / libm::sqrtf(c.d_k as f32);
        let mut mixed = Tensor2D::zeros(c.n_queries, c.d_model);
        let mut attention = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let mut scores = matmul_transposed(&head_columns(&q, head, c.d_k), &head_columns(&k, head, c.d_k))?;
            scores.data_mut().iter_mut().for_each(|s| *s *= scale);
            let probs = apply_bias(&scores, bias.as_ref(), false)?;
            let out = matmul(&probs, &head_columns(&v, head, c.d_k))?;
            for r in 0..c.n_queries {
                mixed.row_mut(r)[head * c.d_k..(head + 1) * c.d_k].copy_from_slice(out.row(r));
            }
            attention.push(probs);
        }
        Ok(QFormerOutput { embeddings: matmul(&mixed, &qf.wo)?, attention })
    }

    /// Full forward from an empty cache; returns logits for every position.
    ///
    /// Used by tests as the no-cache reference.
    pub fn forward_all(&self, inputs: &Tensor2D, bias: Option<&AttentionBias>) -> Result<Vec<LogitVector>> {
        let mut out = Vec::with_capacity(inputs.rows());
        for end in 1..=inputs.rows() {
            let mut cache = self.new_cache();
            let b = bias.map(|b| AttentionBias::from_values(b.values()[..end].to_vec()));
            out.push(self.forward_step(&mut cache, &inputs.slice_rows(0, end), b.as_ref(), None)?);
        }
        Ok(out)
    }
}

fn head_columns(t: &Tensor2D, head: usize, d_k: usize) -> Tensor2D {
    let mut data = Vec::with_capacity(t.rows() * d_k);
    for r in 0..t.rows() {
        data.extend_from_slice(&t.row(r)[head * d_k..(head + 1) * d_k]);
    }
    Tensor2D::new(t.rows(), d_k, data).expect("consistent shape")
}
