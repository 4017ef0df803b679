//! Shared fixtures and a naive f64 reference transformer.
#![allow(dead_code)]

use highlighter_core::model::{Model, ModelConfig, WeightSet};
use highlighter_core::rng::Xoshiro256StarStar;
use highlighter_core::tokenizer::{TokenId, EOS};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_k: 16,
        d_ff: 64,
        max_seq: 128,
        n_patches: 16,
        n_queries: 4,
        patch_dim: 8,
        ..ModelConfig::default()
    }
}

/// Seeded weights with every random tensor multiplied by `scale`, so that
/// attention and logits are far from uniform.
pub fn scaled_model(config: ModelConfig, seed: u64, scale: f32) -> Model {
    let mut ws = WeightSet::seeded(&config, seed).unwrap();
    let names: Vec<String> = ws
        .iter()
        .filter(|(n, _)| !n.contains("ln") && !n.contains(".b1") && !n.contains(".b2"))
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        ws.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Model::new(config, ws).unwrap()
}

pub fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Xoshiro256StarStar, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.next_f32()
}

pub fn below(rng: &mut Xoshiro256StarStar, n: usize) -> usize {
    rng.next_below(n as u64) as usize
}

/// Printable ASCII prompt of the given byte length.
pub fn random_prompt(rng: &mut Xoshiro256StarStar, len: usize) -> String {
    (0..len).map(|_| (b' ' + below(rng, 95) as u8) as char).collect()
}

#[derive(Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Straight-line f64 transformer read from a weight set: no cache, no
/// shared kernels, every sequence recomputed from scratch.
pub struct Oracle {
    cfg: ModelConfig,
    ws: WeightSet,
}

pub struct OracleOutput {
    /// Logits at every position.
    pub logits: Vec<Vec<f64>>,
    /// `attention[layer][head][query][key]`, zero above the diagonal.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

fn vec_mat(x: &[f64], m: &Mat) -> Vec<f64> {
    assert_eq!(x.len(), m.rows);
    let mut out = vec![0.0; m.cols];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *o += xi * m.at(i, j);
        }
    }
    out
}

fn norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * gain[i] + bias[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

impl Oracle {
    pub fn new(model: &Model) -> Self {
        Self { cfg: *model.config(), ws: model.weights().clone() }
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self.ws.get(name).unwrap_or_else(|| panic!("missing {name}"));
        Mat { rows: t.rows(), cols: t.cols(), data: t.data().iter().map(|&v| v as f64).collect() }
    }

    fn vector(&self, name: &str) -> Vec<f64> {
        self.mat(name).data
    }

    pub fn token_row(&self, id: TokenId) -> Vec<f64> {
        self.mat("tok_emb").row(id as usize).to_vec()
    }

    pub fn position_row(&self, pos: usize) -> Vec<f64> {
        self.mat("pos_emb").row(pos).to_vec()
    }

    /// Full causal forward over `x` (embeddings with positions) with a
    /// per-key additive bias on the scaled scores.
    pub fn forward(&self, x: &[Vec<f64>], bias: &[f64]) -> OracleOutput {
        let c = &self.cfg;
        let t = x.len();
        assert_eq!(bias.len(), t);
        let eps = c.layernorm_eps as f64;
        let mut h: Vec<Vec<f64>> = x.to_vec();
        let mut attention = Vec::new();
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let (g1, b1) = (self.vector(&p("ln1.gain")), self.vector(&p("ln1.bias")));
            let (wq, wk, wv, wo) =
                (self.mat(&p("attn.wq")), self.mat(&p("attn.wk")), self.mat(&p("attn.wv")), self.mat(&p("attn.wo")));
            let a: Vec<Vec<f64>> = h.iter().map(|r| norm(r, &g1, &b1, eps)).collect();
            let q: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, &wq)).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, &wk)).collect();
            let v: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, &wv)).collect();
            let mut mixed = vec![vec![0.0; c.d_model]; t];
            let mut layer_att = Vec::new();
            for head in 0..c.n_heads {
                let cols = head * c.d_k..(head + 1) * c.d_k;
                let mut probs = vec![vec![0.0; t]; t];
                for i in 0..t {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let s: f64 = cols.clone().map(|d| q[i][d] * k[j][d]).sum();
                            s / (c.d_k as f64).sqrt() + bias[j]
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..=i {
                        probs[i][j] = (scores[j] - m).exp() / z;
                    }
                    for d in cols.clone() {
                        mixed[i][d] = (0..=i).map(|j| probs[i][j] * v[j][d]).sum();
                    }
                }
                layer_att.push(probs);
            }
            attention.push(layer_att);
            for i in 0..t {
                let o = vec_mat(&mixed[i], &wo);
                h[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
            }
            let (g2, b2) = (self.vector(&p("ln2.gain")), self.vector(&p("ln2.bias")));
            let (w1, bb1, w2, bb2) =
                (self.mat(&p("mlp.w1")), self.vector(&p("mlp.b1")), self.mat(&p("mlp.w2")), self.vector(&p("mlp.b2")));
            for row in h.iter_mut() {
                let a = norm(row, &g2, &b2, eps);
                let f: Vec<f64> = vec_mat(&a, &w1).iter().zip(&bb1).map(|(x, b)| gelu(x + b)).collect();
                let f = vec_mat(&f, &w2);
                row.iter_mut().zip(f.iter().zip(&bb2)).for_each(|(a, (x, b))| *a += x + b);
            }
        }
        let (gf, bf, head) = (self.vector("ln_f.gain"), self.vector("ln_f.bias"), self.mat("head"));
        let logits = h.iter().map(|r| vec_mat(&norm(r, &gf, &bf, eps), &head)).collect();
        OracleOutput { logits, attention }
    }

    /// Logits at the last position only.
    pub fn last_logits(&self, x: &[Vec<f64>], bias: &[f64]) -> Vec<f64> {
        self.forward(x, bias).logits.pop().unwrap()
    }
}

pub struct OracleStep {
    pub cond: Vec<f64>,
    pub uncond: Vec<f64>,
    pub combined: Vec<f64>,
    pub chosen: TokenId,
}

/// Two-branch highlighted decoding, both branches rebuilt from scratch at
/// every step. Text-only context; generated tokens are unmasked.
/// Runs exactly `steps` steps unless `stop_at_eos`.
pub fn oracle_guided(
    oracle: &Oracle,
    prompt: &[TokenId],
    mask: &[bool],
    (alpha, beta, gamma): (f64, f64, f64),
    steps: usize,
    stop_at_eos: bool,
) -> Vec<OracleStep> {
    let mut seq = prompt.to_vec();
    let mut m = mask.to_vec();
    let mut out = Vec::new();
    for _ in 0..steps {
        let mut cx = Vec::new();
        let mut ux = Vec::new();
        let mut cb = Vec::new();
        let mut ub = Vec::new();
        for (i, (&id, &hl)) in seq.iter().zip(&m).enumerate() {
            let f = oracle.token_row(id);
            let pos = oracle.position_row(i);
            let scale = if hl { alpha } else { 1.0 };
            cx.push(f.iter().zip(&pos).map(|(a, p)| a + p).collect::<Vec<_>>());
            ux.push(f.iter().zip(&pos).map(|(a, p)| scale * a + p).collect::<Vec<_>>());
            cb.push(if hl { beta.ln() } else { 0.0 });
            ub.push(if hl { -(beta.ln() + 2.0) } else { 0.0 });
        }
        let cond = log_softmax(&oracle.last_logits(&cx, &cb));
        let uncond = log_softmax(&oracle.last_logits(&ux, &ub));
        let combined: Vec<f64> = cond.iter().zip(&uncond).map(|(c, u)| gamma * c - (gamma - 1.0) * u).collect();
        let chosen = first_argmax(&combined) as TokenId;
        out.push(OracleStep { cond, uncond, combined, chosen });
        if stop_at_eos && chosen == EOS {
            break;
        }
        seq.push(chosen);
        m.push(false);
    }
    out
}

/// Gap between the best and second-best entries.
pub fn margin(v: &[f64]) -> f64 {
    let best = first_argmax(v);
    v.iter().enumerate().filter(|&(i, _)| i != best).map(|(_, x)| v[best] - x).fold(f64::INFINITY, f64::min)
}
