//! Attention capture and interpretability statistics.
//!
//! Maps are square `positions × positions` matrices over the conditional
//! branch; row `r` holds the attention of query position `r`, zero beyond
//! its causal support. For a context of `n` positions the rows that predict
//! generated tokens start at `n - 1`.
//!
//! Band statistics use summed absolute first differences over those rows
//! and the context columns: `G_x` along each row (horizontal), `G_y` down
//! each column (vertical). A vertical band yields `G_x > G_y`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::guidance::DecodeObserver;
use crate::highlight::HighlightMask;
use crate::model::ModelConfig;
use crate::numerics::Tensor2D;
use crate::tokenizer::TokenId;

/// Which layers to record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    All,
    Only(Vec<usize>),
}

/// Records conditional-branch attention during a decode.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    layers: Vec<usize>,
    n_heads: usize,
    /// `[layer slot][head]` → rows, each the probabilities over its support.
    rows: Vec<Vec<Vec<Vec<f32>>>>,
    tokens: Vec<TokenId>,
}

impl AttentionCapture {
    pub fn new(config: &ModelConfig, selection: LayerSelection) -> Self {
        let layers: Vec<usize> = match selection {
            LayerSelection::All => (0..config.n_layers).collect(),
            LayerSelection::Only(mut l) => {
                l.retain(|&x| x < config.n_layers);
                l.sort_unstable();
                l.dedup();
                l
            }
        };
        let rows = layers.iter().map(|_| vec![Vec::new(); config.n_heads]).collect();
        Self { layers, n_heads: config.n_heads, rows, tokens: Vec::new() }
    }

    /// Finalises the capture into square maps.
    pub fn into_snapshot(self, context_len: usize, mask: &HighlightMask, exclude_sink: bool) -> AttentionSnapshot {
        let positions = self.rows.first().and_then(|h| h.first()).map_or(0, Vec::len);
        let maps = self
            .rows
            .into_iter()
            .map(|heads| {
                heads
                    .into_iter()
                    .map(|rows| {
                        let mut m = Tensor2D::zeros(positions, positions);
                        for (r, row) in rows.iter().enumerate() {
                            m.row_mut(r)[..row.len()].copy_from_slice(row);
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        AttentionSnapshot {
            layers: self.layers,
            n_heads: self.n_heads,
            maps,
            context_len,
            exclude_sink,
            mask: HighlightMask::from_bits(mask.bits()[..context_len.min(mask.len())].to_vec()),
            generated: self.tokens,
        }
    }
}

impl DecodeObserver for AttentionCapture {
    fn on_attention(&mut self, layer: usize, head: usize, first_query: usize, probs: &Tensor2D) {
        let Some(slot) = self.layers.iter().position(|&l| l == layer) else {
            return;
        };
        let rows = &mut self.rows[slot][head];
        debug_assert_eq!(rows.len(), first_query);
        let keys = probs.cols();
        for r in 0..probs.rows() {
            let support = keys - probs.rows() + r + 1;
            rows.push(probs.row(r)[..support].to_vec());
        }
    }

    fn on_token(&mut self, id: TokenId) -> ControlFlow<()> {
        self.tokens.push(id);
        ControlFlow::Continue(())
    }
}

/// Captured attention maps of one decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub layers: Vec<usize>,
    pub n_heads: usize,
    /// `maps[layer slot][head]`.
    pub maps: Vec<Vec<Tensor2D>>,
    /// Length of the prompt context; generated positions follow it.
    pub context_len: usize,
    pub exclude_sink: bool,
    /// Highlight mask over the prompt context.
    pub mask: HighlightMask,
    pub generated: Vec<TokenId>,
}

impl AttentionSnapshot {
    pub fn positions(&self) -> usize {
        self.maps.first().and_then(|h| h.first()).map_or(0, Tensor2D::rows)
    }

    /// Head average of one captured layer slot.
    pub fn layer_average(&self, slot: usize) -> Tensor2D {
        average(self.maps[slot].iter())
    }

    /// Average over every captured layer and head.
    pub fn averaged(&self) -> Tensor2D {
        average(self.maps.iter().flatten())
    }

    pub fn band_gap(&self) -> Result<BandGap> {
        band_gap(&self.averaged(), self.context_len, self.exclude_sink)
    }

    pub fn contribution(&self) -> Result<Contribution> {
        contribution(&self.averaged(), &self.mask, self.context_len)
    }
}

fn average<'a>(maps: impl Iterator<Item = &'a Tensor2D>) -> Tensor2D {
    let mut acc: Option<Tensor2D> = None;
    let mut n = 0usize;
    for m in maps {
        n += 1;
        match acc.as_mut() {
            None => acc = Some(m.clone()),
            Some(a) => a.data_mut().iter_mut().zip(m.data()).for_each(|(x, y)| *x += y),
        }
    }
    let mut a = acc.unwrap_or_else(|| Tensor2D::zeros(0, 0));
    if n > 1 {
        let inv = 1.0 / n as f32;
        a.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandGap {
    pub g_x: f32,
    pub g_y: f32,
    /// `g_x / g_y`, absent when `g_y` is zero.
    pub ratio: Option<f32>,
}

/// Summed absolute horizontal and vertical first differences of a block.
pub fn block_gradients(block: &Tensor2D) -> (f32, f32) {
    let (rows, cols) = block.shape();
    let mut gx = 0.0f32;
    let mut gy = 0.0f32;
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                gx += (block.get(r, c + 1) - block.get(r, c)).abs();
            }
            if r + 1 < rows {
                gy += (block.get(r + 1, c) - block.get(r, c)).abs();
            }
        }
    }
    (gx, gy)
}

fn generation_rows(map: &Tensor2D, context_len: usize) -> Result<core::ops::Range<usize>> {
    if map.rows() != map.cols() {
        return Err(shape("attention map must be square"));
    }
    if context_len == 0 || context_len > map.rows() {
        return Err(shape("context length outside the attention map"));
    }
    Ok(context_len - 1..map.rows())
}

/// Band-pattern gradients over the generation rows × context columns.
pub fn band_gap(map: &Tensor2D, context_len: usize, exclude_sink: bool) -> Result<BandGap> {
    let rows = generation_rows(map, context_len)?;
    let first_col = usize::from(exclude_sink);
    if first_col >= context_len {
        return Err(shape("no context columns left after sink exclusion"));
    }
    let cols = context_len - first_col;
    let mut block = Tensor2D::zeros(rows.len(), cols);
    for (i, r) in rows.enumerate() {
        block.row_mut(i).copy_from_slice(&map.row(r)[first_col..context_len]);
    }
    let (g_x, g_y) = block_gradients(&block);
    Ok(BandGap { g_x, g_y, ratio: (g_y > 0.0).then(|| g_x / g_y) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    /// One value per generation row.
    pub per_row: Vec<f32>,
    pub mean: f32,
}

/// Share of each generation row's context attention that lands on
/// highlighted context positions.
pub fn contribution(map: &Tensor2D, mask: &HighlightMask, context_len: usize) -> Result<Contribution> {
    let rows = generation_rows(map, context_len)?;
    if mask.len() < context_len {
        return Err(shape("mask shorter than the context"));
    }
    let bits = &mask.bits()[..context_len];
    let per_row: Vec<f32> = rows
        .map(|r| {
            let row = &map.row(r)[..context_len];
            let total: f32 = row.iter().sum();
            let hit: f32 = row.iter().zip(bits).filter(|(_, &m)| m).map(|(p, _)| p).sum();
            if total > 0.0 {
                (hit / total).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mean = if per_row.is_empty() { 0.0 } else { per_row.iter().sum::<f32>() / per_row.len() as f32 };
    Ok(Contribution { per_row, mean })
}

/// Mean-pools a map to at most `max_dim × max_dim` and renormalises rows.
pub fn downsample_map(map: &Tensor2D, max_dim: usize) -> Tensor2D {
    let (rows, cols) = map.shape();
    let out_r = rows.min(max_dim);
    let out_c = cols.min(max_dim);
    let mut out = Tensor2D::zeros(out_r, out_c);
    for i in 0..out_r {
        let (r0, r1) = (i * rows / out_r, (i + 1) * rows / out_r);
        for j in 0..out_c {
            let (c0, c1) = (j * cols / out_c, (j + 1) * cols / out_c);
            let mut s = 0.0f32;
            for r in r0..r1 {
                s += map.row(r)[c0..c1].iter().sum::<f32>();
            }
            out.set(i, j, s / ((r1 - r0) * (c1 - c0)) as f32);
        }
        let total: f32 = out.row(i).iter().sum();
        if total > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}
