//! Attention activation: additive highlight bias on pre-softmax scores.
//!
//! The conditional branch adds `ln(β)` at highlighted key positions, which
//! multiplies their unnormalised attention weight by `β`. The unconditional
//! branch subtracts `δ = ln(β) + 2` there instead. The bias is indexed by key
//! position and broadcast over every query row and head.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::highlight::HighlightMask;
use crate::numerics::{softmax_in_place, Tensor2D};

/// Which decoding branch a bias is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Normal,
    Unconditional,
}

/// Deactivation strength paired with an activation factor `beta`.
pub fn delta_for(beta: f32) -> f32 {
    libm::logf(beta) + 2.0
}

/// Per-key additive attention bias.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttentionBias(Vec<f32>);

impl AttentionBias {
    pub fn zeros(len: usize) -> Self {
        Self(alloc::vec![0.0; len])
    }

    pub fn from_values(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Appends a zero for a freshly generated position.
    pub fn push_zero(&mut self) {
        self.0.push(0.0);
    }
}

/// `ln(β)·m` for the normal branch, `-(ln(β)+2)·m` for the unconditional one.
pub fn make_bias(mask: &HighlightMask, beta: f32, branch: Branch) -> Result<AttentionBias> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Param(alloc::format!("beta must be positive and finite, got {beta}")));
    }
    let value = match branch {
        Branch::Normal => libm::logf(beta),
        Branch::Unconditional => -delta_for(beta),
    };
    Ok(AttentionBias(mask.bits().iter().map(|&m| if m { value } else { 0.0 }).collect()))
}

/// Row-wise softmax of `scores + bias` over each row's key support.
///
/// `scores` is one head's query×key matrix, already scaled by `1/√d_k`.
/// With `causal`, query row `r` sees keys `0..=keys-queries+r`, which is
/// the layout of a block of new queries appended after cached keys; keys
/// outside the support get probability zero.
pub fn apply_bias(scores: &Tensor2D, bias: Option<&AttentionBias>, causal: bool) -> Result<Tensor2D> {
    let (queries, keys) = scores.shape();
    if let Some(b) = bias {
        if b.len() != keys {
            return Err(shape(alloc::format!("bias of length {} for {keys} keys", b.len())));
        }
    }
    if causal && queries > keys {
        return Err(shape("more causal queries than keys"));
    }
    let mut out = Tensor2D::zeros(queries, keys);
    for r in 0..queries {
        let support = if causal { keys - queries + r + 1 } else { keys };
        let row = &mut out.row_mut(r)[..support];
        row.copy_from_slice(&scores.row(r)[..support]);
        if let Some(b) = bias {
            for (h, k) in row.iter_mut().zip(b.values()) {
                *h += k;
            }
        }
        softmax_in_place(row)?;
    }
    Ok(out)
}
