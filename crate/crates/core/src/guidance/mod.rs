//! Two-branch highlighted decoding.
//!
//! The conditional branch sees the context as is, with `ln(β)` attention
//! activation on highlighted positions. The unconditional branch sees the
//! highlighted token embeddings scaled by `α` and a `-δ` deactivation bias.
//! Each step combines the two next-token distributions as
//! `γ·cond − (γ−1)·uncond` and picks the argmax.

mod conversation;

pub use conversation::{Conversation, Round};

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::ControlFlow;
use serde::{Deserialize, Serialize};

use crate::activation::{delta_for, make_bias, AttentionBias, Branch};
use crate::context::{Context, SegmentKind, VisionMapping};
use crate::error::{shape, Error, Result};
use crate::highlight::{HighlightMask, Highlights};
use crate::model::{AttentionHook, KVCache, Model};
use crate::numerics::{argmax, log_softmax_row, softmax_row, top_k, LogitVector, Tensor2D};
use crate::tokenizer::{ByteTokenizer, TokenId, EOS};

/// Number of candidates recorded per branch in step diagnostics.
pub const DIAGNOSTIC_TOP_K: usize = 5;

/// Map applied to each branch's logits before they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rescale {
    /// Log-probabilities; used for generation.
    #[default]
    LogSoftmax,
    /// Probabilities; used when scoring a single answer token.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Embedding scale for highlighted tokens in the unconditional branch.
    pub alpha: f32,
    /// Self-attention activation factor.
    pub beta: f32,
    /// Query-transformer cross-attention activation factor.
    pub beta_qformer: f32,
    /// Guidance strength.
    pub gamma: f32,
    pub max_new_tokens: usize,
    pub rescale: Rescale,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 2.0,
            beta_qformer: 20.0,
            gamma: 1.3,
            max_new_tokens: 32,
            rescale: Rescale::LogSoftmax,
        }
    }
}

impl GuidanceConfig {
    /// Deactivation strength `ln(β) + 2`.
    pub fn delta(&self) -> f32 {
        delta_for(self.beta)
    }

    /// Settings under which guidance and activation are both inert.
    pub fn neutral(max_new_tokens: usize) -> Self {
        Self { alpha: 1.0, beta: 1.0, beta_qformer: 1.0, gamma: 1.0, max_new_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(alloc::format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(alloc::format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.beta_qformer > 0.0 && self.beta_qformer.is_finite()) {
            return bad(alloc::format!("beta_qformer must be > 0, got {}", self.beta_qformer));
        }
        if !self.gamma.is_finite() {
            return bad(alloc::format!("gamma must be finite, got {}", self.gamma));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        Ok(())
    }
}

/// `s̄_i = (α−1)·m_i·f(x_i) + f(x_i)` over token embeddings (no positions).
pub fn build_uncond(token_embeddings: &Tensor2D, mask: &HighlightMask, alpha: f32) -> Result<Tensor2D> {
    if token_embeddings.rows() != mask.len() {
        return Err(shape(alloc::format!("{} embeddings for a mask of {}", token_embeddings.rows(), mask.len())));
    }
    let mut out = token_embeddings.clone();
    for (r, &m) in mask.bits().iter().enumerate() {
        if m {
            for v in out.row_mut(r) {
                *v += (alpha - 1.0) * *v;
            }
        }
    }
    Ok(out)
}

/// Guided scores `γ·c − (γ−1)·u` after rescaling both branches.
///
/// Evaluated as `c + (γ−1)·(c − u)`, which is exactly `c` when `γ = 1`
/// or when both branches agree.
pub fn combine_logits(cond: &[f32], uncond: &[f32], gamma: f32, rescale: Rescale) -> Result<LogitVector> {
    if cond.len() != uncond.len() {
        return Err(shape(alloc::format!("cond of {} logits, uncond of {}", cond.len(), uncond.len())));
    }
    let (c, u) = match rescale {
        Rescale::LogSoftmax => (log_softmax_row(cond)?, log_softmax_row(uncond)?),
        Rescale::Softmax => (softmax_row(cond)?, softmax_row(uncond)?),
    };
    let g = gamma - 1.0;
    Ok(c.iter().zip(&u).map(|(c, u)| c + g * (c - u)).collect())
}

/// Callbacks invoked while decoding.
pub trait DecodeObserver {
    /// Attention probabilities of the conditional branch.
    fn on_attention(&mut self, _layer: usize, _head: usize, _first_query: usize, _probs: &Tensor2D) {}

    /// A token was chosen. Returning `Break` stops generation.
    fn on_token(&mut self, _id: TokenId) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

impl DecodeObserver for () {}

struct HookAdapter<'a>(&'a mut dyn DecodeObserver);

impl AttentionHook for HookAdapter<'_> {
    fn on_attention(&mut self, layer: usize, head: usize, first_query: usize, probs: &Tensor2D) {
        self.0.on_attention(layer, head, first_query, probs);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub id: TokenId,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub chosen: TokenId,
    pub top_cond: Vec<ScoredToken>,
    pub top_uncond: Vec<ScoredToken>,
    pub top_combined: Vec<ScoredToken>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Eos,
    Length,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub params: GuidanceConfig,
    pub stop: StopReason,
}

/// Branch outputs for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits {
    pub cond: LogitVector,
    pub uncond: LogitVector,
    pub combined: LogitVector,
}

fn scored(v: &[f32]) -> Vec<ScoredToken> {
    top_k(v, DIAGNOSTIC_TOP_K).into_iter().map(|(i, value)| ScoredToken { id: i as TokenId, value }).collect()
}

/// Token embeddings (without positions) of both branches.
///
/// Text positions use the embedding table. Direct-mapped images use the
/// patch projection. Query-mapped images use the query transformer, with
/// patch activation in the conditional branch only. The unconditional
/// embeddings are then rescaled by `α` wherever the mask is set.
pub fn branch_token_embeddings(
    model: &Model,
    ctx: &Context,
    highlights: &Highlights,
    cfg: &GuidanceConfig,
) -> Result<(Tensor2D, Tensor2D)> {
    if highlights.mask.len() != ctx.len() {
        return Err(shape(alloc::format!("mask of {} bits for a context of {}", highlights.mask.len(), ctx.len())));
    }
    let mut cond = model.token_embeddings(ctx.tokens())?;
    let mut uncond = cond.clone();
    if let Some(image) = ctx.image() {
        let seg = ctx
            .layout()
            .segments()
            .iter()
            .find(|s| matches!(s.kind, SegmentKind::Image { .. }))
            .ok_or_else(|| shape("image without a layout segment"))?;
        let (c_img, u_img) = match image.mapping {
            VisionMapping::Direct => {
                let p = model.project_patches(&image.features)?;
                (p.clone(), p)
            }
            VisionMapping::QFormer => {
                let plain = model.qformer_forward(&image.features, None, 1.0)?.embeddings;
                let active = match &highlights.patch_mask {
                    Some(m) => model.qformer_forward(&image.features, Some(m), cfg.beta_qformer)?.embeddings,
                    None => plain.clone(),
                };
                (active, plain)
            }
        };
        if c_img.rows() != seg.len {
            return Err(shape("image embeddings do not fill the image segment"));
        }
        for r in 0..seg.len {
            cond.row_mut(seg.start + r).copy_from_slice(c_img.row(r));
            uncond.row_mut(seg.start + r).copy_from_slice(u_img.row(r));
        }
    }
    let uncond = build_uncond(&uncond, &highlights.mask, cfg.alpha)?;
    Ok((cond, uncond))
}

/// State carried between decoding steps.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub cond_cache: KVCache,
    pub uncond_cache: KVCache,
    pub mask: HighlightMask,
    pub generated: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    cond_bias: AttentionBias,
    uncond_bias: AttentionBias,
}

impl DecodeState {
    /// Current context length `η`.
    pub fn position(&self) -> usize {
        self.cond_cache.len()
    }
}

/// Incremental two-branch decoder over a shared model.
pub struct GuidedDecoder<'m> {
    model: &'m Model,
    cfg: GuidanceConfig,
    state: DecodeState,
}

impl<'m> GuidedDecoder<'m> {
    /// Runs both branches over the whole context and returns the first
    /// step's logits.
    pub fn prefill(
        model: &'m Model,
        ctx: &Context,
        highlights: &Highlights,
        cfg: GuidanceConfig,
        observer: &mut dyn DecodeObserver,
    ) -> Result<(Self, StepLogits)> {
        cfg.validate()?;
        highlights.mask.check_sink()?;
        if ctx.is_empty() {
            return Err(shape("empty context"));
        }
        let max_seq = model.config().max_seq;
        let needed = ctx.len() + cfg.max_new_tokens;
        if needed > max_seq {
            return Err(Error::Capacity { needed, max_seq });
        }
        let (mut cond_x, mut uncond_x) = branch_token_embeddings(model, ctx, highlights, &cfg)?;
        model.add_positions(&mut cond_x, 0)?;
        model.add_positions(&mut uncond_x, 0)?;
        let mut state = DecodeState {
            cond_cache: model.new_cache(),
            uncond_cache: model.new_cache(),
            mask: highlights.mask.clone(),
            generated: Vec::new(),
            steps: Vec::new(),
            cond_bias: make_bias(&highlights.mask, cfg.beta, Branch::Normal)?,
            uncond_bias: make_bias(&highlights.mask, cfg.beta, Branch::Unconditional)?,
        };
        let logits = Self::run(model, &cfg, &mut state, &cond_x, &uncond_x, observer)?;
        Ok((Self { model, cfg, state }, logits))
    }

    fn run(
        model: &Model,
        cfg: &GuidanceConfig,
        state: &mut DecodeState,
        cond_x: &Tensor2D,
        uncond_x: &Tensor2D,
        observer: &mut dyn DecodeObserver,
    ) -> Result<StepLogits> {
        let mut hook = HookAdapter(observer);
        let cond = model.forward_step(&mut state.cond_cache, cond_x, Some(&state.cond_bias), Some(&mut hook))?;
        let uncond = model.forward_step(&mut state.uncond_cache, uncond_x, Some(&state.uncond_bias), None)?;
        let combined = combine_logits(&cond, &uncond, cfg.gamma, cfg.rescale)?;
        Ok(StepLogits { cond, uncond, combined })
    }

    /// Feeds a generated token to both branches with mask bit 0 and
    /// identical embeddings.
    pub fn advance(&mut self, token: TokenId, observer: &mut dyn DecodeObserver) -> Result<StepLogits> {
        let pos = self.state.position();
        let mut x = self.model.token_embeddings(&[token])?;
        self.model.add_positions(&mut x, pos)?;
        self.state.mask.push_generated();
        self.state.cond_bias.push_zero();
        self.state.uncond_bias.push_zero();
        Self::run(self.model, &self.cfg, &mut self.state, &x, &x, observer)
    }

    pub fn state(&self) -> &DecodeState {
        &self.state
    }

    pub fn into_state(self) -> DecodeState {
        self.state
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.cfg
    }
}

/// Greedy highlighted generation until `</s>` or the token budget.
pub fn decode(model: &Model, ctx: &Context, highlights: &Highlights, cfg: GuidanceConfig) -> Result<GenerationResult> {
    decode_observed(model, ctx, highlights, cfg, &mut ())
}

pub fn decode_observed(
    model: &Model,
    ctx: &Context,
    highlights: &Highlights,
    cfg: GuidanceConfig,
    observer: &mut dyn DecodeObserver,
) -> Result<GenerationResult> {
    let (mut dec, mut logits) = GuidedDecoder::prefill(model, ctx, highlights, cfg, observer)?;
    let stop = loop {
        let chosen = argmax(&logits.combined).expect("non-empty vocabulary") as TokenId;
        dec.state.generated.push(chosen);
        dec.state.steps.push(StepRecord {
            chosen,
            top_cond: scored(&logits.cond),
            top_uncond: scored(&logits.uncond),
            top_combined: scored(&logits.combined),
        });
        if observer.on_token(chosen).is_break() {
            break StopReason::Cancelled;
        }
        if chosen == EOS {
            break StopReason::Eos;
        }
        if dec.state.generated.len() >= cfg.max_new_tokens {
            break StopReason::Length;
        }
        logits = dec.advance(chosen, observer)?;
    };
    let state = dec.into_state();
    Ok(GenerationResult {
        text: ByteTokenizer.decode(&state.generated),
        tokens: state.generated,
        steps: state.steps,
        params: cfg,
        stop,
    })
}

/// Plain single-branch greedy decoding over log-probabilities.
///
/// Images are embedded without any activation.
pub fn vanilla_decode(
    model: &Model,
    ctx: &Context,
    max_new_tokens: usize,
    observer: &mut dyn DecodeObserver,
) -> Result<GenerationResult> {
    let cfg = GuidanceConfig::neutral(max_new_tokens);
    cfg.validate()?;
    let max_seq = model.config().max_seq;
    let needed = ctx.len() + max_new_tokens;
    if needed > max_seq {
        return Err(Error::Capacity { needed, max_seq });
    }
    let (mut x, _) = branch_token_embeddings(model, ctx, &Highlights::none(ctx.len()), &cfg)?;
    model.add_positions(&mut x, 0)?;
    let mut cache = model.new_cache();
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut logits = model.forward_step(&mut cache, &x, None, Some(&mut HookAdapter(observer)))?;
    let stop = loop {
        let scores = log_softmax_row(&logits)?;
        let chosen = argmax(&scores).expect("non-empty vocabulary") as TokenId;
        tokens.push(chosen);
        steps.push(StepRecord {
            chosen,
            top_cond: scored(&logits),
            top_uncond: Vec::new(),
            top_combined: scored(&scores),
        });
        if observer.on_token(chosen).is_break() {
            break StopReason::Cancelled;
        }
        if chosen == EOS {
            break StopReason::Eos;
        }
        if tokens.len() >= max_new_tokens {
            break StopReason::Length;
        }
        let mut x = model.token_embeddings(&[chosen])?;
        model.add_positions(&mut x, cache.len())?;
        logits = model.forward_step(&mut cache, &x, None, Some(&mut HookAdapter(observer)))?;
    };
    Ok(GenerationResult { text: ByteTokenizer.decode(&tokens), tokens, steps, params: cfg, stop })
}
