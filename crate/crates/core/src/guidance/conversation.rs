//! Multi-round conversations.
//!
//! Every round rebuilds the whole conversation as one context and decodes
//! it from empty caches, so the highlight mask can change between rounds.

use alloc::string::String;
use alloc::vec::Vec;

use super::{decode_observed, DecodeObserver, GenerationResult, GuidanceConfig};
use crate::context::{Context, ContextBuilder, ImageInput, VisionMapping};
use crate::error::Result;
use crate::highlight::Highlights;
use crate::model::Model;
use crate::tokenizer::{TokenId, TokenSpan, EOS};

/// Text inserted between a model reply and the next user turn.
pub const TURN_SEPARATOR: &str = "\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub user_text: String,
    /// Byte ranges of `user_text` highlighted in this round.
    pub spans: Vec<(usize, usize)>,
    /// Generated tokens without the closing `</s>`.
    pub reply: Vec<TokenId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conversation {
    image: Option<ImageInput>,
    patch_mask: Option<Vec<bool>>,
    rounds: Vec<Round>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_image(image: ImageInput) -> Self {
        Self { image: Some(image), ..Self::default() }
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    /// Replaces the patch selection used by subsequent rounds.
    pub fn set_patch_mask(&mut self, mask: Option<Vec<bool>>) {
        self.patch_mask = mask;
    }

    pub fn patch_mask(&self) -> Option<&[bool]> {
        self.patch_mask.as_deref()
    }

    /// Context and highlights for a new user turn appended to the history.
    ///
    /// `spans` are byte ranges of `user_text`. With `keep_previous` the
    /// spans of earlier rounds stay highlighted.
    pub fn prepare(
        &self,
        model: &Model,
        user_text: &str,
        spans: &[(usize, usize)],
        keep_previous: bool,
    ) -> Result<(Context, Highlights)> {
        let mut b = ContextBuilder::new();
        if let Some(img) = &self.image {
            let positions = match img.mapping {
                VisionMapping::Direct => img.features.rows(),
                VisionMapping::QFormer => model.config().n_queries,
            };
            b.image(img.clone(), positions)?;
        }
        let mut user_segments = Vec::with_capacity(self.rounds.len() + 1);
        for (i, round) in self.rounds.iter().enumerate() {
            if i > 0 {
                b.text(TURN_SEPARATOR);
            }
            user_segments.push(b.text(&round.user_text));
            b.tokens(&round.reply);
        }
        if !self.rounds.is_empty() {
            b.text(TURN_SEPARATOR);
        }
        let current = b.text(user_text);
        let ctx = b.build();

        let mut token_spans: Vec<TokenSpan> = Vec::new();
        if keep_previous {
            for (round, &seg) in self.rounds.iter().zip(&user_segments) {
                for &(a, z) in &round.spans {
                    token_spans.push(ctx.text_span(seg, a, z)?);
                }
            }
        }
        for &(a, z) in spans {
            token_spans.push(ctx.text_span(current, a, z)?);
        }
        let highlights = Highlights::for_context(ctx.layout(), &token_spans, self.patch_mask.clone())?;
        Ok((ctx, highlights))
    }

    /// Runs one round from fresh caches and appends it to the history.
    pub fn continue_round(
        &mut self,
        model: &Model,
        user_text: &str,
        spans: &[(usize, usize)],
        cfg: GuidanceConfig,
        keep_previous: bool,
        observer: &mut dyn DecodeObserver,
    ) -> Result<GenerationResult> {
        let (ctx, highlights) = self.prepare(model, user_text, spans, keep_previous)?;
        let result = decode_observed(model, &ctx, &highlights, cfg, observer)?;
        self.record_round(user_text, spans, &result);
        Ok(result)
    }

    /// Appends a finished round, e.g. one decoded from [`Conversation::prepare`].
    pub fn record_round(&mut self, user_text: &str, spans: &[(usize, usize)], result: &GenerationResult) {
        let mut reply = result.tokens.clone();
        if reply.last() == Some(&EOS) {
            reply.pop();
        }
        self.rounds.push(Round { user_text: user_text.into(), spans: spans.to_vec(), reply });
    }
}
