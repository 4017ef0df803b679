//! Token-level highlight masks.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::context::{ContextLayout, SegmentKind, VisionMapping};
use crate::error::{shape, Error, Result};
use crate::tokenizer::TokenSpan;

/// Binary mask aligned 1:1 with the context sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HighlightMask(Vec<bool>);

impl HighlightMask {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Sets every position covered by at least one span.
    ///
    /// Position 0 holds the attention sink and is rejected.
    pub fn from_spans(context_len: usize, spans: &[TokenSpan]) -> Result<Self> {
        let mut bits = vec![false; context_len];
        for s in spans {
            if s.token_start >= s.token_end || s.token_end > context_len {
                return Err(Error::Bounds { start: s.token_start, end: s.token_end, len: context_len });
            }
            if s.token_start == 0 {
                return Err(Error::SinkToken);
            }
            bits[s.token_start..s.token_end].iter_mut().for_each(|b| *b = true);
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    /// Extends the mask for a generated token, which is never highlighted.
    pub fn push_generated(&mut self) {
        self.0.push(false);
    }

    /// Extends with explicit bits, e.g. for a new conversation turn.
    pub fn extend_bits(&mut self, bits: &[bool]) {
        self.0.extend_from_slice(bits);
    }

    pub fn check_sink(&self) -> Result<()> {
        if self.0.first().copied().unwrap_or(false) {
            return Err(Error::SinkToken);
        }
        Ok(())
    }

    pub fn union(&self, other: &HighlightMask) -> Result<HighlightMask> {
        if self.len() != other.len() {
            return Err(shape("mask union of different lengths"));
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| *a || *b).collect()))
    }

    /// `"0110"`-style rendering.
    pub fn to_bit_string(&self) -> alloc::string::String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Context mask plus the patch-level mask routed to the query transformer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Highlights {
    pub mask: HighlightMask,
    pub patch_mask: Option<Vec<bool>>,
}

impl Highlights {
    /// No highlighting over a context of `len` positions.
    pub fn none(len: usize) -> Self {
        Self { mask: HighlightMask::zeros(len), patch_mask: None }
    }

    /// Text spans (in context positions) spliced with an optional patch mask.
    pub fn for_context(layout: &ContextLayout, spans: &[TokenSpan], patch_mask: Option<Vec<bool>>) -> Result<Self> {
        let has_image = layout.segments().iter().any(|s| matches!(s.kind, SegmentKind::Image { .. }));
        if patch_mask.is_some() && !has_image {
            return Err(Error::Param("patch mask given for a context without an image".into()));
        }
        let text = HighlightMask::from_spans(layout.len(), spans)?;
        let mask = splice(&text, patch_mask.as_deref(), layout)?;
        Ok(Self { mask, patch_mask })
    }
}

/// User selection over the image, in pixel coordinates of the original image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchRegion {
    /// Half-open rectangle `[x, x+width) × [y, y+height)`.
    Rect { x: usize, y: usize, width: usize, height: usize },
    /// Row-major per-pixel selection.
    Bitmap { width: usize, height: usize, bits: Vec<bool> },
}

/// Rule deciding when a patch counts as selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoverageRule {
    /// At least this fraction of the patch's pixels are selected.
    Fraction(f32),
    /// Any selected pixel inside the patch.
    AnyOverlap,
}

impl Default for CoverageRule {
    fn default() -> Self {
        CoverageRule::Fraction(0.5)
    }
}

/// Pixel interval `[lo, hi)` of patch cell `i` along an axis of `extent` pixels.
fn cell(i: usize, extent: usize, grid: usize) -> (usize, usize) {
    (i * extent / grid, (i + 1) * extent / grid)
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

/// Downsamples a pixel region to a row-major `grid × grid` patch mask.
pub fn downsample_region(
    region: &PatchRegion,
    image_dims: (usize, usize),
    grid: usize,
    rule: CoverageRule,
) -> Result<Vec<bool>> {
    let (w, h) = image_dims;
    if grid == 0 || w < grid || h < grid {
        return Err(shape(alloc::format!("image {w}x{h} cannot host a {grid}x{grid} grid")));
    }
    if let PatchRegion::Bitmap { width, height, bits } = region {
        if (*width, *height) != (w, h) || bits.len() != w * h {
            return Err(shape("bitmap region does not match image dimensions"));
        }
    }
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        let ys = cell(gy, h, grid);
        for gx in 0..grid {
            let xs = cell(gx, w, grid);
            let area = (ys.1 - ys.0) * (xs.1 - xs.0);
            let covered = match region {
                PatchRegion::Rect { x, y, width, height } => {
                    overlap(xs, (*x, x + width)) * overlap(ys, (*y, y + height))
                }
                PatchRegion::Bitmap { bits, .. } => {
                    (ys.0..ys.1).map(|py| bits[py * w + xs.0..py * w + xs.1].iter().filter(|&&b| b).count()).sum()
                }
            };
            let on = match rule {
                CoverageRule::Fraction(t) => covered > 0 && covered as f32 >= t * area as f32,
                CoverageRule::AnyOverlap => covered > 0,
            };
            out.push(on);
        }
    }
    if !out.iter().any(|&b| b) {
        return Err(Error::EmptySelection);
    }
    Ok(out)
}

/// Merges a patch mask into a context mask.
///
/// Direct-mapped images take the patch bits position by position. For
/// query-mapped images every query position is set when any patch is
/// selected; the patch bits themselves drive the query transformer.
pub fn splice(text_mask: &HighlightMask, patch_mask: Option<&[bool]>, layout: &ContextLayout) -> Result<HighlightMask> {
    if text_mask.len() != layout.len() {
        return Err(shape(alloc::format!("mask of length {} for context of {}", text_mask.len(), layout.len())));
    }
    let mut bits = text_mask.0.clone();
    if let Some(patches) = patch_mask {
        for seg in layout.segments() {
            let SegmentKind::Image { mapping, patches: n_patches } = seg.kind else {
                continue;
            };
            if patches.len() != n_patches {
                return Err(shape(alloc::format!("patch mask of {} bits for {n_patches} patches", patches.len())));
            }
            let target = &mut bits[seg.start..seg.start + seg.len];
            match mapping {
                VisionMapping::Direct => {
                    for (b, &p) in target.iter_mut().zip(patches) {
                        *b |= p;
                    }
                }
                VisionMapping::QFormer => {
                    if patches.iter().any(|&p| p) {
                        target.iter_mut().for_each(|b| *b = true);
                    }
                }
            }
        }
    }
    let out = HighlightMask(bits);
    out.check_sink()?;
    Ok(out)
}
