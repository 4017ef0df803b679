//! Layout of a mixed text + visual context.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::numerics::Tensor2D;
use crate::tokenizer::{align_span, ByteTokenizer, Offset, TokenId, TokenSpan, BOS, IMG};

/// How image patches enter the language model's context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisionMapping {
    /// One context position per patch, in row-major patch order.
    Direct,
    /// Learned queries cross-attend to the patches; one position per query.
    QFormer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Bos,
    Text,
    Image { mapping: VisionMapping, patches: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ContextLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn push(&mut self, kind: SegmentKind, len: usize) {
        self.segments.push(Segment { kind, start: self.len, len });
        self.len += len;
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder(ContextLayout);

impl LayoutBuilder {
    pub fn bos(mut self) -> Self {
        self.0.push(SegmentKind::Bos, 1);
        self
    }

    pub fn text(mut self, len: usize) -> Self {
        self.0.push(SegmentKind::Text, len);
        self
    }

    pub fn direct_image(mut self, patches: usize) -> Self {
        self.0.push(SegmentKind::Image { mapping: VisionMapping::Direct, patches }, patches);
        self
    }

    pub fn query_image(mut self, patches: usize, queries: usize) -> Self {
        self.0.push(SegmentKind::Image { mapping: VisionMapping::QFormer, patches }, queries);
        self
    }

    pub fn build(self) -> ContextLayout {
        self.0
    }
}

/// Patch features supplied by the caller, `n_patches × patch_dim`, row-major over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub grid: usize,
    pub features: Tensor2D,
    pub mapping: VisionMapping,
}

#[derive(Debug, Clone, PartialEq)]
struct TextSegment {
    start: usize,
    offsets: Vec<Offset>,
}

/// A tokenised context ready for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    tokens: Vec<TokenId>,
    layout: ContextLayout,
    image: Option<ImageInput>,
    texts: Vec<TextSegment>,
}

impl Context {
    /// `<s>` followed by `text`.
    pub fn from_text(text: &str) -> Self {
        let mut b = ContextBuilder::new();
        b.text(text);
        b.build()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn layout(&self) -> &ContextLayout {
        &self.layout
    }

    pub fn image(&self) -> Option<&ImageInput> {
        self.image.as_ref()
    }

    pub fn text_count(&self) -> usize {
        self.texts.len()
    }

    /// Aligns a byte range of the `index`-th text segment to context positions.
    pub fn text_span(&self, index: usize, char_start: usize, char_end: usize) -> Result<TokenSpan> {
        let seg = self.texts.get(index).ok_or_else(|| shape(alloc::format!("no text segment {index}")))?;
        Ok(align_span(&seg.offsets, char_start, char_end)?.shifted(seg.start))
    }

    /// Byte offsets of the `index`-th text segment's tokens.
    pub fn text_offsets(&self, index: usize) -> Option<&[Offset]> {
        self.texts.get(index).map(|t| t.offsets.as_slice())
    }
}

/// Incrementally assembles a [`Context`]; always starts with `<s>`.
#[derive(Debug)]
pub struct ContextBuilder {
    ctx: Context,
}

impl Default for ContextBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ContextBuilder {
    pub fn new() -> Self {
        let mut layout = ContextLayout::default();
        layout.push(SegmentKind::Bos, 1);
        Self { ctx: Context { tokens: alloc::vec![BOS], layout, image: None, texts: Vec::new() } }
    }

    /// Adds the image; `positions` is the patch count for direct mapping
    /// and the query count for query mapping.
    pub fn image(&mut self, image: ImageInput, positions: usize) -> Result<&mut Self> {
        if self.ctx.image.is_some() {
            return Err(Error::Param("only one image per context".into()));
        }
        let patches = image.features.rows();
        if patches != image.grid * image.grid {
            return Err(shape(alloc::format!("{patches} patch features for a {0}x{0} grid", image.grid)));
        }
        if image.mapping == VisionMapping::Direct && positions != patches {
            return Err(shape("direct mapping needs one position per patch"));
        }
        self.ctx.layout.push(SegmentKind::Image { mapping: image.mapping, patches }, positions);
        self.ctx.tokens.extend(core::iter::repeat_n(IMG, positions));
        self.ctx.image = Some(image);
        Ok(self)
    }

    /// Adds a text segment and returns its index.
    pub fn text(&mut self, text: &str) -> usize {
        let enc = ByteTokenizer.encode(text);
        self.push_tokens(enc.ids, enc.offsets)
    }

    /// Adds already generated tokens as a text segment (e.g. a model reply).
    pub fn tokens(&mut self, ids: &[TokenId]) -> usize {
        let offsets = (0..ids.len()).map(|i| (i, i + 1)).collect();
        self.push_tokens(ids.to_vec(), offsets)
    }

    fn push_tokens(&mut self, ids: Vec<TokenId>, offsets: Vec<Offset>) -> usize {
        let start = self.ctx.tokens.len();
        self.ctx.layout.push(SegmentKind::Text, ids.len());
        self.ctx.tokens.extend(ids);
        self.ctx.texts.push(TextSegment { start, offsets });
        self.ctx.texts.len() - 1
    }

    pub fn build(self) -> Context {
        self.ctx
    }
}

/// Readable rendering of a context for logs.
pub fn describe(ctx: &Context) -> String {
    let mut s = String::new();
    for seg in ctx.layout.segments() {
        let part = match seg.kind {
            SegmentKind::Bos => "<s>".into(),
            SegmentKind::Text => ByteTokenizer.decode(&ctx.tokens[seg.start..seg.start + seg.len]),
            SegmentKind::Image { .. } => alloc::format!("<img x{}>", seg.len),
        };
        s.push_str(&part);
    }
    s
}
