//! Byte-level tokenizer with offset bookkeeping.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const VOCAB_SIZE: usize = 260;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
/// Placeholder id occupying visual-token positions.
pub const IMG: TokenId = 258;
pub const PAD: TokenId = 259;

/// Byte range `[start, end)` of the source text covered by one token.
pub type Offset = (usize, usize);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<Offset>,
}

/// Token range `[token_start, token_end)` together with the byte range it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl TokenSpan {
    /// Moves the token range by `by` positions, e.g. past a BOS prefix.
    pub fn shifted(self, by: usize) -> Self {
        Self { token_start: self.token_start + by, token_end: self.token_end + by, ..self }
    }
}

/// One token per byte plus four specials.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Encoding {
        let ids = text.bytes().map(TokenId::from).collect();
        let offsets = (0..text.len()).map(|i| (i, i + 1)).collect();
        Encoding { ids, offsets }
    }

    /// Raw bytes of the non-special tokens.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }

    /// Lossy UTF-8 decode; special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Text of a single token, for streaming; specials render as their names.
    pub fn token_text(&self, id: TokenId) -> String {
        match id {
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            IMG => "<img>".into(),
            PAD => "<pad>".into(),
            b => String::from_utf8_lossy(&[b as u8]).into_owned(),
        }
    }
}

/// Smallest token range whose byte coverage encloses `[char_start, char_end)`.
///
/// Offsets must be monotone and contiguous. A selection that cuts through a
/// token is widened outward to that token's boundary.
pub fn align_span(offsets: &[Offset], char_start: usize, char_end: usize) -> Result<TokenSpan> {
    let len = offsets.last().map_or(0, |o| o.1);
    if char_start >= char_end || char_end > len {
        return Err(Error::Bounds { start: char_start, end: char_end, len });
    }
    // first token ending after char_start
    let token_start = offsets.partition_point(|o| o.1 <= char_start);
    // first token starting at or after char_end
    let token_end = offsets.partition_point(|o| o.0 < char_end);
    Ok(TokenSpan { token_start, token_end, char_start: offsets[token_start].0, char_end: offsets[token_end - 1].1 })
}
