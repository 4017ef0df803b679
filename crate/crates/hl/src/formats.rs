//! JSON documents exchanged by the CLI and the service.

use highlighter_core::context::{ImageInput, VisionMapping};
use highlighter_core::numerics::Tensor2D;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Byte range of the prompt text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub char_start: usize,
    pub char_end: usize,
}

/// Binary mask written as an array of 0/1 integers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bits(pub Vec<bool>);

impl Serialize for Bits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&b| u8::from(b)))
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask bit must be 0 or 1, got {other}"))),
            })
            .collect::<std::result::Result<_, _>>()
            .map(Bits)
    }
}

/// `{"text_spans": [...], "patch_mask": [0/1 × P²]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HighlightSpec {
    #[serde(default)]
    pub text_spans: Vec<TextSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_mask: Option<Bits>,
}

/// `{"grid": P, "features": [[...], ...]}`, one row per patch, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchesFile {
    pub grid: usize,
    pub features: Vec<Vec<f32>>,
}

impl PatchesFile {
    pub fn into_image(self, mapping: VisionMapping) -> Result<ImageInput> {
        if self.features.len() != self.grid * self.grid {
            return Err(Error::Usage(format!(
                "{} patch rows for a {}x{} grid",
                self.features.len(),
                self.grid,
                self.grid
            )));
        }
        let features = Tensor2D::from_rows(&self.features)?;
        Ok(ImageInput { grid: self.grid, features, mapping })
    }
}

/// `{"bits": [0/1 × P²]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub bits: Bits,
}
