//! Attention snapshot files and the heatmap view served to the UI.

use std::collections::BTreeMap;
use std::path::Path;

use highlighter_core::highlight::HighlightMask;
use highlighter_core::numerics::Tensor2D;
use highlighter_core::probe::{downsample_map, AttentionSnapshot, BandGap, Contribution};
use highlighter_core::tokenizer::TokenId;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::formats::Bits;
use crate::thw::ThwFile;

/// Largest side of the heatmap matrix.
pub const HEATMAP_MAX_DIM: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    kind: String,
    layers: Vec<usize>,
    n_heads: usize,
    context_len: usize,
    exclude_sink: bool,
    mask: Bits,
    generated: Vec<TokenId>,
}

const KIND: &str = "attention_snapshot";

fn meta(s: &AttentionSnapshot) -> SnapshotMeta {
    SnapshotMeta {
        kind: KIND.into(),
        layers: s.layers.clone(),
        n_heads: s.n_heads,
        context_len: s.context_len,
        exclude_sink: s.exclude_sink,
        mask: Bits(s.mask.bits().to_vec()),
        generated: s.generated.clone(),
    }
}

fn tensor_name(layer: usize, head: usize) -> String {
    format!("layer{layer}.head{head}")
}

/// Snapshot as a THW1 container: one tensor per captured layer and head,
/// `averaged` for the layer/head mean, details in the metadata header.
pub fn snapshot_to_file(s: &AttentionSnapshot) -> ThwFile {
    let mut tensors = BTreeMap::new();
    for (slot, heads) in s.maps.iter().enumerate() {
        for (h, m) in heads.iter().enumerate() {
            tensors.insert(tensor_name(s.layers[slot], h), m.clone());
        }
    }
    tensors.insert("averaged".into(), s.averaged());
    let meta = meta(s);
    ThwFile { tensors, metadata: Some(serde_json::to_value(meta).expect("plain struct")) }
}

pub fn snapshot_from_file(file: &ThwFile) -> Result<AttentionSnapshot, FormatError> {
    let meta: SnapshotMeta = file
        .metadata
        .clone()
        .ok_or_else(|| FormatError::Header("missing snapshot metadata".into()))
        .and_then(|m| serde_json::from_value(m).map_err(|e| FormatError::Header(e.to_string())))?;
    if meta.kind != KIND {
        return Err(FormatError::Header(format!("not an attention snapshot: {}", meta.kind)));
    }
    let mut maps = Vec::with_capacity(meta.layers.len());
    for &l in &meta.layers {
        let mut heads = Vec::with_capacity(meta.n_heads);
        for h in 0..meta.n_heads {
            let name = tensor_name(l, h);
            let t = file
                .tensors
                .get(&name)
                .ok_or_else(|| FormatError::Tensor { tensor: name.clone(), reason: "missing".into() })?;
            heads.push(t.clone());
        }
        maps.push(heads);
    }
    Ok(AttentionSnapshot {
        layers: meta.layers,
        n_heads: meta.n_heads,
        maps,
        context_len: meta.context_len,
        exclude_sink: meta.exclude_sink,
        mask: HighlightMask::from_bits(meta.mask.0),
        generated: meta.generated,
    })
}

/// Snapshot as plain JSON: the metadata fields plus `maps[layer][head]`
/// as nested row arrays.
#[derive(Debug, Serialize, Deserialize)]
struct SnapshotJson {
    #[serde(flatten)]
    meta: SnapshotMeta,
    maps: Vec<Vec<Vec<Vec<f32>>>>,
}

fn to_json(s: &AttentionSnapshot) -> SnapshotJson {
    SnapshotJson {
        meta: meta(s),
        maps: s
            .maps
            .iter()
            .map(|heads| heads.iter().map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect()).collect())
            .collect(),
    }
}

fn from_json(j: SnapshotJson) -> Result<AttentionSnapshot, FormatError> {
    let meta = j.meta;
    if meta.kind != KIND {
        return Err(FormatError::Header(format!("not an attention snapshot: {}", meta.kind)));
    }
    if j.maps.len() != meta.layers.len() {
        return Err(FormatError::Header(format!("{} layers listed, {} maps", meta.layers.len(), j.maps.len())));
    }
    let mut maps = Vec::with_capacity(j.maps.len());
    for (slot, heads) in j.maps.into_iter().enumerate() {
        if heads.len() != meta.n_heads {
            return Err(FormatError::Header(format!(
                "layer slot {slot}: {} heads, expected {}",
                heads.len(),
                meta.n_heads
            )));
        }
        let mut out = Vec::with_capacity(heads.len());
        for (h, rows) in heads.into_iter().enumerate() {
            let t = Tensor2D::from_rows(&rows).map_err(|e| FormatError::Tensor {
                tensor: tensor_name(meta.layers[slot], h),
                reason: e.to_string(),
            })?;
            out.push(t);
        }
        maps.push(out);
    }
    Ok(AttentionSnapshot {
        layers: meta.layers,
        n_heads: meta.n_heads,
        maps,
        context_len: meta.context_len,
        exclude_sink: meta.exclude_sink,
        mask: HighlightMask::from_bits(meta.mask.0),
        generated: meta.generated,
    })
}

/// Writes JSON when `path` ends in `.json`, a THW1 container otherwise.
pub fn write_snapshot(s: &AttentionSnapshot, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let text = serde_json::to_string(&to_json(s))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    } else {
        snapshot_to_file(s).write(path)
    }
}

/// Reads either snapshot encoding, sniffing the THW1 magic.
pub fn read_snapshot(path: &Path) -> Result<AttentionSnapshot> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = if bytes.starts_with(crate::thw::MAGIC) {
        ThwFile::from_bytes(&bytes).and_then(|f| snapshot_from_file(&f))
    } else {
        serde_json::from_slice::<SnapshotJson>(&bytes)
            .map_err(|e| FormatError::Header(e.to_string()))
            .and_then(from_json)
    };
    parsed.map_err(|source| Error::Format { path: path.into(), source })
}

/// Statistics printed by `hl probe --report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub g_x: f32,
    pub g_y: f32,
    pub ratio: Option<f32>,
    pub contribution_mean: f32,
    pub generation_rows: usize,
}

pub fn probe_report(s: &AttentionSnapshot) -> Result<ProbeReport> {
    let BandGap { g_x, g_y, ratio } = s.band_gap()?;
    let c = s.contribution()?;
    Ok(ProbeReport { g_x, g_y, ratio, contribution_mean: c.mean, generation_rows: c.per_row.len() })
}

impl std::fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "G_x: {}", self.g_x)?;
        writeln!(f, "G_y: {}", self.g_y)?;
        match self.ratio {
            Some(r) => writeln!(f, "G_x/G_y: {r}")?,
            None => writeln!(f, "G_x/G_y: n/a")?,
        }
        writeln!(f, "contribution_mean: {}", self.contribution_mean)?;
        write!(f, "generation_rows: {}", self.generation_rows)
    }
}

/// Mean-pooled averaged map plus per-row contribution, for the heatmap endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Positions covered by the full-resolution map.
    pub positions: usize,
    pub context_len: usize,
    pub map: Vec<Vec<f32>>,
    pub contribution: Contribution,
    pub band_gap: BandGap,
    /// Highlight mask over the prompt context.
    pub mask: Bits,
}

pub fn heatmap(s: &AttentionSnapshot) -> Result<Heatmap> {
    let avg = s.averaged();
    let small: Tensor2D = downsample_map(&avg, HEATMAP_MAX_DIM);
    Ok(Heatmap {
        rows: small.rows(),
        cols: small.cols(),
        positions: avg.rows(),
        context_len: s.context_len,
        map: (0..small.rows()).map(|r| small.row(r).to_vec()).collect(),
        contribution: s.contribution()?,
        band_gap: s.band_gap()?,
        mask: Bits(s.mask.bits().to_vec()),
    })
}
