//! Weight and config files.

use std::path::Path;

use highlighter_core::model::{Model, ModelConfig, WeightSet};

use crate::error::{Error, FormatError, Result};
use crate::thw::ThwFile;

/// Reads a model config JSON file.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.into(), source: FormatError::Header(e.to_string()) })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes weights with the config embedded as metadata.
pub fn save_weights(ws: &WeightSet, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let file = ThwFile {
        tensors: ws.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        metadata: Some(serde_json::json!({ "config": cfg })),
    };
    file.write(path)
}

/// Reads weights and checks them against `config`, or against the config
/// embedded in the file when none is given.
pub fn load_weights(path: &Path, config: Option<&ModelConfig>) -> Result<(ModelConfig, WeightSet)> {
    let file = ThwFile::read(path)?;
    let format_err = |source| Error::Format { path: path.into(), source };
    let cfg = match config {
        Some(c) => *c,
        None => {
            let meta = file
                .metadata
                .as_ref()
                .and_then(|m| m.get("config"))
                .ok_or_else(|| format_err(FormatError::Header("no embedded config; pass --config".into())))?;
            serde_json::from_value(meta.clone()).map_err(|e| format_err(FormatError::Header(e.to_string())))?
        }
    };
    let mut ws = WeightSet::new();
    for (name, t) in file.tensors {
        ws.insert(name, t);
    }
    ws.validate(&cfg).map_err(|e| match e {
        highlighter_core::Error::Weights(m) => format_err(FormatError::Tensor {
            tensor: m.split_whitespace().nth(1).unwrap_or("?").to_string(),
            reason: m,
        }),
        other => Error::Engine(other),
    })?;
    Ok((cfg, ws))
}

pub fn load_model(path: &Path, config: Option<&Path>) -> Result<Model> {
    let cfg = config.map(load_config).transpose()?;
    let (cfg, ws) = load_weights(path, cfg.as_ref())?;
    Ok(Model::new(cfg, ws)?)
}
