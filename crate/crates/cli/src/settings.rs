//! Effective settings: flag, then config file, then built-in default.

use std::path::Path;

use a3r::pipeline::RerankConfig;
use serde::Deserialize;

use crate::CliError;

const KNOWN_KEYS: &[&str] = &[
    "method",
    "pool",
    "tol",
    "max_iter",
    "clamp_nonnegative",
    "k1",
    "k2",
    "lambda",
    "keep",
    "k",
    "workers",
];

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct FileSettings {
    #[serde(flatten)]
    pub rerank: RerankConfig,
    /// Cutoff for evaluation, or output length for `search` and `rerank`.
    pub k: Option<usize>,
    pub workers: Option<usize>,
}

impl FileSettings {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(path))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::io(format!("not a JSON object: {e}")))?;
        let object = value
            .as_object()
            .ok_or_else(|| CliError::io("not a JSON object".into()))?;
        if let Some(key) = object.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(CliError::config(format!(
                "unknown setting {key:?}; known settings are {}",
                KNOWN_KEYS.join(", ")
            )));
        }
        serde_json::from_value(value).map_err(|e| CliError::config(format!("bad setting: {e}")))
    }
}

/// Ranking flags shared by `rerank` and `pipeline`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RerankOverrides {
    pub method: Option<a3r::pipeline::Method>,
    pub pool: Option<usize>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub lambda: Option<f64>,
    pub clamp: bool,
}

impl RerankOverrides {
    pub fn apply(&self, mut cfg: RerankConfig) -> RerankConfig {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(p) = self.pool {
            cfg.pool = p;
        }
        if let Some(k1) = self.k1 {
            cfg.kr.k1 = k1;
        }
        if let Some(k2) = self.k2 {
            cfg.kr.k2 = k2;
        }
        if let Some(l) = self.lambda {
            cfg.kr.lambda = l;
        }
        if self.clamp {
            cfg.adaption.clamp_nonnegative = true;
        }
        cfg
    }
}
