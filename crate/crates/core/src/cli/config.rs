use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Failure, Format};

/// Values read from `--config`. Every key is optional; unknown keys are an
/// error so typos do not silently fall back to defaults.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub criterion: Option<String>,
    pub weighting: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub shots: Option<usize>,
    pub val_per_class: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub grid: Option<bool>,
    pub grid_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub refine_cache_keys: Option<bool>,
    pub embeddings: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub timing: Option<bool>,
    pub modes: Option<String>,
    pub targets: Option<Vec<String>>,
    pub ten_crop: Option<bool>,
    pub preset: Option<String>,
    pub noise: Option<f64>,
    pub worlds: Option<usize>,
}

impl FileConfig {
    pub(crate) fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = fs::read(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    pub(crate) fn format(&self) -> Result<Option<Format>, Failure> {
        match self.format.as_deref() {
            None => Ok(None),
            Some("json") => Ok(Some(Format::Json)),
            Some("csv") => Ok(Some(Format::Csv)),
            Some(other) => Err(Failure::Usage(format!("config: unknown format `{other}`"))),
        }
    }
}

/// Flag, else config file, else default.
pub(crate) fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
