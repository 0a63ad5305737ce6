//! Run configuration: one TOML file with a section per stage. Relative paths
//! resolve against the run root.

use crate::composition::{BlendConfig, LatentMode};
use crate::error::{Error, Result};
use crate::synthetic::SceneGrammar;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the directory that relative paths resolve against.
pub const RUN_ROOT_ENV: &str = "SEMSYNTH_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub seed: u64,
    pub count: usize,
    pub out_dir: PathBuf,
    pub grammar: SceneGrammar,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { seed: 0, count: 64, out_dir: PathBuf::from("corpus"), grammar: SceneGrammar::with_canvas(64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub corpus: PathBuf,
    /// Runs go to `<runs_dir>/<role name>`.
    pub runs_dir: PathBuf,
    #[serde(flatten)]
    pub params: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            runs_dir: PathBuf::from("runs"),
            params: TrainConfig { batch_size: 4, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub out_dir: PathBuf,
    pub blend: BlendConfig,
    pub latent: LatentMode,
    /// Load averaged generator weights.
    pub use_ema: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("inference"), blend: BlendConfig::default(), latent: LatentMode::Posterior, use_ema: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub infer: InferSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved config next to a command's outputs.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// The run root: `SEMSYNTH_RUN_ROOT` if set, else the current directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// `path` if absolute, else `root/path`.
pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}
