//! Top-level run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::encoding::DisplacementNorm;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::tracking::AssocConfig;
use crate::trainer::{OptimConfig, TmpSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root holding one directory per sequence (`<seq>/img1`, `<seq>/gt/gt.txt`).
    pub data_dir: PathBuf,
    /// Where commands write their outputs.
    pub out_dir: PathBuf,
    /// Model weights for `track`; defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Sequence names to use; empty means every sequence in `data_dir`.
    pub sequences: Vec<String>,
    /// Directory of result files for `eval`; defaults to `<out_dir>/results`.
    pub results_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            sequences: Vec::new(),
            results_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: TmpSchedule,
    pub optim: OptimConfig,
    pub assoc: AssocConfig,
    pub displacement: DisplacementNorm,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.optim.validate()?;
        self.assoc.validate()?;
        self.displacement.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("model.ckpt"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.paths
            .results_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("results"))
    }
}
