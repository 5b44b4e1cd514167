//! The shared run configuration read by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::evaluation::{default_seeds, ExperimentConfig};
use crate::heterogeneity::HeterogeneityConfig;
use crate::ingest::{ParseMode, SyntheticDepotSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Input directory of the subcommand (raw logs, features, or run dirs).
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub parse_mode: ParseMode,
    pub dataset: DatasetConfig,
    pub experiment: ExperimentConfig,
    pub heterogeneity: HeterogeneityConfig,
    pub seeds: Vec<u64>,
    pub synthetic: SyntheticDepotSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            out: None,
            parse_mode: ParseMode::default(),
            dataset: DatasetConfig::default(),
            experiment: ExperimentConfig::default(),
            heterogeneity: HeterogeneityConfig::default(),
            seeds: default_seeds(),
            synthetic: SyntheticDepotSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.experiment.validate()?;
        self.heterogeneity.validate()?;
        self.synthetic.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the effective config to `dir/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }

    pub fn require_input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::config("input", "no input directory given (--in)"))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("out", "no output directory given (--out)"))
    }
}
