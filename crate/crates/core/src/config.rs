//! Run configuration: one TOML file drives every subcommand. The resolved
//! config is echoed verbatim into the output directory so runs self-describe.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evalkit::SweepGrid;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root seed; every random stream in a run derives from it.
    pub seed: u64,
    /// Output directory; the CLI's --out flag overrides it.
    #[serde(default)]
    pub out_dir: Option<std::path::PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepGrid,
}

/// Flattened view of [`TrainConfig`] as it appears in the file, so the TOML
/// stays a single `[train]`-rooted tree plus `[train.stream]` etc.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub inner: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies the `--seed` override: the root seed replaces the stream seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.inner.stream.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.inner.validate()
    }

    /// The fully resolved training config (root seed already applied).
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.inner.clone();
        cfg.stream.seed = self.seed;
        cfg
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config into the run's output directory.
    pub fn echo_to(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), self.to_toml_string()?)?;
        Ok(())
    }
}
