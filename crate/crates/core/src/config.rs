//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::GenSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::Stage2Config;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchDataConfig {
    pub n_pairs: usize,
}

impl Default for MatchDataConfig {
    fn default() -> Self {
        Self { n_pairs: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub export_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), export_dir: "exports".into() }
    }
}

impl Paths {
    /// Resolves relative paths against `base`.
    pub fn resolve(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self { data_dir: r(&self.data_dir), checkpoint_dir: r(&self.checkpoint_dir), export_dir: r(&self.export_dir) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: GenSpec,
    pub match_data: MatchDataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub stage2: Stage2Config,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Points every component at the same root seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.encoder.seed = seed;
        self.pretrain.seed = seed;
        self.stage2.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.stage2.validate()?;
        if self.match_data.n_pairs < crate::corpus::MATCH_LEVELS {
            return Err(Error::Config("match_data.n_pairs must be at least 4".into()));
        }
        self.encoder.validate()?;
        if self.encoder.max_len < self.corpus.seq_len + 1 {
            return Err(Error::Config(format!(
                "encoder.max_len {} is shorter than corpus.seq_len + 1 = {}",
                self.encoder.max_len,
                self.corpus.seq_len + 1
            )));
        }
        Ok(())
    }
}
