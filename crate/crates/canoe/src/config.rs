//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use canoe_core::data::{PreprocessConfig, SyntheticConfig};
use canoe_core::model::ModelConfig;
use canoe_core::topics::LdaConfig;
use canoe_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub preprocess: PreprocessConfig,
    pub topics: LdaConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => read_json(p).map_err(|e| match e {
                Error::Parse { source, .. } => Error::Config(format!("{}: {source}", p.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        Ok(cfg)
    }

    /// Routes one seed to every stage that draws random numbers.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.synthetic.seed = seed;
            self.topics.seed = seed;
            self.train.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: canoe_core::Result<()>| r.map_err(|e| Error::Config(format!("{name}: {e}")));
        section("synthetic", self.synthetic.validate())?;
        section("preprocess", self.preprocess.validate())?;
        section("topics", self.topics.validate())?;
        section("model", self.model.validate())?;
        section("train", self.train.validate())
    }

    /// Writes the resolved config, with every default spelled out, as
    /// `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("config.json"), self)
    }
}
