//! Versioned JSON container for a trained model and its training state.

use std::path::{Path, PathBuf};

use canoe_core::model::{CanoeModel, ModelDims};
use canoe_core::params::{NamedTensor, ParamRegistry};
use canoe_core::topics::TopicModel;
use canoe_core::train::TrainProgress;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const FORMAT: &str = "canoe-checkpoint/1";
pub const CHECKPOINT_FILE: &str = "model.json";

/// Training randomness is a pure function of the seed and the epoch index,
/// so this pair is the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub rng: RngState,
    /// Parameters after the last completed epoch.
    pub params: Vec<NamedTensor>,
    pub progress: TrainProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: RunConfig,
    pub dims: ModelDims,
    /// Epoch whose parameters are stored in `params`.
    pub epoch: usize,
    /// The parameters used for evaluation: the best validation epoch when
    /// validation ran, else the last epoch.
    pub params: Vec<NamedTensor>,
    pub topics: TopicModel,
    pub resume: ResumeState,
}

/// Registers a model with the architecture described by `cfg` and `dims`.
/// Initial values are drawn from the training seed's root stream.
pub fn build_model(cfg: &RunConfig, dims: ModelDims) -> Result<(CanoeModel, ParamRegistry)> {
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = CanoeModel::build(&mut reg, &cfg.model, dims, &mut rng)?;
    Ok((model, reg))
}

impl Checkpoint {
    pub fn new(
        config: RunConfig,
        dims: ModelDims,
        topics: TopicModel,
        reg: &ParamRegistry,
        progress: TrainProgress,
    ) -> Self {
        let (epoch, params) = match &progress.best {
            Some(b) => (b.epoch, b.params.clone()),
            None => (progress.epochs_done, reg.export()),
        };
        let rng = RngState { seed: config.train.seed, next_epoch: progress.epochs_done };
        Checkpoint {
            format: FORMAT.into(),
            config,
            dims,
            epoch,
            params,
            topics,
            resume: ResumeState { rng, params: reg.export(), progress },
        }
    }

    /// Accepts a checkpoint file or a directory holding one.
    pub fn path(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(CHECKPOINT_FILE)
        } else {
            path.into()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = Self::path(path);
        let ck: Checkpoint = read_json(&path)?;
        if ck.format != FORMAT {
            return Err(Error::Format(format!("{} has format `{}`, expected `{FORMAT}`", path.display(), ck.format)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// The evaluation model.
    pub fn model(&self) -> Result<(CanoeModel, ParamRegistry)> {
        self.restore(&self.params)
    }

    /// The model as it stood after the last completed epoch.
    pub fn resume_model(&self) -> Result<(CanoeModel, ParamRegistry)> {
        self.restore(&self.resume.params)
    }

    fn restore(&self, params: &[NamedTensor]) -> Result<(CanoeModel, ParamRegistry)> {
        let (model, mut reg) = build_model(&self.config, self.dims)?;
        reg.import(params)?;
        Ok((model, reg))
    }
}
