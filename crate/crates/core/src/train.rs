//! Mini-batch training with a staged loss schedule and best-validation
//! retention.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WindowSample};
use crate::decoder::LossWeights;
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::metrics::{compute_metrics, EvalReport};
use crate::mmc::{fit_mmc, TransitionModel};
use crate::model::{CanoeModel, ModelState};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::{NamedTensor, ParamRegistry};
use crate::topics::{fit_lda, CoOccurrenceMatrix, LdaConfig, TopicModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Leading epochs optimised on the time loss alone.
    pub warmup_epochs: usize,
    pub loss: LossWeights,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            lr: 0.005,
            weight_decay: 0.01,
            grad_clip: 5.0,
            warmup_epochs: 5,
            loss: LossWeights::default(),
            eval_batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.eval_batch_size > 0, "eval_batch_size must be positive");
        ensure!(self.lr.is_finite() && self.lr > 0.0, "lr must be positive");
        ensure!(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(self.grad_clip.is_finite() && self.grad_clip >= 0.0, "grad_clip must be non-negative");
        self.loss.validate()?;
        ensure!(
            self.warmup_epochs == 0 || self.loss.time > 0.0,
            "warmup_epochs needs a positive loss.time weight"
        );
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }

    pub fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.warmup_epochs
    }

    /// Loss weights in effect for a 0-indexed epoch.
    pub fn weights_for_epoch(&self, epoch: usize) -> LossWeights {
        if self.is_warmup(epoch) {
            LossWeights { loc: 0.0, time: self.loss.time, aux: 0.0 }
        } else {
            self.loss
        }
    }
}

/// Generator for shuffling and dropout in one epoch, independent of how
/// many draws earlier epochs made.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Batch-mean losses averaged over the batches of one epoch. Component terms
/// are unweighted; `loss_total` uses the weights of that epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-indexed.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_loc: f64,
    pub loss_time: f64,
    pub loss_aux: f64,
    pub val_acc1: Option<f64>,
    pub val_mrr: Option<f64>,
    pub warmup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_mrr: f64,
    pub params: Vec<NamedTensor>,
}

/// Everything beyond the current parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_done: usize,
    pub optimizer: OptimizerState,
    pub logs: Vec<EpochLog>,
    pub best: Option<BestSnapshot>,
}

impl TrainProgress {
    pub fn new(cfg: &TrainConfig, reg: &ParamRegistry) -> Self {
        TrainProgress { epochs_done: 0, optimizer: OptimizerState::new(cfg.optimizer(), reg), logs: Vec::new(), best: None }
    }
}

/// One pass over `samples` in a seeded shuffled order. `epoch` is 0-indexed.
pub fn run_epoch(
    model: &CanoeModel,
    reg: &mut ParamRegistry,
    topics: &TopicModel,
    samples: &[WindowSample],
    cfg: &TrainConfig,
    epoch: usize,
    optimizer: &mut OptimizerState,
) -> Result<EpochLog> {
    ensure!(!samples.is_empty(), "training split is empty");
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let weights = cfg.weights_for_epoch(epoch);
    let mut state = ModelState::default();
    let mut sums = [0.0; 4];
    let mut batches = 0usize;

    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let mut g = Graph::new();
        let (out, next) = model.forward(&mut g, reg, topics, &batch, &state, Some(&mut rng as &mut dyn RngCore))?;
        let terms = model.loss(&mut g, &out, &batch, &weights)?;
        let total = g.value(terms.total).item();
        if !total.is_finite() || g.fault().is_some() {
            return Err(Error::Diverged { epoch: epoch + 1, batch: b });
        }
        reg.zero_grad();
        g.backward(terms.total, reg)?;
        if cfg.grad_clip > 0.0 {
            reg.clip_grad_norm(cfg.grad_clip);
        }
        optimizer.update(reg)?;
        debug_assert!(reg.all_finite(), "non-finite parameter after epoch {} batch {b}", epoch + 1);

        for (s, v) in sums.iter_mut().zip([terms.total, terms.loc, terms.time, terms.aux]) {
            *s += g.value(v).item();
        }
        batches += 1;
        state = next;
    }

    let n = batches as f64;
    Ok(EpochLog {
        epoch: epoch + 1,
        loss_total: sums[0] / n,
        loss_loc: sums[1] / n,
        loss_time: sums[2] / n,
        loss_aux: sums[3] / n,
        val_acc1: None,
        val_mrr: None,
        warmup: cfg.is_warmup(epoch),
    })
}

pub fn evaluate(
    model: &CanoeModel,
    reg: &ParamRegistry,
    topics: &TopicModel,
    samples: &[WindowSample],
    batch_size: usize,
) -> Result<EvalReport> {
    compute_metrics(&model.rank_samples(reg, topics, samples, batch_size)?)
}

/// Trains until `cfg.epochs` epochs are done, starting from `progress` when
/// given. `on_epoch` runs after every epoch with the updated progress and
/// parameters.
///
/// The best validation MRR snapshot is kept in the returned progress; when
/// `val` is empty no snapshot is taken.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &CanoeModel,
    reg: &mut ParamRegistry,
    topics: &TopicModel,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
    progress: Option<TrainProgress>,
    mut on_epoch: impl FnMut(&TrainProgress, &ParamRegistry),
) -> Result<TrainProgress> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training split is empty");
    let mut progress = progress.unwrap_or_else(|| TrainProgress::new(cfg, reg));
    ensure!(progress.epochs_done <= cfg.epochs, "resumed run already has {} epochs", progress.epochs_done);
    progress.optimizer.config = cfg.optimizer();

    for epoch in progress.epochs_done..cfg.epochs {
        let mut log = run_epoch(model, reg, topics, train, cfg, epoch, &mut progress.optimizer)?;
        if !val.is_empty() {
            let report = evaluate(model, reg, topics, val, cfg.eval_batch_size)?;
            log.val_acc1 = Some(report.acc1);
            log.val_mrr = Some(report.mrr);
            if progress.best.as_ref().is_none_or(|b| report.mrr > b.val_mrr) {
                progress.best = Some(BestSnapshot { epoch: epoch + 1, val_mrr: report.mrr, params: reg.export() });
            }
        }
        progress.logs.push(log);
        progress.epochs_done = epoch + 1;
        on_epoch(&progress, reg);
    }
    Ok(progress)
}

/// User-location visit counts over the training prefixes only.
pub fn topic_corpus(ds: &Dataset) -> CoOccurrenceMatrix {
    let mut v = CoOccurrenceMatrix::new(ds.users, ds.locations);
    for (user, prefix) in ds.training_prefixes() {
        for &l in prefix {
            v.add(user, l);
        }
    }
    v
}

pub fn fit_topics(ds: &Dataset, cfg: &LdaConfig) -> Result<TopicModel> {
    fit_lda(&topic_corpus(ds), cfg)
}

/// Markov baseline fitted on the training prefixes.
pub fn fit_baseline(ds: &Dataset) -> TransitionModel {
    fit_mmc(ds.locations, ds.training_prefixes())
}

/// Ranks of each sample's target under the baseline, conditioned on the
/// last context location.
pub fn baseline_ranks(model: &TransitionModel, samples: &[WindowSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let current = s.context_locations.last().copied();
            ensure!(current.is_some(), "sample for user {} has an empty context", s.user);
            Ok(model.rank_of(s.user, current.unwrap(), s.target_location))
        })
        .collect()
}
