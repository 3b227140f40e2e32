//! One function per subcommand. Each writes its artifacts and the resolved
//! config into its output directory.

use std::path::Path;

use canoe_core::data::{generate_synthetic, preprocess, Dataset, WindowSample, SLOTS};
use canoe_core::decoder::LossWeights;
use canoe_core::encoder::SeqEncoderConfig;
use canoe_core::gradcheck::{grad_check, GradCheckReport};
use canoe_core::graph::Graph;
use canoe_core::metrics::{compute_metrics, entropy_stratified, prefix_entropy};
use canoe_core::model::{ModelConfig, ModelDims, ModelState};
use canoe_core::topics::{fit_lda, CoOccurrenceMatrix, LdaConfig};
use canoe_core::train::{baseline_ranks, evaluate, fit_baseline, fit_topics, train};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_model, Checkpoint, CHECKPOINT_FILE};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    create_dir, load_dataset, read_checkins, write_checkins, write_json, write_text, Manifest, CHECKINS_FILE,
    DATASET_FILE, MANIFEST_FILE,
};
use crate::report::{log_csv, EvalOutput};

pub const LOG_FILE: &str = "train_log.csv";

/// Synthetic check-ins, their manifest and the config echo.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let checkins = generate_synthetic(&cfg.synthetic)?;
    create_dir(out)?;
    cfg.echo(out)?;
    write_checkins(&out.join(CHECKINS_FILE), &checkins)?;
    let manifest = Manifest::describe(&checkins);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    info!("wrote {} check-ins for {} users", manifest.checkins, manifest.users);
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub users: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSummary {
    pub fn of(ds: &Dataset) -> Self {
        SplitSummary { users: ds.sequences.len(), train: ds.train.len(), val: ds.val.len(), test: ds.test.len() }
    }
}

/// Activity extraction, windowing and splitting of a check-in file into a
/// prepared `dataset.json`.
pub fn preprocess_data(data: &Path, cfg: &RunConfig, out: &Path) -> Result<SplitSummary> {
    cfg.validate()?;
    let path = if data.is_dir() { data.join(CHECKINS_FILE) } else { data.into() };
    let ds = preprocess(&read_checkins(&path)?, &cfg.preprocess)?;
    create_dir(out)?;
    cfg.echo(out)?;
    write_json(&out.join(DATASET_FILE), &ds)?;
    let summary = SplitSummary::of(&ds);
    write_json(&out.join("splits.json"), &summary)?;
    Ok(summary)
}

/// Trains from scratch, or from `resume` when given, writing the checkpoint
/// and log after every epoch.
pub fn train_model(data: &Path, cfg: &RunConfig, out: &Path, resume: Option<Checkpoint>) -> Result<Checkpoint> {
    cfg.validate()?;
    let ds = load_dataset(data, &cfg.preprocess)?;
    let (topics, dims, model, mut reg, progress) = match resume {
        Some(ck) => {
            let fixed = |a: bool, what: &str| {
                if a {
                    Ok(())
                } else {
                    Err(Error::Config(format!("{what} differs from the resumed checkpoint")))
                }
            };
            fixed(ck.config.model == cfg.model, "model")?;
            fixed(ck.config.topics == cfg.topics, "topics")?;
            fixed(ck.config.preprocess == cfg.preprocess, "preprocess")?;
            fixed(ck.config.train.seed == cfg.train.seed, "train.seed")?;
            if ck.dims != ModelDims::new(ds.users, ds.locations, ck.topics.topics) {
                return Err(Error::Format("dataset vocabulary does not match the checkpoint".into()));
            }
            let (model, reg) = ck.resume_model()?;
            info!("resuming after epoch {}", ck.resume.progress.epochs_done);
            (ck.topics, ck.dims, model, reg, Some(ck.resume.progress))
        }
        None => {
            let topics = fit_topics(&ds, &cfg.topics)?;
            let dims = ModelDims::new(ds.users, ds.locations, topics.topics);
            let (model, reg) = build_model(cfg, dims)?;
            (topics, dims, model, reg, None)
        }
    };
    create_dir(out)?;
    cfg.echo(out)?;
    info!(
        "training on {} windows ({} validation), {} parameters",
        ds.train.len(),
        ds.val.len(),
        reg.num_scalars()
    );

    let mut write_err = None;
    let progress = train(&model, &mut reg, &topics, &ds.train, &ds.val, &cfg.train, progress, |p, reg| {
        let log = p.logs.last().expect("callback follows a completed epoch");
        info!(
            "epoch {}{}: loss {:.6} (loc {:.6}, time {:.6}, aux {:.6}) val acc@1 {:?} mrr {:?}",
            log.epoch,
            if log.warmup { " [warmup]" } else { "" },
            log.loss_total,
            log.loss_loc,
            log.loss_time,
            log.loss_aux,
            log.val_acc1,
            log.val_mrr
        );
        if cfg.train.warmup_epochs > 0 && log.epoch == cfg.train.warmup_epochs {
            info!("warmup ends after epoch {}; location losses active from epoch {}", log.epoch, log.epoch + 1);
        }
        if write_err.is_some() {
            return;
        }
        let ck = Checkpoint::new(*cfg, dims, topics.clone(), reg, p.clone());
        let r = write_text(&out.join(LOG_FILE), &log_csv(&p.logs)).and_then(|_| ck.save(&out.join(CHECKPOINT_FILE)));
        write_err = r.err();
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let ck = Checkpoint::new(*cfg, dims, topics, &reg, progress);
    write_text(&out.join(LOG_FILE), &log_csv(&ck.resume.progress.logs))?;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    Ok(ck)
}

fn test_entropies(ds: &Dataset) -> Result<Vec<f64>> {
    ds.test
        .iter()
        .map(|s| {
            let prefix = ds.prefix(s).ok_or_else(|| Error::Format(format!("no sequence for user {}", s.user)))?;
            Ok(prefix_entropy(prefix)?)
        })
        .collect()
}

fn report(model: &str, ds: &Dataset, ranks: &[usize], thresholds: &[f64]) -> Result<EvalOutput> {
    Ok(EvalOutput {
        model: model.into(),
        overall: compute_metrics(ranks)?,
        strata: entropy_stratified(ranks, &test_entropies(ds)?, thresholds)?,
    })
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    match thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        Some(t) => Err(Error::Config(format!("thresholds must lie in [0, 1], got {t}"))),
        None => Ok(()),
    }
}

fn non_empty_test(ds: &Dataset) -> Result<()> {
    if ds.test.is_empty() {
        Err(Error::Format("the dataset has no test windows".into()))
    } else {
        Ok(())
    }
}

/// Test-split metrics of a trained checkpoint, overall and per entropy
/// threshold.
pub fn evaluate_model(data: &Path, ck: &Checkpoint, thresholds: &[f64], out: &Path) -> Result<EvalOutput> {
    check_thresholds(thresholds)?;
    let ds = load_dataset(data, &ck.config.preprocess)?;
    non_empty_test(&ds)?;
    let (model, reg) = ck.model()?;
    let ranks = model.rank_samples(&reg, &ck.topics, &ds.test, ck.config.train.eval_batch_size)?;
    let output = report("canoe", &ds, &ranks, thresholds)?;
    create_dir(out)?;
    ck.config.echo(out)?;
    output.write(out)?;
    Ok(output)
}

/// The Markov baseline fitted on the training prefixes and scored on the
/// same test windows as [`evaluate_model`].
pub fn evaluate_baseline(data: &Path, cfg: &RunConfig, thresholds: &[f64], out: &Path) -> Result<EvalOutput> {
    cfg.validate()?;
    check_thresholds(thresholds)?;
    let ds = load_dataset(data, &cfg.preprocess)?;
    non_empty_test(&ds)?;
    let ranks = baseline_ranks(&fit_baseline(&ds), &ds.test)?;
    let output = report("mmc", &ds, &ranks, thresholds)?;
    create_dir(out)?;
    cfg.echo(out)?;
    output.write(out)?;
    Ok(output)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyCount {
    pub threshold: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// Prefix entropy of every test step (`entropy.csv`) and the subset sizes
/// per threshold (`entropy_thresholds.csv`).
pub fn entropy_report(data: &Path, cfg: &RunConfig, thresholds: &[f64], out: &Path) -> Result<Vec<EntropyCount>> {
    cfg.validate()?;
    check_thresholds(thresholds)?;
    let ds = load_dataset(data, &cfg.preprocess)?;
    let entropies = test_entropies(&ds)?;
    let mut csv = String::from("user,target_index,entropy\n");
    for (s, h) in ds.test.iter().zip(&entropies) {
        csv.push_str(&format!("{},{},{}\n", s.user, s.target_index, h));
    }
    let counts: Vec<EntropyCount> = thresholds
        .iter()
        .map(|&threshold| {
            let n_high = entropies.iter().filter(|&&h| h >= threshold).count();
            EntropyCount { threshold, n_high, n_low: entropies.len() - n_high }
        })
        .collect();
    let mut table = String::from("threshold,n_high,n_low\n");
    for c in &counts {
        table.push_str(&format!("{},{},{}\n", c.threshold, c.n_high, c.n_low));
    }
    create_dir(out)?;
    cfg.echo(out)?;
    write_text(&out.join("entropy.csv"), &csv)?;
    write_text(&out.join("entropy_thresholds.csv"), &table)?;
    Ok(counts)
}

/// A model small enough to difference every parameter entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub users: usize,
    pub locations: usize,
    pub window: usize,
    pub samples: usize,
    pub topics: usize,
    pub model: ModelConfig,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let mut model = ModelConfig {
            dim: 8,
            heads: 2,
            sequence: SeqEncoderConfig { layers: 1, heads: 2, dropout: 0.0, ff_width: None },
            ..Default::default()
        };
        model.oscillator.iterations = 1;
        GradcheckConfig {
            users: 3,
            locations: 12,
            window: 5,
            samples: 4,
            topics: 2,
            model,
            epsilon: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.users == 0 || self.locations < 2 || self.samples == 0 {
            return bad("users, samples must be positive and locations at least 2");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return bad("tolerance must be positive");
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))
    }
}

/// Compares backpropagated and finite-difference gradients of the full
/// training loss on random windows. The caller decides pass or fail against
/// `cfg.tolerance`.
pub fn gradient_check(cfg: &GradcheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows: Vec<Vec<u32>> =
        (0..cfg.users).map(|_| (0..cfg.locations).map(|_| rng.gen_range(0..4)).collect()).collect();
    let mut corpus = CoOccurrenceMatrix::from_rows(&rows);
    corpus.add(0, 0);
    let topics = fit_lda(&corpus, &LdaConfig { topics: cfg.topics, iterations: 20, seed: cfg.seed, ..Default::default() })?;
    let samples: Vec<WindowSample> = (0..cfg.samples)
        .map(|i| WindowSample {
            user: i % cfg.users,
            context_locations: (1..cfg.window).map(|_| rng.gen_range(0..cfg.locations)).collect(),
            context_slots: (1..cfg.window).map(|_| rng.gen_range(0..SLOTS)).collect(),
            target_location: rng.gen_range(0..cfg.locations),
            target_slot: rng.gen_range(0..SLOTS),
            target_index: cfg.window - 1,
        })
        .collect();
    let run = RunConfig { model: cfg.model, train: canoe_core::train::TrainConfig { seed: cfg.seed, ..Default::default() }, ..Default::default() };
    let (model, mut reg) = build_model(&run, ModelDims::new(cfg.users, cfg.locations, cfg.topics))?;
    let batch: Vec<&WindowSample> = samples.iter().collect();
    let report = grad_check(&mut reg, cfg.epsilon, |reg, g: &mut Graph| {
        let (out, _) = model.forward(g, reg, &topics, &batch, &ModelState::default(), None)?;
        Ok(model.loss(g, &out, &batch, &LossWeights::default())?.total)
    })?;
    if let Some((name, idx)) = &report.worst {
        info!("worst entry {name}[{idx}] over {} entries", report.entries);
    }
    if report.max_rel_error >= cfg.tolerance {
        warn!("max relative error {:e} is not below {:e}", report.max_rel_error, cfg.tolerance);
    }
    Ok(report)
}

/// Test metrics of a checkpoint without writing anything.
pub fn score(data: &Path, ck: &Checkpoint) -> Result<canoe_core::metrics::EvalReport> {
    let ds = load_dataset(data, &ck.config.preprocess)?;
    non_empty_test(&ds)?;
    let (model, reg) = ck.model()?;
    Ok(evaluate(&model, &reg, &ck.topics, &ds.test, ck.config.train.eval_batch_size)?)
}
