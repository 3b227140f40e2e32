use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canoe::commands::{self, GradcheckConfig};
use canoe::io::{read_json, write_json};
use canoe::{Checkpoint, Error, Result, RunConfig};
use canoe_core::metrics::DEFAULT_THRESHOLDS;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "canoe", version, about = "Next-location prediction with chaotic oscillatory attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic returner/explorer check-in dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Extract activity sequences and write the prepared train/val/test windows.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit topics and train the model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint, log and config echo.
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Checkpoint (or directory holding one) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file or the directory holding it.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for the report files.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
    },
    /// Score the first-order Markov baseline on the test split.
    Mmc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
    },
    /// Prefix-entropy distribution of the test steps.
    Entropy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the config echo and the result.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(config)?.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let m = commands::generate(&load(config.as_deref(), Some(seed))?, &out)?;
            println!("{} check-ins, {} users, {} locations", m.checkins, m.users, m.distinct_locations);
        }
        Command::Preprocess { data, config, out } => {
            let s = commands::preprocess_data(&data, &load(config.as_deref(), None)?, &out)?;
            println!("{} users: {} train, {} val, {} test windows", s.users, s.train, s.val, s.test);
        }
        Command::Train { data, config, model_out, seed, resume } => {
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let cfg = match (&config, &resume) {
                (None, Some(ck)) => {
                    let cfg = ck.config.with_seed(Some(seed));
                    cfg.validate()?;
                    cfg
                }
                _ => load(config.as_deref(), Some(seed))?,
            };
            let ck = commands::train_model(&data, &cfg, &model_out, resume)?;
            println!("trained {} epochs; checkpoint holds epoch {}", ck.resume.progress.epochs_done, ck.epoch);
        }
        Command::Eval { data, model, report, thresholds } => {
            let ck = Checkpoint::load(&model)?;
            print!("{}", commands::evaluate_model(&data, &ck, &thresholds, &report)?.table());
        }
        Command::Mmc { data, config, report, thresholds } => {
            let cfg = load(config.as_deref(), None)?;
            print!("{}", commands::evaluate_baseline(&data, &cfg, &thresholds, &report)?.table());
        }
        Command::Entropy { data, config, report, thresholds } => {
            for c in commands::entropy_report(&data, &load(config.as_deref(), None)?, &thresholds, &report)? {
                println!("H >= {}: {} high, {} low", c.threshold, c.n_high, c.n_low);
            }
        }
        Command::Gradcheck { config, out } => {
            let cfg: GradcheckConfig = match &config {
                Some(p) => read_json(p).map_err(|e| Error::Config(e.to_string()))?,
                None => GradcheckConfig::default(),
            };
            let report = commands::gradient_check(&cfg)?;
            if let Some(dir) = out {
                write_json(&dir.join("config.json"), &cfg)?;
                write_json(&dir.join("gradcheck.json"), &serde_json::json!({ "max_rel_error": report.max_rel_error }))?;
            }
            println!("{:e}", report.max_rel_error);
            if report.max_rel_error >= cfg.tolerance {
                return Err(Error::Check(format!(
                    "max relative error {:e} is not below {:e}",
                    report.max_rel_error, cfg.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CANOE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
