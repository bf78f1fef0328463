//! Command-line interface: train, eval, predict, gradcheck, ablate, gen-data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::ablation::{ablate, ablation_config};
use crate::checkpoint;
use crate::config::{Aggregate, LowLevelSource, ModelConfig, RunConfig, SkipSupport};
use crate::data::export::export_episodes;
use crate::data::{generate_episode, sample_eval_suite, training_episode, DEFAULT_EVAL_EPISODES};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalSpec};
use crate::gradcheck::{gradcheck, GradcheckOptions, DEFAULT_TOLERANCE};
use crate::predict::{predict_episode, write_prediction};
use crate::train::Trainer;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_VERIFICATION: u8 = 3;
pub const CHECKPOINT_NAME: &str = "checkpoint.mcin";

#[derive(Debug, Parser)]
#[command(name = "mcinet", version, about = "Few-shot segmentation: train, evaluate, inspect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the base classes of a fold and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out classes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
    },
    /// Predict one episode and write mask, ground truth and overlay images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class of the generated episode.
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Finite-difference gradient check (tiny model unless --config is given).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Train and evaluate all eight module combinations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Export episodes as PNG files with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        /// Sample base-class training episodes instead of held-out ones.
        #[arg(long)]
        train_split: bool,
    },
}

fn parse_fold(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(f) if f < 4 => Ok(f),
        _ => Err(format!("fold must be 0..3, got {}", s)),
    }
}

fn parse_k(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k @ (1 | 5)) => Ok(k),
        _ => Err(format!("k must be 1 or 5, got {}", s)),
    }
}

/// Options shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_fold)]
    pub fold: Option<usize>,
    /// Support shots.
    #[arg(long, value_parser = parse_k)]
    pub k: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub ablation: AblationFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblationFlags {
    /// Disable multi-content fusion.
    #[arg(long)]
    pub no_mcfm: bool,
    /// Disable adjacent-scale correlation.
    #[arg(long)]
    pub no_mlim_adjacent: bool,
    /// Disable small→large feedback.
    #[arg(long)]
    pub no_msmp_feedback: bool,
    #[arg(long, value_enum)]
    pub low_level_source: Option<LowLevelSource>,
    #[arg(long, value_enum)]
    pub skip_support: Option<SkipSupport>,
    #[arg(long, value_enum)]
    pub aggregate: Option<Aggregate>,
    #[arg(long)]
    pub freeze_backbone: bool,
}

impl AblationFlags {
    pub fn apply(&self, m: &mut ModelConfig) {
        if self.no_mcfm {
            m.mcfm.enabled = false;
        }
        if self.no_mlim_adjacent {
            m.mlim.adjacent = false;
        }
        if self.no_msmp_feedback {
            m.msmp.feedback = false;
        }
        if let Some(v) = self.low_level_source {
            m.mcfm.low_level_source = v;
        }
        if let Some(v) = self.skip_support {
            m.msmp.skip_support = v;
        }
        if let Some(v) = self.aggregate {
            m.mlim.aggregate = v;
        }
        if self.freeze_backbone {
            m.backbone.freeze_backbone = true;
        }
    }
}

impl Common {
    /// Config file (or `base`) with command-line overrides applied.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::config(format!("{}: {}", p.display(), io)),
                other => other,
            })?,
            None => base,
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(f) = self.fold {
            cfg.train.fold = f;
        }
        if let Some(k) = self.k {
            cfg.train.shots = k;
        }
        self.ablation.apply(&mut cfg.model);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Raised when a check ran to completion but did not pass.
#[derive(Debug)]
pub struct VerificationFailure(pub String);

pub enum Outcome {
    Done,
    Failed(VerificationFailure),
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::validation(e.to_string()))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

fn run_train(common: &Common, resume: Option<&Path>) -> Result<Outcome> {
    let mut t = match resume {
        Some(p) => {
            let t = checkpoint::load(p)?;
            if common.config.is_some() {
                log::warn!("--config is ignored when resuming; the checkpoint's config is used");
            }
            t
        }
        None => Trainer::new(&common.resolve(RunConfig::default())?)?,
    };
    fs::create_dir_all(&common.out)?;
    t.run()?;
    let path = common.out.join(CHECKPOINT_NAME);
    checkpoint::save(&t, &path)?;
    fs::write(common.out.join("config.toml"), t.cfg.to_toml_string())?;
    write_json(&common.out.join("metrics.json"), &t.history)?;
    info!("wrote {}", path.display());
    Ok(Outcome::Done)
}

fn run_eval(common: &Common, ckpt: &Path, episodes: usize) -> Result<Outcome> {
    let t = checkpoint::load(ckpt)?;
    let spec = EvalSpec {
        fold: common.fold.unwrap_or(t.cfg.train.fold),
        shots: common.k.unwrap_or(t.cfg.train.shots),
        episodes,
        seed: common.seed.unwrap_or(t.cfg.train.seed),
    };
    let (report, results) = evaluate(&t.model, &t.store, &t.cfg.hash(), t.cfg.train.fold, spec)?;
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("results.json"), &results)?;
    let table = report.to_table();
    fs::write(common.out.join("results.txt"), &table)?;
    print!("{}", table);
    Ok(Outcome::Done)
}

fn run_predict(common: &Common, ckpt: &Path, class: usize) -> Result<Outcome> {
    let t = checkpoint::load(ckpt)?;
    let k = common.k.unwrap_or(t.cfg.train.shots);
    let seed = common.seed.unwrap_or(0);
    let size = t.model.input_size();
    let ep = generate_episode(class, k, seed, size)?;
    let pred = predict_episode(&t.model, &t.store, &ep)?;
    let files = write_prediction(&common.out, &format!("class{}_seed{}", class, seed), &ep, &pred)?;
    println!("IoU {:.4}; wrote {}", pred.iou, files.overlay.display());
    Ok(Outcome::Done)
}

fn run_gradcheck(common: &Common, tolerance: f64, samples: usize) -> Result<Outcome> {
    let base = RunConfig {
        model: ModelConfig::tiny(),
        ..RunConfig::default()
    };
    let cfg = common.resolve(base)?;
    let opts = GradcheckOptions {
        tolerance,
        samples_per_tensor: samples,
        seed: cfg.train.seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&cfg, &opts)?;
    print!("{}", report);
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("gradcheck.json"), &report)?;
    if report.passed() {
        Ok(Outcome::Done)
    } else {
        let names: Vec<_> = report.offenders().iter().map(|g| g.group.name()).collect();
        Ok(Outcome::Failed(VerificationFailure(format!(
            "gradient check exceeded {} in: {}",
            tolerance,
            names.join(", ")
        ))))
    }
}

fn run_ablate(common: &Common, seeds: &[u64]) -> Result<Outcome> {
    let cfg = common.resolve(ablation_config())?;
    let table = ablate(&cfg, seeds)?;
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("ablation.json"), &table)?;
    let text = table.to_text();
    fs::write(common.out.join("ablation.txt"), &text)?;
    print!("{}", text);
    Ok(Outcome::Done)
}

fn run_gen_data(common: &Common, n: usize, train_split: bool) -> Result<Outcome> {
    let cfg = common.resolve(RunConfig::default())?;
    let t = &cfg.train;
    let size = cfg.model.backbone.input_size;
    let episodes = if train_split {
        (0..n)
            .map(|i| training_episode(t.fold, t.shots, t.seed, 0, i, size))
            .collect::<Result<Vec<_>>>()?
    } else {
        sample_eval_suite(t.fold, n, t.shots, t.seed, size)?
    };
    let manifest = export_episodes(&common.out, &episodes)?;
    println!("wrote {} episodes; manifest {}", n, manifest.display());
    Ok(Outcome::Done)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train { common, resume } => run_train(common, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => run_eval(common, checkpoint, *episodes),
        Command::Predict {
            common,
            checkpoint,
            class,
        } => run_predict(common, checkpoint, *class),
        Command::Gradcheck {
            common,
            tolerance,
            samples,
        } => run_gradcheck(common, *tolerance, *samples),
        Command::Ablate { common, seeds } => run_ablate(common, seeds),
        Command::GenData {
            common,
            episodes,
            train_split,
        } => run_gen_data(common, *episodes, *train_split),
    }
}

/// Exit status for a finished run.
pub fn exit_code(result: &Result<Outcome>) -> ExitCode {
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(VerificationFailure(msg))) => {
            eprintln!("verification failed: {}", msg);
            ExitCode::from(EXIT_VERIFICATION)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {}", e);
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

/// Entry point of the `mcinet` binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    exit_code(&run(&cli))
}
