//! Command-line driver: simulate, train, evaluate, rank-features, ablate and
//! gradcheck over the documented file formats.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numerical failure. Errors print one machine-parsable line on stderr:
//! `covtpp: error[<kind>]: <message>`.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use covtpp_core::data::{load_dataset, save_dataset, split_dataset, DataError, Dataset, Split};
use covtpp_core::gradcheck::{finite_difference_check, relu_kink_margin};
use covtpp_core::graph::NumericsError;
use covtpp_core::importance::{self, ImportanceError};
use covtpp_core::model::{CovariateTpp, ModelError, SeqInput};
use covtpp_core::serialize::{load_model, save_model, SerializeError};
use covtpp_core::sim::{derive_rng, generate_dataset_with_threads, SimError};
use covtpp_core::train::{
    ablation_study_with_threads, evaluate, train, write_ablation_table, write_metrics,
    write_train_log, TrainError,
};
use covtpp_core::{EventSequence, ParamStore};

use config::{load_config, ConfigError, RunConfig};
use rand::Rng;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "covtpp",
    version,
    about = "Covariate temporal point process toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth feature importance
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file (falls back to [paths].dataset)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model; writes model.json and train_log.tsv into --out
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file (falls back to [paths].dataset)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (falls back to [paths].out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a trained model on one split; writes a metrics JSON file
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the corpus-level feature-importance report for one split
    RankFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cumulative feature ablation: retrain while zeroing top-ranked features
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file (falls back to [paths].dataset)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained model whose importance ranking drives the ablation order
        /// (falls back to [paths].model)
        #[arg(long, conflicts_with = "ranking")]
        model: Option<PathBuf>,
        /// Pre-computed importance report (as written by rank-features)
        #[arg(long)]
        ranking: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Finite-difference check of the full model's gradients
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SerializeError> for CliError {
    fn from(e: SerializeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidBound { .. } => CliError::Numerical(e.to_string()),
            SimError::BadConfig(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Model(_) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ImportanceError> for CliError {
    fn from(e: ImportanceError) -> Self {
        match e {
            ImportanceError::Numerics(n) => CliError::Numerical(n.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("covtpp: error[{}]: {}", e.kind(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn worker_threads() -> usize {
    std::env::var("COVTPP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn ensure_parent_dir(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

/// Assign splits when the file does not carry them.
fn ensure_split(dataset: Dataset, seed: u64) -> Result<Dataset, CliError> {
    if dataset.splits.iter().all(|s| s.is_some()) {
        Ok(dataset)
    } else {
        Ok(split_dataset(dataset, [0.8, 0.1, 0.1], seed)?)
    }
}

/// Flag value, or the config's [paths] fallback, or a usage error.
fn resolve_path(
    flag: Option<PathBuf>,
    fallback: Option<&PathBuf>,
    flag_name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.cloned()).ok_or_else(|| {
        CliError::Usage(format!(
            "missing --{flag_name} (no [paths] fallback in the config either)"
        ))
    })
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out, seed } => {
            require_file(&config)?;
            let run_config = load_config(&config)?;
            let out = resolve_path(out, run_config.paths.dataset.as_ref(), "out")?;
            ensure_parent_dir(&out)?;
            let sim = run_config
                .sim
                .as_ref()
                .ok_or_else(|| CliError::Data("config has no [sim] section".into()))?
                .to_sim_config()?;
            let dataset = generate_dataset_with_threads(&sim, sim.sequences, seed, worker_threads())?;
            save_dataset(&dataset, &out)?;
            println!(
                "wrote {} sequences ({} events) to {}",
                dataset.len(),
                dataset.sequences.iter().map(|s| s.len()).sum::<usize>(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            require_file(&config)?;
            let run_config = load_config(&config)?;
            let data = resolve_path(data, run_config.paths.dataset.as_ref(), "data")?;
            let out = resolve_path(out, run_config.paths.out_dir.as_ref(), "out")?;
            require_file(&data)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
            let dataset = ensure_split(load_dataset(&data)?, seed)?;
            let mut tc = run_config.train.clone();
            tc.seed = seed;
            let (model, logs) = train(&dataset, &run_config.model, &tc)?;
            save_model(&model, out.join("model.json"))?;
            write_train_log(&logs, out.join("train_log.tsv"))?;
            println!(
                "trained {} epochs; best val loss {:.6}; wrote {}",
                logs.len(),
                logs.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min),
                out.join("model.json").display()
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            split,
            out,
        } => {
            require_file(&model)?;
            require_file(&data)?;
            ensure_parent_dir(&out)?;
            let trained = load_model(&model)?;
            let dataset = load_dataset(&data)?;
            let metrics = evaluate(&trained, &dataset, split.into())?;
            write_metrics(&metrics, &out)?;
            println!(
                "split {}: time_ll {:.4}  joint_ll {:.4}  rmse {:.4}  acc {:.4}  f1 {:.4}  ({} events)",
                Split::from(split),
                metrics.time_ll_per_event,
                metrics.joint_ll_per_event,
                metrics.rmse,
                metrics.accuracy,
                metrics.f1_weighted,
                metrics.event_count
            );
            Ok(())
        }
        Command::RankFeatures {
            model,
            data,
            split,
            out,
        } => {
            require_file(&model)?;
            require_file(&data)?;
            ensure_parent_dir(&out)?;
            let trained = load_model(&model)?;
            let mut dataset = load_dataset(&data)?;
            if dataset.standardization.is_none() {
                if let Some(stats) = &trained.standardization {
                    for seq in &mut dataset.sequences {
                        stats.apply_sequence(seq);
                    }
                    dataset.standardization = Some(stats.clone());
                }
            }
            let report =
                importance::compute_importance(&dataset, split.into(), &trained.store, &trained.hp)?;
            importance::save_report(&report, None, &out)?;
            let ranking = report.ranking();
            println!(
                "top features: {:?}; wrote {}",
                &ranking[..ranking.len().min(4)],
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            model,
            ranking,
            out,
            seed,
        } => {
            require_file(&config)?;
            let run_config = load_config(&config)?;
            let data = resolve_path(data, run_config.paths.dataset.as_ref(), "data")?;
            require_file(&data)?;
            ensure_parent_dir(&out)?;
            let dataset = ensure_split(load_dataset(&data)?, seed)?;
            let model = model.or_else(|| {
                if ranking.is_none() {
                    run_config.paths.model.clone()
                } else {
                    None
                }
            });
            let order = match (&model, &ranking) {
                (Some(model_path), None) => {
                    require_file(model_path)?;
                    let trained = load_model(model_path)?;
                    let mut standardized = dataset.clone();
                    if standardized.standardization.is_none() {
                        if let Some(stats) = &trained.standardization {
                            for seq in &mut standardized.sequences {
                                stats.apply_sequence(seq);
                            }
                            standardized.standardization = Some(stats.clone());
                        }
                    }
                    importance::compute_importance(
                        &standardized,
                        Split::Train,
                        &trained.store,
                        &trained.hp,
                    )?
                    .ranking()
                }
                (None, Some(ranking_path)) => {
                    require_file(ranking_path)?;
                    importance::load_ranking(ranking_path)?
                }
                _ => {
                    return Err(CliError::Usage(
                        "ablate needs exactly one of --model or --ranking".into(),
                    ))
                }
            };
            if order.len() != dataset.f {
                return Err(CliError::Data(format!(
                    "ranking covers {} features but the dataset has {}",
                    order.len(),
                    dataset.f
                )));
            }
            let mut tc = run_config.train.clone();
            tc.seed = seed;
            let points = ablation_study_with_threads(
                &dataset,
                &run_config.model,
                &tc,
                &order,
                worker_threads(),
            )?;
            write_ablation_table(&points, &out)?;
            println!("wrote {} ablation points to {}", points.len(), out.display());
            Ok(())
        }
        Command::Gradcheck { config, seed } => {
            require_file(&config)?;
            let run_config = load_config(&config)?;
            let err = gradcheck(&run_config, seed)?;
            println!("gradcheck max relative error {err:.3e}");
            if err > GRADCHECK_TOLERANCE {
                return Err(CliError::Numerical(format!(
                    "gradient check failed: {err:.3e} > {GRADCHECK_TOLERANCE:e}"
                )));
            }
            Ok(())
        }
    }
}

/// Full-model finite-difference check on random tiny sequences. Inputs are
/// re-sampled when a ReLU pre-activation sits too close to its kink.
fn gradcheck(run_config: &RunConfig, seed: u64) -> Result<f64, CliError> {
    let mut hp = run_config.model.clone();
    if hp.type_count == 0 {
        hp.type_count = 2;
    }
    if hp.covariate_dim == 0 {
        hp.covariate_dim = 3;
    }
    hp.dropout = 0.0;
    hp.validate().map_err(CliError::Data)?;
    let model = CovariateTpp::new(hp.clone());

    for attempt in 0..32u64 {
        let mut rng = derive_rng(seed, attempt, 0x6c);
        let seqs: Vec<EventSequence> = (0..2)
            .map(|_| {
                let l = 5;
                let mut t = 0.0;
                let mut times = Vec::with_capacity(l);
                for _ in 0..l {
                    t += rng.random_range(0.2..1.5);
                    times.push(t);
                }
                let types: Vec<usize> = (0..l).map(|_| rng.random_range(0..hp.type_count)).collect();
                let covs: Vec<Vec<f64>> = (0..l)
                    .map(|_| {
                        (0..hp.covariate_dim)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect()
                    })
                    .collect();
                EventSequence::new(times, types, covs, None).expect("valid random sequence")
            })
            .collect();
        let inputs: Vec<SeqInput> = seqs
            .iter()
            .map(|s| SeqInput::from_sequence(s, s.len(), 1.0))
            .collect();
        let build = |g: &mut covtpp_core::Graph, s: &ParamStore| {
            let batch = model
                .batch_loss_nodes(g, s, &inputs, None)
                .map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    ModelError::Decoder(_) => NumericsError::NonFinite { op: "tau" },
                })?;
            Ok(batch.total)
        };
        let mut store = model.init_params(seed.wrapping_add(attempt), Some((0.0, 1.0)));
        if relu_kink_margin(&store, build)? <= 1e-6 {
            continue;
        }
        let err = finite_difference_check(&mut store, 1e-4, 4, seed ^ attempt, build)?;
        return Ok(err);
    }
    Err(CliError::Numerical(
        "could not find inputs clear of ReLU kinks".into(),
    ))
}
