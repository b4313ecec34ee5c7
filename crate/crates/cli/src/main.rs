//! `tdm`: command-line driver for synthetic data generation, training,
//! evaluation, ablations, N/K sweeps and the verification suites.
//!
//! Any configuration key can be overridden with `--section.key value` (or
//! `--section.key=value`); these dotted flags are stripped before the
//! regular argument parser runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tdm_core::data::save_dataset;
use tdm_core::harness::{
    ablation, diagnostics, gradcheck, load_checkpoint, prepare_data, save_checkpoint, sweep, test_plan, train,
    evaluate, ExperimentConfig,
};
use tdm_core::head::Metric;
use tdm_core::model::Model;
use tdm_core::{oracle, Error};

#[derive(Parser, Debug)]
#[command(name = "tdm", version, about = "Task-adaptive channel attention for few-shot classification")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic dataset and save it.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic training; writes checkpoint/, log.csv, metrics.json.
    Train,
    /// Evaluate a checkpoint on the test split; writes metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write weights.csv for this many episodes.
        #[arg(long)]
        dump_weights: Option<usize>,
    },
    /// Train and evaluate all eight attention flag combinations.
    Ablate,
    /// Evaluate a checkpoint over sweep.n_list × sweep.k_list.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Channel variance and patch-alignment diagnostics for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
    /// Finite-difference check of every parameter gradient.
    GradCheck {
        #[arg(long, default_value = "micro")]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricArg,
    },
    /// Compare score and weighting ops against loop oracles.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum MetricArg {
    Euclidean,
    Cosine,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Splits `--a.b value` / `--a.b=value` pairs from the remaining arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(cli.config.as_deref(), overrides)?)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Failure> {
    match &cli.command {
        Command::OracleCheck { trials, seed } => {
            let report = oracle::run_suite(*trials, *seed)?;
            for e in &report.entries {
                println!("{:<18} trials {:>4}  max |err| {:.3e}", e.name, e.trials, e.max_abs_error);
            }
            if !report.passed(1e-10) {
                return Err(Failure::Runtime("oracle mismatch above 1e-10".into()));
            }
            println!("all oracle comparisons within 1e-10");
        }
        Command::GradCheck { model, seed, metric } => {
            if model != "micro" {
                return Err(Failure::Config(format!("unknown grad-check model `{model}` (only `micro`)")));
            }
            let metric = match metric {
                MetricArg::Euclidean => Metric::Euclidean,
                MetricArg::Cosine => Metric::Cosine,
            };
            let entries = gradcheck::check_micro(*seed, metric)?;
            for e in &entries {
                println!(
                    "{:<28} {:>5} values  rel err {:.3e}  excluded {:>2}  {}",
                    e.name,
                    e.count,
                    e.relative_error,
                    e.excluded,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            if entries.iter().any(|e| !e.passed) {
                return Err(Failure::Runtime(format!(
                    "gradient check failed (tolerance {:e})",
                    gradcheck::MICRO_TOLERANCE
                )));
            }
        }
        Command::SynthData { out } => {
            let cfg = load_config(&cli, &overrides)?;
            let ds = tdm_core::data::generate_synthetic(&cfg.data.synthetic)?;
            let manifest = save_dataset(&ds, out)?;
            println!("wrote {} classes to {}", manifest.classes.len(), out.display());
        }
        Command::Train => {
            let cfg = load_config(&cli, &overrides)?;
            let (ds, split) = prepare_data(&cfg)?;
            let dir = &cfg.output.dir;
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            let model = Model::init(cfg.model.clone(), cfg.seed)?;
            let out = train::train(&cfg, &ds, &split, model)?;
            train::save_log_csv(&out.log, &dir.join("log.csv"))?;
            save_checkpoint(&out.best, &dir.join("checkpoint"))?;
            let metrics = evaluate(&out.best, &test_plan(&cfg, &ds, &split))?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            println!(
                "test accuracy {:.4} ± {:.4} over {} episodes ({:.0}s training)",
                metrics.mean_accuracy, metrics.ci95, metrics.episodes, out.wall_time_secs
            );
        }
        Command::Eval {
            checkpoint,
            dump_weights,
        } => {
            let cfg = load_config(&cli, &overrides)?;
            let (ds, split) = prepare_data(&cfg)?;
            let model = load_checkpoint(checkpoint)?;
            let plan = test_plan(&cfg, &ds, &split);
            let metrics = evaluate(&model, &plan)?;
            std::fs::create_dir_all(&cfg.output.dir)?;
            write_json(&cfg.output.dir.join("metrics.json"), &metrics)?;
            let dump = dump_weights.or(cfg.output.dump_weights.then_some(cfg.eval.episodes));
            if let Some(n) = dump {
                diagnostics::save_weight_dump(&model, &plan, n, &cfg.output.dir.join("weights.csv"))?;
            }
            println!(
                "{}-way {}-shot accuracy {:.4} ± {:.4} over {} episodes{}",
                metrics.n_way,
                metrics.k_shot,
                metrics.mean_accuracy,
                metrics.ci95,
                metrics.episodes,
                if metrics.ci_degenerate { " (interval undefined)" } else { "" }
            );
        }
        Command::Ablate => {
            let cfg = load_config(&cli, &overrides)?;
            let (ds, split) = prepare_data(&cfg)?;
            let settings: Vec<(usize, usize)> = cfg.sweep.k_list.iter().map(|&k| (cfg.eval.n_way, k)).collect();
            let rows = ablation::ablation_grid(&cfg, &ds, &split, &settings)?;
            std::fs::create_dir_all(&cfg.output.dir)?;
            ablation::save_ablation_csv(&rows, &cfg.output.dir.join("ablation.csv"))?;
            for r in &rows {
                let cells: Vec<String> = r
                    .results
                    .iter()
                    .map(|m| format!("{}-shot {:.4}±{:.4}", m.k_shot, m.mean_accuracy, m.ci95))
                    .collect();
                println!("{:<5} {}", r.label(), cells.join("  "));
            }
        }
        Command::Sweep { checkpoint } => {
            let cfg = load_config(&cli, &overrides)?;
            let (ds, split) = prepare_data(&cfg)?;
            let model = load_checkpoint(checkpoint)?;
            let cells = sweep::sweep_nk(&cfg, &model, &ds, &split, &cfg.sweep.n_list, &cfg.sweep.k_list)?;
            std::fs::create_dir_all(&cfg.output.dir)?;
            sweep::save_sweep_csv(&cells, &cfg.output.dir.join("sweep.csv"))?;
            for c in &cells {
                match &c.metrics {
                    Some(m) => println!("{}-way {}-shot {:.4} ± {:.4}", c.n_way, c.k_shot, m.mean_accuracy, m.ci95),
                    None => println!("{}", c.note.as_deref().unwrap_or("skipped")),
                }
            }
        }
        Command::Diagnose { checkpoint, per_class } => {
            let cfg = load_config(&cli, &overrides)?;
            let (ds, split) = prepare_data(&cfg)?;
            let model = load_checkpoint(checkpoint)?;
            std::fs::create_dir_all(&cfg.output.dir)?;
            let variance = diagnostics::class_variance(&model, &ds, &split.test_class_ids, *per_class)?;
            variance.save_csv(&cfg.output.dir.join("variance.csv"))?;
            println!("max channel variance {:.4e}", variance.max_variance());
            if ds.synth_meta().is_some() {
                let align = diagnostics::patch_alignment(&model, &ds, &split.test_class_ids, *per_class)?;
                align.save_csv(&cfg.output.dir.join("alignment.csv"))?;
                println!(
                    "mean inter score: patch-aligned {:.4e}, background {:.4e}",
                    align.aligned_inter_mean, align.background_inter_mean
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = tdm_core::parallel::env_thread_cap();
    match tdm_core::parallel::with_threads(threads, || run(cli, overrides)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
