//! Command-line entry points.
//!
//! Four subcommands cover the full workflow: `generate` writes a synthetic
//! benchmark CSV, `train` fits one model and records its artifacts,
//! `evaluate` scores a saved model on a CSV, and `ablate` trains the three
//! arms on identical data and tabulates the comparison.
//!
//! Standard output stays machine-readable: `evaluate` prints a single JSON
//! line and the other subcommands print nothing there, pushing progress to
//! standard error. Exit codes: 0 success, 1 usage or input errors, 2
//! runtime failures. Artifact-writing subcommands only touch their
//! `--out-dir`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_csv, save_csv, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::forest::{evaluate_sample, ForestModel};
use crate::metrics::{emit_summary, emit_trace, entropy_by_target_bin, EntropyBin};
use crate::trainer::{evaluate, train, Evaluation, TrainMode, TrainOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "spudrf",
    version,
    about = "Soft regression forests with self-paced example selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark CSV from a JSON spec.
    Generate {
        /// JSON file describing the dataset; `{}` uses the defaults.
        #[arg(long)]
        spec: PathBuf,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write model.json, trace.csv, and summary.json.
    Train {
        /// JSON run config; `{}` uses the defaults.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the artifacts, created if missing.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a saved model on a CSV and print MAE/CS as JSON.
    Evaluate {
        /// model.json from a training run.
        #[arg(long)]
        model: PathBuf,
        /// CSV with the same feature width the model was trained on.
        #[arg(long)]
        data: PathBuf,
        /// Absolute-error level for the cumulative score.
        #[arg(long)]
        cs_level: f64,
    },
    /// Train all three arms on identical data and write a comparison table.
    Ablate {
        /// JSON run config; the `mode` field is overridden per arm.
        #[arg(long)]
        config: PathBuf,
        /// Directory for per-arm artifacts and ablation.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land on stdout and succeed; real
            // usage mistakes land on stderr.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { spec, out } => generate_command(&spec, &out),
        Command::Train { config, out_dir } => train_command(&config, &out_dir),
        Command::Evaluate {
            model,
            data,
            cs_level,
        } => {
            let line = evaluate_output(&model, &data, cs_level)?;
            println!("{line}");
            Ok(())
        }
        Command::Ablate { config, out_dir } => ablate_command(&config, &out_dir),
    }
}

fn generate_command(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::io(&spec_path.display().to_string(), e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: SyntheticSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(format!("invalid spec: {}", e.inner()))
        } else {
            Error::Config(format!("invalid spec at `{path}`: {}", e.inner()))
        }
    })?;
    let dataset = generate_synthetic(&spec)?;
    save_csv(&dataset, out)?;
    eprintln!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

/// What `evaluate` prints: metric names and order are part of the contract.
#[derive(Debug, Serialize)]
struct EvaluateOutput {
    mae: f64,
    cs: f64,
}

/// The JSON line for `evaluate`, separated from printing for tests.
pub fn evaluate_output(model_path: &Path, data_path: &Path, cs_level: f64) -> Result<String> {
    let model = ForestModel::load(model_path)?;
    let data = load_csv(data_path)?;
    let eval = evaluate(&model, &data, cs_level)?;
    let out = EvaluateOutput {
        mae: eval.mae,
        cs: eval.cs,
    };
    serde_json::to_string(&out).map_err(|e| Error::Numeric(format!("serializing metrics: {e}")))
}

/// Everything summary.json records about one training run.
#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    /// The config as executed, with the mode's constraints applied.
    config: RunConfig,
    train_samples: usize,
    test_samples: usize,
    warmup_steps: usize,
    warmup_epoch_seeds: &'a [u64],
    paces: &'a [crate::trainer::PaceRecord],
    train: Evaluation,
    test: Evaluation,
    /// Mean predictive-entropy bound per target bin on the training set.
    entropy_bins: Vec<EntropyBin>,
}

/// Train per `config` and write model.json, trace.csv, and summary.json
/// into `out_dir`. Returns the outcome for callers that keep going (the
/// ablation reuses this per arm).
fn run_training(
    config: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(&out_dir.display().to_string(), e))?;
    let outcome = train(
        &config.train_config(),
        train_set,
        test_set,
        config.report.cs_level,
    )?;
    outcome.model.save(&out_dir.join("model.json"))?;
    let trace: Vec<_> = outcome
        .report
        .paces
        .iter()
        .map(|p| p.trace.clone())
        .collect();
    emit_trace(&trace, &out_dir.join("trace.csv"))?;
    let train_eval = evaluate(&outcome.model, train_set, config.report.cs_level)?;
    let test_eval = evaluate(&outcome.model, test_set, config.report.cs_level)?;
    let summary = RunSummary {
        config: config.effective(),
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        warmup_steps: outcome.report.warmup_steps,
        warmup_epoch_seeds: &outcome.report.warmup_epoch_seeds,
        paces: &outcome.report.paces,
        train: train_eval,
        test: test_eval,
        entropy_bins: entropy_by_target_bin(
            &outcome.model,
            train_set,
            config.report.entropy_bin_width,
        )?,
    };
    emit_summary(&summary, &out_dir.join("summary.json"))?;
    eprintln!(
        "wrote model.json, trace.csv, summary.json to {}",
        out_dir.display()
    );
    Ok(outcome)
}

fn train_command(config_path: &Path, out_dir: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let (train_set, test_set) = config.resolve_data()?;
    run_training(&config, &train_set, &test_set, out_dir)?;
    Ok(())
}

/// Mean absolute error restricted to targets at or above `threshold`;
/// NaN when the region is empty.
fn rare_region_mae(model: &ForestModel, data: &Dataset, threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in &data.samples {
        if sample.target >= threshold {
            let eval = evaluate_sample(model, &sample.features, sample.target)?;
            total += (eval.prediction - sample.target).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(f64::NAN);
    }
    Ok(total / count as f64)
}

fn ablate_command(config_path: &Path, out_dir: &Path) -> Result<()> {
    let base = RunConfig::load(config_path)?;
    // One resolve, shared by every arm: identical data, identical split.
    let (train_set, test_set) = base.resolve_data()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(&out_dir.display().to_string(), e))?;
    let arms = [
        ("drf", TrainMode::Drf),
        ("sp-drf", TrainMode::SpDrf),
        ("spudrf", TrainMode::Spudrf),
    ];
    let mut table = String::from("arm,test_mae,test_cs,rare_region_mae\n");
    for (name, mode) in arms {
        eprintln!("ablation arm: {name}");
        let arm_config = RunConfig {
            mode,
            ..base.clone()
        };
        let outcome = run_training(&arm_config, &train_set, &test_set, &out_dir.join(name))?;
        let test_eval = evaluate(&outcome.model, &test_set, base.report.cs_level)?;
        let rare = rare_region_mae(&outcome.model, &test_set, base.report.rare_threshold)?;
        table.push_str(&format!(
            "{name},{},{},{}\n",
            test_eval.mae, test_eval.cs, rare
        ));
    }
    let table_path = out_dir.join("ablation.csv");
    fs::write(&table_path, table).map_err(|e| Error::io(&table_path.display().to_string(), e))?;
    eprintln!("wrote {}", table_path.display());
    Ok(())
}
