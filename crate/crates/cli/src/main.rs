//! `crex-lab`: generate synthetic counting scenarios, train embeddings on
//! contrastive and detection losses, run the loss/selection ablations, and
//! evaluate counting metrics — all from versioned JSON configs, emitting
//! CSV/JSON reports plus a manifest per run.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 1 runtime
//! failure. Malformed input files never panic.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crex_core::experiment::{
    ablate_loss, ablate_selection, evaluate_scenario, sweep_rows, ExperimentConfig, TrainSummary,
};
use crex_core::report::{
    ablate_loss_csv_bytes, ablate_selection_csv_bytes, sweep_csv_bytes, write_csv_file,
    write_evaluation, write_json, write_manifest, write_trace_csv, Manifest, OutputOptions,
};
use crex_core::synthworld::{generate, Scenario};
use crex_core::trainer::train;
use crex_core::{SelectionStrategy, SelectionVariant};

#[derive(Parser)]
#[command(name = "crex-lab", version, about = "Synthetic contrastive counting laboratory")]
struct Cli {
    /// Omit timestamps from CSV headers and manifests so identical runs
    /// produce byte-identical outputs.
    #[arg(long, global = true)]
    no_timestamp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectionArg {
    /// Top N, the ground-truth count.
    Topn,
    /// Fixed top 5.
    Top5,
    /// N plus floor(sqrt(N)).
    TopnSqrt,
    /// N plus floor(2 log2 N).
    Topn2log,
    /// Fixed top K; K comes from --top-fixed.
    TopFixed,
}

impl SelectionArg {
    fn variant(self, fixed_k: usize) -> SelectionVariant {
        match self {
            SelectionArg::Topn => SelectionVariant::TopN,
            SelectionArg::Top5 => SelectionVariant::TopFixed(5),
            SelectionArg::TopnSqrt => SelectionVariant::TopNPlusSqrt,
            SelectionArg::Topn2log => SelectionVariant::TopNPlusTwoLog,
            SelectionArg::TopFixed => SelectionVariant::TopFixed(fixed_k),
        }
    }
}

/// Flags shared by the experiment-running subcommands.
#[derive(Args)]
struct RunFlags {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Selection strategy override.
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,

    /// K for --selection top-fixed (and the fixed row of ablate-selection).
    #[arg(long, default_value_t = 5)]
    top_fixed: usize,

    /// Point-matching distance threshold override.
    #[arg(long)]
    match_threshold: Option<f64>,

    /// Detection class-token threshold override.
    #[arg(long)]
    cls_threshold: Option<f64>,

    /// Detection expression-token threshold override.
    #[arg(long)]
    token_threshold: Option<f64>,

    /// Training step override.
    #[arg(long)]
    steps: Option<usize>,

    /// Learning-rate override.
    #[arg(long)]
    learning_rate: Option<f64>,

    /// Trainer seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario JSON from a config's scenario spec.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output scenario file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one query of a scenario and emit the trace and summary.
    Train {
        #[arg(long)]
        scenario: PathBuf,
        /// Index into the scenario's query list.
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Compare the standard and modified contrastive objectives.
    AblateLoss {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Train under each selection strategy and report final quality.
    AblateSelection {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate detection counts and point matching for every query.
    Evaluate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Generate, train, and evaluate one scenario per sweep value. The
    /// config must carry a `sweep` section.
    Sweep {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn init_thread_pool() -> CliResult<()> {
    if let Ok(value) = std::env::var("CREX_LAB_THREADS") {
        let threads: usize = value.parse().map_err(|_| {
            CliError::Config(format!("CREX_LAB_THREADS must be a positive integer, got '{value}'"))
        })?;
        if threads == 0 {
            return Err(CliError::Config(
                "CREX_LAB_THREADS must be a positive integer".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(runtime_err)?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(config_err),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_scenario(path: &Path) -> CliResult<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn apply_flags(config: &mut ExperimentConfig, flags: &RunFlags) -> CliResult<()> {
    if let Some(selection) = flags.selection {
        config.train.selection = SelectionStrategy::new(
            selection.variant(flags.top_fixed),
            config.train.selection.n_ground_truth,
        );
    }
    if let Some(t) = flags.match_threshold {
        config.metrics.match_threshold = Some(t);
    }
    if let Some(t) = flags.cls_threshold {
        config.thresholds.cls_threshold = t;
    }
    if let Some(t) = flags.token_threshold {
        config.thresholds.token_threshold = t;
    }
    if let Some(steps) = flags.steps {
        config.train.steps = steps;
    }
    if let Some(lr) = flags.learning_rate {
        config.train.learning_rate = lr;
    }
    if let Some(seed) = flags.seed {
        config.train.seed = seed;
    }
    config.validate().map_err(config_err)
}

fn options(no_timestamp: bool) -> OutputOptions {
    OutputOptions {
        timestamp: !no_timestamp,
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn run(cli: Cli) -> CliResult<()> {
    let opts = options(cli.no_timestamp);
    match cli.command {
        Command::Generate { config, out } => {
            let config = load_config(Some(&config))?;
            let scenario = generate(&config.scenario).map_err(config_err)?;
            write_json(&out, &scenario).map_err(runtime_err)?;
            let manifest = Manifest::new("generate", config.sha256(), config.scenario.seed, &opts);
            write_manifest(&manifest_path(&out), &manifest).map_err(runtime_err)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train {
            scenario,
            query,
            out_dir,
            flags,
        } => {
            let mut config = load_config(flags.config.as_deref())?;
            apply_flags(&mut config, &flags)?;
            let scenario = load_scenario(&scenario)?;
            let q = scenario
                .queries
                .get(query)
                .ok_or_else(|| CliError::Config(format!("query index {query} out of range")))?
                .clone();
            let trace = train(&scenario, &q, &config.train).map_err(runtime_err)?;
            write_trace_csv(&out_dir.join("trace.csv"), &trace, &opts).map_err(runtime_err)?;
            write_json(
                &out_dir.join("summary.json"),
                &TrainSummary::from_trace(&trace, config.train.steps),
            )
            .map_err(runtime_err)?;
            let manifest = Manifest::new("train", config.sha256(), scenario.spec.seed, &opts);
            write_manifest(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;
            println!(
                "trained {} steps (diverged: {}); wrote {}",
                config.train.steps,
                trace.diverged,
                out_dir.display()
            );
            Ok(())
        }
        Command::AblateLoss {
            scenario,
            query,
            out_dir,
            flags,
        } => {
            let mut config = load_config(flags.config.as_deref())?;
            apply_flags(&mut config, &flags)?;
            let scenario = load_scenario(&scenario)?;
            let rows = ablate_loss(&scenario, query, &config.train).map_err(runtime_err)?;
            let bytes = ablate_loss_csv_bytes(&rows, &opts).map_err(runtime_err)?;
            write_csv_file(&out_dir.join("ablate_loss.csv"), &bytes).map_err(runtime_err)?;
            let manifest = Manifest::new("ablate-loss", config.sha256(), scenario.spec.seed, &opts);
            write_manifest(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;
            println!("wrote {}", out_dir.join("ablate_loss.csv").display());
            Ok(())
        }
        Command::AblateSelection {
            scenario,
            query,
            out_dir,
            flags,
        } => {
            let mut config = load_config(flags.config.as_deref())?;
            apply_flags(&mut config, &flags)?;
            let scenario = load_scenario(&scenario)?;
            let rows = ablate_selection(&scenario, query, &config.train, flags.top_fixed)
                .map_err(runtime_err)?;
            let bytes = ablate_selection_csv_bytes(&rows, &opts).map_err(runtime_err)?;
            write_csv_file(&out_dir.join("ablate_selection.csv"), &bytes).map_err(runtime_err)?;
            let manifest = Manifest::new(
                "ablate-selection",
                config.sha256(),
                scenario.spec.seed,
                &opts,
            );
            write_manifest(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;
            println!("wrote {}", out_dir.join("ablate_selection.csv").display());
            Ok(())
        }
        Command::Evaluate {
            scenario,
            out_dir,
            flags,
        } => {
            let mut config = load_config(flags.config.as_deref())?;
            apply_flags(&mut config, &flags)?;
            let scenario = load_scenario(&scenario)?;
            let eval = evaluate_scenario(&scenario, &config.thresholds, &config.metrics)
                .map_err(runtime_err)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
            write_evaluation(&out_dir, &eval, &opts).map_err(runtime_err)?;
            let manifest = Manifest::new("evaluate", config.sha256(), scenario.spec.seed, &opts);
            write_manifest(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;
            println!(
                "mae {} rmse {} f1 {}; wrote {}",
                eval.mae,
                eval.rmse,
                eval.mean_f1,
                out_dir.display()
            );
            Ok(())
        }
        Command::Sweep { out_dir, flags } => {
            let config_path = flags.config.clone().ok_or_else(|| {
                CliError::Config("sweep requires --config with a 'sweep' section".into())
            })?;
            let mut config = load_config(Some(&config_path))?;
            apply_flags(&mut config, &flags)?;
            if config.sweep.is_none() {
                return Err(CliError::Config(
                    "sweep command needs a 'sweep' section in the config".into(),
                ));
            }
            let rows = sweep_rows(&config).map_err(runtime_err)?;
            let bytes = sweep_csv_bytes(&rows, &opts).map_err(runtime_err)?;
            write_csv_file(&out_dir.join("sweep.csv"), &bytes).map_err(runtime_err)?;
            let manifest = Manifest::new("sweep", config.sha256(), config.scenario.seed, &opts);
            write_manifest(&out_dir.join("manifest.json"), &manifest).map_err(runtime_err)?;
            println!("{} sweep rows; wrote {}", rows.len(), out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool() {
        return report(e);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    match e {
        CliError::Config(msg) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        CliError::Runtime(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
