//! Command-line front end: `generate`, `train`, `analyze` and `report`.
//!
//! Primary outputs are deterministic for a fixed config and seed; wall-clock
//! times and host details go only into `run_info.json`.

mod analyze;
mod config;
mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::multitask::{split_grouped_stratified, train, Dataset};
use crate::synthdata::{generate_to, read_dataset};

pub use analyze::{read_parent_map, run_analysis, RunArtifacts};
pub use config::{kind_name, load_generator, DatasetSource, ExperimentConfig, DEFAULT_SPLIT};
pub use report::{build_report, find_runs, read_summary, Flag, Report, ReportRow};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MODAUX_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
/// The config a run was trained with, seeds applied and dataset path fixed.
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const RUN_INFO: &str = "run_info.json";

#[derive(Debug, Parser)]
#[command(
    name = "modaux",
    version,
    about = "Multitask learning with modalities as auxiliary tasks"
)]
pub struct Cli {
    /// Default output root when --out is not given.
    #[arg(long, global = true, env = OUT_ENV, default_value = DEFAULT_OUT_ROOT)]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train one experiment, or every config in a directory.
    Train(TrainArgs),
    /// Run an explainability analysis on a trained run.
    Analyze(AnalyzeArgs),
    /// Tabulate best-epoch test metrics of several runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator parameters, or an experiment config with a [dataset] section.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config file, or a directory of them.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; for a config directory, the parent of one run
    /// directory per config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    /// Per-epoch Pearson correlation of main and auxiliary errors.
    Correlation,
    /// CC/CF/FC/FF timeline, plus cohort transitions with --anchor-epoch.
    Combos,
    /// Hierarchy adherence of fine predictions under coarse predictions.
    Hierarchy,
    /// Value-task MAE inside each correctness combination.
    ByCombo,
    /// Per-group main error and auxiliary accuracy.
    Groups,
    /// Main error of samples with correct vs wrong auxiliary predictions.
    Correctness,
    /// Target, prediction and error images of one sample.
    Maps,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub kind: AnalysisKind,
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Report directory; defaults to `<run>/analysis`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of subsampling and permutation tests.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation samples: train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Main task; defaults to the run's main task.
    #[arg(long)]
    pub main: Option<String>,
    /// Auxiliary task(s).
    #[arg(long)]
    pub aux: Vec<String>,
    /// Share of the evaluation split used for correlation.
    #[arg(long, default_value_t = crate::xai::DEFAULT_SUBSET)]
    pub subset: f64,
    /// Permutations of the correlation p-value
    #[arg(long, default_value_t = crate::xai::DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
    /// Epoch whose combinations define the cohort to follow
    #[arg(long)]
    pub anchor_epoch: Option<usize>,
    /// Comma-separated combinations defining the anchor cohort.
    #[arg(long, default_value = "FF")]
    pub anchor_set: String,
    #[arg(long)]
    pub coarse: Option<String>,
    #[arg(long)]
    pub fine: Option<String>,
    /// Parent map file; defaults to the tree dataset's own map.
    #[arg(long)]
    pub parent: Option<PathBuf>,
    /// Value task for by-combo.
    #[arg(long)]
    pub value: Option<String>,
    /// Samples per correctness class.
    #[arg(long, default_value_t = 300)]
    pub cap: usize,
    #[arg(long)]
    pub sample: Option<usize>,
    /// Epoch for maps; defaults to the best epoch.
    #[arg(long)]
    pub epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories holding runs.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'static str,
    started_unix_s: f64,
    elapsed_s: f64,
    host: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn write_run_info(dir: &Path, command: &str, started: f64, clock: Instant) -> Result<()> {
    let info = RunInfo {
        command,
        args: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix_s: started,
        elapsed_s: clock.elapsed().as_secs_f64(),
        host: std::env::var("HOSTNAME")
            .ok()
            .or_else(|| {
                std::fs::read_to_string("/etc/hostname")
                    .ok()
                    .map(|s| s.trim().to_string())
            })
            .unwrap_or_default(),
    };
    let p = dir.join(RUN_INFO);
    std::fs::write(&p, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(p, e))
}

fn cmd_generate(args: &GenerateArgs, root: &Path) -> Result<()> {
    let (started, clock) = (unix_now(), Instant::now());
    let (name, mut params) = load_generator(&args.config)?;
    if let Some(s) = args.seed {
        params.set_seed(s);
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| root.join(&name).join("dataset"));
    let (g, manifest) = generate_to(&params, &out)?;
    for line in &g.summary {
        println!("{line}");
    }
    println!(
        "wrote {} samples, {} modalities to {}",
        manifest.samples,
        manifest.modalities.len(),
        out.display()
    );
    write_run_info(&out, "generate", started, clock)
}

/// Trains one experiment into `out` and returns its run directory.
pub fn train_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let (started, clock) = (unix_now(), Instant::now());
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (dataset, data_dir): (Dataset, PathBuf) = match &cfg.dataset {
        DatasetSource::Path { path } => (read_dataset(path)?, path.clone()),
        DatasetSource::Generate(g) => {
            let dir = out.join("dataset");
            (generate_to(g, &dir)?.0.dataset, dir)
        }
    };
    let split = split_grouped_stratified(&dataset.samples, cfg.split, cfg.seed)?;
    let outcome = train(&dataset, &cfg.roles, &split, &cfg.train)?;
    outcome.write(out, &split)?;
    let resolved = ExperimentConfig {
        dataset: DatasetSource::Path {
            path: std::path::absolute(&data_dir).map_err(|e| Error::io(&data_dir, e))?,
        },
        out: None,
        ..cfg.clone()
    };
    let p = out.join(RESOLVED_CONFIG);
    std::fs::write(&p, resolved.to_toml()?).map_err(|e| Error::io(p, e))?;
    println!("{}: best epoch {}", cfg.name, outcome.best_epoch);
    for r in outcome.best_test_metrics() {
        println!("  test {}.{} = {:.4}", r.task, r.metric, r.value);
    }
    write_run_info(out, "train", started, clock)?;
    Ok(out.to_path_buf())
}

fn cmd_train(args: &TrainArgs, root: &Path) -> Result<()> {
    let configs = ExperimentConfig::load_all(&args.config)?;
    let many = configs.len() > 1 || args.config.is_dir();
    for (_, cfg) in configs {
        let cfg = cfg.with_seed(args.seed);
        let out = match (&args.out, many) {
            (Some(o), false) => o.clone(),
            (Some(o), true) => o.join(&cfg.name),
            (None, _) => cfg.out.clone().unwrap_or_else(|| root.join(&cfg.name)),
        };
        train_experiment(&cfg, &out)?;
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    for f in run_analysis(args)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs, root: &Path) -> Result<()> {
    let runs = find_runs(&args.runs)?;
    let summaries = runs
        .iter()
        .map(|r| {
            let name = r.file_name().map_or_else(
                || r.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            read_summary(r).map(|s| (name, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(&summaries);
    let out = args.out.clone().unwrap_or_else(|| root.join("report"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (name, text) in [
        ("report.csv", report.to_csv()),
        ("report.md", report.to_markdown()),
    ] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))?;
    }
    print!("{}", report.to_markdown());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, &cli.out_root),
        Command::Train(a) => cmd_train(a, &cli.out_root),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Report(a) => cmd_report(a, &cli.out_root),
    }
}

/// Parses `args` and runs the command. Failures print one
/// `error[CODE]: message` line to stderr and exit with status 1 (2 for
/// usage errors).
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
