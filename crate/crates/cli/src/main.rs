//! `pada`: train, sweep and inspect partial adversarial adaptation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pada::config::ExperimentConfig;
use pada::eval::{evaluate, report_to_csv, sweep_target_classes, sweep_to_csv, weight_stats};
use pada::model::params_to_csv;
use pada::train::{history_from_csv, history_to_csv, train_run, Mode};
use pada::weighting::ClassWeights;
use pada::Error;

#[derive(Parser)]
#[command(
    name = "pada",
    version,
    about = "Partial adversarial domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key=value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory. Takes precedence over the `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes history.csv, params.csv, report.csv and config.txt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// source-only, dann, pada, pada-no-classifier-weight or pada-no-adversarial-weight.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Retrain from scratch for every (target class count, mode) cell; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Target class counts, e.g. `8,6,4,2`.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        ks: Vec<usize>,
        /// Modes to compare, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "dann,pada")]
        mode: Vec<Mode>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Final-epoch class weights from a history file, as `class,weight` CSV.
    ///
    /// Shared/outlier means are appended when `--config` or `--set` supplies
    /// the dataset, since that fixes the target class set.
    Weights {
        #[arg(long)]
        history: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| with_path(path, e.into()))?;
            ExperimentConfig::parse(&text).map_err(|e| with_path(path, e))?
        }
        None => ExperimentConfig::default(),
    };
    for s in &args.set {
        cfg.apply_override(s)?;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_path(path: &Path, e: Error) -> Error {
    Error::Parameter(format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling so a failed run never leaves a
/// truncated artifact under the final name.
fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn train(args: &ConfigArgs, mode: Option<Mode>) -> Result<(), Error> {
    let mut cfg = load_config(args)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    let ds = cfg.load_dataset()?;
    let mc = cfg.model_config(ds.feature_dim(), ds.num_source_classes());
    let outcome = train_run(&ds, &mc, &cfg.train)?;

    fs::create_dir_all(&cfg.out)?;
    let history = history_to_csv(
        &outcome.history,
        ds.num_source_classes(),
        Some(ds.target_class_set()),
    )?;
    write_file(&cfg.out.join("history.csv"), &history)?;
    write_file(&cfg.out.join("params.csv"), &params_to_csv(&outcome.params))?;
    let target_acc = match evaluate(&outcome.params, &ds) {
        Ok(report) => {
            write_file(&cfg.out.join("report.csv"), &report_to_csv(&report))?;
            report.target_accuracy.to_string()
        }
        Err(Error::Unavailable(_)) => {
            let src = outcome
                .history
                .last()
                .map_or("NA".into(), |r| r.source_accuracy.to_string());
            let text = format!("key,value\ntarget_accuracy,NA\nsource_accuracy,{src}\n");
            write_file(&cfg.out.join("report.csv"), &text)?;
            "NA".into()
        }
        Err(e) => return Err(e),
    };
    write_file(&cfg.out.join("config.txt"), &cfg.to_text())?;
    println!("target_acc={target_acc}");
    Ok(())
}

fn sweep(
    args: &ConfigArgs,
    ks: &[usize],
    modes: &[Mode],
    jobs: Option<usize>,
) -> Result<bool, Error> {
    let cfg = load_config(args)?;
    let ds = cfg.load_dataset()?;
    let mc = cfg.model_config(ds.feature_dim(), ds.num_source_classes());
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::Parameter("--jobs must be positive".into()));
    }
    let rows = sweep_target_classes(&ds, ks, &mc, &cfg.train, modes, jobs)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("sweep.csv");
    write_file(&path, &sweep_to_csv(&rows))?;
    for r in &rows {
        match &r.outcome {
            Ok(c) => println!("k={} mode={} target_acc={}", r.k, r.mode, c.target_accuracy),
            Err(msg) => eprintln!("k={} mode={} failed: {msg}", r.k, r.mode),
        }
    }
    Ok(rows.iter().any(|r| r.outcome.is_ok()))
}

fn weights(history_path: &Path, args: &ConfigArgs) -> Result<(), Error> {
    let text = fs::read_to_string(history_path).map_err(|e| with_path(history_path, e.into()))?;
    let history = history_from_csv(&text).map_err(|e| with_path(history_path, e))?;
    let last = history.last().ok_or_else(|| {
        with_path(
            history_path,
            Error::Parameter("history has no epochs".into()),
        )
    })?;

    let mut out = String::from("class,weight\n");
    for (k, g) in last.gamma.iter().enumerate() {
        writeln!(out, "{k},{g}").unwrap();
    }
    if args.config.is_some() || !args.set.is_empty() {
        let cfg = load_config(args)?;
        let ds = cfg.load_dataset()?;
        if ds.num_source_classes() != last.gamma.len() {
            return Err(Error::Parameter(format!(
                "history has {} classes, config has {}",
                last.gamma.len(),
                ds.num_source_classes()
            )));
        }
        let w = ClassWeights::from_vec(last.gamma.clone(), true)?;
        let stats = weight_stats(&w, ds.target_class_set())?;
        writeln!(out, "shared_mean,{}", stats.mean_shared).unwrap();
        writeln!(out, "outlier_mean,{}", stats.mean_outlier).unwrap();
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_file(&dir.join("weights.csv"), &out)?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, mode } => train(config, *mode),
        Command::Sweep {
            config,
            ks,
            mode,
            jobs,
        } => match sweep(config, ks, mode, *jobs) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Parameter("every sweep cell failed".into())),
            Err(e) => Err(e),
        },
        Command::Weights { history, config } => weights(history, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
