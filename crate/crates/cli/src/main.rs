use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scseg_core::phantom::gen_phantom;
use scseg_core::pipeline::{self, CropMode, RunConfig};
use scseg_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "scseg", version, about = "Smart-cropping segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory holding every stage's outputs.
    #[arg(long)]
    run: PathBuf,
    /// Dataset manifest (overrides `dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct ModeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Crop mode: center, smart or oracle (overrides `crop_mode`).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    GenPhantom {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Build the fold plan and audit label imbalance.
    Prepare(RunArgs),
    /// Train the coarse box network for every fold.
    TrainCoarse(RunArgs),
    /// Crop every fold's slices.
    Smartcrop(ModeArgs),
    /// Train the segmenters for every fold.
    TrainSeg(ModeArgs),
    /// Score test folds.
    Evaluate(ModeArgs),
    /// Center versus smart cropping over the same folds.
    Compare(RunArgs),
    /// Render tables, quartiles and box plots from `compare`.
    Report(RunArgs),
}

fn resolve(args: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    pipeline::load_config(args.config.as_deref(), &overrides)
}

fn json_string(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

fn run_config(args: &RunArgs, mode: Option<&str>) -> Result<RunConfig> {
    let mut extra = Vec::new();
    if let Some(d) = &args.dataset {
        extra.push(format!("dataset={}", json_string(&d.to_string_lossy())));
    }
    if let Some(m) = mode {
        extra.push(format!("crop_mode={}", json_string(m)));
    }
    resolve(&args.config, extra)
}

fn run_mode(args: &ModeArgs) -> Result<(RunConfig, CropMode)> {
    let cfg = run_config(&args.run, args.mode.as_deref())?;
    let mode = cfg.crop_mode;
    Ok((cfg, mode))
}

fn execute(command: Command) -> Result<()> {
    let dir = match command {
        Command::GenPhantom {
            config,
            out,
            seed,
            patients,
        } => {
            let mut extra = Vec::new();
            extra.extend(seed.map(|s| format!("phantom.seed={s}")));
            extra.extend(patients.map(|p| format!("phantom.patients={p}")));
            let cfg = resolve(&config, extra)?;
            let manifest = gen_phantom(&cfg.phantom, &out)?;
            eprintln!("gen-phantom: {} patients in {}", manifest.patients.len(), out.display());
            out
        }
        Command::Prepare(a) => {
            let plan = pipeline::prepare(&run_config(&a, None)?, &a.run)?;
            eprintln!("prepare: {} folds, plan {}", plan.k, plan.id);
            a.run
        }
        Command::TrainCoarse(a) => {
            pipeline::train_coarse(&run_config(&a, None)?, &a.run)?;
            a.run
        }
        Command::Smartcrop(a) => {
            let (cfg, mode) = run_mode(&a)?;
            pipeline::smartcrop(&cfg, &a.run.run, mode)?;
            a.run.run
        }
        Command::TrainSeg(a) => {
            let (cfg, mode) = run_mode(&a)?;
            pipeline::train_seg(&cfg, &a.run.run, mode)?;
            a.run.run
        }
        Command::Evaluate(a) => {
            let (cfg, mode) = run_mode(&a)?;
            let e = pipeline::evaluate(&cfg, &a.run.run, mode)?;
            eprintln!("evaluate {mode}: {} records", e.records.len());
            a.run.run
        }
        Command::Compare(a) => {
            let report = pipeline::compare(&run_config(&a, None)?, &a.run)?;
            print!("{}", report.table_csv());
            a.run
        }
        Command::Report(a) => {
            pipeline::report(&run_config(&a, None)?, &a.run)?;
            a.run
        }
    };
    pipeline::write_checksums(&dir)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::DataFormat => 3,
        ErrorClass::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
