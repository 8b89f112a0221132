use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;
use s3_core::data::{self, SyntheticSpec};
use s3_core::experiment::{self, ExperimentConfig, ExperimentError};
use s3_core::gradcheck::{self, GradcheckOptions};

#[derive(Parser)]
#[command(name = "s3", version, about = "Train and compare models with segment-shuffle-stitch layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON experiment config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a baseline and its S3 variant and report the difference
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        s3: PathBuf,
    },
    /// Check every backward rule against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random inputs per primitive
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic dataset as train/test TSV files
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const CHECK_FAILED: u8 = 1;
const CONFIG_ERROR: u8 = 2;
const NUMERIC_ABORT: u8 = 3;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: CONFIG_ERROR,
            error: error.into(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = if e.is_numeric() { NUMERIC_ABORT } else { CONFIG_ERROR };
        Self { code, error: e.into() }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Compare { base, s3 } => cmd_compare(&base, &s3),
        Command::Gradcheck { seed, trials, corrupt } => cmd_gradcheck(seed, trials, corrupt),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let config = ExperimentConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(path: &Path) -> Outcome {
    let config = load_config(path)?;
    let report = experiment::run_to_dir(&config, &config.output_dir)?;
    let m = report.final_metrics;
    for (name, value) in [("accuracy", m.accuracy), ("mse", m.mse), ("mae", m.mae)] {
        if let Some(v) = value {
            println!("{name}\t{v:.4}");
        }
    }
    println!("iterations\t{}", report.iterations);
    println!("seconds\t{:.2}", report.wall_clock_seconds);
    info!("artifacts in {}", config.output_dir.display());
    Ok(())
}

fn cmd_compare(base: &Path, s3: &Path) -> Outcome {
    let base = load_config(base)?;
    let s3 = load_config(s3)?;
    let comparison = experiment::compare(&base, &s3)?;
    println!("task\tmetric\tbaseline\ts3\tdiff%");
    for row in &comparison.rows {
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:+.2}",
            row.task, row.metric, row.baseline, row.s3, row.diff_percent
        );
    }
    let std = &comparison.loss_std;
    println!("loss std\tbaseline {:.4}\ts3 {:.4}\treduction {:+.2}%", std.baseline, std.s3, std.reduction_percent);
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize, corrupt: Option<String>) -> Outcome {
    let options = GradcheckOptions { seed, trials, corrupt };
    let report = gradcheck::run(&options).map_err(Failure::config)?;
    for case in &report.cases {
        let verdict = if case.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>10.3e}  (tol {:.0e})  {verdict}", case.name, case.max_rel_err, case.tolerance);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: CHECK_FAILED,
            error: anyhow!("gradient mismatch in: {}", report.failures().join(", ")),
        })
    }
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Outcome {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("cannot read {}", spec_path.display()))
        .map_err(Failure::config)?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse {}", spec_path.display()))
        .map_err(Failure::config)?;
    let generated = data::generate(&spec).map_err(Failure::config)?;
    std::fs::create_dir_all(out).map_err(Failure::config)?;
    let stem = spec_path.file_stem().and_then(|s| s.to_str()).unwrap_or("synthetic");
    let labels = ["0".to_string(), "1".to_string()];
    for (split, series) in [("TRAIN", &generated.train), ("TEST", &generated.test)] {
        let path = out.join(format!("{stem}_{split}.tsv"));
        data::write_ucr_tsv(&path, series, &labels).map_err(Failure::config)?;
        println!("{}", path.display());
    }
    Ok(())
}
