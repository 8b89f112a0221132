//! Config-driven runs and their on-disk artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{
    self, DataError, ForecastOptions, ForecastWindow, LabeledSeries, SyntheticSpec, UcrOptions,
};
use crate::eval::{ComparisonResult, EvalError};
use crate::io::write_atomic;
use crate::models::{Model, ModelConfig, ModelError, Task};
use crate::s3::join;
use crate::train::{self, LossKind, RunReport, TrainConfig, TrainData, TrainError};

pub const SCHEMA_VERSION: u32 = 1;

/// Allowed values of the stack hyperparameters unless overridden.
pub const SEGMENT_RANGE: [usize; 5] = [2, 4, 8, 16, 24];
pub const LAYER_RANGE: [usize; 3] = [1, 2, 3];
pub const THETA_RANGE: [f64; 3] = [0.5, 1.0, 2.0];
pub const LAMBDA_RANGE: [usize; 3] = [1, 2, 3];

pub const REPORT_FILE: &str = "report.json";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const PERM_TRACE_FILE: &str = "perm_trace.csv";
pub const WEIGHTS_TRACE_FILE: &str = "weights_trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const COMPARISON_FILE: &str = "comparison.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("configs differ outside the S3 block at `{0}`")]
    Divergence(String),
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    /// True for failures of the numbers themselves rather than the setup.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Train(TrainError::NonFiniteLoss { .. }))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Ucr {
        train: PathBuf,
        test: PathBuf,
        #[serde(flatten)]
        options: UcrOptions,
    },
    ForecastCsv {
        path: PathBuf,
        #[serde(flatten)]
        options: ForecastOptions,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Accept stack hyperparameters outside the usual ranges.
    #[serde(default)]
    pub allow_out_of_range: bool,
}

impl ExperimentConfig {
    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: Self = serde_json::from_str(&text).map_err(|source| ExperimentError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSource::Ucr { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DatasetSource::ForecastCsv { path, .. } => fix(path),
            DatasetSource::Synthetic(_) => {}
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.train.learning_rate <= 0.0 {
            return fail("learning rate must be positive".into());
        }
        if let Some(stack) = &self.model.s3 {
            if !self.allow_out_of_range {
                if !SEGMENT_RANGE.contains(&stack.segments) {
                    return fail(format!("segments {} outside {SEGMENT_RANGE:?}", stack.segments));
                }
                if !LAYER_RANGE.contains(&stack.layers) {
                    return fail(format!("layers {} outside {LAYER_RANGE:?}", stack.layers));
                }
                if !THETA_RANGE.contains(&stack.theta) {
                    return fail(format!("theta {} outside {THETA_RANGE:?}", stack.theta));
                }
                if !LAMBDA_RANGE.contains(&stack.lambda) {
                    return fail(format!("lambda {} outside {LAMBDA_RANGE:?}", stack.lambda));
                }
            }
        }
        let expected_loss = match self.model.task {
            Task::Classification { .. } => LossKind::CrossEntropy,
            Task::Forecasting { .. } => LossKind::Mse,
        };
        if self.train.loss != expected_loss {
            return fail(format!("loss {:?} does not suit the model task", self.train.loss));
        }
        match &self.dataset {
            DatasetSource::Ucr { train, test, .. } => {
                for p in [train, test] {
                    if !p.is_file() {
                        return fail(format!("dataset file {} does not exist", p.display()));
                    }
                }
                if !matches!(self.model.task, Task::Classification { .. }) {
                    return fail("UCR data needs a classification model".into());
                }
            }
            DatasetSource::ForecastCsv { path, options } => {
                if !path.is_file() {
                    return fail(format!("dataset file {} does not exist", path.display()));
                }
                match self.model.task {
                    Task::Forecasting { horizon } if horizon == options.horizon && options.context == self.model.input_len => {}
                    _ => return fail("forecast context and horizon must match the model".into()),
                }
            }
            DatasetSource::Synthetic(spec) => {
                spec.validate()?;
                let fits = spec.length == self.model.input_len
                    && spec.channels == self.model.channels
                    && matches!(self.model.task, Task::Classification { classes } if classes >= 2);
                if !fits {
                    return fail("synthetic series shape does not match the model".into());
                }
            }
        }
        Ok(())
    }
}

/// Samples held in memory for one run.
#[derive(Debug, Clone)]
pub enum LoadedData {
    Classification {
        train: Vec<LabeledSeries>,
        test: Vec<LabeledSeries>,
        classes: usize,
    },
    Forecasting {
        train: Vec<ForecastWindow>,
        test: Vec<ForecastWindow>,
    },
}

impl LoadedData {
    pub fn view(&self) -> TrainData<'_> {
        match self {
            Self::Classification { train, test, .. } => TrainData::Classification { train, test },
            Self::Forecasting { train, test } => TrainData::Forecasting { train, test },
        }
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<LoadedData> {
    Ok(match source {
        DatasetSource::Ucr { train, test, options } => {
            let ds = data::load_ucr_tsv(train, test, options)?;
            let classes = ds.classes();
            LoadedData::Classification {
                train: ds.train,
                test: ds.test,
                classes,
            }
        }
        DatasetSource::ForecastCsv { path, options } => {
            let ds = data::load_forecast_csv(path, options)?;
            LoadedData::Forecasting {
                train: ds.train,
                test: ds.test,
            }
        }
        DatasetSource::Synthetic(spec) => {
            let ds = data::generate(spec)?;
            LoadedData::Classification {
                train: ds.train,
                test: ds.test,
                classes: 2,
            }
        }
    })
}

/// Trains the configured model on the configured data. Nothing is written.
pub fn run(config: &ExperimentConfig) -> Result<(Model, RunReport)> {
    config.validate()?;
    let data = load_dataset(&config.dataset)?;
    if let (LoadedData::Classification { classes, .. }, Task::Classification { classes: model_classes }) =
        (&data, config.model.task)
    {
        if *classes > model_classes {
            return Err(ExperimentError::Config(format!(
                "dataset has {classes} classes, model only {model_classes}"
            )));
        }
    }
    let mut model = Model::build(&config.model, config.train.seed)?;
    log::info!(
        "training {} parameters ({} in S3) for {} epochs",
        model.param_count(),
        model.s3_param_count(),
        config.train.epochs
    );
    let report = train::train(&mut model, &data.view(), &config.train)?;
    Ok((model, report))
}

/// Runs and writes every artifact into `dir`, which is created if needed.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    let (model, report) = run(config)?;
    write_artifacts(dir, &model, &report)?;
    Ok(report)
}

fn csv_bytes<R: IntoIterator<Item = Vec<String>>>(header: &[&str], rows: R) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))
}

pub fn loss_trace_csv(report: &RunReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["iteration", "loss"],
        report.loss_trace.iter().map(|p| vec![p.iteration.to_string(), format!("{:?}", p.loss)]),
    )
}

pub fn perm_trace_csv(report: &RunReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["step", "layer", "p_values", "sigma"],
        report.permutation_trace.iter().flat_map(|r| r.rows()).map(Vec::from),
    )
}

pub fn weights_trace_csv(report: &RunReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["step", "layer", "w1", "w2"],
        report.weights_trace.iter().flat_map(|r| {
            r.layers
                .iter()
                .enumerate()
                .map(move |(l, w)| vec![r.step.to_string(), l.to_string(), join(&w.w1), join(&w.w2)])
        }),
    )
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_atomic(&dir.join(REPORT_FILE), &json)?;
    Ok(())
}

pub fn write_artifacts(dir: &Path, model: &Model, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_report(dir, report)?;
    write_atomic(&dir.join(LOSS_TRACE_FILE), &loss_trace_csv(report)?)?;
    write_atomic(&dir.join(PERM_TRACE_FILE), &perm_trace_csv(report)?)?;
    write_atomic(&dir.join(WEIGHTS_TRACE_FILE), &weights_trace_csv(report)?)?;
    model.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// First field where two JSON documents differ, as a dotted path.
fn first_difference(a: &Value, b: &Value, path: &str) -> Option<String> {
    let at = |key: &str| {
        if path.is_empty() {
            key.to_string()
        } else {
            format!("{path}.{key}")
        }
    };
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| match (x.get(k), y.get(k)) {
                (Some(u), Some(v)) => first_difference(u, v, &at(k)),
                _ => Some(at(k)),
            })
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .find_map(|(i, (u, v))| first_difference(u, v, &at(&i.to_string()))),
        _ if a == b => None,
        _ => Some(if path.is_empty() { "<root>".into() } else { path.into() }),
    }
}

/// Checks that two configs agree on everything but the S3 block and the
/// output directory.
pub fn check_comparable(base: &ExperimentConfig, s3: &ExperimentConfig) -> Result<()> {
    let strip = |c: &ExperimentConfig| -> Result<Value> {
        let mut c = c.clone();
        c.model.s3 = None;
        c.output_dir = PathBuf::new();
        Ok(serde_json::to_value(c)?)
    };
    match first_difference(&strip(base)?, &strip(s3)?, "") {
        Some(field) => Err(ExperimentError::Divergence(field)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStdComparison {
    pub baseline: f64,
    pub s3: f64,
    /// `(baseline - s3) / baseline * 100`; positive means a smoother S3 run.
    pub reduction_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonResult>,
    pub loss_std: LossStdComparison,
}

/// Metric rows and loss smoothness of a baseline run against an S3 run.
pub fn compare_reports(base: &RunReport, s3: &RunReport) -> Result<Comparison> {
    let mut rows = Vec::new();
    let task = base.task.as_str();
    let (b, s) = (base.final_metrics, s3.final_metrics);
    if let (Some(x), Some(y)) = (b.accuracy, s.accuracy) {
        rows.push(ComparisonResult::new(task, "accuracy", x, y, true)?);
    }
    if let (Some(x), Some(y)) = (b.mse, s.mse) {
        rows.push(ComparisonResult::new(task, "mse", x, y, false)?);
    }
    if let (Some(x), Some(y)) = (b.mae, s.mae) {
        rows.push(ComparisonResult::new(task, "mae", x, y, false)?);
    }
    let (sb, ss) = (train::loss_trace_std(base)?, train::loss_trace_std(s3)?);
    let reduction = if sb == 0.0 { 0.0 } else { crate::eval::round2((sb - ss) / sb * 100.0) };
    Ok(Comparison {
        rows,
        loss_std: LossStdComparison {
            baseline: sb,
            s3: ss,
            reduction_percent: reduction,
        },
    })
}

/// Trains both configs and writes their artifacts. When both name the same
/// output directory the runs go to its `base` and `s3` subdirectories. The
/// comparison is appended to the S3 run's report and written beside it.
pub fn compare(base: &ExperimentConfig, s3: &ExperimentConfig) -> Result<Comparison> {
    base.validate()?;
    s3.validate()?;
    check_comparable(base, s3)?;
    let (base_dir, s3_dir) = if base.output_dir == s3.output_dir {
        (base.output_dir.join("base"), s3.output_dir.join("s3"))
    } else {
        (base.output_dir.clone(), s3.output_dir.clone())
    };
    let base_report = run_to_dir(base, &base_dir)?;
    let mut s3_report = run_to_dir(s3, &s3_dir)?;
    let comparison = compare_reports(&base_report, &s3_report)?;
    s3_report.comparisons = comparison.rows.clone();
    write_report(&s3_dir, &s3_report)?;
    let mut json = serde_json::to_vec_pretty(&comparison)?;
    json.push(b'\n');
    write_atomic(&s3_dir.join(COMPARISON_FILE), &json)?;
    Ok(comparison)
}
