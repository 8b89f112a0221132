//! Dataset ingestion and synthetic generators.
//!
//! Series are stored row-major as `[T, C]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One classification sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    /// `[len, channels]`, row-major.
    pub values: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub label: usize,
}

/// One forecasting sample; `target` directly follows `context` in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastWindow {
    /// `[context_len, channels]`.
    pub context: Vec<f64>,
    /// `[horizon, channels]`.
    pub target: Vec<f64>,
    /// Row of the source series where the context starts.
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    #[default]
    Reject,
    /// Carry the last finite value forward; leading gaps take the first one.
    ForwardFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcrOptions {
    /// Values per time step; each row holds `len * channels` numbers.
    #[serde(default = "one")]
    pub channels: usize,
    /// Z-normalize every series on its own.
    #[serde(default)]
    pub znorm: bool,
    #[serde(default)]
    pub nan_policy: NanPolicy,
}

fn one() -> usize {
    1
}

impl Default for UcrOptions {
    fn default() -> Self {
        Self {
            channels: 1,
            znorm: false,
            nan_policy: NanPolicy::Reject,
        }
    }
}

/// Train and test splits with labels remapped to `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct UcrDataset {
    pub train: Vec<LabeledSeries>,
    pub test: Vec<LabeledSeries>,
    /// Original label of each class index.
    pub labels: Vec<String>,
}

impl UcrDataset {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }
}

/// Raw rows of a label-first, tab-separated file.
pub fn read_ucr_rows(path: &Path, options: &UcrOptions) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let fail = |line: usize, msg: String| DataError::Format {
        path: name.clone(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim_end_matches('\r').split('\t');
        let label = fields.next().unwrap_or_default().trim().to_string();
        let mut values = fields
            .map(|f| {
                let f = f.trim();
                if f.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>().map_err(|_| fail(line_no, format!("not a number: {f:?}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(fail(line_no, "row has a label but no values".into()));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(fail(line_no, format!("ragged row: {} values, expected {w}", values.len())))
            }
            _ => {}
        }
        if values.len() % options.channels != 0 {
            return Err(fail(
                line_no,
                format!("{} values do not split into {} channels", values.len(), options.channels),
            ));
        }
        if values.iter().any(|v| v.is_nan()) {
            match options.nan_policy {
                NanPolicy::Reject => return Err(fail(line_no, "NaN value".into())),
                NanPolicy::ForwardFill => {
                    forward_fill(&mut values, options.channels).ok_or_else(|| fail(line_no, "row is all NaN".into()))?
                }
            }
        }
        if options.znorm {
            z_normalize(&mut values, options.channels);
        }
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(fail(0, "no rows".into()));
    }
    Ok(rows)
}

fn forward_fill(values: &mut [f64], channels: usize) -> Option<()> {
    for c in 0..channels {
        let first = values.iter().skip(c).step_by(channels).find(|v| !v.is_nan()).copied()?;
        let mut last = first;
        for v in values.iter_mut().skip(c).step_by(channels) {
            if v.is_nan() {
                *v = last;
            } else {
                last = *v;
            }
        }
    }
    Some(())
}

fn z_normalize(values: &mut [f64], channels: usize) {
    for c in 0..channels {
        let column: Vec<f64> = values.iter().skip(c).step_by(channels).copied().collect();
        let (mean, std) = mean_std(&column);
        let std = if std > 0.0 { std } else { 1.0 };
        for v in values.iter_mut().skip(c).step_by(channels) {
            *v = (*v - mean) / std;
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sorted label keys: numerically when every label parses, else lexically.
fn sorted_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut unique: Vec<String> = labels.map(str::to_string).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if unique.iter().all(|l| l.parse::<f64>().is_ok()) {
        unique.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    unique
}

/// Loads a train/test pair. Labels are indexed by their sorted order in the
/// training file; a test label missing from training is a format error.
pub fn load_ucr_tsv(train: &Path, test: &Path, options: &UcrOptions) -> Result<UcrDataset> {
    let train_rows = read_ucr_rows(train, options)?;
    let test_rows = read_ucr_rows(test, options)?;
    let labels = sorted_labels(train_rows.iter().map(|(l, _)| l.as_str()));
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let convert = |rows: Vec<(String, Vec<f64>)>, path: &Path| -> Result<Vec<LabeledSeries>> {
        rows.into_iter()
            .enumerate()
            .map(|(i, (label, values))| {
                let label = *index.get(label.as_str()).ok_or_else(|| DataError::Format {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("label {label:?} does not occur in the training file"),
                })?;
                Ok(LabeledSeries {
                    len: values.len() / options.channels,
                    channels: options.channels,
                    values,
                    label,
                })
            })
            .collect()
    };
    let train_set = convert(train_rows, train)?;
    let test_set = convert(test_rows, test)?;
    if train_set[0].len != test_set[0].len {
        return Err(DataError::Data(format!(
            "train series have length {}, test series {}",
            train_set[0].len, test_set[0].len
        )));
    }
    Ok(UcrDataset {
        train: train_set,
        test: test_set,
        labels,
    })
}

/// Writes series as label-first TSV. `labels[i]` names class `i`.
pub fn write_ucr_tsv(path: &Path, series: &[LabeledSeries], labels: &[String]) -> Result<()> {
    let mut text = String::new();
    for s in series {
        let name = labels
            .get(s.label)
            .ok_or_else(|| DataError::Data(format!("no name for class {}", s.label)))?;
        text.push_str(name);
        for v in &s.values {
            let _ = write!(text, "\t{v:?}");
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Per-channel affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on `[rows, channels]` data. Constant channels get unit scale.
    pub fn fit(data: &[f64], channels: usize) -> Self {
        let (mean, std) = (0..channels)
            .map(|c| {
                let column: Vec<f64> = data.iter().skip(c).step_by(channels).copied().collect();
                let (m, s) = mean_std(&column);
                (m, if s > 0.0 { s } else { 1.0 })
            })
            .unzip();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in data.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn invert(&self, data: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    pub context: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Fractions of windows for train and validation; test gets the rest.
    #[serde(default = "default_split")]
    pub split: (f64, f64),
}

fn default_split() -> (f64, f64) {
    (0.6, 0.2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDataset {
    pub train: Vec<ForecastWindow>,
    pub val: Vec<ForecastWindow>,
    pub test: Vec<ForecastWindow>,
    pub channels: usize,
    pub scaler: Standardizer,
    /// Windows before splitting.
    pub total_windows: usize,
    /// Raw (unstandardized) series, `[rows, channels]`.
    pub raw: Vec<f64>,
}

/// Number of windows of `context + horizon` rows taken every `stride` rows.
pub fn window_count(rows: usize, context: usize, horizon: usize, stride: usize) -> usize {
    let span = context + horizon;
    if rows < span || stride == 0 {
        0
    } else {
        (rows - span) / stride + 1
    }
}

/// Reads a CSV with a header and a leading timestamp column.
pub fn read_forecast_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut reader = csv::Reader::from_path(path)?;
    let channels = reader.headers()?.len().saturating_sub(1);
    if channels == 0 {
        return Err(DataError::Data(format!("{}: no value columns", path.display())));
    }
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != channels + 1 {
            return Err(DataError::Format {
                path: path.display().to_string(),
                line: i + 2,
                msg: format!("{} fields, expected {}", record.len(), channels + 1),
            });
        }
        for field in record.iter().skip(1) {
            let v = field.trim().parse::<f64>().map_err(|_| DataError::Format {
                path: path.display().to_string(),
                line: i + 2,
                msg: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
    }
    Ok((data, channels))
}

pub fn load_forecast_csv(path: &Path, options: &ForecastOptions) -> Result<ForecastDataset> {
    let (data, channels) = read_forecast_csv(path)?;
    forecast_windows(data, channels, options)
}

/// Slides windows over a `[rows, channels]` series, splits them in time
/// order and standardizes with statistics of the rows the training windows
/// cover.
pub fn forecast_windows(raw: Vec<f64>, channels: usize, options: &ForecastOptions) -> Result<ForecastDataset> {
    let rows = raw.len() / channels;
    let (t, h, stride) = (options.context, options.horizon, options.stride);
    if t == 0 || h == 0 || stride == 0 {
        return Err(DataError::Data("context, horizon and stride must be positive".into()));
    }
    if rows < t + h {
        return Err(DataError::Data(format!("{rows} rows is fewer than context + horizon = {}", t + h)));
    }
    let total = window_count(rows, t, h, stride);
    let n_train = ((total as f64) * options.split.0).floor() as usize;
    let n_val = ((total as f64) * options.split.1).floor() as usize;
    if n_train == 0 {
        return Err(DataError::Data(format!("{total} windows leave none for training")));
    }
    let train_rows = (n_train - 1) * stride + t + h;
    let scaler = Standardizer::fit(&raw[..train_rows * channels], channels);
    let mut scaled = raw.clone();
    scaler.apply(&mut scaled);
    let window = |w: usize| {
        let start = w * stride;
        ForecastWindow {
            context: scaled[start * channels..(start + t) * channels].to_vec(),
            target: scaled[(start + t) * channels..(start + t + h) * channels].to_vec(),
            start,
        }
    };
    Ok(ForecastDataset {
        train: (0..n_train).map(window).collect(),
        val: (n_train..n_train + n_val).map(window).collect(),
        test: (n_train + n_val..total).map(window).collect(),
        channels,
        scaler,
        total_windows: total,
        raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    PermutedPattern,
    LongRangePair,
}

fn default_pair_level() -> f64 {
    1.0
}

fn default_cue() -> f64 {
    0.2
}

/// Parameters of a synthetic classification set.
///
/// Both generators place two plateau chunks whose signs either agree (class
/// 0) or disagree (class 1); each sign alone is a coin flip. Only a model
/// that sees both plateaus side by side can read the class from them.
///
/// `PermutedPattern` puts the pair in the first two chunks, adds a small
/// class-specific bump to each of them, then reorders all chunks by the
/// fixed `permutation`: chunk `i` of a sample is template chunk
/// `permutation[i]`. `LongRangePair` puts the pair `distance` chunks apart
/// with no bump and no reordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub length: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub chunks: usize,
    /// Hidden chunk order; identity when absent.
    #[serde(default)]
    pub permutation: Option<Vec<usize>>,
    pub noise: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    /// Chunks between the pair, for `LongRangePair`.
    #[serde(default)]
    pub distance: usize,
    #[serde(default = "default_pair_level")]
    pub pair_level: f64,
    /// Amplitude of the class-specific bump, for `PermutedPattern`.
    #[serde(default = "default_cue")]
    pub cue: f64,
}

impl SyntheticSpec {
    pub fn permuted_pattern(length: usize, chunks: usize, permutation: Vec<usize>, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::PermutedPattern,
            length,
            channels: 1,
            chunks,
            permutation: Some(permutation),
            noise,
            train_samples: 2000,
            test_samples: 500,
            seed,
            distance: 0,
            pair_level: default_pair_level(),
            cue: default_cue(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DataError::Spec(msg));
        if self.chunks == 0 || self.length == 0 || self.channels == 0 {
            return fail("length, channels and chunks must be positive".into());
        }
        if !self.length.is_multiple_of(self.chunks) {
            return fail(format!("length {} is not divisible by {} chunks", self.length, self.chunks));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if let Some(p) = &self.permutation {
            if p.len() != self.chunks || !crate::s3::is_permutation(p) {
                return fail(format!("{p:?} is not a permutation of 0..{}", self.chunks));
            }
        }
        let needed = match self.kind {
            SyntheticKind::PermutedPattern => 2,
            SyntheticKind::LongRangePair => self.distance + 2,
        };
        if needed > self.chunks {
            return fail(format!("pair needs {needed} chunks, only {} available", self.chunks));
        }
        Ok(())
    }

    pub fn hidden_permutation(&self) -> Vec<usize> {
        self.permutation.clone().unwrap_or_else(|| (0..self.chunks).collect())
    }
}

/// Train and test sets of a generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<LabeledSeries>,
    pub test: Vec<LabeledSeries>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    match spec.kind {
        SyntheticKind::PermutedPattern => gen_permuted_pattern(spec),
        SyntheticKind::LongRangePair => gen_long_range_pair(spec),
    }
}

pub fn gen_permuted_pattern(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.kind != SyntheticKind::PermutedPattern {
        return Err(DataError::Spec("expected a permuted-pattern spec".into()));
    }
    spec.validate()?;
    generate_pairs(spec, 0, 1, spec.cue, &spec.hidden_permutation())
}

pub fn gen_long_range_pair(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.kind != SyntheticKind::LongRangePair {
        return Err(DataError::Spec("expected a long-range-pair spec".into()));
    }
    spec.validate()?;
    let identity: Vec<usize> = (0..spec.chunks).collect();
    generate_pairs(spec, 0, spec.distance + 1, 0.0, &identity)
}

fn generate_pairs(spec: &SyntheticSpec, first: usize, second: usize, cue: f64, order: &[usize]) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = spec.length / spec.chunks;
    let channels = spec.channels;
    // Zero-mean within a chunk, so it never shifts the plateau level.
    let bump: Vec<f64> = (0..tau)
        .map(|t| (2.0 * std::f64::consts::PI * (t as f64 + 0.5) / tau as f64).sin())
        .collect();
    let mut sample = |label: usize| {
        let sign_a = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sign_b = if label == 0 { sign_a } else { -sign_a };
        let class_sign = if label == 0 { -1.0 } else { 1.0 };
        let mut template = vec![0.0; spec.length];
        for (chunk, sign) in [(first, sign_a), (second, sign_b)] {
            for t in 0..tau {
                template[chunk * tau + t] = sign * spec.pair_level + class_sign * cue * bump[t];
            }
        }
        let mut values = Vec::with_capacity(spec.length * channels);
        for &src in order {
            for t in 0..tau {
                let base = template[src * tau + t];
                for _ in 0..channels {
                    values.push(base + spec.noise * normal.sample(&mut rng));
                }
            }
        }
        LabeledSeries {
            values,
            len: spec.length,
            channels,
            label,
        }
    };
    let mut make = |count: usize| {
        let mut set: Vec<LabeledSeries> = (0..count).map(|i| sample(i % 2)).collect();
        set.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ count as u64));
        set
    };
    let train = make(spec.train_samples);
    let test = make(spec.test_samples);
    Ok(SyntheticData { train, test })
}
