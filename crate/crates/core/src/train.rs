//! Joint training of a model and its S3 stack.
//!
//! There is exactly one loss per sample: the task loss. Priorities and stitch
//! weights are updated by the same optimizer as the backbone.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{ForecastWindow, LabeledSeries};
use crate::eval::{self, EvalError};
use crate::models::{ForwardOptions, Model, ModelError, ParamKind, Task};
use crate::s3::{self, PermutationRecord, S3Error};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    S3(#[from] S3Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_learning_rate() -> f64 {
    1e-3
}

fn default_multiplier() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Iterations between loss, permutation and weight records.
    pub trace_every: usize,
    /// Learning-rate factor applied to shuffle priorities only.
    #[serde(default = "default_multiplier")]
    pub priority_lr_multiplier: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.trace_every == 0 {
            return fail("epochs, batch size and trace interval must be at least 1".into());
        }
        if !(self.priority_lr_multiplier.is_finite() && self.priority_lr_multiplier >= 0.0) {
            return fail(format!("priority multiplier must be non-negative, got {}", self.priority_lr_multiplier));
        }
        match self.optimizer {
            OptimizerConfig::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                fail(format!("momentum must lie in [0, 1), got {momentum}"))
            }
            OptimizerConfig::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                fail("adam betas must lie in [0, 1) and eps must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

/// Plain SGD with optional heavy-ball momentum.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// First and second moment estimates of one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Adam with bias-corrected moments.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

enum OptimizerState {
    Sgd { momentum: f64, velocity: Vec<Vec<f64>> },
    Adam { beta1: f64, beta2: f64, eps: f64, states: Vec<AdamState> },
}

impl OptimizerState {
    fn new(config: OptimizerConfig, sizes: &[usize]) -> Self {
        match config {
            OptimizerConfig::Sgd { momentum } => Self::Sgd {
                momentum,
                velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
            OptimizerConfig::Adam { beta1, beta2, eps } => Self::Adam {
                beta1,
                beta2,
                eps,
                states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
            },
        }
    }

    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], rates: &[f64]) {
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self {
                Self::Sgd { momentum, velocity } => sgd_step(p, g, &mut velocity[i], rates[i], *momentum),
                Self::Adam { beta1, beta2, eps, states } => adam_step(p, g, &mut states[i], rates[i], *beta1, *beta2, *eps),
            }
        }
    }
}

/// Borrowed training and evaluation samples.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Classification {
        train: &'a [LabeledSeries],
        test: &'a [LabeledSeries],
    },
    Forecasting {
        train: &'a [ForecastWindow],
        test: &'a [ForecastWindow],
    },
}

impl TrainData<'_> {
    fn train_len(&self) -> usize {
        match self {
            Self::Classification { train, .. } => train.len(),
            Self::Forecasting { train, .. } => train.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the batch losses of this epoch.
    pub train_loss: f64,
    pub test: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsRecord {
    pub step: usize,
    pub layers: Vec<StitchWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub s3: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub iterations: usize,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: Metrics,
    pub loss_trace: Vec<LossPoint>,
    pub permutation_trace: Vec<PermutationRecord>,
    pub weights_trace: Vec<WeightsRecord>,
    pub param_counts: ParamCounts,
    /// Forward passes in which a priority hit the reciprocal clamp.
    pub clamp_events: usize,
    /// Traced iterations at which every priority gradient was exactly zero.
    pub flat_priority_steps: Vec<usize>,
    pub wall_clock_seconds: f64,
    #[serde(default)]
    pub comparisons: Vec<eval::ComparisonResult>,
}

/// Population standard deviation of the traced loss values.
pub fn loss_trace_std(report: &RunReport) -> Result<f64> {
    let values: Vec<f64> = report.loss_trace.iter().map(|p| p.loss).collect();
    if values.is_empty() {
        return Err(TrainError::Config("loss trace is empty".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Loss and per-parameter gradients of one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub clamped: bool,
}

fn sample_loss(tape: &Tape, model: &Model, x: &Tensor, target: Target<'_>, options: &ForwardOptions) -> Result<(Tensor, bool)> {
    let bound = model.bind(tape)?;
    sample_loss_bound(tape, model, &bound, x, target, options)
}

fn sample_loss_bound(
    tape: &Tape,
    model: &Model,
    bound: &[Tensor],
    x: &Tensor,
    target: Target<'_>,
    options: &ForwardOptions,
) -> Result<(Tensor, bool)> {
    let out = model.forward(tape, bound, x, options)?;
    let clamped = out.s3.as_ref().is_some_and(|s| s.layers.iter().any(|l| !l.clamped.is_empty()));
    let loss = match target {
        Target::Class(label) => tape.softmax_cross_entropy(&out.output, &[label])?,
        Target::Series(values) => {
            let t = Tensor::new(values.to_vec(), out.output.shape())?;
            tape.mse_loss(&out.output, &t)?
        }
    };
    Ok((loss, clamped))
}

#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Series(&'a [f64]),
}

/// Loss of one sample and its gradient for every parameter, in
/// [`Model::params`] order.
pub fn sample_gradient(model: &Model, input: &[f64], target: Target<'_>, options: &ForwardOptions) -> Result<SampleGrad> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let x = Tensor::new(input.to_vec(), &model.input_shape())?;
    let (loss, clamped) = sample_loss_bound(&tape, model, &bound, &x, target, options)?;
    tape.backward(&loss)?;
    let grads = bound
        .iter()
        .map(|t| tape.grad(t).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok(SampleGrad {
        loss: loss.item().unwrap_or(f64::NAN),
        grads,
        clamped,
    })
}

/// Loss of one sample without recording gradients.
pub fn sample_loss_value(model: &Model, input: &[f64], target: Target<'_>, options: &ForwardOptions) -> Result<f64> {
    let tape = Tape::new();
    let x = Tensor::new(input.to_vec(), &model.input_shape())?;
    let (loss, _) = sample_loss(&tape, model, &x, target, options)?;
    Ok(loss.item().unwrap_or(f64::NAN))
}

/// Test-set metrics for the model's task.
pub fn evaluate(model: &Model, data: &TrainData<'_>) -> Result<Metrics> {
    match data {
        TrainData::Classification { test, .. } => {
            let mut preds = Vec::with_capacity(test.len());
            for s in test.iter() {
                preds.push(eval::argmax(&model.forward_classify(&s.values)?));
            }
            let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
            Ok(Metrics {
                accuracy: Some(eval::accuracy(&preds, &labels)?),
                ..Default::default()
            })
        }
        TrainData::Forecasting { test, .. } => {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            for w in test.iter() {
                preds.extend(model.forward_forecast(&w.context)?);
                targets.extend_from_slice(&w.target);
            }
            Ok(Metrics {
                mse: Some(eval::mse(&preds, &targets)?),
                mae: Some(eval::mae(&preds, &targets)?),
                ..Default::default()
            })
        }
    }
}

fn check_agreement(model: &Model, data: &TrainData<'_>, config: &TrainConfig) -> Result<()> {
    let [t_len, channels] = model.input_shape();
    match (model.config().task, data, config.loss) {
        (Task::Classification { classes }, TrainData::Classification { train, test }, LossKind::CrossEntropy) => {
            for s in train.iter().chain(test.iter()) {
                if s.len != t_len || s.channels != channels || s.label >= classes {
                    return Err(TrainError::Config(format!(
                        "sample [{}, {}] label {} does not fit model [{t_len}, {channels}] with {classes} classes",
                        s.len, s.channels, s.label
                    )));
                }
            }
            Ok(())
        }
        (Task::Forecasting { horizon }, TrainData::Forecasting { train, test }, LossKind::Mse) => {
            for w in train.iter().chain(test.iter()) {
                if w.context.len() != t_len * channels || w.target.len() != horizon * channels {
                    return Err(TrainError::Config("forecast window does not fit the model".into()));
                }
            }
            Ok(())
        }
        _ => Err(TrainError::Config("model task, dataset and loss disagree".into())),
    }
}

/// Trains `model` in place and reports the run.
pub fn train(model: &mut Model, data: &TrainData<'_>, config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    check_agreement(model, data, config)?;
    if data.train_len() == 0 {
        return Err(TrainError::Config("empty training set".into()));
    }
    let started = Instant::now();
    let kinds: Vec<ParamKind> = model.params().iter().map(|p| p.kind).collect();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.values.len()).collect();
    let rates: Vec<f64> = kinds
        .iter()
        .map(|k| match k {
            ParamKind::Shuffle => config.learning_rate * config.priority_lr_multiplier,
            _ => config.learning_rate,
        })
        .collect();
    let mut optimizer = OptimizerState::new(config.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let options = ForwardOptions::default();

    let mut report = RunReport {
        task: match data {
            TrainData::Classification { .. } => "classification".into(),
            TrainData::Forecasting { .. } => "forecasting".into(),
        },
        iterations: 0,
        epochs: Vec::with_capacity(config.epochs),
        final_metrics: Metrics::default(),
        loss_trace: Vec::new(),
        permutation_trace: Vec::new(),
        weights_trace: Vec::new(),
        param_counts: ParamCounts {
            backbone: model.backbone_param_count(),
            s3: model.s3_param_count(),
            total: model.param_count(),
        },
        clamp_events: 0,
        flat_priority_steps: Vec::new(),
        wall_clock_seconds: 0.0,
        comparisons: Vec::new(),
    };

    let mut order: Vec<usize> = (0..data.train_len()).collect();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut loss = 0.0;
            for &i in batch {
                let (input, target) = match data {
                    TrainData::Classification { train, .. } => (&train[i].values, Target::Class(train[i].label)),
                    TrainData::Forecasting { train, .. } => (&train[i].context, Target::Series(&train[i].target)),
                };
                let sample = sample_gradient(model, input, target, &options)?;
                if !sample.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        iteration,
                        loss: sample.loss,
                    });
                }
                loss += sample.loss;
                report.clamp_events += usize::from(sample.clamped);
                for (acc, g) in grads.iter_mut().zip(&sample.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            loss *= scale;

            if iteration % config.trace_every == 0 {
                report.loss_trace.push(LossPoint { iteration, loss });
                report
                    .permutation_trace
                    .push(s3::record_permutations(model.s3_layers(), iteration)?);
                report.weights_trace.push(WeightsRecord {
                    step: iteration,
                    layers: model
                        .s3_layers()
                        .iter()
                        .map(|l| StitchWeights {
                            w1: l.w1.clone(),
                            w2: l.w2.clone(),
                        })
                        .collect(),
                });
                let priority_grads = kinds.iter().zip(&grads).filter(|(k, _)| **k == ParamKind::Shuffle);
                let mut any_priority = false;
                let mut all_zero = true;
                for (_, g) in priority_grads {
                    any_priority = true;
                    all_zero &= g.iter().all(|v| *v == 0.0);
                }
                if any_priority && all_zero {
                    report.flat_priority_steps.push(iteration);
                }
            }

            optimizer.step(model.param_values_mut(), &grads, &rates);
            epoch_loss += loss;
            batches += 1;
            iteration += 1;
        }
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches as f64,
            test: evaluate(model, data)?,
        });
    }
    report.iterations = iteration;
    if report.clamp_events > 0 {
        log::warn!(
            "priority reciprocal clamped in {} forward passes; see clamp_events in the report",
            report.clamp_events
        );
    }
    report.final_metrics = report.epochs.last().map(|e| e.test).unwrap_or_default();
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
