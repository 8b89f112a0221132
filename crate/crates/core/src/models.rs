//! Small baseline encoders with an optional S3 stack at their input.
//!
//! Both backbones keep a short receptive field on purpose: anything that
//! depends on far-apart parts of the series has to be brought together by the
//! shuffle first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{numel, AutodiffError, Tape, Tensor};
use crate::io::write_atomic;
use crate::s3::{self, FrozenShuffle, LayerTensors, S3Error, S3LayerState, S3StackConfig, ShuffleRoute, StackOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match the configured {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    S3(#[from] S3Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { classes: usize },
    Forecasting { horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Pointwise linear projection of every time step.
    Linear,
    /// Stacked `conv1d -> relu` blocks.
    TemporalConv,
}

fn default_conv_blocks() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub backbone: Backbone,
    pub channels: usize,
    pub input_len: usize,
    pub hidden: usize,
    pub kernel: usize,
    #[serde(default = "default_conv_blocks")]
    pub conv_blocks: usize,
    #[serde(default)]
    pub s3: Option<S3StackConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        match self.task {
            Task::Classification { classes } if classes < 2 => return fail(format!("need at least 2 classes, got {classes}")),
            Task::Forecasting { horizon: 0 } => return fail("horizon must be at least 1".into()),
            _ => {}
        }
        if self.channels == 0 || self.input_len == 0 {
            return fail("channels and input length must be positive".into());
        }
        if self.hidden == 0 {
            return fail("hidden width must be at least 1".into());
        }
        if self.backbone == Backbone::TemporalConv {
            if self.kernel == 0 || self.conv_blocks == 0 {
                return fail("temporal conv needs a positive kernel and at least one block".into());
            }
            if self.feature_len() == 0 {
                return fail(format!("kernel {} too long for input {}", self.kernel, self.input_len));
            }
        }
        if let Some(stack) = &self.s3 {
            stack.validate()?;
            for (l, n) in stack.segment_counts().into_iter().enumerate() {
                if n > self.input_len {
                    return Err(S3Error::Config {
                        layer: l,
                        msg: format!("{n} segments exceed input length {}", self.input_len),
                    }
                    .into());
                }
            }
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.kernel.saturating_sub(1) / 2
    }

    /// Length of the time axis after the backbone.
    pub fn feature_len(&self) -> usize {
        match self.backbone {
            Backbone::Linear => self.input_len,
            Backbone::TemporalConv => {
                let mut len = self.input_len;
                for _ in 0..self.conv_blocks {
                    len = (len + 2 * self.padding() + 1).saturating_sub(self.kernel);
                }
                len
            }
        }
    }

    pub fn without_s3(&self) -> Self {
        Self { s3: None, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Backbone,
    Shuffle,
    Stitch,
}

/// A named learnable buffer of the backbone or head.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Read-only view of any learnable buffer.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a> {
    pub name: &'a str,
    pub kind: ParamKind,
    pub values: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub route: ShuffleRoute,
    /// Hold each layer's permutation and reciprocals fixed.
    pub frozen: Option<Vec<FrozenShuffle>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[classes]` logits or `[H, C]` forecast.
    pub output: Tensor,
    pub s3: Option<StackOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    s3_layers: Vec<S3LayerState>,
    s3_names: Vec<[String; 4]>,
    backbone: Vec<Parameter>,
}

const S3_FIELDS: [(&str, ParamKind); 4] = [
    ("priorities", ParamKind::Shuffle),
    ("w1", ParamKind::Stitch),
    ("w2", ParamKind::Stitch),
    ("bias", ParamKind::Stitch),
];

impl Model {
    /// Builds and initializes a model. Backbone weights depend only on `seed`,
    /// so the same seed gives the same backbone with or without S3.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s3_rng = ChaCha8Rng::seed_from_u64(seed);
        s3_rng.set_stream(1);

        let s3_layers: Vec<S3LayerState> = config
            .s3
            .iter()
            .flat_map(|stack| {
                stack
                    .segment_counts()
                    .into_iter()
                    .map(move |n| (n, stack.lambda))
            })
            .map(|(n, lambda)| S3LayerState::new(n, lambda, config.channels, &mut s3_rng))
            .collect();
        let s3_names = (0..s3_layers.len())
            .map(|l| S3_FIELDS.map(|(field, _)| format!("s3.{l}.{field}")))
            .collect();

        let mut backbone = Vec::new();
        let mut uniform = |name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..numel(&shape)).map(|_| backbone_rng.random_range(-bound..bound)).collect();
            Parameter { name, shape, values }
        };
        let zeros = |name: String, shape: Vec<usize>| Parameter {
            values: vec![0.0; numel(&shape)],
            name,
            shape,
        };
        let (c, h, k) = (config.channels, config.hidden, config.kernel);
        match config.backbone {
            Backbone::Linear => {
                backbone.push(uniform("proj.weight".into(), vec![c, h], c));
                backbone.push(zeros("proj.bias".into(), vec![h]));
            }
            Backbone::TemporalConv => {
                for b in 0..config.conv_blocks {
                    let c_in = if b == 0 { c } else { h };
                    backbone.push(uniform(format!("conv.{b}.weight"), vec![h, c_in, k], c_in * k));
                    backbone.push(zeros(format!("conv.{b}.bias"), vec![h]));
                }
            }
        }
        match config.task {
            Task::Classification { classes } => {
                backbone.push(uniform("head.weight".into(), vec![h, classes], h));
                backbone.push(zeros("head.bias".into(), vec![classes]));
            }
            Task::Forecasting { horizon } => {
                let fan_in = config.feature_len() * h;
                backbone.push(uniform("head.weight".into(), vec![fan_in, horizon * c], fan_in));
                backbone.push(zeros("head.bias".into(), vec![horizon * c]));
            }
        }
        Ok(Self {
            config: config.clone(),
            s3_layers,
            s3_names,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn s3_layers(&self) -> &[S3LayerState] {
        &self.s3_layers
    }

    pub fn s3_layers_mut(&mut self) -> &mut [S3LayerState] {
        &mut self.s3_layers
    }

    pub fn backbone_params(&self) -> &[Parameter] {
        &self.backbone
    }

    /// Every learnable buffer in binding order: S3 layers first, then the
    /// backbone and head.
    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (layer, names) in self.s3_layers.iter().zip(&self.s3_names) {
            let buffers = [&layer.priorities, &layer.w1, &layer.w2, &layer.bias];
            for ((name, (_, kind)), values) in names.iter().zip(S3_FIELDS).zip(buffers) {
                out.push(ParamView { name, kind, values });
            }
        }
        out.extend(self.backbone.iter().map(|p| ParamView {
            name: &p.name,
            kind: ParamKind::Backbone,
            values: &p.values,
        }));
        out
    }

    /// Mutable buffers in the same order as [`Model::params`].
    pub fn param_values_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for layer in &mut self.s3_layers {
            out.push(&mut layer.priorities);
            out.push(&mut layer.w1);
            out.push(&mut layer.w2);
            out.push(&mut layer.bias);
        }
        out.extend(self.backbone.iter_mut().map(|p| &mut p.values));
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in &self.s3_layers {
            out.push(layer.priority_shape());
            for _ in 0..3 {
                out.push(vec![layer.channels]);
            }
        }
        out.extend(self.backbone.iter().map(|p| p.shape.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    pub fn s3_param_count(&self) -> usize {
        self.s3_layers.iter().map(S3LayerState::param_count).sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.iter().map(|p| p.values.len()).sum()
    }

    /// Sets every stitch to pass the original series through untouched.
    pub fn pin_identity_stitch(&mut self) {
        for layer in &mut self.s3_layers {
            layer.w1.iter_mut().for_each(|w| *w = 1.0);
            layer.w2.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Zeroes the head's weights and bias.
    pub fn zero_head(&mut self) {
        for p in self.backbone.iter_mut().filter(|p| p.name.starts_with("head.")) {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Registers every parameter on `tape`, in [`Model::params`] order.
    pub fn bind(&self, tape: &Tape) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for layer in &self.s3_layers {
            let t = layer.bind(tape)?;
            out.extend([t.priorities, t.w1, t.w2, t.bias]);
        }
        for p in &self.backbone {
            out.push(tape.param(p.values.clone(), &p.shape)?);
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.config.input_len, self.config.channels]
    }

    /// Full forward pass with parameters previously bound by [`Model::bind`].
    pub fn forward(&self, tape: &Tape, bound: &[Tensor], x: &Tensor, options: &ForwardOptions) -> Result<ModelOutput> {
        if x.shape() != self.input_shape() {
            return Err(ModelError::InputShape {
                expected: self.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        let n_s3 = 4 * self.s3_layers.len();
        let (s3_bound, rest) = bound.split_at(n_s3);
        let s3 = match &self.config.s3 {
            Some(stack) => {
                let layers: Vec<LayerTensors> = s3_bound
                    .chunks(4)
                    .map(|c| LayerTensors {
                        priorities: c[0].clone(),
                        w1: c[1].clone(),
                        w2: c[2].clone(),
                        bias: c[3].clone(),
                    })
                    .collect();
                Some(s3::s3_stack_forward(
                    tape,
                    x,
                    stack,
                    &layers,
                    options.route,
                    options.frozen.as_deref(),
                )?)
            }
            None => None,
        };
        let input = s3.as_ref().map_or(x, |s| &s.output);
        let mut rest = rest.iter();
        let mut next = || rest.next().ok_or_else(|| ModelError::Config("too few bound parameters".into()));
        let features = match self.config.backbone {
            Backbone::Linear => {
                let (w, b) = (next()?, next()?);
                let projected = tape.matmul(input, w)?;
                tape.add(&projected, b)?
            }
            Backbone::TemporalConv => {
                let mut h = input.clone();
                for _ in 0..self.config.conv_blocks {
                    let (w, b) = (next()?, next()?);
                    let conv = tape.conv1d(&h, w, b, self.config.padding())?;
                    h = tape.relu(&conv);
                }
                h
            }
        };
        let (w, b) = (next()?, next()?);
        let output = match self.config.task {
            Task::Classification { classes } => {
                let pooled = tape.reduce_sum(&features, &[0])?;
                let pooled = tape.scale(&pooled, 1.0 / features.shape()[0] as f64);
                let pooled = tape.reshape(&pooled, &[1, self.config.hidden])?;
                let logits = tape.add(&tape.matmul(&pooled, w)?, b)?;
                tape.reshape(&logits, &[classes])?
            }
            Task::Forecasting { horizon } => {
                let flat = tape.reshape(&features, &[1, features.len()])?;
                let out = tape.add(&tape.matmul(&flat, w)?, b)?;
                tape.reshape(&out, &[horizon, self.config.channels])?
            }
        };
        Ok(ModelOutput { output, s3 })
    }

    fn forward_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let input = Tensor::new(x.to_vec(), &self.input_shape())?;
        // Constants only: nothing is recorded.
        let bound = self.bind_constants()?;
        Ok(self.forward(&tape, &bound, &input, &ForwardOptions::default())?.output.to_vec())
    }

    fn bind_constants(&self) -> Result<Vec<Tensor>> {
        self.params()
            .iter()
            .zip(self.param_shapes())
            .map(|(p, shape)| Ok(Tensor::new(p.values.to_vec(), &shape)?))
            .collect()
    }

    /// Logits for one `[T, C]` series, without recording gradients.
    pub fn forward_classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !matches!(self.config.task, Task::Classification { .. }) {
            return Err(ModelError::Config("model is not a classifier".into()));
        }
        self.forward_values(x)
    }

    /// `[H, C]` forecast for one `[T, C]` series, without recording gradients.
    pub fn forward_forecast(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !matches!(self.config.task, Task::Forecasting { .. }) {
            return Err(ModelError::Config("model is not a forecaster".into()));
        }
        self.forward_values(x)
    }

    /// Writes `name<TAB>shape<TAB>values` lines, shape dims joined by `x`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.checkpoint_text().as_bytes())?;
        Ok(())
    }

    pub fn checkpoint_text(&self) -> String {
        let mut text = String::from("# s3 checkpoint v1\n");
        for (p, shape) in self.params().iter().zip(self.param_shapes()) {
            let dims = shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
            let values = p.values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(text, "{}\t{dims}\t{values}", p.name);
        }
        text
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.load_checkpoint_text(&text)
    }

    /// Replaces parameter values from checkpoint text. Names and shapes must
    /// match this model exactly.
    pub fn load_checkpoint_text(&mut self, text: &str) -> Result<()> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| ModelError::Checkpoint(format!("line {}: {msg}", i + 1));
            let mut fields = line.split('\t');
            let (Some(name), Some(dims), Some(values), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad("bad shape")))
                    .collect::<Result<Vec<_>>>()?
            };
            let values = if values.is_empty() {
                Vec::new()
            } else {
                values
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
                    .collect::<Result<Vec<_>>>()?
            };
            entries.insert(name.to_string(), (shape, values));
        }
        let names: Vec<String> = self.params().iter().map(|p| p.name.to_string()).collect();
        if entries.len() != names.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} entries for {} parameters",
                entries.len(),
                names.len()
            )));
        }
        let shapes = self.param_shapes();
        for ((name, shape), slot) in names.iter().zip(shapes).zip(self.param_values_mut()) {
            let (got_shape, values) = entries
                .remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if got_shape != shape || values.len() != slot.len() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {got_shape:?}, expected {shape:?}"
                )));
            }
            *slot = values;
        }
        Ok(())
    }
}
