//! Finite-difference checks of every backward rule.
//!
//! Each case builds a small graph from random leaves, reduces it to a scalar
//! with fixed random weights, and compares the taped gradient with central
//! differences. Priority gradients are compared against the forward with the
//! permutation and reciprocals held fixed, which is the function the
//! surrogate gradient differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::models::{Backbone, ForwardOptions, Model, ModelConfig, ModelError, ParamKind, Task};
use crate::s3::{
    self, FrozenShuffle, LayerTensors, S3Error, S3StackConfig, ShuffleOptions, ShuffleRoute, DEFAULT_SORT_DIRECTION,
};
use crate::train::{self, Target, TrainError};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so gradients that are zero on
/// both sides compare equal.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("unknown check {0:?}")]
    UnknownCase(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    S3(#[from] S3Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, GradcheckError>;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `f` at `x`, one entry per coordinate.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + step;
        let up = f(&point)?;
        point[i] = x[i] - step;
        let down = f(&point)?;
        point[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random inputs per primitive.
    pub trials: usize,
    /// Scales the backward pass of the named case, to exercise the failure path.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            corrupt: None,
        }
    }
}

type Leaves = Vec<(Vec<f64>, Vec<usize>)>;
type Build = dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>;

/// One randomized instance: leaf values, the function to differentiate on the
/// tape, and optionally a different function to difference numerically.
struct Instance {
    leaves: Leaves,
    forward: Box<Build>,
    reference: Option<Box<Build>>,
}

type Sampler = fn(&mut ChaCha8Rng) -> Result<Instance>;

const CASES: &[(&str, Sampler)] = &[
    ("add", add_case),
    ("sub", sub_case),
    ("mul", mul_case),
    ("scale", scale_case),
    ("detach", detach_case),
    ("relu", relu_case),
    ("reshape", reshape_case),
    ("slice", slice_case),
    ("concat", concat_case),
    ("reduce_sum", reduce_sum_case),
    ("sum", sum_case),
    ("mean", mean_case),
    ("matmul", matmul_case),
    ("conv1d", conv1d_case),
    ("softmax_cross_entropy", cross_entropy_case),
    ("mse_loss", mse_case),
    ("priority_vector", priority_vector_case),
    ("segment_shuffle", shuffle_case),
    ("shuffle_priorities", shuffle_priorities_case),
    ("stitch", stitch_case),
    ("s3_stack", stack_case),
    ("s3_stack_priorities", stack_priorities_case),
];

/// Names of every case, in report order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).chain(["model_classification", "model_forecasting"]).collect()
}

pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(name) = &options.corrupt {
        if !case_names().contains(&name.as_str()) {
            return Err(GradcheckError::UnknownCase(name.clone()));
        }
    }
    let corrupt = |name: &str| options.corrupt.as_deref() == Some(name);
    let mut cases = Vec::new();
    for (i, (name, sampler)) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..options.trials {
            let instance = sampler(&mut rng)?;
            worst = worst.max(check_instance(&instance, &mut rng, corrupt(name))?);
        }
        cases.push(CaseReport {
            name: name.to_string(),
            trials: options.trials,
            max_rel_err: worst,
            tolerance: TOLERANCE,
        });
    }
    for (k, (name, task)) in [
        ("model_classification", Task::Classification { classes: 3 }),
        ("model_forecasting", Task::Forecasting { horizon: 3 }),
    ]
    .into_iter()
    .enumerate()
    {
        let worst = model_spot_check(task, options.seed.wrapping_add(k as u64), corrupt(name))?;
        cases.push(CaseReport {
            name: name.to_string(),
            trials: 10,
            max_rel_err: worst,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        seed: options.seed,
        cases,
    })
}

/// Multiplies incoming gradients by 1.5 while passing values through.
fn corrupted(tape: &Tape, t: &Tensor) -> Result<Tensor> {
    let backward = Box::new(|g: &[f64], _: &[bool]| vec![Some(g.iter().map(|v| v * 1.5).collect())]);
    Ok(tape.custom(&[t], t.to_vec(), t.shape(), backward)?)
}

fn project(tape: &Tape, out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok(tape.sum(&tape.mul(out, weights)?))
}

fn check_instance(instance: &Instance, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<f64> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = instance
        .leaves
        .iter()
        .map(|(v, s)| tape.param(v.clone(), s))
        .collect::<std::result::Result<_, _>>()?;
    let mut out = (instance.forward)(&tape, &leaves)?;
    if corrupt {
        out = corrupted(&tape, &out)?;
    }
    let weights = Tensor::new(
        (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        out.shape(),
    )?;
    let loss = project(&tape, &out, &weights)?;
    tape.backward(&loss)?;

    let numeric_fn = instance.reference.as_ref().unwrap_or(&instance.forward);
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(leaf).unwrap_or_else(|| vec![0.0; leaf.len()]);
        let mut f = |point: &[f64]| -> Result<f64> {
            let t = Tape::new();
            let inputs: Vec<Tensor> = instance
                .leaves
                .iter()
                .enumerate()
                .map(|(j, (v, s))| Tensor::new(if j == i { point.to_vec() } else { v.clone() }, s))
                .collect::<std::result::Result<_, _>>()?;
            let out = numeric_fn(&t, &inputs)?;
            Ok(project(&t, &out, &weights)?.item().unwrap_or(f64::NAN))
        };
        let numeric = numeric_gradient(&mut f, &instance.leaves[i].0, STEP)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    ((0..n).map(|_| rng.random_range(-1.5..1.5)).collect(), shape.to_vec())
}

/// Values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let v = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    (values, shape.to_vec())
}

/// A random shape with 3 to 8 elements and one or two axes.
fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(3..=8);
    if rng.random_bool(0.5) {
        vec![n]
    } else {
        let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
        let d = divisors[rng.random_range(0..divisors.len())];
        vec![d, n / d]
    }
}

fn binary(rng: &mut ChaCha8Rng) -> Leaves {
    let shape = small_shape(rng);
    // Broadcast the right operand over leading axes half of the time.
    let rhs = if shape.len() == 2 && rng.random_bool(0.5) {
        vec![shape[1]]
    } else {
        shape.clone()
    };
    vec![uniform(rng, &shape), uniform(rng, &rhs)]
}

fn instance(leaves: Leaves, forward: Box<Build>) -> Result<Instance> {
    Ok(Instance {
        leaves,
        forward,
        reference: None,
    })
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    instance(binary(rng), Box::new(|t, x| Ok(t.add(&x[0], &x[1])?)))
}

fn sub_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    instance(binary(rng), Box::new(|t, x| Ok(t.sub(&x[0], &x[1])?)))
}

fn mul_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    instance(binary(rng), Box::new(|t, x| Ok(t.mul(&x[0], &x[1])?)))
}

fn scale_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let c = rng.random_range(-2.0..2.0);
    let shape = small_shape(rng);
    instance(vec![uniform(rng, &shape)], Box::new(move |t, x| Ok(t.scale(&x[0], c))))
}

fn detach_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let leaves = binary(rng);
    // The detached operand differences as a constant at its base value.
    let frozen = Tensor::new(leaves[1].0.clone(), &leaves[1].1)?;
    Ok(Instance {
        leaves,
        forward: Box::new(|t, x| Ok(t.mul(&x[0], &t.detach(&x[1]))?)),
        reference: Some(Box::new(move |t, x| Ok(t.mul(&x[0], &frozen)?))),
    })
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = small_shape(rng);
    instance(vec![away_from_zero(rng, &shape, 0.05)], Box::new(|t, x| Ok(t.relu(&x[0]))))
}

fn reshape_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = small_shape(rng);
    let n: usize = shape.iter().product();
    instance(vec![uniform(rng, &shape)], Box::new(move |t, x| Ok(t.reshape(&x[0], &[1, n])?)))
}

fn slice_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = [rng.random_range(2..=4), rng.random_range(1..=3)];
    let axis = rng.random_range(0..2);
    let start = rng.random_range(0..shape[axis]);
    let end = rng.random_range(start + 1..=shape[axis]);
    instance(vec![uniform(rng, &shape)], Box::new(move |t, x| Ok(t.slice(&x[0], axis, start, end)?)))
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cols = rng.random_range(1..=3);
    let (rows, other) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let leaves = vec![uniform(rng, &[rows, cols]), uniform(rng, &[other, cols])];
    // Also covers slices that feed a concat.
    instance(
        leaves,
        Box::new(move |t, x| {
            let head = t.slice(&x[0], 0, 0, 1)?;
            Ok(t.concat(&[&x[1], &x[0], &head], 0)?)
        }),
    )
}

fn reduce_sum_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2)];
    let axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
    instance(vec![uniform(rng, &shape)], Box::new(move |t, x| Ok(t.reduce_sum(&x[0], &axes)?)))
}

fn sum_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = small_shape(rng);
    instance(vec![uniform(rng, &shape)], Box::new(|t, x| Ok(t.sum(&x[0]))))
}

fn mean_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = small_shape(rng);
    instance(vec![uniform(rng, &shape)], Box::new(|t, x| Ok(t.mean(&x[0]))))
}

fn matmul_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, k, n) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    instance(
        vec![uniform(rng, &[m, k]), uniform(rng, &[k, n])],
        Box::new(|t, x| Ok(t.matmul(&x[0], &x[1])?)),
    )
}

fn conv1d_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (cin, cout, k) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=3));
    let len = rng.random_range(k..=k + 4);
    let padding = rng.random_range(0..=1);
    instance(
        vec![uniform(rng, &[len, cin]), uniform(rng, &[cout, cin, k]), uniform(rng, &[cout])],
        Box::new(move |t, x| Ok(t.conv1d(&x[0], &x[1], &x[2], padding)?)),
    )
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(1..=3);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let shape = if batch == 1 && rng.random_bool(0.5) {
        vec![classes]
    } else {
        vec![batch, classes]
    };
    instance(
        vec![uniform(rng, &shape)],
        Box::new(move |t, x| Ok(t.softmax_cross_entropy(&x[0], &labels)?)),
    )
}

fn mse_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let shape = small_shape(rng);
    instance(
        vec![uniform(rng, &shape), uniform(rng, &shape)],
        Box::new(|t, x| Ok(t.mse_loss(&x[0], &x[1])?)),
    )
}

fn priority_vector_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(2..=4);
    let lambda = rng.random_range(1..=3);
    instance(vec![uniform(rng, &vec![n; lambda])], Box::new(|t, x| Ok(s3::priority_vector(t, &x[0])?)))
}

fn random_route(rng: &mut ChaCha8Rng) -> ShuffleRoute {
    if rng.random_bool(0.5) {
        ShuffleRoute::Indexed
    } else {
        ShuffleRoute::Matrix
    }
}

fn shuffle_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(2..=5);
    let tau = rng.random_range(1..=3);
    let channels = rng.random_range(1..=2);
    let priorities = away_from_zero(rng, &[n], 0.2).0;
    let route = random_route(rng);
    instance(
        vec![uniform(rng, &[n * tau, channels])],
        Box::new(move |t, x| {
            let segments = s3::segment(t, &x[0], n)?;
            let p = Tensor::new(priorities.clone(), &[n])?;
            let options = ShuffleOptions {
                route,
                ..Default::default()
            };
            Ok(s3::shuffle_with(t, &segments, &p, options)?.stitched)
        }),
    )
}

fn frozen_shuffle(tape: &Tape, x: &Tensor, p: &Tensor, n: usize, route: ShuffleRoute) -> Result<FrozenShuffle> {
    let segments = s3::segment(tape, x, n)?;
    let pv = s3::priority_vector(tape, p)?;
    let options = ShuffleOptions {
        route,
        ..Default::default()
    };
    Ok(s3::shuffle_with(tape, &segments, &pv, options)?.frozen())
}

fn shuffle_priorities_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(2..=5);
    let tau = rng.random_range(1..=3);
    let lambda = rng.random_range(1..=2);
    let channels = rng.random_range(1..=2);
    let route = random_route(rng);
    let (xv, xs) = uniform(rng, &[n * tau, channels]);
    let p = loop {
        let p = uniform(rng, &vec![n; lambda]);
        let reduced = s3::reduce_priorities(&p.0, n);
        if reduced.iter().all(|v| v.abs() > 0.2) {
            break p;
        }
    };
    let x = Tensor::new(xv, &xs)?;
    let frozen = frozen_shuffle(&Tape::new(), &x, &Tensor::new(p.0.clone(), &p.1)?, n, route)?;
    let run = move |t: &Tape, leaves: &[Tensor], frozen: Option<&FrozenShuffle>| -> Result<Tensor> {
        let segments = s3::segment(t, &x, n)?;
        let pv = s3::priority_vector(t, &leaves[0])?;
        let options = ShuffleOptions {
            route,
            direction: DEFAULT_SORT_DIRECTION,
            frozen,
        };
        Ok(s3::shuffle_with(t, &segments, &pv, options)?.stitched)
    };
    let forward_run = run.clone();
    Ok(Instance {
        leaves: vec![p],
        forward: Box::new(move |t, l| forward_run(t, l, None)),
        reference: Some(Box::new(move |t, l| run(t, l, Some(&frozen)))),
    })
}

fn stitch_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let len = rng.random_range(1..=4);
    let channels = rng.random_range(1..=3);
    instance(
        vec![
            uniform(rng, &[len, channels]),
            uniform(rng, &[len, channels]),
            uniform(rng, &[channels]),
            uniform(rng, &[channels]),
            uniform(rng, &[channels]),
        ],
        Box::new(|t, x| Ok(s3::stitch(t, &x[0], &x[1], &x[2], &x[3], &x[4])?)),
    )
}

/// A two-layer stack over a series whose length leaves a truncated prefix
/// in at least one layer most of the time.
struct StackSetup {
    config: S3StackConfig,
    len: usize,
    channels: usize,
    route: ShuffleRoute,
}

impl StackSetup {
    fn sample(rng: &mut ChaCha8Rng) -> Result<Self> {
        let lambda = rng.random_range(1..=2);
        Ok(Self {
            config: S3StackConfig::new(4, 2, 0.5, lambda)?,
            len: rng.random_range(8..=13),
            channels: rng.random_range(1..=2),
            route: random_route(rng),
        })
    }

    fn priorities(&self, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<usize>)> {
        self.config
            .segment_counts()
            .into_iter()
            .map(|n| loop {
                let p = uniform(rng, &vec![n; self.config.lambda]);
                if s3::reduce_priorities(&p.0, n).iter().all(|v| v.abs() > 0.2) {
                    break p;
                }
            })
            .collect()
    }

    fn forward(
        &self,
        t: &Tape,
        x: &Tensor,
        priorities: &[Tensor],
        stitch: &[Tensor],
        frozen: Option<&[FrozenShuffle]>,
    ) -> Result<s3::StackOutput> {
        let layers: Vec<LayerTensors> = priorities
            .iter()
            .zip(stitch.chunks(3))
            .map(|(p, w)| LayerTensors {
                priorities: p.clone(),
                w1: w[0].clone(),
                w2: w[1].clone(),
                bias: w[2].clone(),
            })
            .collect();
        Ok(s3::s3_stack_forward(t, x, &self.config, &layers, self.route, frozen)?)
    }
}

fn stack_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let setup = StackSetup::sample(rng)?;
    let priorities = setup.priorities(rng);
    let mut leaves = vec![uniform(rng, &[setup.len, setup.channels])];
    for _ in 0..3 * priorities.len() {
        leaves.push(uniform(rng, &[setup.channels]));
    }
    instance(
        leaves,
        Box::new(move |t, x| {
            let p: Vec<Tensor> = priorities
                .iter()
                .map(|(v, s)| Tensor::new(v.clone(), s))
                .collect::<std::result::Result<_, _>>()?;
            Ok(setup.forward(t, &x[0], &p, &x[1..], None)?.output)
        }),
    )
}

fn stack_priorities_case(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let setup = StackSetup::sample(rng)?;
    let leaves = setup.priorities(rng);
    let x = {
        let (v, s) = uniform(rng, &[setup.len, setup.channels]);
        Tensor::new(v, &s)?
    };
    let stitch: Vec<Tensor> = (0..3 * leaves.len())
        .map(|_| {
            let (v, s) = uniform(rng, &[setup.channels]);
            Tensor::new(v, &s)
        })
        .collect::<std::result::Result<_, _>>()?;
    let base: Vec<Tensor> = leaves
        .iter()
        .map(|(v, s)| Tensor::new(v.clone(), s))
        .collect::<std::result::Result<_, _>>()?;
    let frozen = setup.forward(&Tape::new(), &x, &base, &stitch, None)?.frozen();
    let setup = std::rc::Rc::new(setup);
    let (x2, stitch2, setup2) = (x.clone(), stitch.clone(), setup.clone());
    Ok(Instance {
        leaves,
        forward: Box::new(move |t, p| Ok(setup.forward(t, &x, p, &stitch, None)?.output)),
        reference: Some(Box::new(move |t, p| Ok(setup2.forward(t, &x2, p, &stitch2, Some(&frozen))?.output))),
    })
}

fn spot_check_model(task: Task, seed: u64) -> Result<Model> {
    let config = ModelConfig {
        task,
        backbone: Backbone::TemporalConv,
        channels: 2,
        input_len: 12,
        hidden: 3,
        kernel: 3,
        conv_blocks: 1,
        s3: Some(S3StackConfig::new(4, 2, 0.5, 2)?),
    };
    let mut model = Model::build(&config, seed)?;
    // Move stitch weights and priorities off their symmetric starting values.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let kinds: Vec<ParamKind> = model.params().iter().map(|p| p.kind).collect();
    for (values, kind) in model.param_values_mut().into_iter().zip(kinds) {
        if kind != ParamKind::Backbone {
            values.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    Ok(model)
}

/// Gradient of one sample's loss against central differences on ten
/// parameter entries, always including one priority and one stitch weight.
fn model_spot_check(task: Task, seed: u64, corrupt: bool) -> Result<f64> {
    let mut model = spot_check_model(task, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(8);
    let [len, channels] = model.input_shape();
    let input: Vec<f64> = (0..len * channels).map(|_| rng.random_range(-1.5..1.5)).collect();
    let series_target: Vec<f64>;
    let target = match task {
        Task::Classification { classes } => Target::Class(rng.random_range(0..classes)),
        Task::Forecasting { horizon } => {
            series_target = (0..horizon * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            Target::Series(&series_target)
        }
    };

    let plain = ForwardOptions::default();
    let sample = train::sample_gradient(&model, &input, target, &plain)?;
    let frozen = {
        let tape = Tape::new();
        let bound = model.bind(&tape)?;
        let x = Tensor::new(input.clone(), &model.input_shape())?;
        let out = model.forward(&tape, &bound, &x, &plain)?;
        ForwardOptions {
            frozen: out.s3.map(|s| s.frozen()),
            ..Default::default()
        }
    };

    let kinds: Vec<ParamKind> = model.params().iter().map(|p| p.kind).collect();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.values.len()).collect();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for wanted in [ParamKind::Shuffle, ParamKind::Stitch] {
        let p = kinds.iter().position(|k| *k == wanted).unwrap_or(0);
        picks.push((p, rng.random_range(0..sizes[p])));
    }
    while picks.len() < 10 {
        let p = rng.random_range(0..sizes.len());
        let pick = (p, rng.random_range(0..sizes[p]));
        if !picks.contains(&pick) {
            picks.push(pick);
        }
    }

    let mut worst: f64 = 0.0;
    for (p, e) in picks {
        let options = if kinds[p] == ParamKind::Shuffle { &frozen } else { &plain };
        let original = model.params()[p].values[e];
        let mut loss_at = |v: f64| -> Result<f64> {
            model.param_values_mut()[p][e] = v;
            Ok(train::sample_loss_value(&model, &input, target, options)?)
        };
        let numeric = (loss_at(original + STEP)? - loss_at(original - STEP)?) / (2.0 * STEP);
        loss_at(original)?;
        let analytic = sample.grads[p][e] * if corrupt { 1.5 } else { 1.0 };
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}
