//! Segment, shuffle and stitch.
//!
//! A layer cuts a `[T, C]` series into `n` equal segments, reorders them by
//! the descending order of a learnable priority vector and blends the
//! reordered series with the original through per-channel weights.
//!
//! The reorder is a hard permutation in the forward pass. Gradients reach the
//! priorities through a selection matrix whose nonzero entries are the
//! priorities themselves multiplied by their detached reciprocals: the entries
//! evaluate to exactly one, yet each carries `d/dp = 1/p`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};

/// Magnitude below which a priority's reciprocal is clamped.
pub const PRIORITY_EPSILON: f64 = 1e-4;

/// Range used to initialize multi-dimensional priorities.
pub const MULTI_DIM_INIT_RANGE: (f64, f64) = (0.45, 0.55);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortDirection {
    /// Highest priority first.
    #[default]
    Descending,
    Ascending,
}

/// Sort convention used unless a caller asks otherwise.
pub const DEFAULT_SORT_DIRECTION: SortDirection = SortDirection::Descending;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum S3Error {
    #[error("layer {layer}: {msg}")]
    Config { layer: usize, msg: String },
    #[error("invalid stack configuration: {0}")]
    Stack(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite priority at segment {0}")]
    NonFinitePriority(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, S3Error>;

/// Hyperparameters of a stack of layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S3StackConfig {
    /// Segment count of the first layer.
    #[serde(alias = "n")]
    pub segments: usize,
    /// Number of stacked layers.
    #[serde(alias = "phi")]
    pub layers: usize,
    /// Per-layer multiplier on the segment count.
    pub theta: f64,
    /// Dimensionality of each layer's priority tensor.
    pub lambda: usize,
}

impl S3StackConfig {
    pub fn new(segments: usize, layers: usize, theta: f64, lambda: usize) -> Result<Self> {
        let config = Self {
            segments,
            layers,
            theta,
            lambda,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.layers == 0 || self.lambda == 0 {
            return Err(S3Error::Stack(format!(
                "segments, layers and lambda must be positive (got {}, {}, {})",
                self.segments, self.layers, self.lambda
            )));
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(S3Error::Stack(format!("theta must be positive, got {}", self.theta)));
        }
        Ok(())
    }

    /// `max(1, round(n * theta^(l - 1)))` for every layer `l`.
    pub fn segment_counts(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|l| {
                let raw = self.segments as f64 * self.theta.powi(l as i32);
                (raw.round() as usize).max(1)
            })
            .collect()
    }

    /// Learnable parameters the stack adds for `channels` input channels.
    pub fn param_count(&self, channels: usize) -> usize {
        self.segment_counts()
            .iter()
            .map(|&n| n.pow(self.lambda as u32) + 3 * channels)
            .sum()
    }
}

/// Learnable state of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S3LayerState {
    pub segments: usize,
    pub lambda: usize,
    pub channels: usize,
    /// Row-major tensor of shape `[segments; lambda]`.
    pub priorities: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub bias: Vec<f64>,
}

impl S3LayerState {
    /// Fresh layer state.
    ///
    /// With `lambda == 1` the priorities start strictly decreasing at
    /// `(n - j + 1) / n`, so the first permutation is the identity. Higher
    /// dimensional priorities are drawn uniformly from
    /// [`MULTI_DIM_INIT_RANGE`]. Stitch weights start at 0.5 with zero bias.
    pub fn new<R: Rng + ?Sized>(segments: usize, lambda: usize, channels: usize, rng: &mut R) -> Self {
        let priorities = if lambda == 1 {
            (1..=segments)
                .map(|j| (segments - j + 1) as f64 / segments as f64)
                .collect()
        } else {
            let (lo, hi) = MULTI_DIM_INIT_RANGE;
            (0..segments.pow(lambda as u32))
                .map(|_| rng.random_range(lo..hi))
                .collect()
        };
        Self {
            segments,
            lambda,
            channels,
            priorities,
            w1: vec![0.5; channels],
            w2: vec![0.5; channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn priority_shape(&self) -> Vec<usize> {
        vec![self.segments; self.lambda]
    }

    pub fn param_count(&self) -> usize {
        self.priorities.len() + self.w1.len() + self.w2.len() + self.bias.len()
    }

    /// Reduced priority vector computed from the stored values.
    pub fn priority_values(&self) -> Vec<f64> {
        reduce_priorities(&self.priorities, self.segments)
    }

    pub fn order(&self, direction: SortDirection) -> Result<Vec<usize>> {
        sort_order(&self.priority_values(), direction)
    }

    /// Registers every learnable tensor of this layer on `tape`.
    pub fn bind(&self, tape: &Tape) -> Result<LayerTensors> {
        Ok(LayerTensors {
            priorities: tape.param(self.priorities.clone(), &self.priority_shape())?,
            w1: tape.param(self.w1.clone(), &[self.channels])?,
            w2: tape.param(self.w2.clone(), &[self.channels])?,
            bias: tape.param(self.bias.clone(), &[self.channels])?,
        })
    }
}

/// Sum over all but the last axis of a row-major `[n; m]` buffer.
pub fn reduce_priorities(values: &[f64], segments: usize) -> Vec<f64> {
    let mut out = vec![0.0; segments];
    for row in values.chunks(segments) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

/// One layer's tensors on a tape.
#[derive(Debug, Clone)]
pub struct LayerTensors {
    pub priorities: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub bias: Tensor,
}

/// Splits `[T, C]` into `n` contiguous `[T / n, C]` segments.
pub fn segment(tape: &Tape, x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let t_len = match x.shape() {
        [t, _] => *t,
        other => return Err(S3Error::Contract(format!("segment expects [T, C], got {other:?}"))),
    };
    if n == 0 || t_len % n != 0 {
        return Err(S3Error::Contract(format!(
            "length {t_len} is not divisible into {n} segments; truncate first"
        )));
    }
    let tau = t_len / n;
    (0..n)
        .map(|j| Ok(tape.slice(x, 0, j * tau, (j + 1) * tau)?))
        .collect()
}

/// Reduces a `[n; m]` priority tensor to length `n` by summing the first
/// `m - 1` axes. With `m == 1` the input is returned as is.
pub fn priority_vector(tape: &Tape, p: &Tensor) -> Result<Tensor> {
    let shape = p.shape();
    let n = *shape
        .first()
        .ok_or_else(|| S3Error::Contract("priority tensor has no axes".into()))?;
    if n == 0 || shape.iter().any(|&d| d != n) {
        return Err(AutodiffError::Shape {
            op: "priority_vector",
            msg: format!("expected equal non-zero dims, got {shape:?}"),
        }
        .into());
    }
    if shape.len() == 1 {
        return Ok(p.clone());
    }
    let rows = tape.reshape(p, &[p.len() / n, n])?;
    Ok(tape.reduce_sum(&rows, &[0])?)
}

/// Segment indices ordered by priority. Ties keep ascending index order.
pub fn sort_order(priorities: &[f64], direction: SortDirection) -> Result<Vec<usize>> {
    if let Some(bad) = priorities.iter().position(|p| p.is_nan()) {
        return Err(S3Error::NonFinitePriority(bad));
    }
    let mut order: Vec<usize> = (0..priorities.len()).collect();
    // sort_by is stable, so equal keys stay in index order.
    match direction {
        SortDirection::Descending => order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a])),
        SortDirection::Ascending => order.sort_by(|&a, &b| priorities[a].total_cmp(&priorities[b])),
    }
    Ok(order)
}

/// Reciprocal used as the detached scale; clamped to `±1/eps` near zero.
fn guarded_reciprocal(p: f64) -> (f64, bool) {
    if p.abs() < PRIORITY_EPSILON {
        let sign = if p < 0.0 { -1.0 } else { 1.0 };
        (sign / PRIORITY_EPSILON, true)
    } else {
        (1.0 / p, false)
    }
}

/// How the shuffle is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShuffleRoute {
    /// Gather by index with a dedicated backward rule.
    #[default]
    Indexed,
    /// Explicit `U`, `Ω`, `Ω̃` and `V` tensors built from tape primitives.
    Matrix,
}

/// A permutation and reciprocal scales held fixed. Under this mode the
/// shuffle output is `p[σ_j] * scale_j * s[σ_j]`, which is linear in the
/// priorities and is the function the surrogate gradient differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenShuffle {
    pub order: Vec<usize>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ShuffleOptions<'a> {
    pub route: ShuffleRoute,
    pub direction: SortDirection,
    pub frozen: Option<&'a FrozenShuffle>,
}

#[derive(Debug, Clone)]
pub struct ShuffleOutput {
    /// Reordered segments concatenated along time, `[n * tau, C]`.
    pub stitched: Tensor,
    pub order: Vec<usize>,
    /// Detached reciprocal applied at each output position.
    pub scales: Vec<f64>,
    /// Segments whose priority hit the epsilon clamp.
    pub clamped: Vec<usize>,
}

impl ShuffleOutput {
    pub fn frozen(&self) -> FrozenShuffle {
        FrozenShuffle {
            order: self.order.clone(),
            scales: self.scales.clone(),
        }
    }
}

/// Reorders `segments` so output position `j` holds `segments[σ_j]`.
pub fn shuffle(tape: &Tape, segments: &[Tensor], priorities: &Tensor) -> Result<Vec<Tensor>> {
    let out = shuffle_with(tape, segments, priorities, ShuffleOptions::default())?;
    let tau = segments[0].shape()[0];
    (0..segments.len())
        .map(|j| Ok(tape.slice(&out.stitched, 0, j * tau, (j + 1) * tau)?))
        .collect()
}

pub fn shuffle_with(
    tape: &Tape,
    segments: &[Tensor],
    priorities: &Tensor,
    options: ShuffleOptions<'_>,
) -> Result<ShuffleOutput> {
    let n = segments.len();
    if n == 0 {
        return Err(S3Error::Contract("shuffle needs at least one segment".into()));
    }
    if priorities.shape() != [n] {
        return Err(S3Error::Contract(format!(
            "{n} segments but priority shape {:?}",
            priorities.shape()
        )));
    }
    let seg_shape = segments[0].shape().to_vec();
    if seg_shape.len() != 2 || segments.iter().any(|s| s.shape() != seg_shape.as_slice()) {
        return Err(S3Error::Contract("segments must share one [tau, C] shape".into()));
    }
    if let Some(frozen) = options.frozen {
        return frozen_shuffle(tape, segments, priorities, frozen);
    }
    let p = priorities.values();
    let order = sort_order(p, options.direction)?;
    let mut clamped = Vec::new();
    let scales: Vec<f64> = order
        .iter()
        .map(|&k| {
            let (r, hit) = guarded_reciprocal(p[k]);
            if hit {
                clamped.push(k);
            }
            r
        })
        .collect();
    if !clamped.is_empty() {
        log::debug!("priority magnitude below {PRIORITY_EPSILON} at segments {clamped:?}; reciprocal clamped");
    }
    let stitched = match options.route {
        ShuffleRoute::Indexed => indexed_shuffle(tape, segments, priorities, &order, &scales)?,
        ShuffleRoute::Matrix => matrix_shuffle(tape, segments, priorities, &order, &scales)?,
    };
    Ok(ShuffleOutput {
        stitched,
        order,
        scales,
        clamped,
    })
}

fn indexed_shuffle(
    tape: &Tape,
    segments: &[Tensor],
    priorities: &Tensor,
    order: &[usize],
    scales: &[f64],
) -> Result<Tensor> {
    let n = segments.len();
    let seg_shape = segments[0].shape();
    let seg_len = segments[0].len();
    let mut values = Vec::with_capacity(n * seg_len);
    for &k in order {
        values.extend_from_slice(segments[k].values());
    }
    let seg_values: Vec<Vec<f64>> = segments.iter().map(Tensor::to_vec).collect();
    let order_owned = order.to_vec();
    let scales_owned = scales.to_vec();
    let mut inputs: Vec<&Tensor> = segments.iter().collect();
    inputs.push(priorities);
    Ok(tape.custom(
        &inputs,
        values,
        &[n * seg_shape[0], seg_shape[1]],
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; n + 1];
            let mut gp = needs[n].then(|| vec![0.0; n]);
            for (j, &k) in order_owned.iter().enumerate() {
                let gj = &g[j * seg_len..(j + 1) * seg_len];
                if needs[k] {
                    grads[k] = Some(gj.to_vec());
                }
                if let Some(gp) = gp.as_mut() {
                    let mut dot = 0.0;
                    for (a, b) in gj.iter().zip(&seg_values[k]) {
                        dot += a * b;
                    }
                    gp[k] += dot * scales_owned[j];
                }
            }
            grads[n] = gp;
            grads
        }),
    )?)
}

fn matrix_shuffle(
    tape: &Tape,
    segments: &[Tensor],
    priorities: &Tensor,
    order: &[usize],
    scales: &[f64],
) -> Result<Tensor> {
    let n = segments.len();
    let seg_shape = segments[0].shape();
    let width = segments[0].len();
    // U: every segment flattened, repeated along the row axis by broadcasting.
    let flat: Vec<Tensor> = segments
        .iter()
        .map(|s| tape.reshape(s, &[1, 1, width]))
        .collect::<std::result::Result<_, _>>()?;
    let flat_refs: Vec<&Tensor> = flat.iter().collect();
    let u = tape.concat(&flat_refs, 1)?;
    // Ω[j, σ_j] = p[σ_j], built as mask ⊙ p broadcast over rows.
    let mut mask = vec![0.0; n * n];
    let mut recip = vec![0.0; n * n];
    for (j, &k) in order.iter().enumerate() {
        mask[j * n + k] = 1.0;
        recip[j * n + k] = scales[j];
    }
    let mask = Tensor::new(mask, &[n, n])?;
    let p_row = tape.reshape(priorities, &[1, n])?;
    let omega = tape.mul(&mask, &p_row)?;
    let recip = Tensor::new(recip, &[n, n])?;
    let scaled = tape.mul(&omega, &tape.detach(&recip))?;
    // Detached residual so every support entry is exactly 1.
    let residual: Vec<f64> = mask
        .values()
        .iter()
        .zip(scaled.values())
        .map(|(m, s)| m - s)
        .collect();
    let residual = Tensor::new(residual, &[n, n])?;
    let omega_tilde = tape.add(&scaled, &residual)?;
    let omega_tilde = tape.reshape(&omega_tilde, &[n, n, 1])?;
    let v = tape.mul(&u, &omega_tilde)?;
    let rows = tape.reduce_sum(&v, &[1])?;
    Ok(tape.reshape(&rows, &[n * seg_shape[0], seg_shape[1]])?)
}

fn frozen_shuffle(
    tape: &Tape,
    segments: &[Tensor],
    priorities: &Tensor,
    frozen: &FrozenShuffle,
) -> Result<ShuffleOutput> {
    let n = segments.len();
    if frozen.order.len() != n || frozen.scales.len() != n {
        return Err(S3Error::Contract(format!(
            "frozen permutation of length {} for {n} segments",
            frozen.order.len()
        )));
    }
    let mut parts = Vec::with_capacity(n);
    for (&k, &c) in frozen.order.iter().zip(&frozen.scales) {
        if k >= n {
            return Err(S3Error::Contract(format!("frozen index {k} out of range")));
        }
        let pk = tape.slice(priorities, 0, k, k + 1)?;
        let weight = tape.scale(&pk, c);
        parts.push(tape.mul(&segments[k], &weight)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(ShuffleOutput {
        stitched: tape.concat(&refs, 0)?,
        order: frozen.order.clone(),
        scales: frozen.scales.clone(),
        clamped: Vec::new(),
    })
}

/// `w1 ⊙ x + w2 ⊙ shuffled + bias`, with per-channel weights.
pub fn stitch(
    tape: &Tape,
    x: &Tensor,
    shuffled: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    if x.shape() != shuffled.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "stitch",
            lhs: x.shape().to_vec(),
            rhs: shuffled.shape().to_vec(),
        }
        .into());
    }
    let channels = x.shape().last().copied().unwrap_or(0);
    for w in [w1, w2, bias] {
        if w.shape() != [channels] {
            return Err(AutodiffError::ShapeMismatch {
                op: "stitch",
                lhs: vec![channels],
                rhs: w.shape().to_vec(),
            }
            .into());
        }
    }
    let a = tape.mul(x, w1)?;
    let b = tape.mul(shuffled, w2)?;
    let sum = tape.add(&a, &b)?;
    Ok(tape.add(&sum, bias)?)
}

/// Result of one layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: Tensor,
    pub priorities: Vec<f64>,
    pub order: Vec<usize>,
    pub scales: Vec<f64>,
    pub clamped: Vec<usize>,
    /// Time steps split off before segmentation.
    pub prefix: usize,
}

impl LayerOutput {
    pub fn frozen(&self) -> FrozenShuffle {
        FrozenShuffle {
            order: self.order.clone(),
            scales: self.scales.clone(),
        }
    }
}

/// Segment, shuffle and stitch one `[T, C]` input.
///
/// The first `T mod n` steps bypass the layer and are prepended unchanged.
pub fn s3_layer_forward(
    tape: &Tape,
    x: &Tensor,
    layer: &LayerTensors,
    segments: usize,
    layer_index: usize,
    options: ShuffleOptions<'_>,
) -> Result<LayerOutput> {
    let t_len = match x.shape() {
        [t, _] => *t,
        other => {
            return Err(S3Error::Config {
                layer: layer_index,
                msg: format!("input must be [T, C], got {other:?}"),
            })
        }
    };
    if segments == 0 || t_len < segments {
        return Err(S3Error::Config {
            layer: layer_index,
            msg: format!("input length {t_len} is shorter than {segments} segments"),
        });
    }
    if layer.priorities.shape().first() != Some(&segments) {
        return Err(S3Error::Config {
            layer: layer_index,
            msg: format!(
                "priority shape {:?} does not match {segments} segments",
                layer.priorities.shape()
            ),
        });
    }
    let prefix = t_len % segments;
    let body = if prefix > 0 {
        tape.slice(x, 0, prefix, t_len)?
    } else {
        x.clone()
    };
    let parts = segment(tape, &body, segments)?;
    let p_tilde = priority_vector(tape, &layer.priorities)?;
    let shuffled = shuffle_with(tape, &parts, &p_tilde, options)?;
    let mixed = stitch(tape, &body, &shuffled.stitched, &layer.w1, &layer.w2, &layer.bias)?;
    let output = if prefix > 0 {
        let head = tape.slice(x, 0, 0, prefix)?;
        tape.concat(&[&head, &mixed], 0)?
    } else {
        mixed
    };
    Ok(LayerOutput {
        output,
        priorities: p_tilde.to_vec(),
        order: shuffled.order,
        scales: shuffled.scales,
        clamped: shuffled.clamped,
        prefix,
    })
}

/// Output of a full stack.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub output: Tensor,
    pub layers: Vec<LayerOutput>,
}

impl StackOutput {
    pub fn frozen(&self) -> Vec<FrozenShuffle> {
        self.layers.iter().map(LayerOutput::frozen).collect()
    }
}

/// Applies the layers in sequence, each consuming the previous output.
///
/// `frozen`, when given, must hold one entry per layer.
pub fn s3_stack_forward(
    tape: &Tape,
    x: &Tensor,
    config: &S3StackConfig,
    layers: &[LayerTensors],
    route: ShuffleRoute,
    frozen: Option<&[FrozenShuffle]>,
) -> Result<StackOutput> {
    config.validate()?;
    let counts = config.segment_counts();
    if layers.len() != counts.len() {
        return Err(S3Error::Stack(format!(
            "{} layer states for {} configured layers",
            layers.len(),
            counts.len()
        )));
    }
    if let Some(f) = frozen {
        if f.len() != layers.len() {
            return Err(S3Error::Stack(format!("{} frozen permutations for {} layers", f.len(), layers.len())));
        }
    }
    let mut current = x.clone();
    let mut outputs = Vec::with_capacity(layers.len());
    for (l, (layer, &n)) in layers.iter().zip(&counts).enumerate() {
        let expected = n.pow(config.lambda as u32);
        if layer.priorities.len() != expected || layer.priorities.shape().len() != config.lambda {
            return Err(S3Error::Config {
                layer: l,
                msg: format!(
                    "priority shape {:?} does not match {n} segments with lambda {}",
                    layer.priorities.shape(),
                    config.lambda
                ),
            });
        }
        let options = ShuffleOptions {
            route,
            direction: DEFAULT_SORT_DIRECTION,
            frozen: frozen.map(|f| &f[l]),
        };
        let out = s3_layer_forward(tape, &current, layer, n, l, options)?;
        current = out.output.clone();
        outputs.push(out);
    }
    Ok(StackOutput {
        output: current,
        layers: outputs,
    })
}

/// Priorities and induced order of one layer at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPermutation {
    pub priorities: Vec<f64>,
    pub order: Vec<usize>,
}

/// Snapshot of every layer's permutation at a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub step: usize,
    pub layers: Vec<LayerPermutation>,
}

impl PermutationRecord {
    /// One `(step, layer, p_values, sigma)` row per layer, lists comma-joined.
    pub fn rows(&self) -> Vec<[String; 4]> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, lp)| {
                [
                    self.step.to_string(),
                    l.to_string(),
                    join(&lp.priorities),
                    join(&lp.order),
                ]
            })
            .collect()
    }
}

pub(crate) fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn record_permutations(states: &[S3LayerState], step: usize) -> Result<PermutationRecord> {
    let layers = states
        .iter()
        .map(|s| {
            let priorities = s.priority_values();
            let order = sort_order(&priorities, DEFAULT_SORT_DIRECTION)?;
            Ok(LayerPermutation { priorities, order })
        })
        .collect::<Result<_>>()?;
    Ok(PermutationRecord { step, layers })
}

/// True when `order` is a bijection on `0..order.len()`.
pub fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    order.iter().all(|&k| k < seen.len() && !std::mem::replace(&mut seen[k], true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn series(t_len: usize, c: usize) -> Tensor {
        let values = (0..t_len * c).map(|i| i as f64 * 0.5 - 3.0).collect();
        Tensor::new(values, &[t_len, c]).unwrap()
    }

    #[test]
    fn segment_splits_evenly() {
        let tape = Tape::new();
        let x = series(8, 2);
        let segs = segment(&tape, &x, 4).unwrap();
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[0].shape(), &[2, 2]);
        assert_eq!(segs[0].values(), &x.values()[0..4]);
        let single = segment(&tape, &x, 1).unwrap();
        assert_eq!(single[0].values(), x.values());
        assert!(matches!(segment(&tape, &x, 3), Err(S3Error::Contract(_))));
    }

    #[test]
    fn priority_vector_reduces_leading_axes() {
        let tape = Tape::new();
        let p = tape.param(vec![0.3, 0.9, 0.1], &[3]).unwrap();
        assert_eq!(priority_vector(&tape, &p).unwrap().values(), &[0.3, 0.9, 0.1]);
        let p2 = tape.param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let reduced = priority_vector(&tape, &p2).unwrap();
        assert_eq!(reduced.values(), &[4.0, 6.0]);
        tape.backward(&tape.sum(&reduced)).unwrap();
        assert_eq!(tape.grad(&p2).unwrap(), vec![1.0; 4]);
        let bad = Tensor::zeros(&[2, 3]);
        assert!(priority_vector(&tape, &bad).is_err());
    }

    #[test]
    fn sort_order_conventions() {
        assert_eq!(sort_order(&[0.9, 0.5, 0.1], SortDirection::Descending).unwrap(), vec![0, 1, 2]);
        assert_eq!(sort_order(&[0.1, 0.1], SortDirection::Descending).unwrap(), vec![0, 1]);
        assert_eq!(sort_order(&[0.2, 0.7, 0.4], SortDirection::Descending).unwrap(), vec![1, 2, 0]);
        assert_eq!(sort_order(&[0.2, 0.7, 0.4], SortDirection::Ascending).unwrap(), vec![0, 2, 1]);
        assert_eq!(
            sort_order(&[0.2, f64::NAN], SortDirection::Descending),
            Err(S3Error::NonFinitePriority(1))
        );
    }

    #[test]
    fn stack_counts_follow_rounding_rule() {
        let cfg = S3StackConfig::new(2, 3, 2.0, 1).unwrap();
        assert_eq!(cfg.segment_counts(), vec![2, 4, 8]);
        let cfg = S3StackConfig::new(8, 3, 0.5, 1).unwrap();
        assert_eq!(cfg.segment_counts(), vec![8, 4, 2]);
        let cfg = S3StackConfig::new(2, 3, 0.5, 1).unwrap();
        assert_eq!(cfg.segment_counts(), vec![2, 1, 1]);
        assert!(S3StackConfig::new(0, 1, 1.0, 1).is_err());
        assert!(S3StackConfig::new(2, 1, 0.0, 1).is_err());
    }

    #[test]
    fn layer_init_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = S3LayerState::new(4, 1, 3, &mut rng);
        assert_eq!(state.priorities, vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(state.order(SortDirection::Descending).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(state.param_count(), 4 + 9);
        let state = S3LayerState::new(3, 2, 2, &mut rng);
        assert_eq!(state.priorities.len(), 9);
        assert!(state.priorities.iter().all(|p| (0.45..0.55).contains(p)));
        assert_eq!(state.priority_values().len(), 3);
    }

    #[test]
    fn shuffle_matches_worked_example() {
        // σ = [3, 4, 1, 2] in one-based indexing.
        let tape = Tape::new();
        let segs: Vec<Tensor> = (1..=4)
            .map(|i| Tensor::new(vec![i as f64, 10.0 * i as f64], &[1, 2]).unwrap())
            .collect();
        let p = Tensor::new(vec![0.2, 0.1, 0.9, 0.5], &[4]).unwrap();
        for route in [ShuffleRoute::Indexed, ShuffleRoute::Matrix] {
            let opts = ShuffleOptions { route, ..Default::default() };
            let out = shuffle_with(&tape, &segs, &p, opts).unwrap();
            assert_eq!(out.order, vec![2, 3, 0, 1]);
            assert_eq!(out.stitched.values(), &[3.0, 30.0, 4.0, 40.0, 1.0, 10.0, 2.0, 20.0]);
        }
        let listed = shuffle(&tape, &segs, &p).unwrap();
        assert_eq!(listed[0].values(), segs[2].values());
        assert_eq!(listed[3].values(), segs[1].values());
    }

    #[test]
    fn shuffle_rejects_empty_and_clamps_small_priorities() {
        let tape = Tape::new();
        let p = Tensor::new(vec![], &[0]).unwrap();
        assert!(matches!(shuffle_with(&tape, &[], &p, Default::default()), Err(S3Error::Contract(_))));
        let segs = vec![Tensor::ones(&[2, 1]), Tensor::full(&[2, 1], 2.0)];
        let p = tape.param(vec![0.5, 1e-6], &[2]).unwrap();
        for route in [ShuffleRoute::Indexed, ShuffleRoute::Matrix] {
            let opts = ShuffleOptions { route, ..Default::default() };
            let out = shuffle_with(&tape, &segs, &p, opts).unwrap();
            assert_eq!(out.clamped, vec![1]);
            assert_eq!(out.scales[1], 1.0 / PRIORITY_EPSILON);
            assert_eq!(out.stitched.values(), &[1.0, 1.0, 2.0, 2.0]);
        }
    }

    #[test]
    fn stitch_identities() {
        let tape = Tape::new();
        let x = series(4, 2);
        let y = tape.scale(&x, -2.0);
        let one = Tensor::ones(&[2]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(stitch(&tape, &x, &y, &one, &zero, &zero).unwrap().values(), x.values());
        assert_eq!(stitch(&tape, &x, &y, &zero, &one, &zero).unwrap().values(), y.values());
        assert!(stitch(&tape, &x, &y, &Tensor::ones(&[3]), &zero, &zero).is_err());
    }

    #[test]
    fn layer_keeps_truncated_prefix() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = S3LayerState::new(4, 1, 1, &mut rng);
        state.priorities = vec![0.1, 0.4, 0.3, 0.2];
        let layer = state.bind(&tape).unwrap();
        let x = series(10, 1);
        let out = s3_layer_forward(&tape, &x, &layer, 4, 0, Default::default()).unwrap();
        assert_eq!(out.prefix, 2);
        assert_eq!(out.output.shape(), &[10, 1]);
        assert_eq!(&out.output.values()[..2], &x.values()[..2]);
        let err = s3_layer_forward(&tape, &series(3, 1), &layer, 4, 5, Default::default()).unwrap_err();
        assert!(matches!(err, S3Error::Config { layer: 5, .. }));
    }

    #[test]
    fn single_segment_layer_is_plain_blend() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = S3LayerState::new(1, 1, 2, &mut rng);
        let layer = state.bind(&tape).unwrap();
        let x = series(6, 2);
        let out = s3_layer_forward(&tape, &x, &layer, 1, 0, Default::default()).unwrap();
        let expect = stitch(&tape, &x, &x, &layer.w1, &layer.w2, &layer.bias).unwrap();
        assert_eq!(out.output.values(), expect.values());
    }

    #[test]
    fn record_and_validate_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<S3LayerState> = [2, 4].iter().map(|&n| S3LayerState::new(n, 1, 1, &mut rng)).collect();
        let rec = record_permutations(&states, 7).unwrap();
        assert_eq!(rec.step, 7);
        assert_eq!(rec.layers[1].order, vec![0, 1, 2, 3]);
        let rows = rec.rows();
        assert_eq!(rows[0], ["7".to_string(), "0".into(), "1,0.5".into(), "0,1".into()]);
        assert!(is_permutation(&[2, 0, 1]));
        assert!(!is_permutation(&[0, 0, 1]));
        assert!(!is_permutation(&[0, 3]));
    }
}
