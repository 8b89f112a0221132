//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation whose inputs carry a node id. Tensors
//! without a node id are constants: they never receive gradient and add no
//! edges. The tape is meant to be rebuilt for every forward pass.
//!
//! ```
//! use s3_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(vec![1.0, 2.0], &[2]).unwrap();
//! let y = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&y);
//! tape.backward(&loss).unwrap();
//! assert_eq!(tape.grad(&x).unwrap(), vec![2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Handle into a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op}: index out of range: {msg}")]
    Index { op: &'static str, msg: String },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is a constant and is not recorded on the tape")]
    UntrackedRoot,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor, optionally attached to a tape node.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("values", &self.data)
            .finish()
    }
}

impl Tensor {
    /// A constant tensor. Fails when the buffer does not match the shape.
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != values.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), values.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Rc::new(values),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: Rc::new(vec![value]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Rc::new(vec![value; numel(shape)]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Backward rule: maps the upstream gradient to one gradient per input.
/// `needs[i]` is false for inputs that are constants; the rule may skip them.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Operation record plus accumulated gradient buffers.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a learnable leaf. Its gradient buffer starts at zero.
    pub fn param(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(values, shape)?;
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.to_vec(),
            inputs: Vec::new(),
            backward: None,
        });
        inner.grads.push(Some(vec![0.0; t.len()]));
        Ok(Tensor { node: Some(id), ..t })
    }

    /// Attaches an existing constant to the tape as a leaf.
    pub fn track(&self, t: &Tensor) -> Tensor {
        self.param(t.to_vec(), &t.shape).expect("tensor invariant holds")
    }

    /// Records an operation with a caller-supplied backward rule. If no input
    /// is tracked the result is a constant and nothing is recorded.
    pub fn custom(
        &self,
        inputs: &[&Tensor],
        values: Vec<f64>,
        shape: &[usize],
        backward: BackwardFn,
    ) -> Result<Tensor> {
        let out = Tensor::new(values, shape)?;
        let ids: Vec<Option<NodeId>> = inputs.iter().map(|t| t.node).collect();
        if ids.iter().all(Option::is_none) {
            return Ok(out);
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.to_vec(),
            inputs: ids,
            backward: Some(backward),
        });
        inner.grads.push(None);
        Ok(Tensor { node: Some(id), ..out })
    }

    /// Accumulated gradient of `t`, if it is tracked and has received one.
    pub fn grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        let id = t.node?;
        self.inner.borrow().grads.get(id).cloned().flatten()
    }

    /// Clears every accumulated gradient. Leaves go back to zero.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, grads } = &mut *inner;
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            *g = if node.backward.is_none() {
                Some(vec![0.0; numel(&node.shape)])
            } else {
                None
            };
        }
    }

    /// Propagates d(root)/d(node) to every node reachable from `root` and adds
    /// the result into the accumulated buffers. Calling it twice without
    /// [`Tape::zero_grad`] accumulates twice.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root.shape.clone()));
        }
        let root_id = root.node.ok_or(AutodiffError::UntrackedRoot)?;
        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, grads } = &mut *inner;
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root_id + 1];
        local[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(upstream) = local[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                let parent_grads = rule(&upstream, &needs);
                for (input, g) in node.inputs.iter().zip(parent_grads) {
                    if let (Some(pid), Some(g)) = (input, g) {
                        accumulate(&mut local[*pid], g);
                    }
                }
            }
            accumulate(&mut grads[id], upstream);
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = Broadcast::new("add", &a.shape, &b.shape)?;
        let values = plan.zip(a.values(), b.values(), |x, y| x + y);
        let shape = plan.out_shape.clone();
        self.custom(
            &[a, b],
            values,
            &shape,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| plan.reduce_lhs(g)),
                    needs[1].then(|| plan.reduce_rhs(g)),
                ]
            }),
        )
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = Broadcast::new("sub", &a.shape, &b.shape)?;
        let values = plan.zip(a.values(), b.values(), |x, y| x - y);
        let shape = plan.out_shape.clone();
        self.custom(
            &[a, b],
            values,
            &shape,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| plan.reduce_lhs(g)),
                    needs[1].then(|| {
                        let mut gb = plan.reduce_rhs(g);
                        gb.iter_mut().for_each(|v| *v = -*v);
                        gb
                    }),
                ]
            }),
        )
    }

    /// Elementwise (Hadamard) product with trailing-dimension broadcasting.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = Broadcast::new("mul", &a.shape, &b.shape)?;
        let values = plan.zip(a.values(), b.values(), |x, y| x * y);
        let shape = plan.out_shape.clone();
        let (av, bv) = (a.data.clone(), b.data.clone());
        self.custom(
            &[a, b],
            values,
            &shape,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut out = vec![0.0; av.len()];
                    for (i, gi) in g.iter().enumerate() {
                        out[plan.lhs[i]] += gi * bv[plan.rhs[i]];
                    }
                    out
                });
                let gb = needs[1].then(|| {
                    let mut out = vec![0.0; bv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        out[plan.rhs[i]] += gi * av[plan.lhs[i]];
                    }
                    out
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let values = a.values().iter().map(|v| v * c).collect();
        self.custom(
            &[a],
            values,
            &a.shape,
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
        .expect("shape preserved")
    }

    /// Same values, no node: gradients stop here.
    pub fn detach(&self, a: &Tensor) -> Tensor {
        Tensor {
            node: None,
            ..a.clone()
        }
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let values = a.values().iter().map(|v| v.max(0.0)).collect();
        let av = a.data.clone();
        self.custom(
            &[a],
            values,
            &a.shape,
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(av.iter())
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )]
            }),
        )
        .expect("shape preserved")
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != a.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        if a.node.is_none() {
            return Ok(Tensor {
                shape: shape.to_vec(),
                ..a.clone()
            });
        }
        self.custom(&[a], a.to_vec(), shape, Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= a.shape.len() {
            return Err(AutodiffError::Index {
                op: "slice",
                msg: format!("axis {axis} for rank {}", a.shape.len()),
            });
        }
        let dim = a.shape[axis];
        if start > end || end > dim {
            return Err(AutodiffError::Index {
                op: "slice",
                msg: format!("range {start}..{end} on axis of length {dim}"),
            });
        }
        let outer = numel(&a.shape[..axis]);
        let inner = numel(&a.shape[axis + 1..]);
        let width = end - start;
        let mut values = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            values.extend_from_slice(&a.values()[base..base + width * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = width;
        let src_len = a.len();
        self.custom(
            &[a],
            values,
            &shape,
            Box::new(move |g, _| {
                let mut out = vec![0.0; src_len];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * width * inner;
                    out[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| AutodiffError::Shape {
            op: "concat",
            msg: "no parts".into(),
        })?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(AutodiffError::Index {
                op: "concat",
                msg: format!("axis {axis} for rank {rank}"),
            });
        }
        for p in parts {
            let agree = p.shape.len() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !agree {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                let base = o * w * inner;
                values.extend_from_slice(&p.values()[base..base + w * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        self.custom(
            parts,
            values,
            &shape,
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(w, need)| {
                        let this = offset;
                        offset += w;
                        need.then(|| {
                            let mut out = Vec::with_capacity(outer * w * inner);
                            for o in 0..outer {
                                let base = (o * total + this) * inner;
                                out.extend_from_slice(&g[base..base + w * inner]);
                            }
                            out
                        })
                    })
                    .collect()
            }),
        )
    }

    // ---- reductions and linear algebra --------------------------------------

    /// Sums over `axes`, dropping them. An empty list sums over every axis.
    pub fn reduce_sum(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = a.shape.len();
        let mut reduced = vec![false; rank];
        if axes.is_empty() {
            reduced.iter_mut().for_each(|r| *r = true);
        }
        for &ax in axes {
            if ax >= rank {
                return Err(AutodiffError::Index {
                    op: "reduce_sum",
                    msg: format!("axis {ax} for rank {rank}"),
                });
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = a
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(d, _)| *d)
            .collect();
        // Map every input element to its output slot.
        let out_strides = strides(&out_shape);
        let mut map = Vec::with_capacity(a.len());
        let mut index = vec![0usize; rank];
        for _ in 0..a.len() {
            let mut slot = 0;
            let mut k = 0;
            for (ax, &i) in index.iter().enumerate() {
                if !reduced[ax] {
                    slot += i * out_strides[k];
                    k += 1;
                }
            }
            map.push(slot);
            increment(&mut index, &a.shape);
        }
        let mut values = vec![0.0; numel(&out_shape)];
        for (v, &slot) in a.values().iter().zip(&map) {
            values[slot] += v;
        }
        self.custom(
            &[a],
            values,
            &out_shape,
            Box::new(move |g, _| vec![Some(map.iter().map(|&s| g[s]).collect())]),
        )
    }

    pub fn sum(&self, a: &Tensor) -> Tensor {
        self.reduce_sum(a, &[]).expect("full reduction is always valid")
    }

    pub fn mean(&self, a: &Tensor) -> Tensor {
        let n = a.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                })
            }
        };
        let (av, bv) = (a.data.clone(), b.data.clone());
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..n {
                    values[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        self.custom(
            &[a, b],
            values,
            &[m, n],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            out[i * k + p] = acc;
                        }
                    }
                    out
                });
                let gb = needs[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                out[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    out
                });
                vec![ga, gb]
            }),
        )
    }

    /// Stride-1 temporal convolution.
    ///
    /// `input` is `[T, C_in]`, `kernel` is `[C_out, C_in, K]`, `bias` is
    /// `[C_out]`. `padding` zeros are added on both ends of the time axis and
    /// the output is `[T + 2 * padding - K + 1, C_out]`.
    pub fn conv1d(&self, input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
        let (t_len, c_in) = match input.shape.as_slice() {
            [t, c] => (*t, *c),
            _ => {
                return Err(AutodiffError::Shape {
                    op: "conv1d",
                    msg: format!("input must be [T, C], got {:?}", input.shape),
                })
            }
        };
        let (c_out, k_len) = match kernel.shape.as_slice() {
            [o, c, k] if *c == c_in && *k >= 1 => (*o, *k),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv1d",
                    lhs: input.shape.clone(),
                    rhs: kernel.shape.clone(),
                })
            }
        };
        if bias.shape != [c_out] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![c_out],
                rhs: bias.shape.clone(),
            });
        }
        if t_len + 2 * padding < k_len {
            return Err(AutodiffError::Shape {
                op: "conv1d",
                msg: format!("kernel {k_len} longer than padded input {}", t_len + 2 * padding),
            });
        }
        let out_len = t_len + 2 * padding - k_len + 1;
        let wv = kernel.data.clone();
        let bv = bias.values();
        // Zero-padded input window of every output row, laid out like a kernel row.
        let width = c_in * k_len;
        let mut patches = vec![0.0; out_len * width];
        for (t, patch) in patches.chunks_exact_mut(width).enumerate() {
            for k in padding.saturating_sub(t)..k_len.min(t_len + padding - t) {
                let row = &input.data[(t + k - padding) * c_in..][..c_in];
                for (c, v) in row.iter().enumerate() {
                    patch[c * k_len + k] = *v;
                }
            }
        }
        let mut values = vec![0.0; out_len * c_out];
        for (patch, out) in patches.chunks_exact(width).zip(values.chunks_exact_mut(c_out)) {
            for ((v, w), b) in out.iter_mut().zip(wv.chunks_exact(width)).zip(bv) {
                *v = b + dot(w, patch);
            }
        }
        self.custom(
            &[input, kernel, bias],
            values,
            &[out_len, c_out],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; t_len * c_in]);
                let mut gw = needs[1].then(|| vec![0.0; c_out * width]);
                let mut gb = needs[2].then(|| vec![0.0; c_out]);
                let mut g_patch = vec![0.0; width];
                for (t, (patch, go)) in patches.chunks_exact(width).zip(g.chunks_exact(c_out)).enumerate() {
                    if let Some(gb) = gb.as_mut() {
                        gb.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                    }
                    if let Some(gw) = gw.as_mut() {
                        for (row, &s) in gw.chunks_exact_mut(width).zip(go) {
                            axpy(row, s, patch);
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        g_patch.iter_mut().for_each(|v| *v = 0.0);
                        for (w, &s) in wv.chunks_exact(width).zip(go) {
                            axpy(&mut g_patch, s, w);
                        }
                        for k in padding.saturating_sub(t)..k_len.min(t_len + padding - t) {
                            let row = &mut gx[(t + k - padding) * c_in..][..c_in];
                            for (c, v) in row.iter_mut().enumerate() {
                                *v += g_patch[c * k_len + k];
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }),
        )
    }

    // ---- losses ------------------------------------------------------------

    /// Mean softmax cross-entropy. `logits` is `[K]` (one sample) or `[B, K]`.
    pub fn softmax_cross_entropy(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (batch, classes) = match logits.shape.as_slice() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => {
                return Err(AutodiffError::Shape {
                    op: "softmax_cross_entropy",
                    msg: format!("logits must be [K] or [B, K], got {:?}", logits.shape),
                })
            }
        };
        if labels.len() != batch {
            return Err(AutodiffError::Shape {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for batch of {batch}", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::Index {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} with {classes} classes"),
            });
        }
        let lv = logits.values();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &lv[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[b * classes + j] = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[b]];
        }
        let inv = 1.0 / batch as f64;
        let labels = labels.to_vec();
        self.custom(
            &[logits],
            vec![loss * inv],
            &[],
            Box::new(move |g, _| {
                let mut out = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    out[b * classes + l] -= 1.0;
                }
                out.iter_mut().for_each(|v| *v *= g[0] * inv);
                vec![Some(out)]
            }),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.shape != target.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse_loss",
                lhs: pred.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        let n = pred.len().max(1) as f64;
        let diff: Vec<f64> = pred
            .values()
            .iter()
            .zip(target.values())
            .map(|(p, t)| p - t)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        self.custom(
            &[pred, target],
            vec![loss],
            &[],
            Box::new(move |g, needs| {
                let scaled: Vec<f64> = diff.iter().map(|d| 2.0 * d * g[0] / n).collect();
                vec![
                    needs[0].then(|| scaled.clone()),
                    needs[1].then(|| scaled.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }
}

/// Dot product with four partial sums, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        index[ax] += 1;
        if index[ax] < shape[ax] {
            return;
        }
        index[ax] = 0;
    }
}

/// Flat source indices of both operands for every output element.
struct Broadcast {
    out_shape: Vec<usize>,
    lhs: Vec<usize>,
    rhs: Vec<usize>,
    lhs_len: usize,
    rhs_len: usize,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let dim = |s: &[usize], i: usize| {
            // Align from the right; missing leading dims count as 1.
            (i + s.len()).checked_sub(rank).map_or(1, |j| s[j])
        };
        let mut out_shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let (x, y) = (dim(a, i), dim(b, i));
            let d = match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => {
                    return Err(AutodiffError::ShapeMismatch {
                        op,
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
            out_shape.push(d);
        }
        let n = numel(&out_shape);
        let (lhs_len, rhs_len) = (numel(a), numel(b));
        if a == b {
            let ident: Vec<usize> = (0..n).collect();
            return Ok(Self {
                out_shape,
                lhs: ident.clone(),
                rhs: ident,
                lhs_len,
                rhs_len,
            });
        }
        let operand_strides = |s: &[usize]| -> Vec<usize> {
            let own = strides(s);
            (0..rank)
                .map(|i| match (i + s.len()).checked_sub(rank) {
                    Some(j) if s[j] != 1 => own[j],
                    _ => 0,
                })
                .collect()
        };
        let (sa, sb) = (operand_strides(a), operand_strides(b));
        let mut lhs = Vec::with_capacity(n);
        let mut rhs = Vec::with_capacity(n);
        let mut index = vec![0usize; rank];
        for _ in 0..n {
            lhs.push(index.iter().zip(&sa).map(|(i, s)| i * s).sum());
            rhs.push(index.iter().zip(&sb).map(|(i, s)| i * s).sum());
            increment(&mut index, &out_shape);
        }
        Ok(Self {
            out_shape,
            lhs,
            rhs,
            lhs_len,
            rhs_len,
        })
    }

    fn zip(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.lhs.iter().zip(&self.rhs).map(|(&i, &j)| f(a[i], b[j])).collect()
    }

    fn reduce_lhs(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.lhs_len];
        for (gi, &i) in g.iter().zip(&self.lhs) {
            out[i] += gi;
        }
        out
    }

    fn reduce_rhs(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rhs_len];
        for (gi, &j) in g.iter().zip(&self.rhs) {
            out[j] += gi;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(values.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_and_mul_values() {
        let tape = Tape::new();
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[3.0, 4.0], &[2]);
        assert_eq!(tape.add(&a, &b).unwrap().values(), &[4.0, 6.0]);
        let c = t(&[2.0, 3.0], &[2]);
        let d = t(&[4.0, 5.0], &[2]);
        assert_eq!(tape.mul(&c, &d).unwrap().values(), &[8.0, 15.0]);
        let ones = Tensor::ones(&[2]);
        assert_eq!(tape.mul(&c, &ones).unwrap().values(), c.values());
    }

    #[test]
    fn add_zero_has_unit_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let y = tape.add(&x, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.values(), x.values());
        tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn broadcast_trailing_dims() {
        let tape = Tape::new();
        let x = tape.param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let w = tape.param(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let y = tape.mul(&x, &w).unwrap();
        assert_eq!(y.values(), &[10.0, 40.0, 90.0, 40.0, 100.0, 180.0]);
        tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(tape.grad(&w).unwrap(), vec![5.0, 7.0, 9.0]);
        let col = t(&[1.0, 2.0], &[2, 1]);
        let z = tape.add(&x, &col).unwrap();
        assert_eq!(z.values(), &[2.0, 3.0, 4.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let tape = Tape::new();
        let err = tape.add(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn detach_stops_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec![1.5, -2.0], &[2]).unwrap();
        let d = tape.detach(&x);
        assert!(d.values().iter().zip(x.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(!d.is_tracked());
        let y = tape.mul(&x, &d).unwrap();
        tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![1.5, -2.0]);

        let tape = Tape::new();
        let x = tape.param(vec![3.0], &[1]).unwrap();
        let y = tape.detach(&x);
        let z = tape.add(&x, &Tensor::zeros(&[1])).unwrap();
        let w = tape.mul(&tape.scale(&z, 0.0), &y).unwrap();
        tape.backward(&tape.sum(&w)).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![0.0]);
    }

    #[test]
    fn slice_concat_partition() {
        let tape = Tape::new();
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let a = tape.slice(&x, 0, 0, 1).unwrap();
        let b = tape.slice(&x, 0, 1, 3).unwrap();
        let joined = tape.concat(&[&a, &b], 0).unwrap();
        assert_eq!(joined.values(), x.values());
        assert_eq!(joined.shape(), x.shape());
        let c = tape.concat(&[&t(&[1.0], &[1]), &t(&[2.0], &[1])], 0).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0]);
        assert!(matches!(tape.slice(&x, 0, 2, 4), Err(AutodiffError::Index { .. })));
        assert!(matches!(tape.slice(&x, 2, 0, 1), Err(AutodiffError::Index { .. })));
    }

    #[test]
    fn slice_backward_pads_with_zeros() {
        let tape = Tape::new();
        let x = tape.param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let s = tape.slice(&x, 1, 1, 2).unwrap();
        assert_eq!(s.values(), &[2.0, 4.0]);
        tape.backward(&tape.sum(&s)).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn reduce_sum_and_matmul() {
        let tape = Tape::new();
        let ones = Tensor::ones(&[2, 3]);
        assert_eq!(tape.sum(&ones).item(), Some(6.0));
        let rows = tape.reduce_sum(&t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]), &[1]).unwrap();
        assert_eq!(rows.values(), &[6.0, 15.0]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(tape.matmul(&eye, &a).unwrap().values(), a.values());
        assert!(tape.matmul(&a, &eye).is_err());
    }

    #[test]
    fn conv1d_known_values() {
        let tape = Tape::new();
        // One channel in, one out, kernel [1, 2, 1], padding 1.
        let x = t(&[1.0, 2.0, 3.0], &[3, 1]);
        let w = t(&[1.0, 2.0, 1.0], &[1, 1, 3]);
        let b = t(&[0.5], &[1]);
        let y = tape.conv1d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert_eq!(y.values(), &[4.5, 8.5, 8.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let logits = tape.param(vec![0.0; 4], &[4]).unwrap();
        let loss = tape.softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-15);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&logits).unwrap(), vec![0.25, 0.25, -0.75, 0.25]);
        assert!(tape.softmax_cross_entropy(&logits, &[4]).is_err());
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::new();
        let x = tape.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = tape.sum(&x);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![1.0; 3]);
        assert_eq!(tape.grad(&s).unwrap(), vec![1.0]);
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![2.0; 3]);
        tape.zero_grad();
        assert_eq!(tape.grad(&x).unwrap(), vec![0.0; 3]);
        assert_eq!(tape.backward(&x), Err(AutodiffError::NonScalarRoot(vec![3])));
        assert_eq!(tape.backward(&Tensor::scalar(1.0)), Err(AutodiffError::UntrackedRoot));
    }

    #[test]
    fn constants_record_nothing() {
        let tape = Tape::new();
        let a = Tensor::ones(&[2]);
        let b = tape.add(&a, &a).unwrap();
        assert!(!b.is_tracked());
        assert!(tape.is_empty());
    }
}
