//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The design is a classic Wengert list: a [`Tape`] records every primitive
//! operation in execution order, [`Tape::backward`] replays it in reverse and
//! accumulates vector-Jacobian products. Values are immutable once recorded;
//! a training step builds a fresh tape, so the graph is define-by-run.
//!
//! The op set is deliberately small — matrix multiply, broadcast/elementwise
//! arithmetic, `tanh`, softmax over the last axis, guarded `log`, `exp`,
//! axis reductions, row gather, reshape, and squared difference — which is
//! enough to express the belief networks in [`crate::renn`] while keeping
//! every adjoint simple to verify against finite differences.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Standard-normal entries scaled by `scale`, drawn in row-major order.
    pub fn randn<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The sole entry of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} entries", self.data.len());
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Differentiable input (network parameter).
    Leaf,
    /// Non-differentiable input (data, precomputed tables).
    Constant,
    Add(NodeId, NodeId),
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis, max-subtracted per row.
    SoftmaxLast(NodeId),
    /// `ln(x + eps)`; the offset keeps zero probabilities in-domain.
    LogEps(NodeId, f64),
    Exp(NodeId),
    SumAll(NodeId),
    /// Sum over the listed axes; remaining axes keep their order.
    SumAxes(NodeId, Vec<usize>),
    Reshape(NodeId),
    /// Select rows (leading-axis slices) by index, repeats allowed.
    Gather(NodeId, Vec<usize>),
    /// Elementwise `(a - b)^2`.
    SquaredDiff(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Whether any leaf is reachable from this node; gradient propagation
    /// skips constant-only subtrees.
    tracked: bool,
}

/// Records primitive operations for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to tape nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, if `id` is tracked and was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a leaf, zeros if the loss never touched it.
    pub fn wrt(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn check_finite(t: &Tensor, context: &str) -> Result<()> {
    // A single pass suffices: any NaN or ±inf entry keeps the sum non-finite.
    let sum: f64 = t.data.iter().sum();
    if sum.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(context.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::contract(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "add")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), value, tracked))
    }

    /// `[n, m] + [m]`: add `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (&self.value(a).shape, &self.value(bias).shape);
        if ashape.len() != 2 || bshape.len() != 1 || ashape[1] != bshape[0] {
            return Err(Error::contract(format!(
                "add_row: incompatible shapes {:?} and {:?}",
                ashape, bshape
            )));
        }
        let (n, m) = (ashape[0], ashape[1]);
        let mut data = self.value(a).data.clone();
        for r in 0..n {
            for c in 0..m {
                data[r * m + c] += self.value(bias).data[c];
            }
        }
        let value = Tensor { shape: vec![n, m], data };
        check_finite(&value, "add_row")?;
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(Op::AddRow(a, bias), value, tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::contract(format!(
                "mul: shape mismatch {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "mul")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), value, tracked))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data.iter().map(|x| c * x).collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "scalar_mul")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::ScalarMul(a, c), value, tracked))
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (&self.value(a).shape, &self.value(b).shape);
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::contract(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                ashape, bshape
            )));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let value = Tensor {
            shape: vec![m, n],
            data: matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n),
        };
        check_finite(&value, "matmul")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), value, tracked))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data.iter().map(|x| x.tanh()).collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "tanh")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::Tanh(a), value, tracked))
    }

    /// Softmax over the last axis. Each row is shifted by its max before
    /// exponentiation, so arbitrarily large logits stay finite.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape.clone();
        let width = *shape.last().ok_or_else(|| Error::contract("softmax_last: rank-0 input"))?;
        let mut data = self.value(a).data.clone();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor { shape, data };
        check_finite(&value, "softmax_last")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::SoftmaxLast(a), value, tracked))
    }

    /// `ln(x + eps)`. Callers pass a small positive `eps` when `x` may be an
    /// exact zero (e.g. belief entries).
    pub fn log_eps(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let data = self.value(a).data.iter().map(|x| (x + eps).ln()).collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "log_eps")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::LogEps(a, eps), value, tracked))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data.iter().map(|x| x.exp()).collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "exp")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::Exp(a), value, tracked))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        check_finite(&value, "sum_all")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::SumAll(a), value, tracked))
    }

    /// Mean of all entries; composite of `sum_all` and `scalar_mul`.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean_all: empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scalar_mul(s, 1.0 / n as f64)
    }

    /// Sum over `axes` (strictly increasing); surviving axes keep their order.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let in_shape = self.value(a).shape.clone();
        if axes.windows(2).any(|w| w[0] >= w[1]) || axes.iter().any(|&d| d >= in_shape.len()) {
            return Err(Error::contract(format!(
                "sum_axes: bad axes {:?} for shape {:?}",
                axes, in_shape
            )));
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let mut out = vec![0.0; out_shape.iter().product()];
        let ostride = reduction_strides(&in_shape, axes);
        walk_reduction(&in_shape, &ostride, |in_idx, out_idx| {
            out[out_idx] += self.nodes[a.0].value.data[in_idx];
        });
        let value = Tensor { shape: out_shape, data: out };
        check_finite(&value, "sum_axes")?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::SumAxes(a, axes.to_vec()), value, tracked))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let expected: usize = shape.iter().product();
        if expected != self.value(a).len() {
            return Err(Error::contract(format!(
                "reshape: {:?} incompatible with {} elements",
                shape,
                self.value(a).len()
            )));
        }
        let value = Tensor { shape, data: self.value(a).data.clone() };
        let tracked = self.tracked(a);
        Ok(self.push(Op::Reshape(a), value, tracked))
    }

    /// Select rows of a matrix (or entries of a vector) by index.
    pub fn gather(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let in_shape = &self.value(a).shape;
        if in_shape.is_empty() {
            return Err(Error::contract("gather: rank-0 input"));
        }
        let lead = in_shape[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= lead) {
            return Err(Error::contract(format!("gather: row {} out of {}", bad, lead)));
        }
        let row_len: usize = in_shape[1..].iter().product::<usize>().max(1);
        let mut out_shape = in_shape.clone();
        out_shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&self.value(a).data[r * row_len..(r + 1) * row_len]);
        }
        let value = Tensor { shape: out_shape, data };
        let tracked = self.tracked(a);
        Ok(self.push(Op::Gather(a, rows.to_vec()), value, tracked))
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::contract(format!(
                "squared_diff: shape mismatch {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| (x - y) * (x - y))
            .collect();
        let value = Tensor { shape: self.value(a).shape.clone(), data };
        check_finite(&value, "squared_diff")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::SquaredDiff(a, b), value, tracked))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// tracked node the loss depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            // Keep gradients addressable for leaves and intermediates alike.
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite(g, &format!("backward through node {}", i))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |id: NodeId, contrib: Vec<f64>, shape: &[usize]| {
            if !self.tracked(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, c) in acc.data.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor { shape: shape.to_vec(), data: contrib });
                }
            }
        };

        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.data.clone(), &self.value(*a).shape);
                send(*b, g.data.clone(), &self.value(*b).shape);
            }
            Op::AddRow(a, bias) => {
                send(*a, g.data.clone(), &self.value(*a).shape);
                let m = self.value(*bias).len();
                let mut db = vec![0.0; m];
                for (j, v) in g.data.iter().enumerate() {
                    db[j % m] += v;
                }
                send(*bias, db, &self.value(*bias).shape);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    g.data.iter().zip(&self.value(*b).data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> =
                    g.data.iter().zip(&self.value(*a).data).map(|(g, x)| g * x).collect();
                send(*a, da, &self.value(*a).shape);
                send(*b, db, &self.value(*b).shape);
            }
            Op::ScalarMul(a, c) => {
                send(*a, g.data.iter().map(|v| c * v).collect(), &self.value(*a).shape);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                // dA = dC Bᵀ, dB = Aᵀ dC
                let bt = transpose(&self.value(*b).data, k, n);
                let da = matmul_raw(&g.data, &bt, m, n, k);
                let at = transpose(&self.value(*a).data, m, k);
                let db = matmul_raw(&at, &g.data, k, m, n);
                send(*a, da, &self.value(*a).shape);
                send(*b, db, &self.value(*b).shape);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                send(*a, da, &self.value(*a).shape);
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let width = *y.shape.last().unwrap();
                let mut da = vec![0.0; y.len()];
                for (row, (yrow, grow)) in
                    y.data.chunks(width).zip(g.data.chunks(width)).enumerate()
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for c in 0..width {
                        da[row * width + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                send(*a, da, &self.value(*a).shape);
            }
            Op::LogEps(a, eps) => {
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(g, x)| g / (x + eps))
                    .collect();
                send(*a, da, &self.value(*a).shape);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(g, y)| g * y)
                    .collect();
                send(*a, da, &self.value(*a).shape);
            }
            Op::SumAll(a) => {
                let da = vec![g.data[0]; self.value(*a).len()];
                send(*a, da, &self.value(*a).shape);
            }
            Op::SumAxes(a, axes) => {
                let in_shape = self.value(*a).shape.clone();
                let ostride = reduction_strides(&in_shape, axes);
                let mut da = vec![0.0; self.value(*a).len()];
                walk_reduction(&in_shape, &ostride, |in_idx, out_idx| {
                    da[in_idx] = g.data[out_idx];
                });
                send(*a, da, &in_shape);
            }
            Op::Reshape(a) => {
                send(*a, g.data.clone(), &self.value(*a).shape);
            }
            Op::Gather(a, rows) => {
                let in_shape = &self.value(*a).shape;
                let row_len: usize = in_shape[1..].iter().product::<usize>().max(1);
                let mut da = vec![0.0; self.value(*a).len()];
                for (out_r, &in_r) in rows.iter().enumerate() {
                    for c in 0..row_len {
                        da[in_r * row_len + c] += g.data[out_r * row_len + c];
                    }
                }
                send(*a, da, in_shape);
            }
            Op::SquaredDiff(a, b) => {
                let diff: Vec<f64> = self
                    .value(*a)
                    .data
                    .iter()
                    .zip(&self.value(*b).data)
                    .map(|(x, y)| x - y)
                    .collect();
                let da: Vec<f64> = g.data.iter().zip(&diff).map(|(g, d)| 2.0 * g * d).collect();
                let db: Vec<f64> = g.data.iter().zip(&diff).map(|(g, d)| -2.0 * g * d).collect();
                send(*a, da, &self.value(*a).shape);
                send(*b, db, &self.value(*b).shape);
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let aval = a[i * k + l];
            if aval == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aval * bv;
            }
        }
    }
    c
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Per-axis output strides for a reduction: 0 on summed axes, the packed
/// stride of the surviving shape elsewhere.
fn reduction_strides(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut ostride = vec![0usize; in_shape.len()];
    let mut stride = 1;
    for d in (0..in_shape.len()).rev() {
        if !axes.contains(&d) {
            ostride[d] = stride;
            stride *= in_shape[d];
        }
    }
    ostride
}

/// Visit every input element of an odometer walk over `in_shape`, reporting
/// the flat input index and the (stride-projected) flat output index.
fn walk_reduction(in_shape: &[usize], ostride: &[usize], mut visit: impl FnMut(usize, usize)) {
    let len: usize = in_shape.iter().product();
    let ndim = in_shape.len();
    let mut idx = vec![0usize; ndim];
    let mut out_idx = 0usize;
    for flat in 0..len {
        visit(flat, out_idx);
        for d in (0..ndim).rev() {
            idx[d] += 1;
            out_idx += ostride[d];
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
            out_idx -= ostride[d] * in_shape[d];
        }
    }
}

/// Adam optimizer over a flat list of parameter tensors.
///
/// Standard exponential moment estimates with bias correction:
/// m ← β₁m + (1-β₁)g, v ← β₂v + (1-β₂)g², θ ← θ - lr·m̂/(√v̂ + ε).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `grads` must align with `params`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "adam: {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::contract(format!(
                    "adam: param {} has {} entries but gradient has {}",
                    pi,
                    p.len(),
                    g.len()
                )));
            }
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                if !pv.is_finite() {
                    return Err(Error::numeric("adam step"));
                }
            }
        }
        Ok(())
    }
}
