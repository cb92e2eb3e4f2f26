//! Define-by-run reverse-mode tape.
//!
//! Nodes are appended in creation order, which is also a topological order,
//! so the backward pass is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Variable,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Squash(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    LogSigmoid(Var),
    Powf(Var, f64),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Sum(Var),
    Mean(Var),
    WindowMean(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Variable => "variable",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::ScaleBy(..) => "scale_by",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::Sigmoid(..) => "sigmoid",
            Op::Squash(..) => "squash",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Powf(..) => "powf",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::WindowMean(..) => "window_mean",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Variable | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleBy(a, b)
            | Op::MatVec(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Sigmoid(a)
            | Op::Squash(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::LogSigmoid(a)
            | Op::Powf(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::WindowMean(a, _)
            | Op::Slice(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower bound of the range squash; the image stays inside the open unit interval.
pub const SQUASH_FLOOR: f64 = 1e-6;

pub(crate) fn squash_scalar(z: f64) -> f64 {
    SQUASH_FLOOR + (1.0 - 2.0 * SQUASH_FLOOR) * sigmoid_scalar(z)
}

pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(z: f64) -> f64 {
    z.min(0.0) - (-z.abs()).exp().ln_1p()
}

fn softmax_values(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Mean over every `k x k` window at stride 1 with valid padding.
pub(crate) fn window_mean_values(a: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let out_r = rows - k + 1;
    let out_c = cols - k + 1;
    let mut horizontal = vec![0.0; rows * out_c];
    for i in 0..rows {
        for j in 0..out_c {
            let mut acc = 0.0;
            for d in 0..k {
                acc += a[i * cols + j + d];
            }
            horizontal[i * out_c + j] = acc;
        }
    }
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; out_r * out_c];
    for i in 0..out_r {
        for j in 0..out_c {
            let mut acc = 0.0;
            for d in 0..k {
                acc += horizontal[(i + d) * out_c + j];
            }
            out[i * out_c + j] = acc * norm;
        }
    }
    out
}

fn window_mean_backward(g: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let out_r = rows - k + 1;
    let out_c = cols - k + 1;
    let norm = 1.0 / (k * k) as f64;
    let mut gh = vec![0.0; rows * out_c];
    for i in 0..out_r {
        for j in 0..out_c {
            let v = g[i * out_c + j] * norm;
            for d in 0..k {
                gh[(i + d) * out_c + j] += v;
            }
        }
    }
    let mut ga = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..out_c {
            let v = gh[i * out_c + j];
            for d in 0..k {
                ga[i * cols + j + d] += v;
            }
        }
    }
    ga
}

pub(crate) fn matvec_values(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let row = &m[i * cols..(i + 1) * cols];
            row.iter().zip(v).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// A recorded computation. Rebuilt for every evaluation of a loss.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to requested leaves, in request order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    entries: Vec<(Var, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Op tag of a node, for inspection.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    /// Registers a differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        check_finite("variable", value.data())?;
        Ok(self.push(value, Op::Variable, true))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        check_finite("constant", value.data())?;
        Ok(self.push(value, Op::Constant, false))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op.name(), &data)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn check_var(&self, var: Var, op: &'static str) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::shape(op, format!("node {} not on tape", var.0)));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check_var(a, op)?;
        self.check_var(b, op)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        self.record(shape, data, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_var(a, op.name())?;
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        self.record(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Multiplies by a fixed real.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Adds a fixed real to every entry.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.map(a, Op::Shift(a), |x| x + offset)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_var(a, "scale_by")?;
        self.check_var(s, "scale_by")?;
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by", format!("factor shape {:?}", self.value(s).shape())));
        }
        let factor = self.value(s).item();
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let shape = va.shape().to_vec();
        self.record(shape, data, Op::ScaleBy(a, s))
    }

    /// `[r, c] x [c] -> [r]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check_var(m, "matvec")?;
        self.check_var(v, "matvec")?;
        let (vm, vv) = (self.value(m), self.value(v));
        if vm.rank() != 2 || vv.rank() != 1 || vm.shape()[1] != vv.len() {
            return Err(Error::shape("matvec", format!("{:?} x {:?}", vm.shape(), vv.shape())));
        }
        let (rows, cols) = (vm.shape()[0], vm.shape()[1]);
        let data = matvec_values(vm.data(), rows, cols, vv.data());
        self.record(vec![rows], data, Op::MatVec(m, v))
    }

    /// `[r, k] x [k, c] -> [r, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a, "matmul")?;
        self.check_var(b, "matmul")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let (r, k, c) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for l in 0..k {
                let x = va.data()[i * k + l];
                for j in 0..c {
                    data[i * c + j] += x * vb.data()[l * c + j];
                }
            }
        }
        self.record(vec![r, c], data, Op::MatMul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    /// Smooth map of the real line onto the open unit interval.
    pub fn squash(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Squash(a), squash_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), f64::ln)
    }

    /// `ln(sigmoid(a))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::LogSigmoid(a), log_sigmoid_scalar)
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.map(a, Op::Powf(a, exponent), |x| x.powf(exponent))
    }

    fn check_vector(&self, a: Var, op: &'static str) -> Result<()> {
        self.check_var(a, op)?;
        if self.value(a).rank() != 1 {
            return Err(Error::shape(op, format!("expected a vector, got {:?}", self.value(a).shape())));
        }
        Ok(())
    }

    /// Softmax of `a / temperature` over a vector.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check_vector(a, "softmax")?;
        if !(temperature > 0.0) {
            return Err(Error::shape("softmax", format!("temperature {temperature} must be positive")));
        }
        let data = softmax_values(self.value(a).data(), temperature);
        let n = data.len();
        self.record(vec![n], data, Op::Softmax(a, temperature))
    }

    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check_vector(a, "log_softmax")?;
        if !(temperature > 0.0) {
            return Err(Error::shape("log_softmax", format!("temperature {temperature} must be positive")));
        }
        let x = self.value(a).data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = x.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
        let data: Vec<f64> = x.iter().map(|v| (v - max) / temperature - lse).collect();
        let n = data.len();
        self.record(vec![n], data, Op::LogSoftmax(a, temperature))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a, "sum")?;
        let total = self.value(a).data().iter().sum();
        self.record(vec![1], vec![total], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_var(a, "mean")?;
        let v = self.value(a);
        let total: f64 = v.data().iter().sum();
        let mean = total / v.len() as f64;
        self.record(vec![1], vec![mean], Op::Mean(a))
    }

    /// Means over all `k x k` windows of a 2-D tensor (stride 1, valid padding).
    pub fn window_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        self.check_var(a, "window_mean")?;
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("window_mean", format!("expected 2-D, got {:?}", va.shape())));
        }
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        if k == 0 || k > rows || k > cols {
            return Err(Error::shape("window_mean", format!("window {k} does not fit {rows}x{cols}")));
        }
        let data = window_mean_values(va.data(), rows, cols, k);
        self.record(vec![rows - k + 1, cols - k + 1], data, Op::WindowMean(a, k))
    }

    /// Windowed covariance `E[ab] - E[a]E[b]` over `k x k` windows.
    pub fn window_cov(&mut self, a: Var, b: Var, k: usize) -> Result<Var> {
        let ab = self.mul(a, b)?;
        let mean_ab = self.window_mean(ab, k)?;
        let mean_a = self.window_mean(a, k)?;
        let mean_b = self.window_mean(b, k)?;
        let prod = self.mul(mean_a, mean_b)?;
        self.sub(mean_ab, prod)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let mut data = Vec::new();
        for &p in parts {
            self.check_vector(p, "concat")?;
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        self.record(vec![n], data, Op::Concat(parts.to_vec()))
    }

    /// Contiguous sub-vector `[start, start + len)` of the flattened data.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_var(a, "slice")?;
        let va = self.value(a);
        if len == 0 || start + len > va.len() {
            return Err(Error::shape("slice", format!("[{start}, {}) of {}", start + len, va.len())));
        }
        let data = va.data()[start..start + len].to_vec();
        self.record(vec![len], data, Op::Slice(a, start))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(a, "reshape")?;
        let va = self.value(a);
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || shape.iter().product::<usize>() != va.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", va.shape())));
        }
        let data = va.data().to_vec();
        self.record(shape.to_vec(), data, Op::Reshape(a))
    }

    /// Inner product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// `a / ||a||_2`.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let sq = self.dot(a, a)?;
        let inv = self.powf(sq, -0.5)?;
        self.scale_by(a, inv)
    }

    /// Gradient of the scalar `loss` with respect to each of `leaves`.
    ///
    /// Leaves that the loss does not depend on receive an exact zero tensor.
    pub fn backward(&self, loss: Var, leaves: &[Var]) -> Result<GradientMap> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownLeaf(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        for leaf in leaves {
            match self.nodes.get(leaf.0) {
                Some(Node { op: Op::Variable, .. }) => {}
                _ => return Err(Error::UnknownLeaf(leaf.0)),
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Variable | Op::Constant => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, || g.iter().zip(vb).map(|(g, b)| g * b).collect());
                    self.accumulate(&mut grads, *b, || g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, || g.iter().zip(vb).map(|(g, b)| g / b).collect());
                    self.accumulate(&mut grads, *b, || {
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect()
                    });
                }
                Op::Scale(a, factor) => {
                    self.accumulate(&mut grads, *a, || g.iter().map(|v| v * factor).collect());
                }
                Op::Shift(a) | Op::Reshape(a) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                }
                Op::ScaleBy(a, s) => {
                    let factor = self.value(*s).item();
                    let va = self.value(*a).data();
                    self.accumulate(&mut grads, *a, || g.iter().map(|v| v * factor).collect());
                    self.accumulate(&mut grads, *s, || vec![g.iter().zip(va).map(|(g, a)| g * a).sum()]);
                }
                Op::MatVec(m, v) => {
                    let vm = self.value(*m);
                    let (rows, cols) = (vm.shape()[0], vm.shape()[1]);
                    let (dm, dv) = (vm.data(), self.value(*v).data());
                    self.accumulate(&mut grads, *m, || {
                        let mut out = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                out[i * cols + j] = g[i] * dv[j];
                            }
                        }
                        out
                    });
                    self.accumulate(&mut grads, *v, || {
                        let mut out = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                out[j] += dm[i * cols + j] * g[i];
                            }
                        }
                        out
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (r, k, c) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let (da, db) = (va.data(), vb.data());
                    self.accumulate(&mut grads, *a, || {
                        let mut out = vec![0.0; r * k];
                        for i in 0..r {
                            for l in 0..k {
                                out[i * k + l] = (0..c).map(|j| g[i * c + j] * db[l * c + j]).sum();
                            }
                        }
                        out
                    });
                    self.accumulate(&mut grads, *b, || {
                        let mut out = vec![0.0; k * c];
                        for l in 0..k {
                            for j in 0..c {
                                out[l * c + j] = (0..r).map(|i| da[i * k + l] * g[i * c + j]).sum();
                            }
                        }
                        out
                    });
                }
                Op::Sigmoid(a) => {
                    self.accumulate(&mut grads, *a, || g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Squash(a) => {
                    let va = self.value(*a).data();
                    let span = 1.0 - 2.0 * SQUASH_FLOOR;
                    self.accumulate(&mut grads, *a, || {
                        g.iter()
                            .zip(va)
                            .map(|(g, z)| {
                                let s = sigmoid_scalar(*z);
                                g * span * s * (1.0 - s)
                            })
                            .collect()
                    });
                }
                Op::Tanh(a) => {
                    self.accumulate(&mut grads, *a, || g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Exp(a) => {
                    self.accumulate(&mut grads, *a, || g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::Ln(a) => {
                    let va = self.value(*a).data();
                    self.accumulate(&mut grads, *a, || g.iter().zip(va).map(|(g, x)| g / x).collect());
                }
                Op::LogSigmoid(a) => {
                    let va = self.value(*a).data();
                    self.accumulate(&mut grads, *a, || {
                        g.iter().zip(va).map(|(g, z)| g * sigmoid_scalar(-z)).collect()
                    });
                }
                Op::Powf(a, p) => {
                    let va = self.value(*a).data();
                    self.accumulate(&mut grads, *a, || {
                        g.iter().zip(va).map(|(g, x)| g * p * x.powf(p - 1.0)).collect()
                    });
                }
                Op::Softmax(a, tau) => {
                    let inner: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    self.accumulate(&mut grads, *a, || {
                        g.iter().zip(y).map(|(g, y)| y * (g - inner) / tau).collect()
                    });
                }
                Op::LogSoftmax(a, tau) => {
                    let total: f64 = g.iter().sum();
                    self.accumulate(&mut grads, *a, || {
                        g.iter().zip(y).map(|(g, ly)| (g - ly.exp() * total) / tau).collect()
                    });
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, || vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, || vec![g[0] / n as f64; n]);
                }
                Op::WindowMean(a, k) => {
                    let va = self.value(*a);
                    let (rows, cols) = (va.shape()[0], va.shape()[1]);
                    self.accumulate(&mut grads, *a, || window_mean_backward(&g, rows, cols, *k));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let start = offset;
                        self.accumulate(&mut grads, *p, || g[start..start + n].to_vec());
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, || {
                        let mut out = vec![0.0; n];
                        out[*start..*start + g.len()].copy_from_slice(&g);
                        out
                    });
                }
            }
        }

        let mut entries = Vec::with_capacity(leaves.len());
        for leaf in leaves {
            let shape = self.nodes[leaf.0].value.shape().to_vec();
            let data = match grads.get(leaf.0).and_then(|g| g.clone()) {
                Some(d) => d,
                None => vec![0.0; shape.iter().product()],
            };
            check_finite("backward", &data)?;
            entries.push((*leaf, Tensor::from_parts(shape, data)));
        }
        Ok(GradientMap { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(c) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
