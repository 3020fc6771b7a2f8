//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order since
//! operands always precede their results. All ops work on matrices; vectors
//! are `1 × n` rows and scalars are `1 × 1`.

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask: `true` lets a query attend to a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    /// 0/1 matrix view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.rows, self.cols],
            self.allow.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims")
    }

    pub fn first_blocked_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| !self.row(i).iter().any(|&b| b))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Power(Var, f64),
    Abs(Var),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Mean(Var, Option<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Unfold { x: Var, kernel: usize, dilation: usize },
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient or zeros when the root does not depend on `v`.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
}

/// How `b` broadcasts against an (r × c) left operand.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: (usize, usize), b: (usize, usize), op: &str) -> Result<Bcast> {
    match b {
        _ if a == b => Ok(Bcast::Same),
        (1, c) if c == a.1 => Ok(Bcast::Row),
        (r, 1) if r == a.0 => Ok(Bcast::Col),
        (1, 1) => Ok(Bcast::Scalar),
        _ => Err(Error::Shape(format!("{op}: cannot broadcast {b:?} onto {a:?}"))),
    }
}

fn bcast_index(kind: Bcast, i: usize, j: usize, c: usize) -> usize {
    match kind {
        Bcast::Same => i * c + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

/// Lanes of an (r × c) matrix along `axis`: (start, stride, len) triples.
fn lanes(r: usize, c: usize, axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (count, start_step, stride, len) = if axis == 1 { (r, c, 1, c) } else { (c, 1, c, r) };
    (0..count).map(move |l| (l * start_step, stride, len))
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::Shape(format!("axis {axis} out of range for a matrix")));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a))?;
        let (k2, n) = dims(self.value(b))?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: ({m}×{k})·({k2}×{n})")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (r, c) = dims(self.value(a))?;
        let kind = bcast_kind((r, c), dims(self.value(b))?, name)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(av[i * c + j], bv[bcast_index(kind, i, j, c)]));
            }
        }
        Ok((Tensor::new(&[r, c], out)?, kind))
    }

    /// Elementwise a + b; `b` may be a row, column or scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// x + s elementwise, for a constant s.
    pub fn shift(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// ln(1 + eˣ), evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn power(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Power(x, p), |v| v.powf(p))
    }

    /// |x|, with subgradient 0 at x = 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// max(x, lo); no gradient where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Op::ClampMin(x, lo), |v| v.max(lo))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = dims(self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for (start, stride, len) in lanes(r, c, axis) {
            let idx = |k: usize| start + k * stride;
            let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (out[idx(k)] - max).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::Softmax(x, axis), rg))
    }

    /// Row softmax where blocked entries are treated as -inf and get exactly
    /// zero weight. A fully blocked row is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (r, c) = dims(self.value(x))?;
        if (mask.rows, mask.cols) != (r, c) {
            return Err(Error::Shape(format!(
                "mask {}×{} against scores {r}×{c}",
                mask.rows, mask.cols
            )));
        }
        if let Some(row) = mask.first_blocked_row() {
            return Err(Error::DegenerateMask { row });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let allow = mask.row(i);
            let xs = &xv[i * c..(i + 1) * c];
            let max = xs
                .iter()
                .zip(allow)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if allow[j] {
                    o[j] = (xs[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::MaskedSoftmax(x),
            rg,
        ))
    }

    /// Standardizes each lane along `axis` to zero mean and unit variance
    /// (population variance plus `eps`). No affine parameters.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = dims(self.value(x))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::new();
        for (start, stride, len) in lanes(r, c, axis) {
            let idx = |k: usize| start + k * stride;
            let mean = (0..len).map(|k| xv[idx(k)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|k| (xv[idx(k)] - mean).powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for k in 0..len {
                out[idx(k)] = (xv[idx(k)] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::LayerNorm { x, axis, inv_std },
            rg,
        ))
    }

    /// Mean along `axis` (keeping it as length 1), or over everything when
    /// `axis` is `None` (giving 1 × 1).
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (r, c) = dims(self.value(x))?;
        let xv = self.value(x).data();
        let t = match axis {
            None => Tensor::scalar(xv.iter().sum::<f64>() / (r * c) as f64),
            Some(axis) => {
                check_axis(axis)?;
                let vals: Vec<f64> = lanes(r, c, axis)
                    .map(|(s, st, len)| (0..len).map(|k| xv[s + k * st]).sum::<f64>() / len as f64)
                    .collect();
                if axis == 1 {
                    Tensor::new(&[r, 1], vals)?
                } else {
                    Tensor::new(&[1, c], vals)?
                }
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Mean(x, axis), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        check_axis(axis)?;
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let shapes: Vec<(usize, usize)> =
            parts.iter().map(|&p| dims(self.value(p))).collect::<Result<_>>()?;
        let (r0, c0) = shapes[0];
        let t = if axis == 0 {
            if shapes.iter().any(|s| s.1 != c0) {
                return Err(Error::Shape(format!("concat rows: column counts {shapes:?}")));
            }
            let rows: usize = shapes.iter().map(|s| s.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[rows, c0], data)?
        } else {
            if shapes.iter().any(|s| s.0 != r0) {
                return Err(Error::Shape(format!("concat cols: row counts {shapes:?}")));
            }
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::new(&[r0, cols], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = dims(self.value(x))?;
        let limit = if axis == 0 { r } else { c };
        if start > end || end > limit {
            return Err(Error::Shape(format!(
                "slice {start}..{end} out of range 0..{limit} on axis {axis}"
            )));
        }
        let xv = self.value(x);
        let t = if axis == 0 {
            Tensor::new(&[end - start, c], xv.data()[start * c..end * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&xv.row_slice(i)[start..end]);
            }
            Tensor::new(&[r, end - start], data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshape(&[rows, cols])?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Time-unfold for 1-D convolution: from (T × C) builds (T × kernel·C)
    /// where block k of row t holds row `t + (k - (kernel-1)/2)·dilation`,
    /// or zeros outside 0..T ("same" zero padding).
    pub fn unfold(&mut self, x: Var, kernel: usize, dilation: usize) -> Result<Var> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::Argument("unfold needs kernel ≥ 1 and dilation ≥ 1".into()));
        }
        let (t_len, c) = dims(self.value(x))?;
        let xv = self.value(x).data();
        let half = (kernel - 1) / 2;
        let width = kernel * c;
        let mut out = vec![0.0; t_len * width];
        for t in 0..t_len {
            for k in 0..kernel {
                let src = t as isize + (k as isize - half as isize) * dilation as isize;
                if src < 0 || src as usize >= t_len {
                    continue;
                }
                let src = src as usize;
                out[t * width + k * c..t * width + (k + 1) * c]
                    .copy_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[t_len, width], out)?,
            Op::Unfold {
                x,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Gradients of a 1 × 1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product seeded with `seed` (same shape as root).
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape("seed shape differs from root".into()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.into_data());

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        let (r, c) = dims(&node.value)?;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a))?;
                let n = c;
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt_raw(g, self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn_raw(self.value(*a).data(), g, m, k, n);
                    self.accum(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let kind = bcast_kind((r, c), dims(self.value(*b))?, "backward")?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let is_mul = matches!(node.op, Op::Mul(..));
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accum_with(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            let gi = g[i * c + j];
                            ga[i * c + j] += if is_mul { gi * bv[bcast_index(kind, i, j, c)] } else { gi };
                        }
                    }
                });
                self.accum_with(grads, *b, |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            let gi = g[i * c + j];
                            gb[bcast_index(kind, i, j, c)] +=
                                if is_mul { gi * av[i * c + j] } else { sign * gi };
                        }
                    }
                });
            }
            Op::Scale(x, s) => self.accum(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Shift(x) => self.accum(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(x) => self.accum(grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Exp(x) => self.accum(grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            Op::Power(x, p) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(xv).map(|(g, x)| g * p * x.powf(p - 1.0)).collect());
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                self.accum(grads, *x, g.iter().zip(xv).map(|(g, &x)| g * sign(x)).collect());
            }
            Op::ClampMin(x, lo) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(xv).map(|(g, &x)| if x > *lo { *g } else { 0.0 }).collect());
            }
            Op::Softmax(x, axis) => {
                let mut dx = vec![0.0; r * c];
                for (s, st, len) in lanes(r, c, *axis) {
                    let dot: f64 = (0..len).map(|k| g[s + k * st] * y[s + k * st]).sum();
                    for k in 0..len {
                        let i = s + k * st;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::MaskedSoftmax(x) => {
                // blocked entries have y = 0, so they get zero gradient
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let mut dx = vec![0.0; r * c];
                for ((s, st, len), &inv) in lanes(r, c, *axis).zip(inv_std) {
                    let n = len as f64;
                    let mean_g: f64 = (0..len).map(|k| g[s + k * st]).sum::<f64>() / n;
                    let mean_gy: f64 = (0..len).map(|k| g[s + k * st] * y[s + k * st]).sum::<f64>() / n;
                    for k in 0..len {
                        let i = s + k * st;
                        dx[i] = inv * (g[i] - mean_g - y[i] * mean_gy);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Mean(x, axis) => {
                let (xr, xc) = dims(self.value(*x))?;
                let dx = match axis {
                    None => vec![g[0] / (xr * xc) as f64; xr * xc],
                    Some(1) => (0..xr * xc).map(|i| g[i / xc] / xc as f64).collect(),
                    Some(_) => (0..xr * xc).map(|i| g[i % xc] / xr as f64).collect(),
                };
                self.accum(grads, *x, dx);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = dims(self.value(p))?;
                    let dp = if *axis == 0 {
                        g[offset * c..(offset + pr) * c].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(pr * pc);
                        for i in 0..pr {
                            d.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                        }
                        d
                    };
                    offset += if *axis == 0 { pr } else { pc };
                    self.accum(grads, p, dp);
                }
            }
            Op::Slice { x, axis, start } => {
                let (_, xc) = dims(self.value(*x))?;
                let (axis, start) = (*axis, *start);
                self.accum_with(grads, *x, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            let (si, sj) = if axis == 0 { (i + start, j) } else { (i, j + start) };
                            dx[si * xc + sj] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let gt = Tensor::new(&[r, c], g.to_vec())?.transpose()?;
                self.accum(grads, *x, gt.into_data());
            }
            Op::Reshape(x) => self.accum(grads, *x, g.to_vec()),
            Op::Unfold { x, kernel, dilation } => {
                let (t_len, xc) = dims(self.value(*x))?;
                let (kernel, dilation) = (*kernel, *dilation);
                let half = (kernel - 1) / 2;
                let width = kernel * xc;
                self.accum_with(grads, *x, |dx| {
                    for t in 0..t_len {
                        for k in 0..kernel {
                            let src = t as isize + (k as isize - half as isize) * dilation as isize;
                            if src < 0 || src as usize >= t_len {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..xc {
                                dx[src * xc + ch] += g[t * width + k * xc + ch];
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
