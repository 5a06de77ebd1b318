//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and the inputs it needs for the vector-Jacobian
//! product; [`Tape::backward`] walks the nodes in reverse order.

use serde::{Deserialize, Serialize};

use super::value::{matmul_into, split_axis, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity used by the coarse head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    #[default]
    LeakyRelu,
    /// `max(0, x - 0.5)`
    ReluShifted,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.01;
    pub const SHIFT: f64 = 0.5;

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    Self::LEAKY_SLOPE * x
                }
            }
            Activation::ReluShifted => (x - Self::SHIFT).max(0.0),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(x > 0.0)),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    Self::LEAKY_SLOPE
                }
            }
            Activation::ReluShifted => f64::from(u8::from(x > Self::SHIFT)),
        }
    }
}

/// Norms below this are treated as zero by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Offset(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Act(Var, Activation),
    ScaleRows(Var, Var),
    L2Normalize(Var, f64),
    AlignRows(Var, f64, f64),
    Pick(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Acos(Var),
    Ln(Var),
    DivScalar(Var, Var),
    Stack(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
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

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b)
            | Op::DivScalar(a, b) => vec![*a, *b],
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Act(a, _)
            | Op::L2Normalize(a, _)
            | Op::AlignRows(a, _, _)
            | Op::Pick(a, _)
            | Op::Gather(a, _)
            | Op::Clamp(a, _, _)
            | Op::Acos(a)
            | Op::Ln(a) => vec![*a],
            Op::Stack(vs) => vs.clone(),
        }
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    /// `a @ b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a @ b^T` for `a: n x k`, `b: m x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul_nt")?;
        let (m, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return dim_err(format!("matmul_nt inner dims {k} vs {k2}"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                let br = &bd[j * k..(j + 1) * k];
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        self.push(
            Tensor::new(vec![n, m], out)?,
            Op::MatMulNt(a, b),
            "matmul_nt",
        )
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.mat_dims(x, "add_row")?;
        if self.shape(b) != [c] {
            return dim_err(format!("add_row: bias {:?} for {c} columns", self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, b), "add_row")
    }

    /// `x @ w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return dim_err("mul_const: length mismatch");
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&c)
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::MulConst(x, c), "mul_const")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), "scale")
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Offset(x), "offset")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return dim_err("softmax over an empty axis");
        }
        let mut out = self.value(x).clone();
        for_each_lane(out.data_mut(), outer, len, inner, |lane| {
            let m = lane.iter().map(|v| **v).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in lane.iter_mut() {
                **v = (**v - m).exp();
                s += **v;
            }
            for v in lane.iter_mut() {
                **v /= s;
            }
        });
        self.push(out, Op::Softmax(x, axis), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return dim_err("log_softmax over an empty axis");
        }
        let mut out = self.value(x).clone();
        for_each_lane(out.data_mut(), outer, len, inner, |lane| {
            let m = lane.iter().map(|v| **v).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|v| (**v - m).exp()).sum::<f64>().ln();
            for v in lane.iter_mut() {
                **v -= lse;
            }
        });
        self.push(out, Op::LogSoftmax(x, axis), "log_softmax")
    }

    /// Arithmetic mean along `axis`; the axis is dropped from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return dim_err("mean over an empty axis");
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push(Tensor::new(new_shape, out)?, Op::Mean(x, axis), "mean")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(out, Op::Act(x, act), "activation")
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "scale_rows")?;
        if self.shape(s) != [r] {
            return dim_err(format!(
                "scale_rows: scales {:?} for {r} rows",
                self.shape(s)
            ));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (row, f) in out.data_mut().chunks_mut(c.max(1)).zip(&sv) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::ScaleRows(x, s), "scale_rows")
    }

    /// Divides the whole tensor by its l2 norm. A norm below [`NORM_EPS`]
    /// yields all zeros and a zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let norm = self
            .value(x)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let out = if norm < NORM_EPS {
            Tensor::zeros(self.shape(x))
        } else {
            self.value(x).map(|v| v / norm)
        };
        self.push(out, Op::L2Normalize(x, norm), "l2_normalize")
    }

    /// Per-row affine min-max map onto `[lo, hi]`; constant rows map to the midpoint.
    /// Rank-1 inputs are treated as a single row.
    pub fn align_rows(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = self.value(x).clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                align_row(row, lo, hi);
            }
        }
        self.push(out, Op::AlignRows(x, lo, hi), "align_rows")
    }

    /// `out[i] = x[i, idx[i]]` for a matrix `x`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "pick")?;
        if idx.len() != r {
            return dim_err(format!("pick: {} indices for {r} rows", idx.len()));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Label(format!("index {bad} out of range [0, {c})")));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(x).at(i, j))
            .collect();
        self.push(Tensor::vector(data), Op::Pick(x, idx), "pick")
    }

    /// Selects flat positions of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if idx.iter().any(|&i| i >= n) {
            return dim_err("gather index out of range");
        }
        let data = idx.iter().map(|&i| self.value(x).data()[i]).collect();
        self.push(Tensor::vector(data), Op::Gather(x, idx), "gather")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the input lies outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    pub fn acos(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::acos);
        self.push(out, Op::Acos(x), "acos")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Ln(x), "ln")
    }

    /// Divides `x` by the scalar node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("div_scalar: divisor must hold one element");
        }
        let d = self.value(s).item();
        let out = self.value(x).map(|v| v / d);
        self.push(out, Op::DivScalar(x, s), "div_scalar")
    }

    /// Stacks same-shaped nodes along a new leading axis.
    pub fn stack(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(first) = vs.first() else {
            return dim_err("stack of zero tensors");
        };
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(vs.len() * self.value(*first).len());
        for v in vs {
            if self.shape(*v) != inner.as_slice() {
                return dim_err(format!("stack: shape {:?} vs {inner:?}", self.shape(*v)));
            }
            data.extend_from_slice(self.value(*v).data());
        }
        let mut shape = vec![vs.len()];
        shape.extend(inner);
        self.push(Tensor::new(shape, data)?, Op::Stack(vs.to_vec()), "stack")
    }

    /// `softmax(q k^T / sqrt(d)) v`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = self.mat_dims(q, "attention query")?;
        let (nk, dk) = self.mat_dims(k, "attention key")?;
        let (nv, _) = self.mat_dims(v, "attention value")?;
        if d == 0 {
            return dim_err("attention with zero-width queries");
        }
        if d != dk || nk != nv {
            return dim_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let logits = self.matmul_nt(q, k)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt())?;
        let weights = self.softmax(logits, 1)?;
        self.matmul(weights, v)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return dim_err(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            } else if g.is_none() && matches!(node.op, Op::Leaf) {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if let Some(ga) = self.slot(*a, grads) {
                    // ga[n x k] += g[n x m] b^T
                    let bd = val(*b);
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bd[p * m + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // gb[k x m] += a^T g
                    let ad = val(*a);
                    for i in 0..n {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..m {
                                gb[p * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                if let Some(ga) = self.slot(*a, grads) {
                    matmul_into(g, val(*b), ga, n, m, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    let ad = val(*a);
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            for p in 0..k {
                                gb[j * k + p] += gv * ad[i * k + p];
                            }
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = self.shape(*b)[0];
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(&bd) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(&ad) {
                        *o += gv * av;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gv), cv) in gx.iter_mut().zip(g).zip(c) {
                        *o += gv * cv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, g);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) =
                    split_axis(self.shape(*x), *axis).expect("checked in forward");
                let y = node.value.data();
                if let Some(gx) = self.slot(*x, grads) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + j;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) =
                    split_axis(self.shape(*x), *axis).expect("checked in forward");
                let y = node.value.data();
                if let Some(gx) = self.slot(*x, grads) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + j;
                            let gsum: f64 = (0..len).map(|a| g[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += g[at(a)] - y[at(a)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Mean(x, axis) => {
                let (outer, len, inner) =
                    split_axis(self.shape(*x), *axis).expect("checked in forward");
                let inv = 1.0 / len as f64;
                if let Some(gx) = self.slot(*x, grads) {
                    for o in 0..outer {
                        for a in 0..len {
                            for j in 0..inner {
                                gx[(o * len + a) * inner + j] += g[o * inner + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Act(x, act) => {
                let xd = val(*x).to_vec();
                let y = node.value.data();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i] * act.derivative(xd[i], y[i]);
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let c = self.value(*x).cols();
                let sv = val(*s).to_vec();
                let xd = val(*x).to_vec();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, f) in sv.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] * f;
                        }
                    }
                }
                if let Some(gs) = self.slot(*s, grads) {
                    for (i, o) in gs.iter_mut().enumerate() {
                        *o += (0..c).map(|j| g[i * c + j] * xd[i * c + j]).sum::<f64>();
                    }
                }
            }
            Op::L2Normalize(x, norm) => {
                if *norm < NORM_EPS {
                    return;
                }
                let y = node.value.data();
                let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += (gv - yv * yg) / norm;
                    }
                }
            }
            Op::AlignRows(x, lo, hi) => {
                let c = self.value(*x).cols();
                let xd = val(*x).to_vec();
                if let Some(gx) = self.slot(*x, grads) {
                    if c == 0 {
                        return;
                    }
                    for (r, row) in xd.chunks(c).enumerate() {
                        let Some((amin, amax, range)) = row_extent(row) else {
                            continue;
                        };
                        let span = hi - lo;
                        let mn = row[amin];
                        let gr = &g[r * c..(r + 1) * c];
                        let out = &mut gx[r * c..(r + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        let gdot: f64 = gr.iter().zip(row).map(|(gv, xv)| gv * (xv - mn)).sum();
                        for (o, gv) in out.iter_mut().zip(gr) {
                            *o += span * gv / range;
                        }
                        out[amin] += -span * gsum / range + span * gdot / (range * range);
                        out[amax] += -span * gdot / (range * range);
                    }
                }
            }
            Op::Pick(x, idx) => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (gv, &i) in g.iter().zip(idx) {
                        gx[i] += gv;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xd = val(*x).to_vec();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(&xd) {
                        if *xv >= *lo && *xv <= *hi {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Acos(x) => {
                let xd = val(*x).to_vec();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *o -= gv / (1.0 - xv * xv).sqrt();
                    }
                }
            }
            Op::Ln(x) => {
                let xd = val(*x).to_vec();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(&xd) {
                        *o += gv / xv;
                    }
                }
            }
            Op::DivScalar(x, s) => {
                let d = self.value(*s).item();
                let xd = val(*x).to_vec();
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().zip(g).for_each(|(o, gv)| *o += gv / d);
                }
                if let Some(gs) = self.slot(*s, grads) {
                    gs[0] -= g.iter().zip(&xd).map(|(gv, xv)| gv * xv).sum::<f64>() / (d * d);
                }
            }
            Op::Stack(vs) => {
                let n = self.value(vs[0]).len();
                for (i, v) in vs.iter().enumerate() {
                    if let Some(gv) = self.slot(*v, grads) {
                        add_into(gv, &g[i * n..(i + 1) * n]);
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn for_each_lane(
    data: &mut [f64],
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(&mut [&mut f64]),
) {
    for o in 0..outer {
        let block = &mut data[o * len * inner..(o + 1) * len * inner];
        for j in 0..inner {
            let mut lane: Vec<&mut f64> = block.iter_mut().skip(j).step_by(inner).collect();
            f(&mut lane);
        }
    }
}

/// (argmin, argmax, max - min) of a row, or `None` for a constant row.
fn row_extent(row: &[f64]) -> Option<(usize, usize, f64)> {
    let mut amin = 0;
    let mut amax = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[amin] {
            amin = i;
        }
        if v > row[amax] {
            amax = i;
        }
    }
    let range = row[amax] - row[amin];
    (range > 0.0).then_some((amin, amax, range))
}

pub(crate) fn align_row(row: &mut [f64], lo: f64, hi: f64) {
    match row_extent(row) {
        Some((amin, _, range)) => {
            let mn = row[amin];
            for v in row.iter_mut() {
                *v = lo + (hi - lo) * (*v - mn) / range;
            }
        }
        None => row.iter_mut().for_each(|v| *v = 0.5 * (lo + hi)),
    }
}
