//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes once in reverse, accumulating vector-Jacobian products
//! into the inputs that require gradients. Parameters are borrowed from a
//! [`ParamSet`] so binding a model onto a tape copies nothing.

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Silu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    LogSumExpRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::LogSumExpRows(..) => "logsumexp_rows",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Parameters of a [`ParamSet`] bound onto a tape, index-aligned with it.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Append-only record of primitive operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First primitive that produced a NaN or infinity, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite.map(|(_, op)| op)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (e.g. an input being attributed).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A borrowed leaf whose gradient is tracked.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn bind(&mut self, params: &'a ParamSet) -> BoundParams {
        BoundParams {
            vars: params.tensors().iter().map(|t| self.param(t)).collect(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| shape_err(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] · [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push_op(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, Op::Shift(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push_op(out, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    /// x·σ(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push_op(out, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[b, n] -> [b]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (b, n) = self.matrix_dims("sum_rows", a)?;
        let d = self.value(a).data();
        let out = (0..b).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.push_op(Tensor::from_parts(vec![b], out), Op::SumRows(a), &[a]))
    }

    /// `[n] -> [rows, n]`, repeating the vector down the batch.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || rows == 0 {
            return Err(shape_err("broadcast_rows", format!("{:?} to {rows} rows", t.shape())));
        }
        let n = t.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        Ok(self.push_op(Tensor::from_parts(vec![rows, n], out), Op::BroadcastRows(a), &[a]))
    }

    /// `[b] -> [b, cols]`, repeating each entry across its row.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || cols == 0 {
            return Err(shape_err("broadcast_cols", format!("{:?} to {cols} cols", t.shape())));
        }
        let b = t.len();
        let out = t.data().iter().flat_map(|&v| std::iter::repeat(v).take(cols)).collect();
        Ok(self.push_op(Tensor::from_parts(vec![b, cols], out), Op::BroadcastCols(a), &[a]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (b, n) = self.matrix_dims("slice_cols", a)?;
        if start >= end || end > n {
            return Err(shape_err("slice_cols", format!("columns {start}..{end} of width {n}")));
        }
        let d = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(b * w);
        for i in 0..b {
            out.extend_from_slice(&d[i * n + start..i * n + end]);
        }
        Ok(self.push_op(Tensor::from_parts(vec![b, w], out), Op::SliceCols(a, start), &[a]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.matrix_dims("concat_cols", p)?);
        }
        let b = dims[0].0;
        if dims.iter().any(|&(r, _)| r != b) {
            return Err(shape_err("concat_cols", format!("row counts {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(b * total);
        for i in 0..b {
            for (&p, &(_, w)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push_op(Tensor::from_parts(vec![b, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push_op(t, Op::Reshape(a), &[a]))
    }

    /// Row-wise `log Σ_j exp(a[i, j])`, evaluated with max-shifting.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (b, n) = self.matrix_dims("logsumexp_rows", a)?;
        let d = self.value(a).data();
        let out = (0..b).map(|i| logsumexp(&d[i * n..(i + 1) * n])).collect();
        Ok(self.push_op(Tensor::from_parts(vec![b], out), Op::LogSumExpRows(a), &[a]))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if let Some((idx, op)) = self.non_finite {
            if idx <= loss.0 {
                return Err(Error::NonFinite { op: op.to_string() });
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g, &mut grads);
        }
        // leaves keep their gradients; intermediate ones were consumed
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * sigmoid(y))),
            Op::Silu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| {
                    let s = sigmoid(y);
                    x * s * (1.0 + y * (1.0 - s))
                }),
            ),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(*a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.data()[0] / n;
                acc(*a, Tensor::full(self.shape(*a), s));
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a).to_vec();
                let n = shape[1];
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
                acc(*a, Tensor::from_parts(shape, data));
            }
            Op::BroadcastRows(a) => {
                let n = self.value(*a).len();
                let mut d = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (s, v) in d.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*a, Tensor::from_parts(vec![n], d));
            }
            Op::BroadcastCols(a) => {
                let cols = g.shape()[1];
                let d = g.data().chunks(cols).map(|r| r.iter().sum()).collect();
                acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), d));
            }
            Op::SliceCols(a, start) => {
                let shape = self.shape(*a).to_vec();
                let (b, n) = (shape[0], shape[1]);
                let w = g.shape()[1];
                let mut d = vec![0.0; b * n];
                for i in 0..b {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*a, Tensor::from_parts(shape, d));
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let b = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if needs(p) {
                        let mut d = Vec::with_capacity(b * w);
                        for i in 0..b {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, Tensor::from_parts(vec![b, w], d));
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec())),
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let n = av.shape()[1];
                let mut d = Vec::with_capacity(av.len());
                for (i, row) in av.data().chunks(n).enumerate() {
                    let lse = out.data()[i];
                    d.extend(row.iter().map(|&v| g.data()[i] * (v - lse).exp()));
                }
                acc(*a, Tensor::from_parts(av.shape().to_vec(), d));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(v)))
    }

    /// Gradient for every parameter of `params`, zero for unreachable ones.
    pub fn for_params(&self, bound: &BoundParams, params: &ParamSet) -> ParamSet {
        let mut out = params.zeros_like();
        for (slot, &v) in out.tensors_mut().iter_mut().zip(bound.vars()) {
            if let Some(g) = self.get(v) {
                *slot = g.clone();
            }
        }
        out
    }
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

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Central-difference estimate `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` per coordinate.
///
/// A non-finite evaluation of `f` is reported as [`Error::NonFinite`].
pub fn finite_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        let d = (hi - lo) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite {
                op: format!("finite_difference at coordinate {i}"),
            });
        }
        out.push(d);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constant_loss_gives_no_gradient() {
        let params = {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
            p
        };
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        let g = tape.backward(loss).unwrap().for_params(&bound, &params);
        assert_eq!(g.get(ParamId(0)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_sum_gradient_replicates_input() {
        // loss = sum(x · W) with x = [1, 3] fixed, W: [3, 2]
        let mut params = ParamSet::new();
        params.insert("w", Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.matmul(x, bound.var(ParamId(0))).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().for_params(&bound, &params);
        assert_eq!(g.get(ParamId(0)).data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn non_finite_values_block_backward() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![-1.0]).unwrap());
        let y = tape.log(x);
        let s = tape.sum(y);
        assert_eq!(tape.non_finite(), Some("log"));
        assert!(matches!(tape.backward(s), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn finite_difference_examples() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let g = finite_difference(|t| t.data().iter().sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_difference(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
        assert!(finite_difference(|_| f64::NAN, &x, 1e-5).is_err());
        assert!(finite_difference(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn softplus_is_stable_in_both_tails() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
