//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters are read
//! from a borrowed [`ParamStore`] and enter the tape at most once each, so a
//! layer executed several times contributes several uses of the same node
//! and its adjoint is the sum over uses.

use std::collections::HashMap;

use super::array::{matmul, matmul_nt, matmul_tn};
use super::{Array, ParamId, ParamStore};
use crate::error::{Error, Result};

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Swish(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    StopGradient(Var),
    Ctc {
        log_probs: Var,
        grad: Array,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gelu(_) => "gelu",
            Op::Swish(_) => "swish",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::StopGradient(_) => "stop_gradient",
            Op::Ctc { .. } => "ctc",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::DepthwiseConv { x, kernel, bias } => vec![*x, *kernel, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Swish(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SliceCols { x: a, .. }
            | Op::Transpose(a)
            | Op::MaskedFill { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StopGradient(a)
            | Op::Ctc { log_probs: a, .. } => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Array>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Tape<'static> {
    /// A tape with no parameter store, for graphs over explicit inputs only.
    pub fn detached() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn is_stop_gradient(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::StopGradient(_))
    }

    /// Parameters that entered this tape, in first-use order.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf holding `value`.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(Op::Input, value)
    }

    /// The tape node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(op, out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Array::new(vec![m, n], out)?))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        let n = b.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    /// `x·W + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    /// Normalizes each row to zero mean and unit (population) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (j, v) in row.iter().enumerate() {
                xhat[r * n + j] = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % n] * h + b[i % n])
            .collect();
        let out = Array::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmax(a), out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Op::Swish(a), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Same-padded depthwise 1-D convolution over time of a `T×d` input
    /// with a `K×d` kernel (K odd) and per-channel bias.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 2 || sk[1] != sx[1] || sk[0] % 2 == 0 {
            return Err(self.mismatch("depthwise_conv1d", x, kernel));
        }
        if self.shape(bias) != [sx[1]] {
            return Err(self.mismatch("depthwise_conv1d", x, bias));
        }
        let (t_len, d, k_len) = (sx[0], sx[1], sk[0]);
        let half = k_len / 2;
        let (xv, kv, bv) = (
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = &mut out[t * d..(t + 1) * d];
            row.copy_from_slice(bv);
            for k in 0..k_len {
                let src = t + k;
                if src < half || src - half >= t_len {
                    continue;
                }
                let src = src - half;
                for c in 0..d {
                    row[c] += kv[k * d + c] * xv[src * d + c];
                }
            }
        }
        let out = Array::new(vec![t_len, d], out)?;
        Ok(self.push(Op::DepthwiseConv { x, kernel, bias }, out))
    }

    /// Row lookup into a `V×d` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        if indices.is_empty() {
            return Err(Error::invalid("embedding: empty index sequence"));
        }
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::OutOfVocabulary { index: i, vocab: v });
            }
            out.extend_from_slice(tv.row(i));
        }
        let out = Array::new(vec![indices.len(), d], out)?;
        Ok(self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            out,
        ))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).rows() != rows {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::new(vec![rows, total], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || len == 0 || start + len > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Array::new(vec![rows, len], out)?;
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let out = self.value(x).transpose();
        Ok(self.push(Op::Transpose(x), out))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = fill;
            }
        }
        Ok(self.push(
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            out,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Array::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Op::Mean(a), Array::scalar(m))
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(Op::StopGradient(a), out)
    }

    /// Records a scalar loss whose gradient with respect to `input` was
    /// computed alongside the value.
    pub(crate) fn custom_loss(&mut self, input: Var, loss: f64, grad: Array) -> Var {
        debug_assert_eq!(grad.shape(), self.shape(input));
        self.push(
            Op::Ctc {
                log_probs: input,
                grad,
            },
            Array::scalar(loss),
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Array::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            params: self.param_nodes.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) {
        let out = self.nodes[i].value.as_ref();
        let mut acc = |v: Var, contrib: Array| match &mut adj[v.0] {
            Some(a) => a.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        let val = |v: Var| self.value(v);
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let da = matmul_nt(gd, vb.data(), m, n, k);
                let db = matmul_tn(va.data(), gd, m, k, n);
                acc(*a, Array::new(vec![m, k], da).unwrap());
                acc(*b, Array::new(vec![k, n], db).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip_map(g, vb, |x, y| x * y));
                acc(*b, zip_map(g, va, |x, y| x * y));
            }
            Op::AddBias(x, bias) => {
                let n = val(*bias).len();
                let mut db = vec![0.0; n];
                for (j, v) in gd.iter().enumerate() {
                    db[j % n] += v;
                }
                acc(*x, g.clone());
                acc(*bias, Array::vector(db));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = val(*gain).data();
                let n = gain_v.len();
                let rows = inv_std.len();
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let base = r * n;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let gy = gd[base + j];
                        dg[j] += gy * xhat[base + j];
                        db[j] += gy;
                        dxhat[j] = gy * gain_v[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[base + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        dx[base + j] = inv_std[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                    }
                }
                acc(*x, Array::new(g.shape().to_vec(), dx).unwrap());
                acc(*gain, Array::vector(dg));
                acc(*bias, Array::vector(db));
            }
            Op::Softmax(a) => {
                let y = out.unwrap();
                let n = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Array::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmax(a) => {
                let y = out.unwrap();
                let n = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc(*a, Array::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Gelu(a) => acc(*a, zip_map(g, val(*a), |gy, x| gy * gelu_grad(x))),
            Op::Swish(a) => acc(
                *a,
                zip_map(g, val(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * (s + x * s * (1.0 - s))
                }),
            ),
            Op::Sigmoid(a) => acc(*a, zip_map(g, out.unwrap(), |gy, y| gy * y * (1.0 - y))),
            Op::Exp(a) => acc(*a, zip_map(g, out.unwrap(), |gy, y| gy * y)),
            Op::Log(a) => acc(*a, zip_map(g, val(*a), |gy, x| gy / x)),
            Op::DepthwiseConv { x, kernel, bias } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let (t_len, d, k_len) = (xv.rows(), xv.cols(), kv.rows());
                let half = k_len / 2;
                let mut dx = vec![0.0; t_len * d];
                let mut dk = vec![0.0; k_len * d];
                let mut db = vec![0.0; d];
                for t in 0..t_len {
                    for c in 0..d {
                        db[c] += gd[t * d + c];
                    }
                    for k in 0..k_len {
                        let src = t + k;
                        if src < half || src - half >= t_len {
                            continue;
                        }
                        let src = src - half;
                        for c in 0..d {
                            let gy = gd[t * d + c];
                            dx[src * d + c] += kv.data()[k * d + c] * gy;
                            dk[k * d + c] += xv.data()[src * d + c] * gy;
                        }
                    }
                }
                acc(*x, Array::new(vec![t_len, d], dx).unwrap());
                acc(*kernel, Array::new(vec![k_len, d], dk).unwrap());
                acc(*bias, Array::vector(db));
            }
            Op::Embedding { table, indices } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = Array::zeros(tv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut dt.data_mut()[i * d..(i + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    acc(p, Array::new(vec![rows, w], dp).unwrap());
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (rows, cols, w) = (xv.rows(), xv.cols(), g.cols());
                let mut dx = Array::zeros(xv.shape());
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::MaskedFill { x, mask } => {
                let mut dx = g.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(a) => acc(*a, Array::full(val(*a).shape(), gd[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Array::full(val(*a).shape(), gd[0] / n));
            }
            Op::Ctc { log_probs, grad } => acc(*log_probs, grad.map(|v| v * gd[0])),
        }
    }
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Array::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax_rows(a: &Array) -> Array {
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| v - lse));
    }
    Array::new(a.shape().to_vec(), out).unwrap()
}

pub fn softmax_rows(a: &Array) -> Array {
    log_softmax_rows(a).map(f64::exp)
}

/// Adjoints from one reverse sweep.
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Adjoint of any node, `None` if the node is unreachable from the root.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Parameter adjoints keyed by id, sorted.
    pub fn into_param_map(mut self) -> std::collections::BTreeMap<ParamId, Array> {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.adjoints[v.0].take().map(|a| (id, a)))
            .collect()
    }
}
