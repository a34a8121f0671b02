//! Dense row-major matrices with a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] records one forward pass. Parameters live in a [`ParamStore`]
//! and enter a tape through [`Tape::param`]; after [`Tape::backward`] the
//! gradient of every parameter used is available through
//! [`Gradients::param_grads`]. Everything is computed in `f64`.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_input, grad_check_params, GradCheckError};
pub use optim::{Adam, Optimizer, ShapeMismatch, Sgd};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length must equal rows*cols");
        let t = Self { rows, cols, data };
        t.debug_check_finite();
        t
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    /// Xavier-uniform initialization.
    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn debug_check_finite(&self) {
        debug_assert!(self.is_finite(), "non-finite tensor value");
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for k in 0..a.cols {
            let v = a.data[r * a.cols + k];
            if v == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += v * bv;
            }
        }
    }
    out
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn one_hot(index: usize, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[index] = 1.0;
    v
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    /// Replaces values from checkpoint entries matched by name and shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        let by_name: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch(name.clone()));
            }
            *t = (*src).clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Cols(Var, usize),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        value.debug_check_finite();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter tensor as a tape input; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.expect("tape created without a parameter store").get(id).clone();
        let v = self.push(value, Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols), r.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1×c` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o *= v;
            }
        }
        self.push(out, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Concatenates along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "hcat row mismatch");
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(out, Op::HCat(parts.to_vec()))
    }

    /// Concatenates along rows.
    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "vcat column mismatch");
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor { rows, cols, data }, Op::VCat(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column range out of bounds");
        let mut out = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::Cols(a, start))
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(out, Op::Gather(a, idx.to_vec()))
    }

    /// `out[idx[e]] += a[e]` over an `n`-row zero matrix.
    pub fn scatter_add(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, idx.len(), "scatter index length mismatch");
        let mut out = Tensor::zeros(n, x.cols);
        for (e, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(x.row(e)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx.to_vec()))
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, xv.cols));
        assert_eq!(b.shape(), (1, xv.cols));
        let n = xv.cols as f64;
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * is;
                xhat.data[r * xv.cols + c] = h;
                out.data[r * xv.cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Scales every row to unit length.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = (xv.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let probs = softmax_rows(lv);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs.get(r, t).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Cosine similarity of two `1×c` rows, as a `1×1` value.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        let p = self.mul(na, nb);
        self.sum(p)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (id, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.push((*id, g.clone()));
            }
        }
        params.sort_by_key(|(id, _)| id.0);
        Gradients { grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, self.value(*b)));
                acc(*b, matmul_tn(self.value(*a), g));
            }
            Op::MatMulNT(a, b) => {
                acc(*a, matmul(g, self.value(*b)));
                acc(*b, matmul_tn(g, self.value(*a)));
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
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(g, bv, |x, y| x * y));
                acc(*b, zip_map(g, av, |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, column_sums(g));
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] *= bv.data[c];
                        gb.data[c] += g.get(r, c) * av.get(r, c);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, zip_map(g, y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, zip_map(g, y, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, zip_map(g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Gelu(a) => acc(*a, zip_map(g, self.value(*a), |g, x| g * gelu_grad(x))),
            Op::HCat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    let mut t = Tensor::zeros(g.rows, w);
                    for r in 0..g.rows {
                        t.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(p, t);
                }
            }
            Op::VCat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows;
                    let data = g.data[off * g.cols..(off + h) * g.cols].to_vec();
                    off += h;
                    acc(p, Tensor { rows: h, cols: g.cols, data });
                }
            }
            Op::Cols(a, start) => {
                let av = self.value(*a);
                let mut t = Tensor::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    t.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, t);
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let mut t = Tensor::zeros(av.rows, av.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in t.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, t);
            }
            Op::ScatterAdd(a, idx) => {
                let mut t = Tensor::zeros(idx.len(), g.cols);
                for (e, &i) in idx.iter().enumerate() {
                    t.row_mut(e).copy_from_slice(g.row(i));
                }
                acc(*a, t);
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut t = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    t.row_mut(r).copy_from_slice(&g.data);
                }
                acc(*a, t);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor { rows: av.rows, cols: av.cols, data: vec![g.item(); av.data.len()] });
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Softmax(a) => {
                let mut t = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        t.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, t);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let n = xhat.cols as f64;
                let mut gx = Tensor::zeros(xhat.rows, xhat.cols);
                let mut ggain = Tensor::zeros(1, xhat.cols);
                let mut gbias = Tensor::zeros(1, xhat.cols);
                for r in 0..xhat.rows {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let dxhat: Vec<f64> = gr.iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xhat.cols {
                        gx.data[r * xhat.cols + c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        ggain.data[c] += gr[c] * hr[c];
                        gbias.data[c] += gr[c];
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::NormalizeRows { x, norms } => {
                let mut t = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        t.data[r * y.cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                acc(*x, t);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item() / targets.len().max(1) as f64;
                let mut t = probs.clone();
                for (r, &tg) in targets.iter().enumerate() {
                    t.data[r * t.cols + tg] -= 1.0;
                }
                for v in &mut t.data {
                    *v *= scale;
                }
                acc(*logits, t);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds parameter gradients into a dense per-parameter buffer.
    pub fn accumulate_into(&self, buffer: &mut [Tensor]) {
        for (id, g) in &self.params {
            buffer[id.0].add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::xavier(3, 4, &mut rng);
        let b = Tensor::xavier(4, 5, &mut rng);
        let c = matmul(&a, &b);
        let c2 = matmul_nt(&a, &b.transpose());
        let c3 = matmul_tn(&a.transpose(), &b);
        for ((x, y), z) in c.data.iter().zip(&c2.data).zip(&c3.data) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]);
        let s = softmax_rows(&x);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = softmax_rows(&x.map(|v| v + 123.0));
        for (a, b) in s.data.iter().zip(&shifted.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_node_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::with_params(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let y = tape.mul(a, b);
        let g = tape.backward(y);
        assert_eq!(g.param_grads()[0].1.item(), 6.0);
    }

    #[test]
    fn cosine_helper_matches_definition() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert_eq!(one_hot(2, 4), vec![0.0, 0.0, 1.0, 0.0]);
    }
}
