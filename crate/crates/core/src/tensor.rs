//! Dense f64 tensors and a per-evaluation reverse-mode differentiation graph.
//!
//! A [`Tensor`] is a plain value. Computations that need gradients are
//! recorded on a [`Graph`]: leaves enter through [`Graph::param`] or
//! [`Graph::constant`], every primitive appends one node, and
//! [`Graph::backward`] walks the nodes in reverse append order. A graph is
//! built for one loss evaluation and then dropped.
//!
//! There is no implicit broadcasting. The only mixed-shape primitives are
//! [`Graph::scale`] (tensor by constant) and [`Graph::add_bias`], which adds a
//! length-`n` vector to every row of an `m×n` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable does not belong to this graph")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(TensorError::BadShape { len: data.len(), shape });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadShape { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::BadShape {
                    shape: vec![rows.len(), cols],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = as_matrix("transpose", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = as_matrix("matmul", self)?;
        let (k2, n) = as_matrix("matmul", other)?;
        if k != k2 {
            return Err(mismatch("matmul", self, other));
        }
        Ok(Self {
            shape: vec![m, n],
            data: mm_nn(&self.data, &other.data, m, k, n),
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = as_matrix("matmul_t", self)?;
        let (n, k2) = as_matrix("matmul_t", other)?;
        if k != k2 {
            return Err(mismatch("matmul_t", self, other));
        }
        Ok(Self {
            shape: vec![m, n],
            data: mm_nt(&self.data, &other.data, m, k, n),
        })
    }

    /// Columns of `self` followed by columns of `other`.
    pub fn hcat(&self, other: &Tensor) -> Result<Self> {
        let (m, a) = as_matrix("hcat", self)?;
        let (m2, b) = as_matrix("hcat", other)?;
        if m != m2 {
            return Err(mismatch("hcat", self, other));
        }
        let mut data = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            data.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        Ok(Self {
            shape: vec![m, a + b],
            data,
        })
    }

    /// Repeat a vector as `n` identical rows.
    pub fn repeat_rows(values: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(values.len() * n);
        for _ in 0..n {
            data.extend_from_slice(values);
        }
        Self {
            shape: vec![n, values.len()],
            data,
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(mismatch(op, a, b));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        _ => Err(TensorError::NotMatrix {
            op,
            shape: t.shape.clone(),
        }),
    }
}

// a: m×k, b: k×n
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

// a: m×k, b: n×k, result a·bᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

// a: k×m, b: k×n, result aᵀ·b
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
    c
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Relu(usize),
    AddBias(usize, usize),
    Sum(usize),
    Mse(usize, usize),
    SumSq(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: bool,
    needs_grad: bool,
}

/// Append-only record of primitive operations for one evaluation.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the parameter leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. `None` for constants, interior nodes and
    /// parameters the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros for parameters that did not
    /// influence the loss.
    pub fn get_or_zeros(&self, graph: &Graph, var: Var) -> Result<Tensor> {
        graph.check(var)?;
        Ok(self
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(var).shape())))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Copy of a node's value, detached from the graph.
    pub fn detach(&self, v: Var) -> Result<Tensor> {
        Ok(self.nodes[self.check(v)?].value.clone())
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.nodes[a.index].needs_grad;
        self.push(value, op, false, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.nodes[a.index].needs_grad || self.nodes[b.index].needs_grad;
        self.push(value, op, false, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.binary(a, b, value, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`; the usual affine-layer product with weights stored out×in.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        Ok(self.binary(a, b, value, Op::MatMulT(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.transpose()?;
        Ok(self.unary(a, value, Op::Transpose(ia)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.binary(a, b, value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.binary(a, b, value, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.scaled(factor);
        Ok(self.unary(a, value, Op::Scale(ia, factor)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(silu);
        Ok(self.unary(a, value, Op::Silu(ia)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x.max(0.0));
        Ok(self.unary(a, value, Op::Relu(ia)))
    }

    /// Adds the vector `bias` (length n) to every row of the m×n matrix `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let xv = &self.nodes[ix].value;
        let bv = &self.nodes[ib].value;
        let (m, n) = as_matrix("add_bias", xv)?;
        if bv.numel() != n || bv.shape.len() != 1 {
            return Err(mismatch("add_bias", xv, bv));
        }
        let mut data = xv.data.clone();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(&bv.data) {
                *d += b;
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.binary(x, bias, value, Op::AddBias(ix, ib)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.unary(a, value, Op::Sum(ia)))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        same_shape("mse", av, bv)?;
        let n = av.numel() as f64;
        let total: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.binary(a, b, Tensor::scalar(total / n), Op::Mse(ia, ib)))
    }

    /// Sum of squares of all elements.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum_sq());
        Ok(self.unary(a, value, Op::SumSq(ia)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=il).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let val = |i: usize| &self.nodes[i].value;
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (val(a).shape[0], val(a).shape[1]);
                    let n = val(b).shape[1];
                    let ga = mm_nt(&upstream.data, &val(b).data, m, n, k);
                    let gb = mm_tn(&val(a).data, &upstream.data, m, k, n);
                    self.accumulate(&mut grads, a, vec![m, k], ga);
                    self.accumulate(&mut grads, b, vec![k, n], gb);
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (val(a).shape[0], val(a).shape[1]);
                    let n = val(b).shape[0];
                    let ga = mm_nn(&upstream.data, &val(b).data, m, n, k);
                    let gb = mm_tn(&upstream.data, &val(a).data, m, n, k);
                    self.accumulate(&mut grads, a, vec![m, k], ga);
                    self.accumulate(&mut grads, b, vec![n, k], gb);
                }
                Op::Transpose(a) => {
                    let g = upstream.transpose()?;
                    self.accumulate(&mut grads, a, g.shape, g.data);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, upstream.shape.clone(), upstream.data.clone());
                    self.accumulate(&mut grads, b, upstream.shape, upstream.data);
                }
                Op::Sub(a, b) => {
                    let neg = upstream.data.iter().map(|g| -g).collect();
                    self.accumulate(&mut grads, a, upstream.shape.clone(), upstream.data);
                    self.accumulate(&mut grads, b, val(b).shape.clone(), neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&upstream.data, &val(b).data, |g, y| g * y);
                    let gb = zip(&upstream.data, &val(a).data, |g, x| g * x);
                    self.accumulate(&mut grads, a, upstream.shape.clone(), ga);
                    self.accumulate(&mut grads, b, upstream.shape, gb);
                }
                Op::Scale(a, f) => {
                    let g = upstream.data.iter().map(|g| g * f).collect();
                    self.accumulate(&mut grads, a, upstream.shape, g);
                }
                Op::Silu(a) => {
                    let g = zip(&upstream.data, &val(a).data, |g, x| g * silu_grad(x));
                    self.accumulate(&mut grads, a, upstream.shape, g);
                }
                Op::Relu(a) => {
                    let g = zip(&upstream.data, &val(a).data, |g, x| if x > 0.0 { g } else { 0.0 });
                    self.accumulate(&mut grads, a, upstream.shape, g);
                }
                Op::AddBias(x, b) => {
                    let n = val(b).numel();
                    let mut gb = vec![0.0; n];
                    for row in upstream.data.chunks(n) {
                        for (acc, g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accumulate(&mut grads, x, upstream.shape, upstream.data);
                    self.accumulate(&mut grads, b, vec![n], gb);
                }
                Op::Sum(a) => {
                    let g = upstream.item();
                    let shape = val(a).shape.clone();
                    let n = val(a).numel();
                    self.accumulate(&mut grads, a, shape, vec![g; n]);
                }
                Op::Mse(a, b) => {
                    let n = val(a).numel() as f64;
                    let f = 2.0 * upstream.item() / n;
                    let ga: Vec<f64> = zip(&val(a).data, &val(b).data, |x, y| f * (x - y));
                    let gb = ga.iter().map(|g| -g).collect();
                    let shape = val(a).shape.clone();
                    self.accumulate(&mut grads, a, shape.clone(), ga);
                    self.accumulate(&mut grads, b, shape, gb);
                }
                Op::SumSq(a) => {
                    let f = 2.0 * upstream.item();
                    let g = val(a).data.iter().map(|x| f * x).collect();
                    let shape = val(a).shape.clone();
                    self.accumulate(&mut grads, a, shape, g);
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.param {
                grads[idx] = None;
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, shape: Vec<usize>, data: Vec<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(&data) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(Tensor { shape, data }),
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
