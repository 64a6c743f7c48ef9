//! Tensor-level reverse-mode differentiation over a dynamic tape.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the record in reverse. Tensors are dense row-major `f64` buffers.
//! Complex quantities are carried as separate real and imaginary tensors.
//!
//! Binary elementwise ops broadcast the smaller operand when its shape is a
//! suffix of the larger one (or it is a single element); the `_prefix`
//! variants match leading axes instead. Anything else is a shape error.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};

mod check;

pub use check::{check_gradients, GradientReport};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the smaller operand of a binary op maps onto the output.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// One element repeated.
    Scalar,
    /// Operand covers the trailing axes: index `i % len`.
    Suffix(usize),
    /// Operand covers the leading axes: index `i / inner`.
    Prefix(usize),
}

impl Bcast {
    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(len) => i % len,
            Bcast::Prefix(inner) => i / inner,
        }
    }
}

/// `f(a[ma(i)], b[mb(i)])` for `i in 0..n`, with the common layouts
/// special-cased so the inner loops avoid per-element index arithmetic.
#[inline]
fn zip_broadcast(a: &[f64], ma: Bcast, b: &[f64], mb: Bcast, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (ma, mb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Bcast::Scalar, Bcast::Same) => b.iter().map(|&y| f(a[0], y)).collect(),
        (Bcast::Same, Bcast::Suffix(len)) => a.chunks_exact(len).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y))).collect(),
        (Bcast::Suffix(len), Bcast::Same) => b.chunks_exact(len).flat_map(|row| a.iter().zip(row).map(|(&x, &y)| f(x, y))).collect(),
        (Bcast::Same, Bcast::Prefix(inner)) => a.chunks_exact(inner).zip(b).flat_map(|(row, &y)| row.iter().map(move |&x| (x, y))).map(|(x, y)| f(x, y)).collect(),
        (Bcast::Prefix(inner), Bcast::Same) => b.chunks_exact(inner).zip(a).flat_map(|(row, &x)| row.iter().map(move |&y| (x, y))).map(|(x, y)| f(x, y)).collect(),
        _ => (0..n).map(|i| f(a[ma.map(i)], b[mb.map(i)])).collect(),
    }
}

/// `sum |x - mu|^2` over paired real/imaginary rows; four partial sums
/// break the add dependency chain.
#[inline]
fn sq_dist(xr: &[f64], xi: &[f64], mr: &[f64], mi: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xr4, mr4, xi4, mi4) = (xr.chunks_exact(2), mr.chunks_exact(2), xi.chunks_exact(2), mi.chunks_exact(2));
    let tail = (xr4.remainder(), mr4.remainder(), xi4.remainder(), mi4.remainder());
    for (((a, b), c), d) in xr4.zip(mr4).zip(xi4).zip(mi4) {
        let (r0, r1, i0, i1) = (a[0] - b[0], a[1] - b[1], c[0] - d[0], c[1] - d[1]);
        acc[0] += r0 * r0;
        acc[1] += r1 * r1;
        acc[2] += i0 * i0;
        acc[3] += i1 * i1;
    }
    if let ([a], [b], [c], [d]) = tail {
        let (r, i) = (a - b, c - d);
        acc[0] += r * r;
        acc[2] += i * i;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `acc[m(j)] += d(j, g[j])` over the output indices `j`.
#[inline]
fn scatter_broadcast(acc: &mut [f64], m: Bcast, g: &[f64], d: impl Fn(usize, f64) -> f64) {
    match m {
        Bcast::Same => {
            for (j, (a, &gj)) in acc.iter_mut().zip(g).enumerate() {
                *a += d(j, gj);
            }
        }
        Bcast::Scalar => acc[0] += g.iter().enumerate().map(|(j, &gj)| d(j, gj)).sum::<f64>(),
        Bcast::Suffix(len) => {
            for (r, row) in g.chunks_exact(len).enumerate() {
                for (i, (a, &gj)) in acc.iter_mut().zip(row).enumerate() {
                    *a += d(r * len + i, gj);
                }
            }
        }
        Bcast::Prefix(inner) => {
            for (r, (a, row)) in acc.iter_mut().zip(g.chunks_exact(inner)).enumerate() {
                *a += row.iter().enumerate().map(|(i, &gj)| d(r * inner + i, gj)).sum::<f64>();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    /// `a / max(b, floor)`
    DivFloor(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinOp, Var, Bcast, Var, Bcast),
    Affine(Var, f64),
    MaxFloor(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    MatMul(Var, Var),
    SoftmaxLast(Var),
    SumAll(Var),
    SumLeading(Var),
    Reshape(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Select(Vec<bool>, Var, Var),
    Min2(Var, Var),
    SqDistBins(Var, Var, Var, Var),
    BinWeightedSum(Var, Var),
    BinSum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record. Ops evaluate eagerly and append a node.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the seeded outputs or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros of the right length.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; graph.len_of(v)],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

/// Resolves the broadcast of two shapes; returns output shape and both maps.
fn broadcast(a: &[usize], b: &[usize], prefix: bool) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same, Bcast::Same));
    }
    let (big, small, swapped) = if numel(a) >= numel(b) && a.len() >= b.len() {
        (a, b, false)
    } else {
        (b, a, true)
    };
    let map = if numel(small) == 1 {
        Bcast::Scalar
    } else if prefix {
        if small.len() <= big.len() && big[..small.len()] == *small {
            Bcast::Prefix(numel(&big[small.len()..]))
        } else {
            return shape_err(format!("cannot prefix-broadcast {small:?} onto {big:?}"));
        }
    } else if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        Bcast::Suffix(numel(small))
    } else {
        return shape_err(format!("cannot broadcast {small:?} onto {big:?}"));
    };
    Ok(if swapped {
        (big.to_vec(), map, Bcast::Same)
    } else {
        (big.to_vec(), Bcast::Same, map)
    })
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.data.len()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor {
                shape: t.shape.clone(),
                data: t.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.push(value, op, self.requires(x))
    }

    fn binary(&self, kind: BinOp, a: Var, b: Var, prefix: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (shape, ma, mb) = broadcast(&ta.shape, &tb.shape, prefix)?;
            let n = numel(&shape);
            let data = match kind {
                BinOp::Add => zip_broadcast(&ta.data, ma, &tb.data, mb, n, |x, y| x + y),
                BinOp::Sub => zip_broadcast(&ta.data, ma, &tb.data, mb, n, |x, y| x - y),
                BinOp::Mul => zip_broadcast(&ta.data, ma, &tb.data, mb, n, |x, y| x * y),
                BinOp::Div => zip_broadcast(&ta.data, ma, &tb.data, mb, n, |x, y| x / y),
                BinOp::DivFloor(f) => zip_broadcast(&ta.data, ma, &tb.data, mb, n, |x, y| x / y.max(f)),
            };
            (Tensor { shape, data }, ma, mb)
        };
        let (t, ma, mb) = value;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Binary(kind, a, ma, b, mb), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, false)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b, false)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, false)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b, false)
    }

    /// `a / max(b, floor)`
    pub fn div_floor(&self, a: Var, b: Var, floor: f64) -> Result<Var> {
        self.binary(BinOp::DivFloor(floor), a, b, false)
    }

    pub fn add_prefix(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, true)
    }

    pub fn mul_prefix(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, true)
    }

    pub fn div_floor_prefix(&self, a: Var, b: Var, floor: f64) -> Result<Var> {
        self.binary(BinOp::DivFloor(floor), a, b, true)
    }

    /// `scale * x + shift`
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn max_floor(&self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::MaxFloor(x, floor), |v| v.max(floor))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
                return shape_err(format!("matmul {:?} x {:?}", ta.shape, tb.shape));
            }
            let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                let row = &mut data[i * m..(i + 1) * m];
                for p in 0..k {
                    let x = ta.data[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, &w) in row.iter_mut().zip(&tb.data[p * m..(p + 1) * m]) {
                        *o += x * w;
                    }
                }
            }
            Tensor { shape: vec![n, m], data }
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Softmax over the last axis, computed with the max subtracted.
    pub fn softmax_last(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let c = *t.shape.last().unwrap_or(&1);
            let mut data = t.data.clone();
            for row in data.chunks_mut(c.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor {
                shape: t.shape.clone(),
                data,
            }
        };
        self.push(value, Op::SoftmaxLast(x), self.requires(x))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.requires(x))
    }

    /// Sums over every axis except the last `keep`.
    pub fn sum_leading(&self, x: Var, keep: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if keep > t.shape.len() {
                return shape_err(format!("sum_leading keep {keep} on {:?}", t.shape));
            }
            let shape = t.shape[t.shape.len() - keep..].to_vec();
            let n = numel(&shape);
            let mut data = vec![0.0; n];
            for chunk in t.data.chunks(n.max(1)) {
                for (o, v) in data.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor { shape, data }
        };
        Ok(self.push(value, Op::SumLeading(x), self.requires(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(x);
            if numel(shape) != t.data.len() {
                return shape_err(format!("reshape {:?} -> {shape:?}", t.shape));
            }
            Tensor {
                shape: shape.to_vec(),
                data: t.data.clone(),
            }
        };
        Ok(self.push(value, Op::Reshape(x), self.requires(x)))
    }

    /// `len` consecutive elements of the flattened tensor, as a vector.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let t = self.value(x);
            if start + len > t.data.len() {
                return shape_err(format!("slice {start}..{} of {} elements", start + len, t.data.len()));
            }
            Tensor::vector(t.data[start..start + len].to_vec())
        };
        Ok(self.push(value, Op::Slice(x, start), self.requires(x)))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&self, xs: &[Var]) -> Var {
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(&self.value(x).data);
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        self.push(Tensor::vector(data), Op::Concat(xs.to_vec()), rg)
    }

    /// Rows `index` along the first axis.
    pub fn gather(&self, x: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let Some(&rows) = t.shape.first() else {
                return shape_err("gather on a scalar".into());
            };
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return shape_err(format!("gather index {bad} out of {rows} rows"));
            }
            let inner = numel(&t.shape[1..]);
            let mut data = Vec::with_capacity(index.len() * inner);
            for &i in index {
                data.extend_from_slice(&t.data[i * inner..(i + 1) * inner]);
            }
            let mut shape = t.shape.clone();
            shape[0] = index.len();
            Tensor { shape, data }
        };
        Ok(self.push(value, Op::Gather(x, index.to_vec()), self.requires(x)))
    }

    /// Row `i` (first axis) from `a` where `cond[i]`, else from `b`.
    pub fn select(&self, cond: &[bool], a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape || ta.shape.first() != Some(&cond.len()) {
                return shape_err(format!("select {:?} / {:?} with {} conditions", ta.shape, tb.shape, cond.len()));
            }
            let inner = numel(&ta.shape[1..]);
            let mut data = tb.data.clone();
            for (i, &c) in cond.iter().enumerate() {
                if c {
                    data[i * inner..(i + 1) * inner].copy_from_slice(&ta.data[i * inner..(i + 1) * inner]);
                }
            }
            Tensor {
                shape: ta.shape.clone(),
                data,
            }
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Select(cond.to_vec(), a, b), rg))
    }

    /// Smaller of two one-element tensors; ties pick `a`.
    pub fn min2(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.data.len() != 1 || tb.data.len() != 1 {
                return shape_err("min2 needs one-element operands".into());
            }
            (ta.data[0], tb.data[0])
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(va.min(vb)), Op::Min2(a, b), rg))
    }

    /// `out[t,k,c] = sum_m |x[t,k,m] - mu[c,k,m]|^2` with complex values
    /// given as real/imaginary parts. `x: [T,K,M]`, `mu: [C,K,M]`.
    pub fn sq_dist_bins(&self, x_re: Var, x_im: Var, mu_re: Var, mu_im: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xr, xi, mr, mi) = (&nodes[x_re.0].value, &nodes[x_im.0].value, &nodes[mu_re.0].value, &nodes[mu_im.0].value);
            if xr.shape.len() != 3 || xr.shape != xi.shape || mr.shape != mi.shape || mr.shape.len() != 3 || mr.shape[1..] != xr.shape[1..] {
                return shape_err(format!("sq_dist_bins x {:?}/{:?} mu {:?}/{:?}", xr.shape, xi.shape, mr.shape, mi.shape));
            }
            let (t_len, k_len, m_len, c_len) = (xr.shape[0], xr.shape[1], xr.shape[2], mr.shape[0]);
            let mut data = vec![0.0; t_len * k_len * c_len];
            let rows = xr.data.chunks_exact(m_len).zip(xi.data.chunks_exact(m_len));
            for (tk, ((xr_row, xi_row), out)) in rows.zip(data.chunks_exact_mut(c_len)).enumerate() {
                let k = tk % k_len;
                for (c, d) in out.iter_mut().enumerate() {
                    let mo = (c * k_len + k) * m_len;
                    let (mr_row, mi_row) = (&mr.data[mo..mo + m_len], &mi.data[mo..mo + m_len]);
                    *d = sq_dist(xr_row, xi_row, mr_row, mi_row);
                }
            }
            Tensor {
                shape: vec![t_len, k_len, c_len],
                data,
            }
        };
        let rg = [x_re, x_im, mu_re, mu_im].iter().any(|&v| self.requires(v));
        Ok(self.push(value, Op::SqDistBins(x_re, x_im, mu_re, mu_im), rg))
    }

    /// `out[c,k,m] = sum_t w[t,k,c] * x[t,k,m]` for `w: [T,K,C]`, `x: [T,K,M]`.
    pub fn bin_weighted_sum(&self, w: Var, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tw, tx) = (&nodes[w.0].value, &nodes[x.0].value);
            if tw.shape.len() != 3 || tx.shape.len() != 3 || tw.shape[..2] != tx.shape[..2] {
                return shape_err(format!("bin_weighted_sum w {:?} x {:?}", tw.shape, tx.shape));
            }
            let (_, k_len, c_len, m_len) = (tw.shape[0], tw.shape[1], tw.shape[2], tx.shape[2]);
            let mut data = vec![0.0; c_len * k_len * m_len];
            for (tk, (x_row, w_row)) in tx.data.chunks_exact(m_len).zip(tw.data.chunks_exact(c_len)).enumerate() {
                let k = tk % k_len;
                for (c, &wv) in w_row.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let oo = (c * k_len + k) * m_len;
                    for (o, &xv) in data[oo..oo + m_len].iter_mut().zip(x_row) {
                        *o += wv * xv;
                    }
                }
            }
            Tensor {
                shape: vec![c_len, k_len, m_len],
                data,
            }
        };
        let rg = self.requires(w) || self.requires(x);
        Ok(self.push(value, Op::BinWeightedSum(w, x), rg))
    }

    /// `out[c,k] = sum_t w[t,k,c]` for `w: [T,K,C]`.
    pub fn bin_sum(&self, w: Var) -> Result<Var> {
        let value = {
            let tw = self.value(w);
            if tw.shape.len() != 3 {
                return shape_err(format!("bin_sum on {:?}", tw.shape));
            }
            let (t_len, k_len, c_len) = (tw.shape[0], tw.shape[1], tw.shape[2]);
            let mut data = vec![0.0; c_len * k_len];
            for t in 0..t_len {
                for k in 0..k_len {
                    for c in 0..c_len {
                        data[c * k_len + k] += tw.data[(t * k_len + k) * c_len + c];
                    }
                }
            }
            Tensor {
                shape: vec![c_len, k_len],
                data,
            }
        };
        Ok(self.push(value, Op::BinSum(w), self.requires(w)))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.len_of(output) != 1 {
            return shape_err(format!("backward from non-scalar of shape {:?}", self.shape(output)));
        }
        self.backward_seeded(&[(output, vec![1.0])])
    }

    /// Reverse pass with explicit output cotangents, e.g. to continue a chain
    /// rule across separately recorded graph segments.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != nodes[v.0].value.data.len() {
                return shape_err(format!("seed of length {} for {:?}", g.len(), nodes[v.0].value.shape));
            }
            accumulate(&mut grads, &nodes, *v, |acc| {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            });
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary(kind, a, ma, b, mb) => {
            let (ta, tb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            let kind = *kind;
            // d/da and d/db as elementwise factors, scattered back through the broadcast
            accumulate(grads, nodes, *a, |acc| match kind {
                BinOp::Add | BinOp::Sub => scatter_broadcast(acc, *ma, g, |_, gj| gj),
                BinOp::Mul => scatter_broadcast(acc, *ma, g, |j, gj| gj * tb[mb.map(j)]),
                BinOp::Div => scatter_broadcast(acc, *ma, g, |j, gj| gj / tb[mb.map(j)]),
                BinOp::DivFloor(f) => scatter_broadcast(acc, *ma, g, |j, gj| gj / tb[mb.map(j)].max(f)),
            });
            accumulate(grads, nodes, *b, |acc| match kind {
                BinOp::Add => scatter_broadcast(acc, *mb, g, |_, gj| gj),
                BinOp::Sub => scatter_broadcast(acc, *mb, g, |_, gj| -gj),
                BinOp::Mul => scatter_broadcast(acc, *mb, g, |j, gj| gj * ta[ma.map(j)]),
                BinOp::Div => scatter_broadcast(acc, *mb, g, |j, gj| {
                    let y = tb[mb.map(j)];
                    -gj * ta[ma.map(j)] / (y * y)
                }),
                BinOp::DivFloor(f) => scatter_broadcast(acc, *mb, g, |j, gj| {
                    let y = tb[mb.map(j)];
                    if y > f {
                        -gj * ta[ma.map(j)] / (y * y)
                    } else {
                        0.0
                    }
                }),
            });
        }
        Op::Affine(x, s) => accumulate(grads, nodes, *x, |acc| {
            acc.iter_mut().zip(g).for_each(|(a, gj)| *a += s * gj);
        }),
        Op::MaxFloor(x, f) => {
            let xv = &nodes[x.0].value.data;
            accumulate(grads, nodes, *x, |acc| {
                for j in 0..g.len() {
                    if xv[j] > *f {
                        acc[j] += g[j];
                    }
                }
            })
        }
        Op::Relu(x) => {
            let xv = &nodes[x.0].value.data;
            accumulate(grads, nodes, *x, |acc| {
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        acc[j] += g[j];
                    }
                }
            })
        }
        Op::Exp(x) => accumulate(grads, nodes, *x, |acc| {
            for j in 0..g.len() {
                acc[j] += g[j] * out.data[j];
            }
        }),
        Op::Ln(x) => {
            let xv = &nodes[x.0].value.data;
            accumulate(grads, nodes, *x, |acc| {
                for j in 0..g.len() {
                    // 0 * inf stays 0: a dead log-prior receives no gradient.
                    if g[j] != 0.0 {
                        acc[j] += g[j] / xv[j];
                    }
                }
            })
        }
        Op::Sqrt(x) => accumulate(grads, nodes, *x, |acc| {
            for j in 0..g.len() {
                if g[j] != 0.0 {
                    acc[j] += g[j] * 0.5 / out.data[j];
                }
            }
        }),
        Op::Square(x) => {
            let xv = &nodes[x.0].value.data;
            accumulate(grads, nodes, *x, |acc| {
                for j in 0..g.len() {
                    acc[j] += 2.0 * xv[j] * g[j];
                }
            })
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            accumulate(grads, nodes, *a, |acc| {
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &tb.data[p * m..(p + 1) * m];
                        acc[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, *b, |acc| {
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let x = ta.data[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, gj) in acc[p * m..(p + 1) * m].iter_mut().zip(gi) {
                            *o += x * gj;
                        }
                    }
                }
            });
        }
        Op::SoftmaxLast(x) => {
            let c = (*out.shape.last().unwrap_or(&1)).max(1);
            accumulate(grads, nodes, *x, |acc| {
                for (r, (yr, gr)) in out.data.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for j in 0..c {
                        acc[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            })
        }
        Op::SumAll(x) => accumulate(grads, nodes, *x, |acc| acc.iter_mut().for_each(|a| *a += g[0])),
        Op::SumLeading(x) => {
            let n = g.len().max(1);
            accumulate(grads, nodes, *x, |acc| {
                for chunk in acc.chunks_mut(n) {
                    chunk.iter_mut().zip(g).for_each(|(a, gj)| *a += gj);
                }
            })
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, |acc| {
            acc.iter_mut().zip(g).for_each(|(a, gj)| *a += gj);
        }),
        Op::Slice(x, start) => accumulate(grads, nodes, *x, |acc| {
            acc[*start..*start + g.len()].iter_mut().zip(g).for_each(|(a, gj)| *a += gj);
        }),
        Op::Concat(xs) => {
            let mut offset = 0;
            for x in xs {
                let n = nodes[x.0].value.data.len();
                accumulate(grads, nodes, *x, |acc| {
                    acc.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, gj)| *a += gj);
                });
                offset += n;
            }
        }
        Op::Gather(x, index) => {
            let inner = numel(&out.shape[1..]);
            accumulate(grads, nodes, *x, |acc| {
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..inner {
                        acc[i * inner + j] += g[r * inner + j];
                    }
                }
            })
        }
        Op::Select(cond, a, b) => {
            let inner = numel(&out.shape[1..]);
            for (target, want) in [(a, true), (b, false)] {
                accumulate(grads, nodes, *target, |acc| {
                    for (r, &c) in cond.iter().enumerate() {
                        if c == want {
                            for j in r * inner..(r + 1) * inner {
                                acc[j] += g[j];
                            }
                        }
                    }
                });
            }
        }
        Op::Min2(a, b) => {
            let pick_a = nodes[a.0].value.data[0] <= nodes[b.0].value.data[0];
            let target = if pick_a { a } else { b };
            accumulate(grads, nodes, *target, |acc| acc[0] += g[0]);
        }
        Op::SqDistBins(x_re, x_im, mu_re, mu_im) => {
            let (xr, xi, mr, mi) = (&nodes[x_re.0].value, &nodes[x_im.0].value, &nodes[mu_re.0].value, &nodes[mu_im.0].value);
            let (_, k_len, m_len, c_len) = (xr.shape[0], xr.shape[1], xr.shape[2], mr.shape[0]);
            // d/dx = 2 (x - mu) g ; d/dmu = -2 (x - mu) g
            let want_mu = nodes[mu_re.0].requires_grad || nodes[mu_im.0].requires_grad;
            let want_x = nodes[x_re.0].requires_grad || nodes[x_im.0].requires_grad;
            let mut gmr = vec![0.0; if want_mu { mr.data.len() } else { 0 }];
            let mut gmi = vec![0.0; gmr.len()];
            let mut gxr = vec![0.0; if want_x { xr.data.len() } else { 0 }];
            let mut gxi = vec![0.0; gxr.len()];
            for (tk, g_row) in g.chunks_exact(c_len).enumerate() {
                let k = tk % k_len;
                let xo = tk * m_len;
                let (xr_row, xi_row) = (&xr.data[xo..xo + m_len], &xi.data[xo..xo + m_len]);
                for (c, &gv) in g_row.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let mo = (c * k_len + k) * m_len;
                    let (mr_row, mi_row) = (&mr.data[mo..mo + m_len], &mi.data[mo..mo + m_len]);
                    let g2 = 2.0 * gv;
                    if want_mu {
                        for (gr, (x, mu)) in gmr[mo..mo + m_len].iter_mut().zip(xr_row.iter().zip(mr_row)) {
                            *gr -= g2 * (x - mu);
                        }
                        for (gi, (x, mu)) in gmi[mo..mo + m_len].iter_mut().zip(xi_row.iter().zip(mi_row)) {
                            *gi -= g2 * (x - mu);
                        }
                    }
                    if want_x {
                        for (gr, (x, mu)) in gxr[xo..xo + m_len].iter_mut().zip(xr_row.iter().zip(mr_row)) {
                            *gr += g2 * (x - mu);
                        }
                        for (gi, (x, mu)) in gxi[xo..xo + m_len].iter_mut().zip(xi_row.iter().zip(mi_row)) {
                            *gi += g2 * (x - mu);
                        }
                    }
                }
            }
            if want_mu {
                accumulate(grads, nodes, *mu_re, |acc| acc.iter_mut().zip(&gmr).for_each(|(a, v)| *a += v));
                accumulate(grads, nodes, *mu_im, |acc| acc.iter_mut().zip(&gmi).for_each(|(a, v)| *a += v));
            }
            if want_x {
                accumulate(grads, nodes, *x_re, |acc| acc.iter_mut().zip(&gxr).for_each(|(a, v)| *a += v));
                accumulate(grads, nodes, *x_im, |acc| acc.iter_mut().zip(&gxi).for_each(|(a, v)| *a += v));
            }
        }
        Op::BinWeightedSum(w, x) => {
            let (tw, tx) = (&nodes[w.0].value, &nodes[x.0].value);
            let (_, k_len, c_len, m_len) = (tw.shape[0], tw.shape[1], tw.shape[2], tx.shape[2]);
            accumulate(grads, nodes, *w, |acc| {
                for (tk, (x_row, a_row)) in tx.data.chunks_exact(m_len).zip(acc.chunks_exact_mut(c_len)).enumerate() {
                    let k = tk % k_len;
                    for (c, a) in a_row.iter_mut().enumerate() {
                        let go = (c * k_len + k) * m_len;
                        *a += g[go..go + m_len].iter().zip(x_row).map(|(gv, xv)| gv * xv).sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, *x, |acc| {
                for (tk, (a_row, w_row)) in acc.chunks_exact_mut(m_len).zip(tw.data.chunks_exact(c_len)).enumerate() {
                    let k = tk % k_len;
                    for (c, &wv) in w_row.iter().enumerate() {
                        let go = (c * k_len + k) * m_len;
                        for (a, gv) in a_row.iter_mut().zip(&g[go..go + m_len]) {
                            *a += wv * gv;
                        }
                    }
                }
            });
        }
        Op::BinSum(w) => {
            let tw = &nodes[w.0].value;
            let (t_len, k_len, c_len) = (tw.shape[0], tw.shape[1], tw.shape[2]);
            accumulate(grads, nodes, *w, |acc| {
                for t in 0..t_len {
                    for k in 0..k_len {
                        for c in 0..c_len {
                            acc[(t * k_len + k) * c_len + c] += g[c * k_len + k];
                        }
                    }
                }
            })
        }
    }
}
