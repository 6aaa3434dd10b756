//! Dense row-major tensors with a dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! with [`Tape::param`] or [`Tape::constant`]; every operation on a [`Var`]
//! appends a node holding its value and enough context to run the backward
//! rule. [`Tape::gradients`] walks the nodes once, in reverse order.
//!
//! Scalars have shape `[]`, vectors `[n]`, matrices `[r, c]`.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradients: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("cholesky: matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("adam: non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn randn<R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => 1,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} elements", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// Weighted undirected adjacency used by [`Var::neighbor_sum`].
pub type Adjacency = Vec<Vec<(usize, f64)>>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Broadcast(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Recip(usize),
    Sqrt(usize),
    Sum(usize),
    SumAxis(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    LogSumExp(usize),
    SegmentLogSumExp(usize, Rc<Vec<usize>>),
    ConcatCols(Vec<usize>),
    NeighborSum(usize, Rc<Adjacency>),
    Transpose(usize),
    Reshape(usize),
    Diag(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    PairReadout {
        proj: usize,
        bias: usize,
        out: usize,
        pairs: Rc<Vec<(usize, usize)>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records one forward computation. Not `Sync`; build one per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Lower Cholesky factor of a symmetric positive definite matrix (reads the
/// lower triangle only).
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape().len() != 2 || a.cols() != n {
        return Err(TensorError::InvalidShape {
            op: "cholesky",
            shape: a.shape().to_vec(),
            reason: "matrix must be square".into(),
        });
    }
    let mut l = vec![0.0; n * n];
    let ad = a.data();
    for j in 0..n {
        let mut d = ad[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(TensorError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = ad[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(Tensor {
        shape: vec![n, n],
        data: l,
    })
}

/// Solves `L X = B` for lower-triangular `L`; `B` is `[n, m]`.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in 0..n {
        for k in 0..i {
            let lik = ld[i * n + k];
            if lik != 0.0 {
                for j in 0..m {
                    x[i * m + j] -= lik * x[k * m + j];
                }
            }
        }
        let d = ld[i * n + i];
        for j in 0..m {
            x[i * m + j] /= d;
        }
    }
    Tensor {
        shape: vec![n, m],
        data: x,
    }
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = ld[k * n + i];
            if lki != 0.0 {
                for j in 0..m {
                    x[i * m + j] -= lki * x[k * m + j];
                }
            }
        }
        let d = ld[i * n + i];
        for j in 0..m {
            x[i * m + j] /= d;
        }
    }
    Tensor {
        shape: vec![n, m],
        data: x,
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k) = (a.rows(), a.cols());
    let c = b.cols();
    let mut out = vec![0.0; r * c];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Registers a leaf that is not meant to be differentiated. Gradients
    /// with respect to it can still be requested.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let Some(first) = values.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "no inputs".into(),
            });
        };
        let rows = first.rows();
        for v in &values {
            if !is_matrix(v) || v.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        for p in parts {
            if !std::ptr::eq(p.tape, self) {
                return Err(TensorError::ForeignVar);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data: out,
            },
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    /// Nodes that do not influence the loss receive zero gradients.
    pub fn gradients(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 || !lv.shape().is_empty() && lv.shape() != [1] {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backward(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape().to_vec();
                match grads.get(v.id).cloned().flatten() {
                    Some(data) => Tensor { shape, data },
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backward(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let gt = Tensor {
                shape: out.shape().to_vec(),
                data: g.to_vec(),
            };
            accumulate(grads, *a, matmul(&gt, &bt.transposed()).data);
            accumulate(grads, *b, matmul(&at.transposed(), &gt).data);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.to_vec());
            accumulate(grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.to_vec());
            accumulate(grads, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(grads, *a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
            accumulate(grads, *b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, *a, g.to_vec());
            let c = val(*bias).len();
            let mut gb = vec![0.0; c];
            for chunk in g.chunks(c) {
                for (s, x) in gb.iter_mut().zip(chunk) {
                    *s += x;
                }
            }
            accumulate(grads, *bias, gb);
        }
        Op::MulRow(a, v) => {
            let vd = val(*v).data();
            let ad = val(*a).data();
            let c = vd.len();
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * vd[i % c]).collect();
            let mut gv = vec![0.0; c];
            for (i, x) in g.iter().enumerate() {
                gv[i % c] += x * ad[i];
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *v, gv);
        }
        Op::Broadcast(a) => {
            accumulate(grads, *a, vec![g.iter().sum()]);
        }
        Op::Scale(a, c) => {
            accumulate(grads, *a, g.iter().map(|x| x * c).collect());
        }
        Op::AddScalar(a) => {
            accumulate(grads, *a, g.to_vec());
        }
        Op::Exp(a) => {
            accumulate(grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect());
        }
        Op::Log(a) => {
            let ad = val(*a).data();
            accumulate(grads, *a, g.iter().zip(ad).map(|(g, x)| g / x).collect());
        }
        Op::Softplus(a) => {
            let ad = val(*a).data();
            accumulate(grads, *a, g.iter().zip(ad).map(|(g, x)| g * sigmoid(*x)).collect());
        }
        Op::Recip(a) => {
            accumulate(grads, *a, g.iter().zip(out.data()).map(|(g, y)| -g * y * y).collect());
        }
        Op::Sqrt(a) => {
            accumulate(grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * 0.5 / y).collect());
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(grads, *a, vec![g[0]; n]);
        }
        Op::SumAxis(a, axis) => {
            let at = val(*a);
            let (r, c) = (at.rows(), at.cols());
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = if *axis == 0 { g[j] } else { g[i] };
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let at = val(*a);
            let width = if at.shape().len() == 2 { at.cols() } else { 1 };
            accumulate_with(grads, *a, at.len(), |ga| {
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..width {
                        ga[row * width + j] += g[k * width + j];
                    }
                }
            });
        }
        Op::LogSumExp(a) => {
            let y = out.item();
            let ad = val(*a).data();
            accumulate(grads, *a, ad.iter().map(|x| g[0] * (x - y).exp()).collect());
        }
        Op::SegmentLogSumExp(a, offsets) => {
            let ad = val(*a).data();
            let mut ga = vec![0.0; ad.len()];
            for s in 0..offsets.len() - 1 {
                let y = out.data()[s];
                for i in offsets[s]..offsets[s + 1] {
                    ga[i] = g[s] * (ad[i] - y).exp();
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                let mut gp = vec![0.0; rows * c];
                for r in 0..rows {
                    gp[r * c..(r + 1) * c].copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                }
                accumulate(grads, p, gp);
                offset += c;
            }
        }
        Op::NeighborSum(a, adj) => {
            let at = val(*a);
            let d = at.cols();
            let mut ga = vec![0.0; at.len()];
            for (u, nbrs) in adj.iter().enumerate() {
                for &(v, w) in nbrs {
                    for j in 0..d {
                        ga[v * d + j] += w * g[u * d + j];
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Transpose(a) => {
            let gt = Tensor {
                shape: out.shape().to_vec(),
                data: g.to_vec(),
            };
            accumulate(grads, *a, gt.transposed().data);
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, g.to_vec());
        }
        Op::Diag(a) => {
            let n = out.len();
            let mut ga = vec![0.0; n * n];
            for i in 0..n {
                ga[i * n + i] = g[i];
            }
            accumulate(grads, *a, ga);
        }
        Op::Cholesky(a) => {
            // A_bar = L^-T Phi(L^T L_bar) L^-1, folded onto the lower triangle.
            let l = out;
            let n = l.rows();
            let lbar = Tensor {
                shape: vec![n, n],
                data: g.to_vec(),
            };
            let mut p = matmul(&l.transposed(), &lbar);
            for i in 0..n {
                for j in 0..n {
                    if j > i {
                        p.data[i * n + j] = 0.0;
                    } else if i == j {
                        p.data[i * n + j] *= 0.5;
                    }
                }
            }
            // S = L^-T P L^-1 = L^-T (L^-T P^T)^T
            let x = solve_lower_transpose(l, &p.transposed());
            let s = solve_lower_transpose(l, &x.transposed());
            let mut ga = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    ga[i * n + j] = if i == j {
                        s.data[i * n + i]
                    } else {
                        s.data[i * n + j] + s.data[j * n + i]
                    };
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::SolveLower(l, b) => {
            let lt = val(*l);
            let x = out;
            let gx = Tensor {
                shape: x.shape().to_vec(),
                data: g.to_vec(),
            };
            let gb = solve_lower_transpose(lt, &gx);
            let n = lt.rows();
            let mut gl = matmul(&gb, &x.transposed());
            for i in 0..n {
                for j in 0..n {
                    gl.data[i * n + j] = if j > i { 0.0 } else { -gl.data[i * n + j] };
                }
            }
            accumulate(grads, *l, gl.data);
            accumulate(grads, *b, gb.data);
        }
        Op::PairReadout { proj, bias, out, pairs } => {
            let (p, b, o) = (val(*proj), val(*bias), val(*out));
            let (h, k) = (p.cols(), o.cols());
            let (pd, bd, od) = (p.data(), b.data(), o.data());
            let mut gp = vec![0.0; p.len()];
            let mut gb = vec![0.0; h];
            let mut go = vec![0.0; o.len()];
            for (r, &(u, v)) in pairs.iter().enumerate() {
                let gr = &g[r * k..(r + 1) * k];
                for j in 0..h {
                    let pre = pd[u * h + j] + pd[v * h + j] + bd[j];
                    let act = softplus(pre);
                    let mut back = 0.0;
                    for c in 0..k {
                        go[j * k + c] += gr[c] * act;
                        back += gr[c] * od[j * k + c];
                    }
                    let d = back * sigmoid(pre);
                    gp[u * h + j] += d;
                    gp[v * h + j] += d;
                    gb[j] += d;
                }
            }
            accumulate(grads, *proj, gp);
            accumulate(grads, *bias, gb);
            accumulate(grads, *out, go);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn emit(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'t>> {
        check_finite(op_name, value.data())?;
        Ok(self.tape.push(value, op))
    }

    fn map(&self, op_name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.emit(
            op_name,
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            op,
        )
    }

    fn zip(&self, rhs: &Var<'t>, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.emit(
            op_name,
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            op,
        )
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if !is_matrix(&a) || !is_matrix(&b) || a.cols() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        self.emit("matmul", matmul(&a, &b), Op::MatMul(self.id, rhs.id))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.zip(rhs, "add", Op::Add(self.id, rhs.id), |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.zip(rhs, "sub", Op::Sub(self.id, rhs.id), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.zip(rhs, "mul", Op::Mul(self.id, rhs.id), |x, y| x * y)
    }

    /// Adds a `[c]` bias to every row of an `[r, c]` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.row_op(bias, "add_row", Op::AddRow(self.id, bias.id), |x, b| x + b)
    }

    /// Multiplies every row of an `[r, c]` matrix elementwise by a `[c]` vector.
    pub fn mul_row(&self, v: &Var<'t>) -> Result<Var<'t>> {
        self.row_op(v, "mul_row", Op::MulRow(self.id, v.id), |x, b| x * b)
    }

    fn row_op(&self, v: &Var<'t>, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(v)?;
        let (a, b) = (self.value(), v.value());
        if !is_matrix(&a) || b.shape().len() != 1 || b.len() != a.cols() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let c = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, b.data()[i % c]))
            .collect();
        self.emit(
            op_name,
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            op,
        )
    }

    /// Expands a single-element variable to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.emit("broadcast", Tensor::filled(shape, a.item()), Op::Broadcast(self.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.map("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.map("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.map("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.map("log", Op::Log(self.id), f64::ln)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.map("softplus", Op::Softplus(self.id), softplus)
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        self.map("recip", Op::Recip(self.id), |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::NonFinite { op: "sqrt" });
        }
        self.map("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.emit("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Sums a matrix over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if !is_matrix(&a) || axis > 1 {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape: a.shape().to_vec(),
                reason: format!("axis {axis} on a non-matrix"),
            });
        }
        let (r, c) = (a.rows(), a.cols());
        let data = if axis == 0 {
            let mut s = vec![0.0; c];
            for i in 0..r {
                for (j, acc) in s.iter_mut().enumerate() {
                    *acc += a.data()[i * c + j];
                }
            }
            s
        } else {
            (0..r).map(|i| a.row(i).iter().sum()).collect()
        };
        self.emit("sum_axis", Tensor::vector(data), Op::SumAxis(self.id, axis))
    }

    /// Selects rows (or entries of a vector) by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (len, width) = match a.shape().len() {
            1 => (a.len(), 1),
            2 => (a.rows(), a.cols()),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "gather_rows",
                    shape: a.shape().to_vec(),
                    reason: "expected a vector or matrix".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= len {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len,
                });
            }
            data.extend_from_slice(&a.data()[i * width..(i + 1) * width]);
        }
        let shape = if a.shape().len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), width]
        };
        self.emit(
            "gather_rows",
            Tensor { shape, data },
            Op::GatherRows(self.id, Rc::new(idx.to_vec())),
        )
    }

    /// `log(sum(exp(x)))` over all entries, shifted by the max.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "logsumexp",
                shape: a.shape().to_vec(),
                reason: "empty input".into(),
            });
        }
        self.emit("logsumexp", Tensor::scalar(logsumexp(a.data())), Op::LogSumExp(self.id))
    }

    /// Log-sum-exp of consecutive segments of a vector; segment `s` covers
    /// `offsets[s]..offsets[s + 1]`. Every segment must be non-empty.
    pub fn segment_logsumexp(&self, offsets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let bad = |reason: &str| TensorError::InvalidShape {
            op: "segment_logsumexp",
            shape: a.shape().to_vec(),
            reason: reason.into(),
        };
        if a.shape().len() != 1 || offsets.len() < 2 {
            return Err(bad("expected a vector and at least one segment"));
        }
        if *offsets.last().unwrap() != a.len() || offsets[0] != 0 {
            return Err(bad("offsets must span the vector"));
        }
        let mut out = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return Err(bad("empty segment"));
            }
            out.push(logsumexp(&a.data()[w[0]..w[1]]));
        }
        self.emit(
            "segment_logsumexp",
            Tensor::vector(out),
            Op::SegmentLogSumExp(self.id, Rc::new(offsets.to_vec())),
        )
    }

    /// `out[u] = sum over (v, w) in adj[u] of w * self[v]`, accumulated per
    /// coordinate in ascending order of the terms so the result does not
    /// depend on how neighbours are listed.
    pub fn neighbor_sum(&self, adj: Rc<Adjacency>) -> Result<Var<'t>> {
        let a = self.value();
        if !is_matrix(&a) || adj.len() != a.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "neighbor_sum",
                lhs: a.shape().to_vec(),
                rhs: vec![adj.len()],
            });
        }
        let (n, d) = (a.rows(), a.cols());
        let mut out = vec![0.0; n * d];
        let mut terms = Vec::new();
        for (u, nbrs) in adj.iter().enumerate() {
            for j in 0..d {
                terms.clear();
                for &(v, w) in nbrs {
                    if v >= n {
                        return Err(TensorError::IndexOutOfRange {
                            op: "neighbor_sum",
                            index: v,
                            len: n,
                        });
                    }
                    terms.push(w * a.data()[v * d + j]);
                }
                terms.sort_by(f64::total_cmp);
                out[u * d + j] = terms.iter().sum();
            }
        }
        self.emit(
            "neighbor_sum",
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            Op::NeighborSum(self.id, adj),
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if !is_matrix(&a) {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: a.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        self.emit("transpose", a.transposed(), Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = (*self.value()).clone().reshaped(shape)?;
        self.emit("reshape", a, Op::Reshape(self.id))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&self) -> Result<Var<'t>> {
        let a = self.value();
        if !is_matrix(&a) || a.rows() != a.cols() {
            return Err(TensorError::InvalidShape {
                op: "diag",
                shape: a.shape().to_vec(),
                reason: "expected a square matrix".into(),
            });
        }
        let n = a.rows();
        let data = (0..n).map(|i| a.data()[i * n + i]).collect();
        self.emit("diag", Tensor::vector(data), Op::Diag(self.id))
    }

    /// Lower Cholesky factor; only the lower triangle of the input is read.
    pub fn cholesky(&self) -> Result<Var<'t>> {
        let l = cholesky(&self.value())?;
        self.emit("cholesky", l, Op::Cholesky(self.id))
    }

    /// `L^-1 B` where `self` is lower triangular.
    pub fn solve_lower(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(b)?;
        let (l, bt) = (self.value(), b.value());
        if !is_matrix(&l) || l.rows() != l.cols() || !is_matrix(&bt) || bt.rows() != l.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "solve_lower",
                lhs: l.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        self.emit("solve_lower", solve_lower(&l, &bt), Op::SolveLower(self.id, b.id))
    }
}

impl<'t> Var<'t> {
    /// For each pair `(u, v)`: `softplus(P[u] + P[v] + b) · O`, where `self`
    /// is `P: [n, h]`, `bias` is `[h]` and `out` is `[h, k]`; the result is
    /// `[pairs, k]`. The hidden activations are not stored.
    pub fn pair_readout(&self, bias: &Var<'t>, out: &Var<'t>, pairs: &[(usize, usize)]) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        self.same_tape(out)?;
        let (p, b, o) = (self.value(), bias.value(), out.value());
        if !is_matrix(&p) || !is_matrix(&o) || b.len() != p.cols() || o.rows() != p.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "pair_readout",
                lhs: p.shape().to_vec(),
                rhs: o.shape().to_vec(),
            });
        }
        let (n, h, k) = (p.rows(), p.cols(), o.cols());
        if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "pair_readout",
                index: u.max(v),
                len: n,
            });
        }
        let (pd, bd, od) = (p.data(), b.data(), o.data());
        let mut data = vec![0.0; pairs.len() * k];
        let mut hidden = vec![0.0; h];
        for (r, &(u, v)) in pairs.iter().enumerate() {
            for j in 0..h {
                hidden[j] = softplus(pd[u * h + j] + pd[v * h + j] + bd[j]);
            }
            for (c, slot) in data[r * k..(r + 1) * k].iter_mut().enumerate() {
                *slot = (0..h).map(|j| hidden[j] * od[j * k + c]).sum();
            }
        }
        self.emit(
            "pair_readout",
            Tensor {
                shape: vec![pairs.len(), k],
                data,
            },
            Op::PairReadout {
                proj: self.id,
                bias: bias.id,
                out: out.id,
                pairs: Rc::new(pairs.to_vec()),
            },
        )
    }
}

/// Adam with bias correction, applied as gradient *ascent*: callers pass
/// gradients of an objective they want to maximize.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One ascent step. A non-finite gradient aborts the step before any
    /// parameter or accumulator is touched.
    pub fn ascend(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient { param: i });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for (j, gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] += self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Worst per-coordinate disagreement between tape gradients and central
/// differences with step `h`. The error for one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn finite_diff_check<F, E>(loss_fn: F, params: &[Tensor], h: f64) -> std::result::Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    let analytic = tape.gradients(loss, &vars)?;

    let eval = |ps: &[Tensor]| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.param(p.clone())).collect();
        Ok(loss_fn(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..work[pi].len() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softplus_at_zero_is_log_two() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        assert!(close(x.softplus().unwrap().item(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn softplus_and_logsumexp_stay_finite_at_extremes() {
        for x in [-1e6, -700.0, 0.0, 700.0, 1e6] {
            assert!(softplus(x).is_finite());
        }
        assert_eq!(softplus(1e6), 1e6);
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let l = v.logsumexp().unwrap().item();
        assert!(close(l, 1000.0 + 2f64.ln(), 1e-12));
        let v = tape.constant(Tensor::vector(vec![-1e6, 1e6]));
        assert_eq!(v.logsumexp().unwrap().item(), 1e6);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::new();
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.25, 7.0, 9.0]).unwrap();
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        assert_eq!(*i.matmul(&av).unwrap().value(), a);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.gradients(loss, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let loss = x.sum().unwrap();
        let g = tape.gradients(loss, &[x, y]).unwrap();
        assert_eq!(g[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.gradients(x, &[x]), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert_eq!(x.log().unwrap_err(), TensorError::NonFinite { op: "log" });
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut w = Tensor::vector(vec![0.5, -1.0]);
        let mut adam = AdamState::new(&[&w], 0.1);
        adam.ascend(&mut [&mut w], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(w.data(), &[0.5, -1.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_ascent_moves_toward_maximum() {
        // f(w) = -w^2, gradient -2w
        let mut w = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&[&w], 0.1);
        let g = Tensor::scalar(-2.0 * w.item());
        adam.ascend(&mut [&mut w], &[g]).unwrap();
        assert!(w.item() < 1.0 && w.item() > 0.0);
    }

    #[test]
    fn adam_rejects_nan_gradient_without_side_effects() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut adam = AdamState::new(&[&w], 0.1);
        let err = adam
            .ascend(&mut [&mut w], &[Tensor::vector(vec![0.0, f64::NAN])])
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { param: 0 });
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(adam.step_count(), 0);
    }

    /// Scalar Adam written out longhand, used as the reference trajectory.
    fn reference_adam(w0: f64, target: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            let g = -2.0 * (w - target);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w += lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        let target = 0.7;
        let mut w = Tensor::scalar(-1.3);
        let mut adam = AdamState::new(&[&w], 0.05);
        for _ in 0..200 {
            let g = Tensor::scalar(-2.0 * (w.item() - target));
            adam.ascend(&mut [&mut w], &[g]).unwrap();
        }
        let reference = reference_adam(-1.3, target, 0.05, 200);
        assert_eq!(w.item(), reference);
        assert!((w.item() - target).abs() < 1e-3, "w = {}", w.item());
    }

    #[test]
    fn finite_diff_on_polynomial() {
        let p = vec![Tensor::vector(vec![0.3, -1.2, 2.0])];
        let err = finite_diff_check(
            |_, v| {
                let x2 = v[0].mul(&v[0])?;
                let x3 = x2.mul(&v[0])?;
                x3.add(&x2.scale(2.0)?)?.sum()
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn cholesky_reconstructs_matrix() {
        let a = Tensor::matrix(3, 3, vec![4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0]).unwrap();
        let l = cholesky(&a).unwrap();
        let back = matmul(&l, &l.transposed());
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!(close(*x, *y, 1e-12));
        }
        let not_pd = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            cholesky(&not_pd),
            Err(TensorError::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn neighbor_sum_ignores_listing_order() {
        let c = Tensor::matrix(3, 2, vec![1e16, 1.0, -1e16, 2.0, 1.0, 3.0]).unwrap();
        let a1 = Rc::new(vec![vec![(0, 1.0), (1, 1.0), (2, 1.0)], vec![], vec![]]);
        let a2 = Rc::new(vec![vec![(2, 1.0), (0, 1.0), (1, 1.0)], vec![], vec![]]);
        let tape = Tape::new();
        let cv = tape.constant(c);
        let s1 = cv.neighbor_sum(a1).unwrap().value();
        let s2 = cv.neighbor_sum(a2).unwrap().value();
        assert_eq!(s1.data(), s2.data());
        assert_eq!(s1.row(1), &[0.0, 0.0]);
    }

    fn mat(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    }

    fn weights(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
        mat(r, c)
    }

    /// Contract every op output against fixed random weights so the check
    /// covers the full Jacobian, not just its column sums.
    fn contract<'t>(tape: &'t Tape, y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
        let w = tape.constant(w.clone().reshaped(&y.shape())?);
        y.mul(&w)?.sum()
    }

    const TOL: f64 = 1e-6;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grad_matmul(a in mat(3, 4), b in mat(4, 2), w in weights(3, 2)) {
            let err = finite_diff_check(|t, v| contract(t, v[0].matmul(&v[1])?, &w), &[a, b], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_elementwise(a in mat(2, 3), b in mat(2, 3), w in weights(2, 3)) {
            let err = finite_diff_check(|t, v| {
                let s = v[0].add(&v[1])?.mul(&v[0])?.sub(&v[1].exp()?)?;
                let s = s.add(&v[1].softplus()?.scale(0.7)?)?.add_scalar(3.0)?;
                let pos = v[0].square()?.add_scalar(0.5)?;
                let s = s.add(&pos.log()?)?.add(&pos.recip()?)?.add(&pos.sqrt()?)?;
                contract(t, s, &w)
            }, &[a, b], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_row_ops_and_broadcast(a in mat(3, 2), b in mat(1, 2), s in -1.0f64..1.0, w in weights(3, 2)) {
            let b = b.reshaped(&[2]).unwrap();
            let err = finite_diff_check(|t, v| {
                let y = v[0].add_row(&v[1])?.mul_row(&v[1])?;
                let y = y.add(&v[2].broadcast(&[3, 2])?)?;
                contract(t, y, &w)
            }, &[a, b, Tensor::scalar(s)], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_reductions(a in mat(3, 4), w in weights(1, 4), w2 in weights(1, 3)) {
            let err = finite_diff_check(|t, v| {
                let c = contract(t, v[0].sum_axis(0)?, &w)?;
                let r = contract(t, v[0].sum_axis(1)?, &w2)?;
                let l = v[0].logsumexp()?;
                c.add(&r)?.add(&l)?.add(&v[0].sum()?.scale(0.3)?)
            }, &[a], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_gather_segments_concat(a in mat(4, 3), x in mat(1, 7), w in weights(5, 6)) {
            let x = x.reshaped(&[7]).unwrap();
            let err = finite_diff_check(|t, v| {
                let g = v[0].gather_rows(&[3, 0, 0, 2, 1])?;
                let cat = t.concat_cols(&[g, g.scale(2.0)?])?;
                let seg = v[1].gather_rows(&[0, 6, 2, 2, 5, 1])?.segment_logsumexp(&[0, 2, 3, 6])?;
                contract(t, cat, &w)?.add(&seg.sum()?)
            }, &[a, x], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_neighbor_sum_transpose_reshape(a in mat(4, 3), w in weights(3, 4)) {
            let adj = Rc::new(vec![
                vec![(1, 2.0), (2, 1.0)],
                vec![(0, 2.0)],
                vec![(0, 1.0), (3, 3.0)],
                vec![(2, 3.0)],
            ]);
            let err = finite_diff_check(|t, v| {
                let y = v[0].neighbor_sum(Rc::clone(&adj))?.mul(&v[0])?.transpose()?;
                let y = y.reshape(&[12])?.reshape(&[3, 4])?;
                contract(t, y, &w)
            }, &[a], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_cholesky_solve_diag(a in mat(3, 3), b in mat(3, 2), w in weights(3, 2)) {
            // Symmetric positive definite input built from a.
            let mut spd = matmul(&a, &a.transposed());
            for i in 0..3 { spd.data_mut()[i * 3 + i] += 3.0; }
            let err = finite_diff_check(|t, v| {
                let l = v[0].cholesky()?;
                let x = l.solve_lower(&v[1])?;
                let d = l.diag()?.log()?.sum()?;
                contract(t, x, &w)?.add(&d)
            }, &[spd, b], 1e-6).unwrap();
            prop_assert!(err < TOL, "err {}", err);
        }

        #[test]
        fn grad_pair_readout(p in mat(4, 3), b in mat(1, 3), o in mat(3, 2), w in weights(5, 2)) {
            let b = b.reshaped(&[3]).unwrap();
            let pairs = [(0, 1), (2, 3), (1, 1), (3, 0), (0, 1)];
            let err = finite_diff_check(|t, v| {
                contract(t, v[0].pair_readout(&v[1], &v[2], &pairs)?, &w)
            }, &[p.clone(), b.clone(), o.clone()], 1e-5).unwrap();
            prop_assert!(err < TOL, "err {}", err);

            // Same values as the unfused composition.
            let tape = Tape::new();
            let (pv, bv, ov) = (tape.param(p), tape.param(b), tape.param(o));
            let us: Vec<usize> = pairs.iter().map(|x| x.0).collect();
            let vs: Vec<usize> = pairs.iter().map(|x| x.1).collect();
            let fused = pv.pair_readout(&bv, &ov, &pairs).unwrap().value();
            let composed = pv.gather_rows(&us).unwrap()
                .add(&pv.gather_rows(&vs).unwrap()).unwrap()
                .add_row(&bv).unwrap()
                .softplus().unwrap()
                .matmul(&ov).unwrap()
                .value();
            prop_assert_eq!(fused.shape(), composed.shape());
            for (x, y) in fused.data().iter().zip(composed.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_is_deterministic(a in mat(3, 3)) {
            let run = || {
                let tape = Tape::new();
                let x = tape.param(a.clone());
                let y = x.matmul(&x).unwrap().softplus().unwrap().logsumexp().unwrap();
                y.item().to_bits()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
