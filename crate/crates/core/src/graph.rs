//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters are bound from a [`ParameterStore`] once per graph and their
//! gradients are written back with [`Graph::backward_into`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tensor::{kernels, Tensor};
use crate::{math, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Train mode enables dropout; eval mode makes dropout the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deliberate backward corruption used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Softmax,
    Sigmoid,
    MatMul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    PickSum(Var, Vec<(usize, usize, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: BTreeMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.rows() == 1 && b.cols() == 1 {
        Ok(Bcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Bcast::Row)
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Scalar => 0,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: BTreeMap::new(),
            fault: None,
        }
    }

    /// Corrupt the backward rule of one operation kind (test fixture).
    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::contract(alloc::format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that collects a gradient but is not backed by the store.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter. Binding the same parameter twice returns the
    /// same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn param_path(&mut self, store: &ParameterStore, path: &str) -> Result<Var> {
        let id = store.require(path)?;
        self.param(store, id)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_tn", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_tn(self.value(a).data(), self.value(b).data(), &mut out, k, m, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulTN(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    // ---- elementwise --------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = bcast_kind(name, self.value(a), self.value(b))?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let cols = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb[bidx(kind, i, cols)]))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, mk(a, b, kind), rg)
    }

    /// `a + b`; `b` may be a `1×n` row or a `1×1` scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Add a constant tensor of the same shape (e.g. an attention mask bias).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(Error::dim("add_const", ta.shape(), c.shape()));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    /// Multiply by a constant tensor of the same shape (dropout and row masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::dim("mul_const", ta.shape(), &[c.len()]));
        }
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Logistic function; outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| math::sigmoid(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|&x| math::exp(x - max)).sum::<f64>());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxRows(a), rg)
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(alloc::format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).len(), rate, rng);
        self.mul_const(a, mask)
    }

    // ---- structure ----------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", self.value(a).shape(), &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", self.value(a).shape(), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(a, start), rg)
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::dim(
                "layer_norm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Embedding lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::contract("gather of no rows"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::data(alloc::format!(
                "token id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::matrix(ids.len(), c, data)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        )
    }

    /// `Σ w · a[r, c]` over the given picks, as a `1×1` tensor.
    pub fn pick_sum(&mut self, a: Var, picks: Vec<(usize, usize, f64)>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut s = 0.0;
        for &(i, j, w) in &picks {
            if i >= r || j >= c {
                return Err(Error::dim("pick_sum", t.shape(), &[i, j]));
            }
            s += w * t.get(i, j);
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::PickSum(a, picks), rg)
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Gradient accumulated on `v` by previous backward calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let mut t = self.nodes[v.0].value.clone();
        t.data_mut().copy_from_slice(g);
        Some(t)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Back-propagate from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        // Leaf grads survive between calls; interior grads are recomputed.
        let mut grads: Vec<Option<Vec<f64>>> = (0..n)
            .map(|i| {
                if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                    self.grads.get(i).cloned().flatten()
                } else {
                    None
                }
            })
            .collect();
        let mut local: Vec<Option<Vec<f64>>> = vec![None; n];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[i] = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut local);
        }
        self.grads = grads;
        Ok(())
    }

    /// Run [`Graph::backward`] and add every parameter gradient into `store`.
    /// The graph's own leaf gradients are cleared afterwards.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        self.zero_grad();
        self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    store.accumulate_grad(id, g);
                }
            }
        }
        self.zero_grad();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let fault = self.fault;
        let send = |local: &mut [Option<Vec<f64>>], v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = local[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let f = if fault == Some(BackwardFault::MatMul) { 1.5 } else { 1.0 };
                send(local, *a, &|da| {
                    kernels::matmul_nt(g, bv, da, m, n, k);
                    if f != 1.0 {
                        da.iter_mut().for_each(|x| *x *= f);
                    }
                });
                send(local, *b, &|db| kernels::matmul_tn(av, g, db, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(local, *a, &|da| kernels::matmul(g, bv, da, m, n, k));
                send(local, *b, &|db| kernels::matmul_tn(g, av, db, m, n, k));
            }
            Op::MatMulTN(a, b) => {
                // C = Aᵀ B with A: k×m: dA = B dCᵀ, dB = A dC
                let (k, m) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(local, *a, &|da| kernels::matmul_nt(bv, g, da, k, n, m));
                send(local, *b, &|db| kernels::matmul(av, g, db, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a);
                send(local, *a, &|da| {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let cols = self.value(*a).cols();
                send(local, *a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                send(local, *b, &|db| {
                    for (idx, x) in g.iter().enumerate() {
                        db[bidx(*kind, idx, cols)] += sign * x;
                    }
                });
            }
            Op::Mul(a, b, kind) => {
                let cols = self.value(*a).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(local, *a, &|da| {
                    for (idx, x) in g.iter().enumerate() {
                        da[idx] += x * bv[bidx(*kind, idx, cols)];
                    }
                });
                send(local, *b, &|db| {
                    for (idx, x) in g.iter().enumerate() {
                        db[bidx(*kind, idx, cols)] += x * av[idx];
                    }
                });
            }
            Op::AddConst(a) | Op::AddScalar(a) => {
                send(local, *a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            Op::MulConst(a, c) => {
                send(local, *a, &|da| {
                    for ((d, x), m) in da.iter_mut().zip(g).zip(c) {
                        *d += x * m;
                    }
                });
            }
            Op::Scale(a, s) => {
                send(local, *a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x * s));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                send(local, *a, &|da| {
                    for ((d, x), v) in da.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let f = if fault == Some(BackwardFault::Sigmoid) {
                    1.5
                } else {
                    1.0
                };
                send(local, *a, &|da| {
                    for ((d, x), s) in da.iter_mut().zip(g).zip(y) {
                        *d += f * x * s * (1.0 - s);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let f = if fault == Some(BackwardFault::Softmax) {
                    1.5
                } else {
                    1.0
                };
                send(local, *a, &|da| {
                    for ((drow, grow), yrow) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot = kernels::dot(grow, yrow);
                        for j in 0..cols {
                            drow[j] += f * yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                send(local, *a, &|da| {
                    for ((drow, grow), yrow) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..cols {
                            drow[j] += grow[j] - math::exp(yrow[j]) * total;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    send(local, p, &|dp| {
                        for r in 0..rows {
                            for j in 0..pc {
                                dp[r * pc + j] += g[r * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(local, p, &|dp| {
                        dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, x)| *d += x)
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a).1;
                send(local, *a, &|da| {
                    da[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x)
                });
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let len = node.value.cols();
                send(local, *a, &|da| {
                    for i in 0..r {
                        for j in 0..len {
                            da[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                send(local, *a, &|da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = self.shape(*x);
                let gv = self.value(*gamma).data();
                send(local, *x, &|dx| {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let hrow = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = grow[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = grow[j] * gv[j];
                            dx[i * c + j] += rstd[i] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
                send(local, *gamma, &|dg| {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                send(local, *beta, &|db| {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let c = self.shape(*table).1;
                send(local, *table, &|dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::PickSum(a, picks) => {
                let c = self.shape(*a).1;
                send(local, *a, &|da| {
                    for &(r, j, w) in picks {
                        da[r * c + j] += w * g[0];
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::MatMulTN(..) => "matmul_tn",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddConst(_) => "add_const",
        Op::MulConst(..) => "mul_const",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Sum(_) => "sum",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GatherRows(..) => "gather_rows",
        Op::PickSum(..) => "pick_sum",
    }
}

/// Stable in-place softmax of one row.
/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngStream) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - max);
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
