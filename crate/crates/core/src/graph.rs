//! Reverse-mode automatic differentiation on an operation tape.
//!
//! A [`Graph`] records every operation eagerly (values are computed at
//! construction time) in topological order. [`Graph::backward`] walks the
//! tape in reverse exactly once and *emits the gradient computations as new
//! tape operations*. Because gradients are themselves differentiable graph
//! nodes, an exact second-order meta-gradient is simply a second call to
//! `backward` — no special-case code. First-order consumers just read the
//! gradient values out as tensors.
//!
//! The operation set is deliberately small and closed under
//! differentiation: every vector-Jacobian product below is a composition of
//! operations from the same set.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Cheap to copy; only meaningful for the
/// graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise (Hadamard) product.
    Mul(Var, Var),
    Neg(Var),
    /// Multiply by a compile-time scalar constant.
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Tanh(Var),
    /// [m×n] → [m×1], summing each row.
    RowSums(Var),
    /// [m×n] → [1×n], summing each column.
    ColSums(Var),
    /// [m×1] → [m×n] by copying the single column.
    RepeatCols(Var),
    /// [1×n] → [m×n] by copying the single row.
    RepeatRows(Var),
    ConcatRows(Vec<Var>),
    /// (input, start row); the slice length lives in the output shape.
    SliceRows(Var, usize),
    /// (input, row offset): embed into a zero block of the output's height.
    PadRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    /// Select rows of the input by index (duplicates allowed).
    GatherRows(Var, Rc<Vec<usize>>),
    /// out[idx[i]] += in[i]; the target height lives in the output shape.
    ScatterAddRows(Var, Rc<Vec<usize>>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Tanh(a)
            | Op::RowSums(a)
            | Op::ColSums(a)
            | Op::RepeatCols(a)
            | Op::RepeatRows(a)
            | Op::SliceRows(a, _)
            | Op::PadRows(a, _)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation tape. Immutable from the caller's point of view (all methods
/// take `&self`); built and consumed by a single thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded operations.
    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Record a leaf that participates in `backward` as a gradient target.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Record a leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    /// Clone out the forward value of a node.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Re-enter a value as a constant leaf, severing its gradient history.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Record a non-leaf op: validates finiteness, propagates requires_grad.
    fn emit(&self, op: Op, value: Tensor) -> Result<Var> {
        value.check_finite("graph operation")?;
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push(op, value, rg))
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |ta, tb| kernels::zip(ta, tb, "add", |x, y| x + y))?;
        self.emit(Op::Add(a, b), value)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |ta, tb| kernels::zip(ta, tb, "sub", |x, y| x - y))?;
        self.emit(Op::Sub(a, b), value)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |ta, tb| kernels::zip(ta, tb, "mul", |x, y| x * y))?;
        self.emit(Op::Mul(a, b), value)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, |t| kernels::map(t, |x| -x))?;
        self.emit(Op::Neg(a), value)
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        if !k.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let value = self.with1(a, |t| kernels::map(t, |x| k * x))?;
        self.emit(Op::Scale(a, k), value)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, |t| kernels::map(t, f64::tanh))?;
        self.emit(Op::Tanh(a), value)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, kernels::matmul)?;
        self.emit(Op::Matmul(a, b), value)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, kernels::transpose)?;
        self.emit(Op::Transpose(a), value)
    }

    // ---- row-wise nonlinearities ----

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, kernels::softmax_rows)?;
        self.emit(Op::SoftmaxRows(a), value)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, kernels::log_softmax_rows)?;
        self.emit(Op::LogSoftmaxRows(a), value)
    }

    // ---- reductions and broadcasts ----

    pub fn row_sums(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, kernels::row_sums)?;
        self.emit(Op::RowSums(a), value)
    }

    pub fn col_sums(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, kernels::col_sums)?;
        self.emit(Op::ColSums(a), value)
    }

    pub fn repeat_cols(&self, a: Var, n: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::repeat_cols(t, n))?;
        self.emit(Op::RepeatCols(a), value)
    }

    pub fn repeat_rows(&self, a: Var, m: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::repeat_rows(t, m))?;
        self.emit(Op::RepeatRows(a), value)
    }

    // ---- structural ops ----

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            kernels::concat_rows(&tensors)?
        };
        self.emit(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::slice_rows(t, start, len))?;
        self.emit(Op::SliceRows(a, start), value)
    }

    pub fn pad_rows(&self, a: Var, total: usize, offset: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::pad_rows(t, total, offset))?;
        self.emit(Op::PadRows(a, offset), value)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            kernels::concat_cols(&tensors)?
        };
        self.emit(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::slice_cols(t, start, len))?;
        self.emit(Op::SliceCols(a, start), value)
    }

    pub fn pad_cols(&self, a: Var, total: usize, offset: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::pad_cols(t, total, offset))?;
        self.emit(Op::PadCols(a, offset), value)
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with1(a, |t| kernels::gather_rows(t, indices))?;
        self.emit(Op::GatherRows(a, Rc::new(indices.to_vec())), value)
    }

    pub fn scatter_add_rows(&self, a: Var, indices: &[usize], total: usize) -> Result<Var> {
        let value = self.with1(a, |t| kernels::scatter_add_rows(t, indices, total))?;
        self.emit(Op::ScatterAddRows(a, Rc::new(indices.to_vec())), value)
    }

    // ---- composites ----

    /// Sum of all entries, as a [1×1] node.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let rows = self.row_sums(a)?;
        self.col_sums(rows)
    }

    /// Mean of all entries, as a [1×1] node.
    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.with1(a, |t| t.numel());
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcast-add a `[1×n]` bias row onto every row of `[m×n]`.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let m = self.with1(a, |t| t.rows())?;
        let b = self.repeat_rows(bias, m)?;
        self.add(a, b)
    }

    /// Mean over positions of −log softmax(logits)[t, target_t].
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.with1(logits, |x| x.dims2())?;
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} logit rows vs {} targets",
                t,
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&ix| ix >= v) {
            return Err(Error::Index(format!(
                "cross_entropy: target {bad} out of range for vocab {v}"
            )));
        }
        let mut onehot = Tensor::zeros(vec![t, v]);
        for (i, &ix) in targets.iter().enumerate() {
            onehot.data_mut()[i * v + ix] = 1.0;
        }
        let logp = self.log_softmax_rows(logits)?;
        let picked = self.mul(logp, self.constant(onehot))?;
        let total = self.sum_all(picked)?;
        self.scale(self.neg(total)?, 1.0 / t as f64)
    }

    // ---- reverse pass ----

    /// Reverse-mode differentiation of a scalar loss.
    ///
    /// Emits gradient computations onto this graph and returns handles to
    /// them. Leaves with `requires_grad=false` receive no entry. Calling
    /// `backward` on a node built from gradient handles differentiates
    /// through the first reverse pass (exact higher-order gradients).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        {
            let nodes = self.nodes.borrow();
            let t = &nodes[loss.0].value;
            if !t.is_scalar() {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    t.shape()
                )));
            }
        }
        let upto = loss.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; upto];
        adj[loss.0] = Some(self.constant(Tensor::scalar(1.0)));
        for id in (0..upto).rev() {
            let Some(g) = adj[id] else { continue };
            let (op, rg) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !rg {
                continue;
            }
            self.propagate(Var(id), &op, g, &mut adj)?;
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Var>], v: Var, g: Var) -> Result<()> {
        adj[v.0] = Some(match adj[v.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    /// Emit the vector-Jacobian products of one node into its inputs.
    fn propagate(&self, out: Var, op: &Op, g: Var, adj: &mut [Option<Var>]) -> Result<()> {
        let needs = |v: &Var| self.requires_grad(*v);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    self.accumulate(adj, *a, g)?;
                }
                if needs(b) {
                    self.accumulate(adj, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    self.accumulate(adj, *a, g)?;
                }
                if needs(b) {
                    let ng = self.neg(g)?;
                    self.accumulate(adj, *b, ng)?;
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let da = self.mul(g, *b)?;
                    self.accumulate(adj, *a, da)?;
                }
                if needs(b) {
                    let db = self.mul(g, *a)?;
                    self.accumulate(adj, *b, db)?;
                }
            }
            Op::Neg(a) => {
                if needs(a) {
                    let da = self.neg(g)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::Scale(a, k) => {
                if needs(a) {
                    let da = self.scale(g, *k)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::Matmul(a, b) => {
                if needs(a) {
                    let bt = self.transpose(*b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(adj, *a, da)?;
                }
                if needs(b) {
                    let at = self.transpose(*a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(adj, *b, db)?;
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    let da = self.transpose(g)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    // dx = y ⊙ (g − rowsum(g ⊙ y) broadcast)
                    let y = out;
                    let n = self.with1(y, |t| t.cols())?;
                    let gy = self.mul(g, y)?;
                    let s = self.row_sums(gy)?;
                    let r = self.repeat_cols(s, n)?;
                    let d = self.sub(g, r)?;
                    let da = self.mul(y, d)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::LogSoftmaxRows(a) => {
                if needs(a) {
                    // dx = g − softmax(x) ⊙ rowsum(g) broadcast
                    let n = self.with1(*a, |t| t.cols())?;
                    let sm = self.softmax_rows(*a)?;
                    let s = self.row_sums(g)?;
                    let r = self.repeat_cols(s, n)?;
                    let da = self.sub(g, self.mul(sm, r)?)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::Tanh(a) => {
                if needs(a) {
                    // dx = g ⊙ (1 − y²)
                    let y = out;
                    let shape = self.shape_of(y);
                    let one = self.constant(Tensor::ones(shape));
                    let yy = self.mul(y, y)?;
                    let da = self.mul(g, self.sub(one, yy)?)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::RowSums(a) => {
                if needs(a) {
                    let n = self.with1(*a, |t| t.cols())?;
                    let da = self.repeat_cols(g, n)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::ColSums(a) => {
                if needs(a) {
                    let m = self.with1(*a, |t| t.rows())?;
                    let da = self.repeat_rows(g, m)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::RepeatCols(a) => {
                if needs(a) {
                    let da = self.row_sums(g)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::RepeatRows(a) => {
                if needs(a) {
                    let da = self.col_sums(g)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.with1(*p, |t| t.rows())?;
                    if needs(p) {
                        let dp = self.slice_rows(g, offset, rows)?;
                        self.accumulate(adj, *p, dp)?;
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                if needs(a) {
                    let total = self.with1(*a, |t| t.rows())?;
                    let da = self.pad_rows(g, total, *start)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::PadRows(a, offset) => {
                if needs(a) {
                    let rows = self.with1(*a, |t| t.rows())?;
                    let da = self.slice_rows(g, *offset, rows)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.with1(*p, |t| t.cols())?;
                    if needs(p) {
                        let dp = self.slice_cols(g, offset, cols)?;
                        self.accumulate(adj, *p, dp)?;
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                if needs(a) {
                    let total = self.with1(*a, |t| t.cols())?;
                    let da = self.pad_cols(g, total, *start)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::PadCols(a, offset) => {
                if needs(a) {
                    let cols = self.with1(*a, |t| t.cols())?;
                    let da = self.slice_cols(g, *offset, cols)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(a) {
                    let total = self.with1(*a, |t| t.rows())?;
                    let da = self.scatter_add_rows(g, idx, total)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
            Op::ScatterAddRows(a, idx) => {
                if needs(a) {
                    let da = self.gather_rows(g, idx)?;
                    self.accumulate(adj, *a, da)?;
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse pass: gradient node handles indexed by source node.
pub struct Gradients {
    adj: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient node for `v`, if one was produced.
    pub fn var(&self, v: Var) -> Option<Var> {
        self.adj.get(v.0).copied().flatten()
    }

    /// Gradient value for `v`, cloned out of the graph.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.var(v).map(|g| graph.value(g))
    }
}

/// Pure tensor-level implementations of the forward computations.
pub(crate) mod kernels {
    use super::*;

    pub fn zip(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| f(x)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: [{m}×{k}] × [{k2}×{n}] inner dimensions differ"
            )));
        }
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn log_softmax_rows(a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn row_sums(a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let ad = a.data();
        let out = (0..m).map(|i| ad[i * n..(i + 1) * n].iter().sum()).collect();
        Tensor::new(vec![m, 1], out)
    }

    pub fn col_sums(a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let ad = a.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        Tensor::new(vec![1, n], out)
    }

    pub fn repeat_cols(a: &Tensor, n: usize) -> Result<Tensor> {
        let (m, c) = a.dims2()?;
        if c != 1 {
            return Err(Error::Dimension(format!("repeat_cols wants [m×1], got [{m}×{c}]")));
        }
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].fill(ad[i]);
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn repeat_rows(a: &Tensor, m: usize) -> Result<Tensor> {
        let (r, n) = a.dims2()?;
        if r != 1 {
            return Err(Error::Dimension(format!("repeat_rows wants [1×n], got [{r}×{n}]")));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(a.data());
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows: no inputs".into()));
        }
        let n = parts[0].cols()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, c) = p.dims2()?;
            if c != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: column mismatch {c} vs {n}"
                )));
            }
            rows += m;
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![rows, n], data)
    }

    pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        if start + len > m || len == 0 {
            return Err(Error::Index(format!(
                "slice_rows [{start}, {start}+{len}) out of [{m}×{n}]"
            )));
        }
        let data = a.data()[start * n..(start + len) * n].to_vec();
        Tensor::new(vec![len, n], data)
    }

    pub fn pad_rows(a: &Tensor, total: usize, offset: usize) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        if offset + m > total {
            return Err(Error::Index(format!(
                "pad_rows: [{m}×{n}] at offset {offset} exceeds {total} rows"
            )));
        }
        let mut out = vec![0.0; total * n];
        out[offset * n..(offset + m) * n].copy_from_slice(a.data());
        Tensor::new(vec![total, n], out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: no inputs".into()));
        }
        let m = parts[0].rows()?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != m {
                return Err(Error::Dimension(format!("concat_cols: row mismatch {r} vs {m}")));
            }
            total += c;
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for p in parts {
            let (_, c) = p.dims2()?;
            let pd = p.data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Tensor::new(vec![m, total], out)
    }

    pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        if start + len > n || len == 0 {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {start}+{len}) out of [{m}×{n}]"
            )));
        }
        let ad = a.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ad[i * n + start..i * n + start + len]);
        }
        Tensor::new(vec![m, len], out)
    }

    pub fn pad_cols(a: &Tensor, total: usize, offset: usize) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        if offset + n > total {
            return Err(Error::Index(format!(
                "pad_cols: [{m}×{n}] at offset {offset} exceeds {total} cols"
            )));
        }
        let ad = a.data();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            out[i * total + offset..i * total + offset + n]
                .copy_from_slice(&ad[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![m, total], out)
    }

    pub fn gather_rows(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        if indices.is_empty() {
            return Err(Error::Index("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= m) {
            return Err(Error::Index(format!("gather_rows: index {bad} out of {m} rows")));
        }
        let ad = a.data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &ix in indices {
            out.extend_from_slice(&ad[ix * n..(ix + 1) * n]);
        }
        Tensor::new(vec![indices.len(), n], out)
    }

    pub fn scatter_add_rows(a: &Tensor, indices: &[usize], total: usize) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        if indices.len() != m {
            return Err(Error::Dimension(format!(
                "scatter_add_rows: {} indices for {m} rows",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= total) {
            return Err(Error::Index(format!(
                "scatter_add_rows: index {bad} out of {total} rows"
            )));
        }
        let ad = a.data();
        let mut out = vec![0.0; total * n];
        for (i, &ix) in indices.iter().enumerate() {
            for (o, &x) in out[ix * n..(ix + 1) * n].iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        Tensor::new(vec![total, n], out)
    }
}
