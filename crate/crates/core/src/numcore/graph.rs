//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse, summing the contributions
//! of every consumer into each node's gradient.
//!
//! Parameters live outside the graph in a [`ParamStore`]. Calling
//! [`Graph::param`] copies the current value onto the tape (once per graph),
//! and [`ParamStore::accumulate`] adds the resulting gradients into the
//! store. Gradients keep accumulating until [`ParamStore::zero_grad`].

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::tensor::{log_sigmoid, matmul_at_raw, matmul_bt_raw, matmul_raw, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors with gradient buffers of the same shapes.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(grad);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Replaces a parameter, possibly with a new shape, and resets its gradient.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.grads[id.0] = Tensor::zeros(value.shape());
        self.values[id.0] = value;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds the gradients of every parameter leaf on `graph` into the store.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.param_leaves() {
            if let Some(g) = grads.get(var) {
                self.grads[id.0].add_assign(g);
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` is unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(op, "non-finite value"));
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn as_matrix(t: Tensor) -> Tensor {
        if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            Tensor::matrix(r, c, t.into_data()).expect("reshape preserves size")
        }
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = Self::as_matrix(value);
        assert!(value.is_finite(), "constant with non-finite entries");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients but is not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        let value = Self::as_matrix(value);
        assert!(value.is_finite(), "input with non-finite entries");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.params[id.0] = Some(v);
        v
    }

    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::config(format!("{op}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        if k != k2 {
            return Err(Error::config(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push("div", out, Op::Div(a, b), rg)
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        let (r1, n2) = shape2(self.value(row));
        if r1 != 1 || n2 != n {
            return Err(Error::config(format!("add_row: [{m},{n}] + [{r1},{n2}]")));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(&rv) {
                *o += r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push("add_row", out, Op::AddRow(a, row), rg)
    }

    /// `a[m,n] ⊙ col[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        let (m2, c1) = shape2(self.value(col));
        if c1 != 1 || m2 != m {
            return Err(Error::config(format!("mul_col: [{m},{n}] * [{m2},{c1}]")));
        }
        let cv = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (chunk, c) in out.data_mut().chunks_mut(n.max(1)).zip(&cv) {
            for o in chunk.iter_mut() {
                *o *= c;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push("mul_col", out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push("exp", out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push("log", out, Op::Log(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push("log_sigmoid", out, Op::LogSigmoid(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push("square", out, Op::Square(a), rg)
    }

    /// Elementwise clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push("clamp", out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::config("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[m,n] -> [m,1]` sums along each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let out: Vec<f64> = t.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push("row_sum", Tensor::column(out), Op::RowSum(a), rg)
    }

    /// `[m,n] -> [m,1]` Euclidean norm of each row. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let out: Vec<f64> = t
            .data()
            .chunks(n.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        self.push("row_norm", Tensor::column(out), Op::RowNorm(a), rg)
    }

    /// Row-wise dot product `[m,n]·[m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.row_sum(p)
    }

    /// Row-wise cosine similarity `aᵀb / ((‖a‖+ε)(‖b‖+ε))`, `[m,1]`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let num = self.row_dot(a, b)?;
        let na = self.row_norm(a)?;
        let nb = self.row_norm(b)?;
        let na = self.add_scalar(na, eps)?;
        let nb = self.add_scalar(nb, eps)?;
        let den = self.mul(na, nb)?;
        self.div(num, den)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = shape2(self.value(a));
        let (m2, nb) = shape2(self.value(b));
        if m != m2 {
            return Err(Error::config(format!("concat_cols: {m} rows vs {m2} rows")));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row_slice(i));
            out.extend_from_slice(self.value(b).row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_cols", Tensor::matrix(m, na + nb, out)?, Op::ConcatCols(a, b), rg)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if start + len > n {
            return Err(Error::config(format!("slice_cols: {start}+{len} > {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.value(a).row_slice(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", Tensor::matrix(m, len, out)?, Op::SliceCols(a, start), rg)
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in index.iter() {
            if r >= m {
                return Err(Error::config(format!("gather_rows: row {r} >= {m}")));
            }
            out.extend_from_slice(self.value(a).row_slice(r));
        }
        let rg = self.rg(a);
        self.push("gather_rows", Tensor::matrix(index.len(), n, out)?, Op::GatherRows(a, index), rg)
    }

    /// Means over consecutive row segments. `offsets` has one more entry than
    /// there are segments; segment `s` covers rows `offsets[s]..offsets[s+1]`.
    ///
    /// Each column of a segment is summed in sorted order, so the result is
    /// bit-identical under any permutation of the rows within a segment.
    pub fn segment_mean(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != m {
            return Err(Error::config("segment_mean: offsets must span all rows"));
        }
        let segs = offsets.len() - 1;
        let t = self.value(a);
        let mut out = vec![0.0; segs * n];
        let mut col = Vec::new();
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                return Err(Error::config(format!("segment_mean: empty segment {s}")));
            }
            for j in 0..n {
                col.clear();
                col.extend((lo..hi).map(|i| t.get(i, j)));
                col.sort_by(|x, y| x.total_cmp(y));
                out[s * n + j] = col.iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        let rg = self.rg(a);
        self.push("segment_mean", Tensor::matrix(segs, n, out)?, Op::SegmentMean(a, offsets), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            let val = &node.value;
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, contrib: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = shape2(self.value(*a));
                    let n = self.value(*b).cols();
                    if self.rg(*a) {
                        let da = matmul_bt_raw(g.data(), self.value(*b).data(), m, n, k);
                        send(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    }
                    if self.rg(*b) {
                        let db = matmul_at_raw(self.value(*a).data(), g.data(), m, k, n);
                        send(&mut grads, *b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    send(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    send(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    send(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    // d(a/b)/db = -(a/b)/b
                    let q = val.zip_map(bv, |o, y| -o / y);
                    send(&mut grads, *b, g.zip_map(&q, |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let n = val.cols();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *row, Tensor::row(dr));
                }
                Op::MulCol(a, col) => {
                    let n = val.cols().max(1);
                    let cv = self.value(*col).data();
                    let av = self.value(*a).data();
                    let mut da = g.clone();
                    for (chunk, c) in da.data_mut().chunks_mut(n).zip(cv) {
                        for x in chunk.iter_mut() {
                            *x *= c;
                        }
                    }
                    let dc: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(av.chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    send(&mut grads, *a, da);
                    send(&mut grads, *col, Tensor::column(dc));
                }
                Op::Scale(a, s) => send(&mut grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => send(&mut grads, *a, g.clone()),
                Op::Exp(a) => send(&mut grads, *a, g.zip_map(val, |x, e| x * e)),
                Op::Log(a) => send(&mut grads, *a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Tanh(a) => send(&mut grads, *a, g.zip_map(val, |x, t| x * (1.0 - t * t))),
                Op::Sigmoid(a) => send(&mut grads, *a, g.zip_map(val, |x, s| x * s * (1.0 - s))),
                Op::LogSigmoid(a) => {
                    // d/dx log σ(x) = σ(-x)
                    send(&mut grads, *a, g.zip_map(self.value(*a), |x, y| x * sigmoid(-y)))
                }
                Op::Square(a) => send(&mut grads, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(
                        &mut grads,
                        *a,
                        g.zip_map(self.value(*a), |x, y| if y >= lo && y <= hi { x } else { 0.0 }),
                    )
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    send(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = g.item() / av.len() as f64;
                    send(&mut grads, *a, Tensor::full(av.shape(), gv));
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut d = Vec::with_capacity(av.len());
                    for &gi in g.data() {
                        d.extend(std::iter::repeat(gi).take(n));
                    }
                    send(&mut grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                Op::RowNorm(a) => {
                    let av = self.value(*a);
                    let n = av.cols().max(1);
                    let mut d = Vec::with_capacity(av.len());
                    for ((row, &nrm), &gi) in av.data().chunks(n).zip(val.data()).zip(g.data()) {
                        if nrm > 0.0 {
                            d.extend(row.iter().map(|x| gi * x / nrm));
                        } else {
                            d.extend(std::iter::repeat(0.0).take(row.len()));
                        }
                    }
                    send(&mut grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).cols();
                    let nb = self.value(*b).cols();
                    let m = val.rows();
                    let mut da = Vec::with_capacity(m * na);
                    let mut db = Vec::with_capacity(m * nb);
                    for r in 0..m {
                        let row = g.row_slice(r);
                        da.extend_from_slice(&row[..na]);
                        db.extend_from_slice(&row[na..]);
                    }
                    send(&mut grads, *a, Tensor::matrix(m, na, da)?);
                    send(&mut grads, *b, Tensor::matrix(m, nb, db)?);
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = shape2(self.value(*a));
                    let len = val.cols();
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + len].copy_from_slice(g.row_slice(r));
                    }
                    send(&mut grads, *a, Tensor::matrix(m, n, d)?);
                }
                Op::GatherRows(a, index) => {
                    let (m, n) = shape2(self.value(*a));
                    let mut d = vec![0.0; m * n];
                    for (i, &r) in index.iter().enumerate() {
                        for (x, y) in d[r * n..(r + 1) * n].iter_mut().zip(g.row_slice(i)) {
                            *x += y;
                        }
                    }
                    send(&mut grads, *a, Tensor::matrix(m, n, d)?);
                }
                Op::SegmentMean(a, offsets) => {
                    let (m, n) = shape2(self.value(*a));
                    let mut d = vec![0.0; m * n];
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let inv = 1.0 / (hi - lo) as f64;
                        let gr = g.row_slice(s);
                        for i in lo..hi {
                            for (x, y) in d[i * n..(i + 1) * n].iter_mut().zip(gr) {
                                *x = y * inv;
                            }
                        }
                    }
                    send(&mut grads, *a, Tensor::matrix(m, n, d)?);
                }
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::numeric("backward", format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
