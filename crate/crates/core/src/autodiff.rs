//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Nodes are appended in creation order, which is already a topological
//! order, so [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use farebench::autodiff::{Tape, Tensor2};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor2::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
//! ```
//!
//! Besides the usual elementwise and matrix primitives the closure contains
//! three index primitives ([`Tape::gather`], [`Tape::scatter_add_rows`],
//! [`Tape::segment_softmax`]). Sparse neighbour attention and the
//! period-fold reshapes are written with these instead of dense masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NumericFailure { op: &'static str },
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type AdResult<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> AdResult<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Shape {
                op: "tensor",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(1, 1, v)
    }

    /// `n x 1` column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> AdResult<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AutodiffError::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn matmul_raw(&self, other: &Tensor2) -> Tensor2 {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        if m == 1 {
            for (o, row) in out.iter_mut().zip(self.data.chunks_exact(k.max(1))) {
                for (a, b) in row.iter().zip(&other.data) {
                    *o += a * b;
                }
            }
            return Tensor2 {
                rows: n,
                cols: 1,
                data: out,
            };
        }
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor2 {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// `self · otherᵀ`, summed in the same order as `matmul_raw` on an
    /// explicit transpose.
    fn matmul_bt(&self, other: &Tensor2) -> Tensor2 {
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for p in 0..m {
                let brow = &other.data[p * k..(p + 1) * k];
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out[i * m + p] = acc;
            }
        }
        Tensor2 {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// `selfᵀ · other`, summed over rows in ascending order.
    fn matmul_at(&self, other: &Tensor2) -> Tensor2 {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let grow = &other.data[i * m..(i + 1) * m];
            for (p, &a) in arow.iter().enumerate() {
                for (o, g) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                    *o += a * g;
                }
            }
        }
        Tensor2 {
            rows: k,
            cols: m,
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor2) -> AdResult<Tensor2> {
        if self.cols != other.rows {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.matmul_raw(other))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor2) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Dropout(Var, Vec<f64>),
    Mse(Var, Var),
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    grad: Option<Tensor2>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor2, b: &Tensor2) -> AdResult<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
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

    /// Leaf node; parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor2, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor2) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor2> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Takes the accumulated gradient, or zeros when `v` did not participate.
    pub fn take_grad(&mut self, v: Var) -> Tensor2 {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .unwrap_or_else(|| Tensor2::zeros(node.value.rows, node.value.cols))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor2, rec: Op, parents: &[Var]) -> AdResult<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NumericFailure { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op: if requires_grad { rec } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("add", x, y)?;
        let v = x.zip(y, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("sub", x, y)?;
        let v = x.zip(y, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("mul", x, y)?;
        let v = x.zip(y, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies row `i` of `x` by `c[i]`, where `c` is a column.
    pub fn scale_rows(&mut self, x: Var, c: Var) -> AdResult<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols != 1 || cv.rows != xv.rows {
            return Err(AutodiffError::Shape {
                op: "scale_rows",
                left: xv.shape(),
                right: cv.shape(),
            });
        }
        let cols = xv.cols;
        let mut data = xv.data.clone();
        for (row, &k) in data.chunks_mut(cols.max(1)).zip(&cv.data) {
            for v in row {
                *v *= k;
            }
        }
        let v = Tensor2 {
            rows: xv.rows,
            cols,
            data,
        };
        self.push("scale_rows", v, Op::ScaleRows(x, c), &[x, c])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn broadcast_add_row(&mut self, x: Var, bias: Var) -> AdResult<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(AutodiffError::Shape {
                op: "broadcast_add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut v = xv.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += bv.data[c];
            }
        }
        self.push("broadcast_add_row", v, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> AdResult<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> AdResult<Var> {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push("leaky_relu", v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> AdResult<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> AdResult<Var> {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> AdResult<Var> {
        let xv = self.value(x);
        let mut v = xv.clone();
        for r in 0..v.rows {
            softmax_in_place(&mut v.data[r * v.cols..(r + 1) * v.cols]);
        }
        self.push("softmax_rows", v, Op::SoftmaxRows(x), &[x])
    }

    /// Inverted dropout. In train mode each entry is zeroed with probability
    /// `p` (seeded Bernoulli) and survivors are scaled by `1/(1-p)`; in eval
    /// mode this is the identity and records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train: bool) -> AdResult<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                detail: format!("p = {p} not in [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut r = rng::rng_from(seed);
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if r.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = Tensor2 {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        self.push("dropout", v, Op::Dropout(x, mask), &[x])
    }

    /// Mean squared error over all elements, `1 x 1`.
    pub fn mse(&mut self, pred: Var, target: Var) -> AdResult<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        check_same("mse", p, t)?;
        if p.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mse",
                detail: "empty input".into(),
            });
        }
        let s: f64 = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let v = Tensor2::scalar(s / p.len() as f64);
        self.push("mse", v, Op::Mse(pred, target), &[pred, target])
    }

    pub fn mean(&mut self, x: Var) -> AdResult<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                detail: "empty input".into(),
            });
        }
        let v = Tensor2::scalar(xv.data.iter().sum::<f64>() / xv.len() as f64);
        self.push("mean", v, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> AdResult<Var> {
        let v = Tensor2::scalar(self.value(x).data.iter().sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> AdResult<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> AdResult<Var> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows;
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            cols += v.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Tensor2 { rows, cols, data };
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Flat index select: `out.data[k] = x.data[idx[k]]`, or 0 for `None`.
    /// Covers row selection, transposition, reshapes and zero padding.
    pub fn gather(&mut self, x: Var, idx: Vec<Option<usize>>, rows: usize, cols: usize) -> AdResult<Var> {
        let xv = self.value(x);
        if idx.len() != rows * cols {
            return Err(AutodiffError::Shape {
                op: "gather",
                left: (rows, cols),
                right: (idx.len(), 1),
            });
        }
        let n = xv.len();
        let mut data = Vec::with_capacity(idx.len());
        for i in &idx {
            match i {
                Some(j) if *j < n => data.push(xv.data[*j]),
                Some(j) => {
                    return Err(AutodiffError::InvalidArgument {
                        op: "gather",
                        detail: format!("index {j} out of bounds for {n} elements"),
                    })
                }
                None => data.push(0.0),
            }
        }
        let v = Tensor2 { rows, cols, data };
        self.push("gather", v, Op::Gather(x, idx), &[x])
    }

    /// Selects whole rows of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> AdResult<Var> {
        let xv = self.value(x);
        let cols = xv.cols;
        if let Some(&r) = rows.iter().find(|&&r| r >= xv.rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row {r} out of bounds for {} rows", xv.rows),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&xv.data[r * cols..(r + 1) * cols]);
        }
        let v = Tensor2 {
            rows: rows.len(),
            cols,
            data,
        };
        self.push("gather_rows", v, Op::GatherRows(x, rows.to_vec()), &[x])
    }

    /// Segment sum: row `i` of `x` is added into output row `target[i]`.
    pub fn scatter_add_rows(&mut self, x: Var, target: Vec<usize>, out_rows: usize) -> AdResult<Var> {
        let xv = self.value(x);
        if target.len() != xv.rows {
            return Err(AutodiffError::Shape {
                op: "scatter_add_rows",
                left: xv.shape(),
                right: (target.len(), 1),
            });
        }
        let cols = xv.cols;
        let mut out = Tensor2::zeros(out_rows, cols);
        for (i, &t) in target.iter().enumerate() {
            if t >= out_rows {
                return Err(AutodiffError::InvalidArgument {
                    op: "scatter_add_rows",
                    detail: format!("target row {t} >= {out_rows}"),
                });
            }
            for c in 0..cols {
                out.data[t * cols + c] += xv.data[i * cols + c];
            }
        }
        self.push("scatter_add_rows", out, Op::ScatterAddRows(x, target), &[x])
    }

    /// Softmax over contiguous segments of an `n x 1` column. `offsets` has
    /// one entry per segment start plus a final `n`.
    pub fn segment_softmax(&mut self, x: Var, offsets: Vec<usize>) -> AdResult<Var> {
        let xv = self.value(x);
        let valid = xv.cols == 1
            && offsets.first() == Some(&0)
            && offsets.last() == Some(&xv.rows)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !valid {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_softmax",
                detail: format!("bad offsets for a {}x{} input", xv.rows, xv.cols),
            });
        }
        let mut v = xv.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut v.data[w[0]..w[1]]);
        }
        self.push("segment_softmax", v, Op::SegmentSoftmax(x, offsets), &[x])
    }

    /// Backpropagates from a `1 x 1` loss. Gradients accumulate into every
    /// node that requires them; call [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> AdResult<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(AutodiffError::NotScalar {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        let mut adj: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor2::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor2, adj: &mut [Option<Tensor2>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Tensor2| {
            if !needs(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip(val(*b), |x, y| x * y));
                acc(*b, g.zip(val(*a), |x, y| x * y));
            }
            Op::ScaleRows(x, c) => {
                let (xv, cv) = (val(*x), val(*c));
                let cols = xv.cols;
                if needs(*x) {
                    let mut gx = g.clone();
                    for (row, &k) in gx.data.chunks_mut(cols.max(1)).zip(&cv.data) {
                        for v in row {
                            *v *= k;
                        }
                    }
                    acc(*x, gx);
                }
                if needs(*c) {
                    let mut gc = Tensor2::zeros(cv.rows, 1);
                    for (i, out) in gc.data.iter_mut().enumerate() {
                        let (gr, xr) = (&g.data[i * cols..(i + 1) * cols], &xv.data[i * cols..(i + 1) * cols]);
                        *out = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    }
                    acc(*c, gc);
                }
            }
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_bt(val(*b)));
                }
                if needs(*b) {
                    acc(*b, val(*a).matmul_at(g));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                let mut gb = Tensor2::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gb.data[c] += g.data[r * g.cols + c];
                    }
                }
                acc(*bias, gb);
            }
            Op::Relu(x) => acc(*x, g.zip(val(*x), |d, a| if a > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(x, s) => {
                acc(*x, g.zip(val(*x), |d, a| if a > 0.0 { d } else { s * d }))
            }
            Op::Tanh(x) => acc(*x, g.zip(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, g.zip(&node.value, |d, y| d * y * (1.0 - y))),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor2::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s = r * y.cols..(r + 1) * y.cols;
                    softmax_backward(&y.data[s.clone()], &g.data[s.clone()], &mut gx.data[s]);
                }
                acc(*x, gx);
            }
            Op::Dropout(x, mask) => {
                let mut gx = g.clone();
                for (d, m) in gx.data.iter_mut().zip(mask) {
                    *d *= m;
                }
                acc(*x, gx);
            }
            Op::Mse(p, t) => {
                let n = val(*p).len() as f64;
                let scale = 2.0 * g.data[0] / n;
                let d = val(*p).zip(val(*t), |a, b| scale * (a - b));
                if needs(*t) {
                    acc(*t, d.map(|x| -x));
                }
                acc(*p, d);
            }
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor2::filled(xv.rows, xv.cols, g.data[0] / xv.len() as f64));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Tensor2::filled(xv.rows, xv.cols, g.data[0]));
            }
            Op::Scale(x, c) => acc(*x, g.map(|d| d * c)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let mut gp = Tensor2::zeros(pv.rows, pv.cols);
                    for r in 0..pv.rows {
                        let src = &g.data[r * g.cols + offset..r * g.cols + offset + pv.cols];
                        gp.data[r * pv.cols..(r + 1) * pv.cols].copy_from_slice(src);
                    }
                    offset += pv.cols;
                    acc(*p, gp);
                }
            }
            Op::Gather(x, idx) => {
                let xv = val(*x);
                let mut gx = Tensor2::zeros(xv.rows, xv.cols);
                for (k, i) in idx.iter().enumerate() {
                    if let Some(j) = i {
                        gx.data[*j] += g.data[k];
                    }
                }
                acc(*x, gx);
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let cols = xv.cols;
                let mut gx = Tensor2::zeros(xv.rows, cols);
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data[k * cols..(k + 1) * cols];
                    for (d, s) in gx.data[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*x, gx);
            }
            Op::ScatterAddRows(x, target) => {
                let xv = val(*x);
                let cols = xv.cols;
                let mut gx = Tensor2::zeros(xv.rows, cols);
                for (r, &t) in target.iter().enumerate() {
                    gx.data[r * cols..(r + 1) * cols].copy_from_slice(&g.data[t * cols..(t + 1) * cols]);
                }
                acc(*x, gx);
            }
            Op::SegmentSoftmax(x, offsets) => {
                let y = &node.value;
                let mut gx = Tensor2::zeros(y.rows, 1);
                for w in offsets.windows(2) {
                    let s = w[0]..w[1];
                    softmax_backward(&y.data[s.clone()], &g.data[s.clone()], &mut gx.data[s]);
                }
                acc(*x, gx);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let Some(max) = row.iter().copied().reduce(f64::max) else { return };
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yi), gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

/// Location and size of the largest gradient disagreement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradOffender {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst: Option<GradOffender>,
}

/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Scalar loss of `f` at `params`, each inserted as a trainable leaf.
pub fn eval_loss<F>(f: &F, params: &[Tensor2]) -> AdResult<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

pub fn analytic_gradients<F>(f: &F, params: &[Tensor2]) -> AdResult<Vec<Tensor2>>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let (mut tape, vars, loss) = eval_loss(f, params)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|v| tape.take_grad(*v)).collect())
}

/// Central differences `(f(x+h) - f(x-h)) / 2h`, one element at a time.
pub fn numeric_gradients<F>(f: &F, params: &[Tensor2], step: f64) -> AdResult<Vec<Tensor2>>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor2::zeros(params[p].rows, params[p].cols);
        for e in 0..params[p].len() {
            let orig = work[p].data[e];
            work[p].data[e] = orig + step;
            let (t, _, l) = eval_loss(f, &work)?;
            let up = t.value(l).data[0];
            work[p].data[e] = orig - step;
            let (t, _, l) = eval_loss(f, &work)?;
            let down = t.value(l).data[0];
            work[p].data[e] = orig;
            g.data[e] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &[Tensor2], numeric: &[Tensor2], tolerance: f64) -> GradCheckReport {
    let mut worst: Option<GradOffender> = None;
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (e, (&x, &y)) in a.data.iter().zip(&n.data).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(GRAD_CHECK_FLOOR);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if worst.is_none_or(|w| rel > w.rel_error) {
                worst = Some(GradOffender {
                    param: p,
                    element: e,
                    analytic: x,
                    numeric: y,
                    rel_error: rel,
                });
            }
        }
    }
    let max_rel_error = worst.map_or(0.0, |w| w.rel_error);
    GradCheckReport {
        passed: max_rel_error < tolerance,
        max_rel_error,
        worst,
    }
}

/// Compares backpropagated and central-difference gradients of a scalar
/// function of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor2], step: f64, tolerance: f64) -> AdResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    let numeric = numeric_gradients(&f, params, step)?;
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}
