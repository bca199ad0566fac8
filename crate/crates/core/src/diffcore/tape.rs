//! Define-by-run gradient tape.
//!
//! Every primitive evaluates eagerly, appends a node holding its output and
//! the op that produced it, and hands back a [`Var`] handle. `backward` walks
//! the record in reverse, accumulating vector-Jacobian products into 64-bit
//! buffers in a fixed order, so gradients are reproducible bit-for-bit.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Columns with a smaller Euclidean norm are rejected by the cosine ops.
pub const NORM_FLOOR: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Sigmoid(NodeId),
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Abs(NodeId),
    Log(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherCols {
        x: NodeId,
        index: Arc<[usize]>,
    },
    ScatterAddCols {
        x: NodeId,
        index: Arc<[usize]>,
        cols: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    CosineMatrix {
        points: NodeId,
        centers: NodeId,
    },
    CosinePairs {
        a: NodeId,
        b: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that is held fixed; gradients stop here.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let value = eval(&op, |id| &nodes[id].value)?;
            let requires_grad = inputs(&op).iter().any(|&i| nodes[i].requires_grad);
            (value, requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn check(&self, var: Var<'_>) -> NodeId {
        debug_assert!(std::ptr::eq(self, var.tape), "var from another tape");
        var.id
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let ids = parts.iter().map(|v| self.check(*v)).collect();
        self.record(Op::ConcatRows(ids))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let ids = parts.iter().map(|v| self.check(*v)).collect();
        self.record(Op::ConcatCols(ids))
    }

    /// Re-evaluates every recorded op from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |id| &out[id])?,
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = self.check(loss);
        if nodes[root].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let entries = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { entries, shapes })
    }
}

/// Result of a reverse sweep, indexed by node.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; all-zero when the loss does not reach it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Tensor {
        match self.entries.get(id) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(&self.shapes[id]),
        }
    }

    /// Takes ownership of a gradient without cloning.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.entries[var.id].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: Var<'t>) -> NodeId {
        self.tape.check(other)
    }

    /// `weight · self + bias` with `self: [d_in, n]`, `weight: [d_out, d_in]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let w = self.same_tape(weight);
        let b = bias.map(|b| self.same_tape(b));
        self.tape.record(Op::Linear { x: self.id, w, b })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.record(Op::Sigmoid(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, other)
    }

    fn binary(self, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        let b = self.same_tape(other);
        self.tape.record(Op::Binary { kind, a: self.id, b })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Scale(self.id, factor))
    }

    pub fn shift(self, offset: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Shift(self.id, offset))
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.tape.record(Op::Abs(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.record(Op::Log(self.id))
    }

    /// Channel slice `[start, start + len)`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.record(Op::SliceRows {
            x: self.id,
            start,
            len,
        })
    }

    /// Output column `j` is input column `index[j]`.
    pub fn gather_cols(self, index: impl Into<Arc<[usize]>>) -> Result<Var<'t>> {
        self.tape.record(Op::GatherCols {
            x: self.id,
            index: index.into(),
        })
    }

    /// Output has `cols` columns; input column `j` is added into `index[j]`.
    pub fn scatter_add_cols(self, index: impl Into<Arc<[usize]>>, cols: usize) -> Result<Var<'t>> {
        self.tape.record(Op::ScatterAddCols {
            x: self.id,
            index: index.into(),
            cols,
        })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.record(Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.record(Op::Mean(self.id))
    }

    /// Reduces over channels: `[d, n] -> [1, n]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.tape.record(Op::SumRows(self.id))
    }

    /// Reduces over points: `[d, n] -> [d, 1]`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.tape.record(Op::SumCols(self.id))
    }

    /// `[c, n]` matrix of cosine similarities between `centers` columns and
    /// `self` columns.
    pub fn cosine_matrix(self, centers: Var<'t>) -> Result<Var<'t>> {
        let c = self.same_tape(centers);
        self.tape.record(Op::CosineMatrix {
            points: self.id,
            centers: c,
        })
    }

    /// `[1, n]` cosine similarity between matching columns.
    pub fn cosine_pairs(self, other: Var<'t>) -> Result<Var<'t>> {
        let b = self.same_tape(other);
        self.tape.record(Op::CosinePairs { a: self.id, b })
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Sigmoid(x)
        | Op::Scale(x, _)
        | Op::Shift(x, _)
        | Op::Abs(x)
        | Op::Log(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SumRows(x)
        | Op::SumCols(x) => vec![*x],
        Op::SliceRows { x, .. } | Op::GatherCols { x, .. } | Op::ScatterAddCols { x, .. } => {
            vec![*x]
        }
        Op::Binary { a, b, .. } | Op::CosinePairs { a, b } => vec![*a, *b],
        Op::CosineMatrix { points, centers } => vec![*points, *centers],
        Op::ConcatRows(ids) | Op::ConcatCols(ids) => ids.clone(),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let axis = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (axis(a.0, b.0), axis(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

#[inline]
fn bidx(dims: (usize, usize), i: usize, j: usize) -> usize {
    let r = if dims.0 == 1 { 0 } else { i };
    let c = if dims.1 == 1 { 0 } else { j };
    r * dims.1 + c
}

pub(crate) fn column_sq_norms(x: &Tensor) -> Vec<f64> {
    let (r, c) = x.dims();
    let d = x.data();
    let mut acc = vec![0.0; c];
    for i in 0..r {
        let row = &d[i * c..(i + 1) * c];
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v * v;
        }
    }
    acc
}

/// Column norms, failing on any column below [`NORM_FLOOR`].
pub(crate) fn column_norms(x: &Tensor) -> Result<Vec<f64>> {
    let norms: Vec<f64> = column_sq_norms(x).into_iter().map(f64::sqrt).collect();
    if let Some((column, &norm)) = norms.iter().enumerate().find(|(_, n)| !(**n >= NORM_FLOOR)) {
        return Err(Error::DegenerateVector { column, norm });
    }
    Ok(norms)
}

/// Cosine similarity matrix `[c, n]` between `centers` and `points` columns.
/// Shared by the tape op and by non-differentiable assignment so both agree
/// bitwise.
pub fn cosine_matrix_values(points: &Tensor, centers: &Tensor) -> Result<Tensor> {
    let (d, n) = points.dims();
    let (dc, c) = centers.dims();
    if d != dc {
        return Err(Error::dim(
            "cosine_matrix",
            format!("points have {d} channels, centers {dc}"),
        ));
    }
    let pn = column_norms(points)?;
    let cn = column_norms(centers)?;
    let p = points.data();
    let cd = centers.data();
    let rows = par::map_range(c, 1, |j| {
        let mut dot = vec![0.0; n];
        for i in 0..d {
            let cv = cd[i * c + j];
            let prow = &p[i * n..(i + 1) * n];
            for (acc, pv) in dot.iter_mut().zip(prow) {
                *acc += pv * cv;
            }
        }
        for (m, v) in dot.iter_mut().enumerate() {
            *v /= pn[m] * cn[j];
        }
        dot
    });
    Tensor::matrix(c, n, rows.concat())
}

fn eval<'a>(op: &Op, val: impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Linear { x, w, b } => {
            let (x, w) = (val(*x), val(*w));
            let (d_in, n) = x.dims();
            let (d_out, w_in) = w.dims();
            if w_in != d_in {
                return Err(Error::dim(
                    "linear",
                    format!("weight {:?} vs input {:?}", w.shape(), x.shape()),
                ));
            }
            let bias = match b {
                Some(b) => {
                    let b = val(*b);
                    if b.numel() != d_out {
                        return Err(Error::dim(
                            "linear",
                            format!("bias {:?} for {d_out} outputs", b.shape()),
                        ));
                    }
                    Some(b.data())
                }
                None => None,
            };
            let xd = x.data();
            let wd = w.data();
            let min_len = (1 << 14) / (d_in * n).max(1);
            let rows = par::map_range(d_out, min_len, |o| {
                let mut row = vec![0.0; n];
                for i in 0..d_in {
                    let wv = wd[o * d_in + i];
                    let xr = &xd[i * n..(i + 1) * n];
                    for (acc, xv) in row.iter_mut().zip(xr) {
                        *acc += wv * xv;
                    }
                }
                if let Some(b) = bias {
                    for acc in row.iter_mut() {
                        *acc += b[o];
                    }
                }
                row
            });
            Tensor::matrix(d_out, n, rows.concat())
        }
        Op::Sigmoid(x) => map_unary(val(*x), sigmoid),
        Op::Scale(x, f) => map_unary(val(*x), |v| v * f),
        Op::Shift(x, s) => map_unary(val(*x), |v| v + s),
        Op::Abs(x) => map_unary(val(*x), f64::abs),
        Op::Log(x) => {
            let x = val(*x);
            if let Some(pos) = x.data().iter().position(|v| !(*v > 0.0)) {
                return Err(Error::contract(format!(
                    "log of non-positive value {} at index {pos}",
                    x.data()[pos]
                )));
            }
            map_unary(x, f64::ln)
        }
        Op::Binary { kind, a, b } => {
            let (a, b) = (val(*a), val(*b));
            let (ad, bd) = (a.dims(), b.dims());
            let (r, c) = broadcast_dims("binary", ad, bd)?;
            let shape = if (r, c) == ad {
                a.shape().to_vec()
            } else if (r, c) == bd {
                b.shape().to_vec()
            } else {
                vec![r, c]
            };
            let f = match kind {
                BinaryKind::Add => |x: f64, y: f64| x + y,
                BinaryKind::Sub => |x: f64, y: f64| x - y,
                BinaryKind::Mul => |x: f64, y: f64| x * y,
                BinaryKind::Div => |x: f64, y: f64| x / y,
            };
            let data = if ad == bd {
                a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
            } else {
                let (xa, xb) = (a.data(), b.data());
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        out.push(f(xa[bidx(ad, i, j)], xb[bidx(bd, i, j)]));
                    }
                }
                out
            };
            Tensor::new(shape, data)
        }
        Op::ConcatRows(ids) => {
            if ids.is_empty() {
                return Err(Error::dim("concat_rows", "no parts"));
            }
            let cols = val(ids[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &id in ids {
                let t = val(id);
                if t.cols() != cols {
                    return Err(Error::dim(
                        "concat_rows",
                        format!("part with {} columns, expected {cols}", t.cols()),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::SliceRows { x, start, len } => {
            let x = val(*x);
            let (r, c) = x.dims();
            if *len == 0 || start + len > r {
                return Err(Error::dim(
                    "slice_rows",
                    format!("rows {start}..{} of {r}", start + len),
                ));
            }
            Tensor::matrix(*len, c, x.data()[start * c..(start + len) * c].to_vec())
        }
        Op::ConcatCols(ids) => {
            if ids.is_empty() {
                return Err(Error::dim("concat_cols", "no parts"));
            }
            let rows = val(ids[0]).rows();
            let mut total = 0;
            for &id in ids {
                let t = val(id);
                if t.rows() != rows {
                    return Err(Error::dim(
                        "concat_cols",
                        format!("part with {} rows, expected {rows}", t.rows()),
                    ));
                }
                total += t.cols();
            }
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &id in ids {
                    data.extend_from_slice(val(id).row(i));
                }
            }
            Tensor::matrix(rows, total, data)
        }
        Op::GatherCols { x, index } => {
            let x = val(*x);
            let (r, c) = x.dims();
            if index.is_empty() {
                return Err(Error::dim("gather_cols", "empty index"));
            }
            if let Some(bad) = index.iter().find(|&&k| k >= c) {
                return Err(Error::dim("gather_cols", format!("index {bad} >= {c} columns")));
            }
            let xd = x.data();
            let mut data = Vec::with_capacity(r * index.len());
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                data.extend(index.iter().map(|&k| row[k]));
            }
            Tensor::matrix(r, index.len(), data)
        }
        Op::ScatterAddCols { x, index, cols } => {
            let x = val(*x);
            let (r, c) = x.dims();
            if index.len() != c || *cols == 0 {
                return Err(Error::dim(
                    "scatter_add_cols",
                    format!("{} indices for {c} columns", index.len()),
                ));
            }
            if let Some(bad) = index.iter().find(|&&k| k >= *cols) {
                return Err(Error::dim("scatter_add_cols", format!("index {bad} >= {cols}")));
            }
            let xd = x.data();
            let mut data = vec![0.0; r * cols];
            for i in 0..r {
                let src = &xd[i * c..(i + 1) * c];
                let dst = &mut data[i * cols..(i + 1) * cols];
                for (v, &k) in src.iter().zip(index.iter()) {
                    dst[k] += v;
                }
            }
            Tensor::matrix(r, *cols, data)
        }
        Op::Sum(x) => Ok(Tensor::scalar(val(*x).data().iter().sum())),
        Op::Mean(x) => {
            let x = val(*x);
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
        }
        Op::SumRows(x) => {
            let x = val(*x);
            let (r, c) = x.dims();
            let mut acc = vec![0.0; c];
            for i in 0..r {
                for (a, v) in acc.iter_mut().zip(x.row(i)) {
                    *a += v;
                }
            }
            Tensor::matrix(1, c, acc)
        }
        Op::SumCols(x) => {
            let x = val(*x);
            let r = x.rows();
            let data = (0..r).map(|i| x.row(i).iter().sum()).collect();
            Tensor::matrix(r, 1, data)
        }
        Op::CosineMatrix { points, centers } => cosine_matrix_values(val(*points), val(*centers)),
        Op::CosinePairs { a, b } => {
            let (a, b) = (val(*a), val(*b));
            if a.dims() != b.dims() {
                return Err(Error::dim(
                    "cosine_pairs",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let (d, n) = a.dims();
            let na = column_norms(a)?;
            let nb = column_norms(b)?;
            let mut dot = vec![0.0; n];
            for i in 0..d {
                for ((acc, x), y) in dot.iter_mut().zip(a.row(i)).zip(b.row(i)) {
                    *acc += x * y;
                }
            }
            for (m, v) in dot.iter_mut().enumerate() {
                *v /= na[m] * nb[m];
            }
            Tensor::matrix(1, n, dot)
        }
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
}

/// Adds into the gradient buffer of `id` if that node participates.
fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (d_in, n) = xv.dims();
            let d_out = wv.rows();
            let xd = xv.data();
            let wd = wv.data();
            if nodes[*x].requires_grad {
                let min_len = (1 << 14) / (d_out * n).max(1);
                let rows = par::map_range(d_in, min_len, |i| {
                    let mut row = vec![0.0; n];
                    for o in 0..d_out {
                        let wo = wd[o * d_in + i];
                        for (acc, gv) in row.iter_mut().zip(&g[o * n..(o + 1) * n]) {
                            *acc += wo * gv;
                        }
                    }
                    row
                });
                accumulate(nodes, grads, *x, |buf| {
                    for (i, row) in rows.iter().enumerate() {
                        for (a, v) in buf[i * n..(i + 1) * n].iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
            }
            if nodes[*w].requires_grad {
                let min_len = (1 << 14) / (d_in * n).max(1);
                let rows = par::map_range(d_out, min_len, |o| {
                    let go = &g[o * n..(o + 1) * n];
                    (0..d_in)
                        .map(|i| {
                            go.iter()
                                .zip(&xd[i * n..(i + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                        })
                        .collect::<Vec<f64>>()
                });
                accumulate(nodes, grads, *w, |buf| {
                    for (a, v) in buf.iter_mut().zip(rows.iter().flatten()) {
                        *a += v;
                    }
                });
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |buf| {
                    for (o, a) in buf.iter_mut().enumerate() {
                        *a += g[o * n..(o + 1) * n].iter().sum::<f64>();
                    }
                });
            }
        }
        Op::Sigmoid(x) => accumulate(nodes, grads, *x, |buf| {
            for ((a, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                *a += gv * y * (1.0 - y);
            }
        }),
        Op::Scale(x, f) => accumulate(nodes, grads, *x, |buf| {
            for (a, gv) in buf.iter_mut().zip(g) {
                *a += gv * f;
            }
        }),
        Op::Shift(x, _) => accumulate(nodes, grads, *x, |buf| {
            for (a, gv) in buf.iter_mut().zip(g) {
                *a += gv;
            }
        }),
        Op::Abs(x) => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |buf| {
                for ((a, gv), v) in buf.iter_mut().zip(g).zip(xd) {
                    let s = if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *a += gv * s;
                }
            })
        }
        Op::Log(x) => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |buf| {
                for ((a, gv), v) in buf.iter_mut().zip(g).zip(xd) {
                    *a += gv / v;
                }
            })
        }
        Op::Binary { kind, a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (ad, bd) = (av.dims(), bv.dims());
            let (r, c) = out.dims();
            let (xa, xb) = (av.data(), bv.data());
            let da = |_x: f64, y: f64| match kind {
                BinaryKind::Add | BinaryKind::Sub => 1.0,
                BinaryKind::Mul => y,
                BinaryKind::Div => 1.0 / y,
            };
            let db = |x: f64, y: f64| match kind {
                BinaryKind::Add => 1.0,
                BinaryKind::Sub => -1.0,
                BinaryKind::Mul => x,
                BinaryKind::Div => -x / (y * y),
            };
            accumulate(nodes, grads, *a, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        let (ia, ib) = (bidx(ad, i, j), bidx(bd, i, j));
                        buf[ia] += g[i * c + j] * da(xa[ia], xb[ib]);
                    }
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        let (ia, ib) = (bidx(ad, i, j), bidx(bd, i, j));
                        buf[ib] += g[i * c + j] * db(xa[ia], xb[ib]);
                    }
                }
            });
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &p in ids {
                let len = nodes[p].value.numel();
                accumulate(nodes, grads, p, |buf| {
                    for (a, gv) in buf.iter_mut().zip(&g[offset..offset + len]) {
                        *a += gv;
                    }
                });
                offset += len;
            }
        }
        Op::SliceRows { x, start, .. } => {
            let c = out.cols();
            accumulate(nodes, grads, *x, |buf| {
                for (a, gv) in buf[start * c..].iter_mut().zip(g) {
                    *a += gv;
                }
            });
        }
        Op::ConcatCols(ids) => {
            let (rows, total) = out.dims();
            let mut offset = 0;
            for &p in ids {
                let pc = nodes[p].value.cols();
                accumulate(nodes, grads, p, |buf| {
                    for i in 0..rows {
                        let src = &g[i * total + offset..i * total + offset + pc];
                        for (a, gv) in buf[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                            *a += gv;
                        }
                    }
                });
                offset += pc;
            }
        }
        Op::GatherCols { x, index } => {
            let (r, c) = nodes[*x].value.dims();
            let m = index.len();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..r {
                    let dst = &mut buf[i * c..(i + 1) * c];
                    for (gv, &k) in g[i * m..(i + 1) * m].iter().zip(index.iter()) {
                        dst[k] += gv;
                    }
                }
            });
        }
        Op::ScatterAddCols { x, index, cols } => {
            let (r, c) = nodes[*x].value.dims();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..r {
                    let src = &g[i * cols..(i + 1) * cols];
                    for (a, &k) in buf[i * c..(i + 1) * c].iter_mut().zip(index.iter()) {
                        *a += src[k];
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |buf| {
            for a in buf.iter_mut() {
                *a += g[0];
            }
        }),
        Op::Mean(x) => accumulate(nodes, grads, *x, |buf| {
            let s = g[0] / buf.len() as f64;
            for a in buf.iter_mut() {
                *a += s;
            }
        }),
        Op::SumRows(x) => {
            let (r, c) = nodes[*x].value.dims();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..r {
                    for (a, gv) in buf[i * c..(i + 1) * c].iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            });
        }
        Op::SumCols(x) => {
            let (r, c) = nodes[*x].value.dims();
            accumulate(nodes, grads, *x, |buf| {
                for i in 0..r {
                    for a in buf[i * c..(i + 1) * c].iter_mut() {
                        *a += g[i];
                    }
                }
            });
        }
        Op::CosineMatrix { points, centers } => {
            let pv = &nodes[*points].value;
            let cv = &nodes[*centers].value;
            let (d, n) = pv.dims();
            let c = cv.cols();
            let pn: Vec<f64> = column_sq_norms(pv).into_iter().map(f64::sqrt).collect();
            let cn: Vec<f64> = column_sq_norms(cv).into_iter().map(f64::sqrt).collect();
            let (pd, cd, s) = (pv.data(), cv.data(), out.data());
            if nodes[*points].requires_grad {
                // d s_jm / d p_m = c_j / (|c_j||p_m|) - s_jm p_m / |p_m|^2
                let mut gp = vec![0.0; d * n];
                for j in 0..c {
                    for m in 0..n {
                        let gs = g[j * n + m];
                        if gs == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (cn[j] * pn[m]);
                        let self_term = s[j * n + m] / (pn[m] * pn[m]);
                        for i in 0..d {
                            gp[i * n + m] += gs * (cd[i * c + j] * inv - self_term * pd[i * n + m]);
                        }
                    }
                }
                accumulate(nodes, grads, *points, |buf| {
                    for (a, v) in buf.iter_mut().zip(&gp) {
                        *a += v;
                    }
                });
            }
            if nodes[*centers].requires_grad {
                let mut gc = vec![0.0; d * c];
                for j in 0..c {
                    for m in 0..n {
                        let gs = g[j * n + m];
                        if gs == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (cn[j] * pn[m]);
                        let self_term = s[j * n + m] / (cn[j] * cn[j]);
                        for i in 0..d {
                            gc[i * c + j] += gs * (pd[i * n + m] * inv - self_term * cd[i * c + j]);
                        }
                    }
                }
                accumulate(nodes, grads, *centers, |buf| {
                    for (a, v) in buf.iter_mut().zip(&gc) {
                        *a += v;
                    }
                });
            }
        }
        Op::CosinePairs { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (d, n) = av.dims();
            let na: Vec<f64> = column_sq_norms(av).into_iter().map(f64::sqrt).collect();
            let nb: Vec<f64> = column_sq_norms(bv).into_iter().map(f64::sqrt).collect();
            let (ad, bd, s) = (av.data(), bv.data(), out.data());
            accumulate(nodes, grads, *a, |buf| {
                for i in 0..d {
                    for m in 0..n {
                        let k = i * n + m;
                        buf[k] += g[m] * (bd[k] / (na[m] * nb[m]) - s[m] * ad[k] / (na[m] * na[m]));
                    }
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for i in 0..d {
                    for m in 0..n {
                        let k = i * n + m;
                        buf[k] += g[m] * (ad[k] / (na[m] * nb[m]) - s[m] * bd[k] / (nb[m] * nb[m]));
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let tape = Tape::new();
        let x = tape.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        assert_eq!(x.linear(eye, Some(zero_b)).unwrap().value().data(), x.value().data());

        let zw = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::vector(vec![7.0, -1.0]).unwrap());
        let y = x.linear(zw, Some(b)).unwrap().value();
        assert_eq!(y.data(), &[7.0, 7.0, 7.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn linear_hand_dot_product() {
        let tape = Tape::new();
        let x = tape.constant(m(2, 1, &[1.0, 2.0]));
        let w = tape.constant(m(1, 2, &[3.0, 4.0]));
        let b = tape.constant(Tensor::vector(vec![0.0]).unwrap());
        assert_eq!(x.linear(w, Some(b)).unwrap().item().unwrap(), 11.0);
    }

    #[test]
    fn linear_shape_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(x.linear(w, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.7310586).abs() < 1e-6);
        assert!((sigmoid(-1.0) - (1.0 - sigmoid(1.0))).abs() < 1e-15);
        assert!(sigmoid(-30.0) > 0.0 && sigmoid(30.0) < 1.0);
    }

    #[test]
    fn cosine_examples() {
        let sim = |p: &[f64], c: &[f64]| {
            let tape = Tape::new();
            let p = tape.constant(m(2, 1, p));
            let c = tape.constant(m(2, 1, c));
            p.cosine_matrix(c).unwrap().item().unwrap()
        };
        assert!((sim(&[0.3, -2.0], &[0.3, -2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((sim(&[1.0, 1.0], &[1.0, 0.0]) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_rejects_zero_column() {
        let tape = Tape::new();
        let p = tape.constant(m(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        let c = tape.constant(m(2, 1, &[1.0, 1.0]));
        assert!(matches!(
            p.cosine_matrix(c),
            Err(Error::DegenerateVector { column: 1, .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let t = tape.leaf(m(1, 2, &[1.0, 2.0]));
        let loss = t.sum().unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(t).data(), &[1.0, 1.0]);

        let tape = Tape::new();
        let t = tape.leaf(m(1, 2, &[1.0, 2.0]));
        let k = tape.leaf(Tensor::scalar(3.0));
        let loss = k.mul(k).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(t).data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let t = tape.leaf(m(1, 2, &[1.0, 2.0]));
        let loss = t.mul(t).unwrap().sum().unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(t).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let t = tape.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new();
        let a = tape.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.constant(m(1, 3, &[10.0, 20.0, 30.0]));
        let col = tape.constant(m(2, 1, &[100.0, 200.0]));
        let s = tape.constant(Tensor::scalar(2.0));
        assert_eq!(a.add(row).unwrap().value().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(col.add(a).unwrap().value().data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
        assert_eq!(a.mul(s).unwrap().value().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        let bad = tape.constant(m(3, 1, &[1.0, 2.0, 3.0]));
        assert!(a.add(bad).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip_values() {
        let tape = Tape::new();
        let x = tape.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = x.gather_cols(vec![2, 0, 2]).unwrap();
        assert_eq!(g.value().data(), &[3.0, 1.0, 3.0, 6.0, 4.0, 6.0]);
        let s = g.scatter_add_cols(vec![1, 0, 1], 2).unwrap();
        assert_eq!(s.value().data(), &[1.0, 6.0, 4.0, 12.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.constant(m(1, 2, &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let tape = Tape::new();
        let x = tape.leaf(m(2, 3, &[0.1, -0.4, 2.0, 1.5, 0.3, -0.7]));
        let w = tape.leaf(m(2, 2, &[0.2, -1.1, 0.9, 0.4]));
        let y = x.linear(w, None).unwrap().sigmoid().unwrap();
        let c = y.cosine_matrix(x.slice_rows(0, 2).unwrap()).unwrap();
        let _ = c.sum().unwrap().log();
        let replayed = tape.replay().unwrap();
        let nodes = tape.nodes.borrow();
        for (node, r) in nodes.iter().zip(&replayed) {
            let a: Vec<u64> = node.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = r.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }
}
