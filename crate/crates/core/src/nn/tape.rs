//! Reverse-mode automatic differentiation over a dynamic trace.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the trace in reverse and
//! accumulates vector-Jacobian products. Leaves created with
//! [`Tape::constant`] never receive gradients, and nodes that do not depend
//! on any parameter are skipped during the backward sweep.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, Tensor};
use super::{NnError, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumCols(usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    SegmentSum(usize, Vec<usize>),
    SegmentLogSumExp(usize, usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
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

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
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

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(NnError::ForeignVar)
        }
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if out.shape() != (1, 1) {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                left: out.shape(),
                right: (1, 1),
            });
        }
        if !out.is_finite() {
            return Err(NnError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self as *const Tape,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, gemm(g, false, val(*b), true)?)?;
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, gemm(val(*a), true, g, false)?)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.map(|x| -x))?;
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), "mul", |x, y| x * y)?)?;
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), "mul", |x, y| x * y)?)?;
            }
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, g.clone())?;
            if nodes[*row].requires_grad {
                let mut rg = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, x) in rg.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *acc += x;
                    }
                }
                accumulate(grads, nodes, *row, rg)?;
            }
        }
        Op::MulCol(a, col) => {
            let av = val(*a);
            let cv = val(*col);
            if nodes[*a].requires_grad {
                let mut ga = g.clone();
                let cols = ga.cols();
                for (r, chunk) in ga.data_mut().chunks_mut(cols.max(1)).enumerate() {
                    let w = cv.data()[r];
                    chunk.iter_mut().for_each(|x| *x *= w);
                }
                accumulate(grads, nodes, *a, ga)?;
            }
            if nodes[*col].requires_grad {
                let mut gc = Tensor::zeros(av.rows(), 1);
                for r in 0..av.rows() {
                    gc.data_mut()[r] = av.row_slice(r).iter().zip(g.row_slice(r)).map(|(x, y)| x * y).sum();
                }
                accumulate(grads, nodes, *col, gc)?;
            }
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.map(|x| x * k))?,
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone())?,
        Op::Tanh(a) => {
            let ga = g.zip_map(&node.value, "tanh", |x, y| x * (1.0 - y * y))?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Relu(a) => {
            let ga = g.zip_map(val(*a), "relu", |x, v| if v > 0.0 { x } else { 0.0 })?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Exp(a) => {
            let ga = g.zip_map(&node.value, "exp", |x, y| x * y)?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Ln(a) => {
            let ga = g.zip_map(val(*a), "ln", |x, v| x / v)?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Square(a) => {
            let ga = g.zip_map(val(*a), "square", |x, v| 2.0 * x * v)?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Softplus(a) => {
            let ga = g.zip_map(val(*a), "softplus", |x, v| x * sigmoid(v))?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Clamp(a, lo, hi) => {
            let ga = g.zip_map(val(*a), "clamp", |x, v| if v >= *lo && v <= *hi { x } else { 0.0 })?;
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::SumAll(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.data()[0]))?;
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for (i, chunk) in ga.data_mut().chunks_mut(c.max(1)).enumerate() {
                chunk.iter_mut().for_each(|x| *x = g.data()[i]);
            }
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::GatherRows(a, idx) => {
            if nodes[*a].requires_grad {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (out_row, &src) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[src * c..(src + 1) * c];
                    for (d, x) in dst.iter_mut().zip(g.row_slice(out_row)) {
                        *d += x;
                    }
                }
                accumulate(grads, nodes, *a, ga)?;
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let rows = g.rows();
            if nodes[*a].requires_grad {
                let mut ga = Vec::with_capacity(rows * ca);
                for r in 0..rows {
                    ga.extend_from_slice(&g.row_slice(r)[..ca]);
                }
                accumulate(grads, nodes, *a, Tensor::from_vec(rows, ca, ga)?)?;
            }
            if nodes[*b].requires_grad {
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    gb.extend_from_slice(&g.row_slice(r)[ca..]);
                }
                accumulate(grads, nodes, *b, Tensor::from_vec(rows, cb, gb)?)?;
            }
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).shape();
            let width = g.cols();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                ga.data_mut()[i * c + start..i * c + start + width].copy_from_slice(g.row_slice(i));
            }
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::SegmentSum(a, lengths) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            let mut row = 0;
            for (seg, &len) in lengths.iter().enumerate() {
                for _ in 0..len {
                    ga.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.row_slice(seg));
                    row += 1;
                }
            }
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::SegmentLogSumExp(a, group) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), 1);
            for (seg, chunk) in av.data().chunks(*group).enumerate() {
                let lse = node.value.data()[seg];
                for (k, &x) in chunk.iter().enumerate() {
                    ga.data_mut()[seg * group + k] = g.data()[seg] * (x - lse).exp();
                }
            }
            accumulate(grads, nodes, *a, ga)?;
        }
        Op::Reshape(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::from_vec(r, c, g.data().to_vec())?)?;
        }
    }
    Ok(())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    tape: *const Tape,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Parameters the loss does
    /// not depend on get an all-zero gradient.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor> {
        if !std::ptr::eq(self.tape, var.tape) {
            return Err(NnError::ForeignVar);
        }
        let g = match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        };
        if !g.is_finite() {
            return Err(NnError::NonFinite("gradient"));
        }
        Ok(g)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1 x 1` var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.binary(rhs, Op::MatMul(self.id, rhs.id), v))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().zip_map(&rhs.value(), "add", |a, b| a + b)?;
        Ok(self.binary(rhs, Op::Add(self.id, rhs.id), v))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().zip_map(&rhs.value(), "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, Op::Sub(self.id, rhs.id), v))
    }

    /// Element-wise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().zip_map(&rhs.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, Op::Mul(self.id, rhs.id), v))
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let v = {
            let a = self.value();
            let b = row.value();
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(NnError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            let mut out = a.clone();
            let c = a.cols();
            for chunk in out.data_mut().chunks_mut(c.max(1)) {
                for (x, y) in chunk.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            out
        };
        Ok(self.binary(row, Op::AddRow(self.id, row.id), v))
    }

    /// Scales row `r` by `col[r]` for an `r x 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(col)?;
        let v = {
            let a = self.value();
            let w = col.value();
            if w.cols() != 1 || w.rows() != a.rows() {
                return Err(NnError::ShapeMismatch {
                    op: "mul_col",
                    left: a.shape(),
                    right: w.shape(),
                });
            }
            let mut out = a.clone();
            let c = a.cols();
            for (r, chunk) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
                chunk.iter_mut().for_each(|x| *x *= w.data()[r]);
            }
            out
        };
        Ok(self.binary(col, Op::MulCol(self.id, col.id), v))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x * k);
        self.unary(Op::Scale(self.id, k), v)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x + k);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), v)
    }

    /// `max(0, x)`; the gradient at exactly 0 is taken as 0.
    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(Op::Ln(self.id), v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.unary(Op::Softplus(self.id), v)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(Op::Clamp(self.id, lo, hi), v)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::SumAll(self.id), v)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = {
            let a = self.value();
            let data = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
            Tensor::from_vec(a.rows(), 1, data).expect("row sums")
        };
        self.unary(Op::SumCols(self.id), v)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= a.rows() {
                    return Err(NnError::InvalidArgument(format!(
                        "gather index {i} out of range for {} rows",
                        a.rows()
                    )));
                }
                data.extend_from_slice(a.row_slice(i));
            }
            Tensor::from_vec(idx.len(), c, data)?
        };
        Ok(self.unary(Op::GatherRows(self.id, idx.to_vec()), v))
    }

    pub fn concat_cols(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = {
            let a = self.value();
            let b = rhs.value();
            if a.rows() != b.rows() {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row_slice(r));
                data.extend_from_slice(b.row_slice(r));
            }
            Tensor::from_vec(a.rows(), a.cols() + b.cols(), data)?
        };
        Ok(self.binary(rhs, Op::ConcatCols(self.id, rhs.id), v))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if start > end || end > a.cols() {
                return Err(NnError::InvalidArgument(format!(
                    "column slice {start}..{end} out of range for {} columns",
                    a.cols()
                )));
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[start..end]);
            }
            Tensor::from_vec(a.rows(), end - start, data)?
        };
        Ok(self.unary(Op::SliceCols(self.id, start), v))
    }

    /// Sums consecutive runs of rows; `lengths` must cover every row.
    pub fn segment_sum(self, lengths: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if lengths.iter().sum::<usize>() != a.rows() {
                return Err(NnError::InvalidArgument(format!(
                    "segment lengths cover {} rows, tensor has {}",
                    lengths.iter().sum::<usize>(),
                    a.rows()
                )));
            }
            let c = a.cols();
            let mut out = Tensor::zeros(lengths.len(), c);
            let mut row = 0;
            for (seg, &len) in lengths.iter().enumerate() {
                for _ in 0..len {
                    for (acc, x) in out.data_mut()[seg * c..(seg + 1) * c].iter_mut().zip(a.row_slice(row)) {
                        *acc += x;
                    }
                    row += 1;
                }
            }
            out
        };
        Ok(self.unary(Op::SegmentSum(self.id, lengths.to_vec()), v))
    }

    /// Stable `ln Σ exp` over consecutive groups of an `N x 1` column.
    pub fn segment_logsumexp(self, group: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if a.cols() != 1 || group == 0 || a.rows() % group != 0 {
                return Err(NnError::InvalidArgument(format!(
                    "segment_logsumexp needs an N x 1 column with N divisible by {group}, got {:?}",
                    a.shape()
                )));
            }
            let data: Vec<f64> = a
                .data()
                .chunks(group)
                .map(|chunk| {
                    let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + chunk.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::from_vec(data.len(), 1, data)?
        };
        Ok(self.unary(Op::SegmentLogSumExp(self.id, group), v))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            Tensor::from_vec(rows, cols, a.data().to_vec())?
        };
        Ok(self.unary(Op::Reshape(self.id), v))
    }
}
