//! Wengert-list tape over dense rank-2 `f64` arrays.
//!
//! Every operation appends a node holding its forward value and a record of
//! its inputs. Inputs always precede their consumers, so a single reverse
//! sweep over the node list computes all adjoints.
//!
//! Binary elementwise operations broadcast NumPy-style along any axis whose
//! extent is 1 on one side, which covers bias rows, per-column scalings and
//! scalar broadcasting.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{AutodiffError, Result};

pub type Matrix = Array2<f64>;
pub type Shape = (usize, usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Collapse rows, producing a `1 x cols` result.
    Rows,
    /// Collapse columns, producing a `rows x 1` result.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    BroadcastTo(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    MeanAxis(Var, Reduce),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    /// Whether any trainable leaf feeds this node.
    grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::BroadcastTo(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::ClampMin(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a)
            | Op::MeanAxis(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _) => vec![*a],
        }
    }
}

/// Append-only record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Adjoint of `var`; zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix {
        match self.adjoints.get(var.id).and_then(|a| a.as_ref()) {
            Some(a) => a.clone(),
            None => Matrix::zeros(self.shapes[var.id]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints.get(var.id).and_then(|a| a.as_ref())
    }
}

fn broadcast_dim(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let pick = |x: usize, y: usize| -> Option<usize> {
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
    match (pick(a.0, b.0), pick(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(AutodiffError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

/// Sum `grad` down to `shape` along broadcast axes.
fn unbroadcast(grad: &Matrix, shape: Shape) -> Matrix {
    let mut g = grad.clone();
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.id].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.id].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let grad = op.inputs().iter().any(|v| self.nodes[v.id].grad);
        self.push_node(value, op, grad)
    }

    fn push_node(&mut self, value: Matrix, op: Op, grad: bool) -> Var {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, grad });
        Var { id, rows, cols }
    }

    /// Record a differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Record an input that never receives an adjoint. Work that only feeds
    /// such inputs is skipped during the reverse sweep.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Matrix::from_elem((1, 1), value))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    /// Whether `var` depends on any differentiable leaf.
    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Matrix, Shape)> {
        let shape = broadcast_dim(op, a.shape(), b.shape())?;
        let av = self.nodes[a.id]
            .value
            .broadcast(shape)
            .expect("checked broadcast");
        let bv = self.nodes[b.id]
            .value
            .broadcast(shape)
            .expect("checked broadcast");
        let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y));
        Ok((out, shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// Elementwise minimum with broadcasting.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, _) = self.binary("minimum", a, b, f64::min)?;
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let v = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.nodes[a.id].value.mapv(f);
        self.push(v, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    /// Add a constant.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    /// Broadcast a `1 x 1`, `1 x c` or `r x 1` node to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let out = broadcast_dim("broadcast_to", a.shape(), shape)?;
        if out != shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: a.shape(),
                rhs: shape,
            });
        }
        let v = self.nodes[a.id]
            .value
            .broadcast(shape)
            .expect("checked broadcast")
            .to_owned();
        Ok(self.push(v, Op::BroadcastTo(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// `max(a, floor)`; the gradient is cut where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.nodes[a.id].value.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let v = Matrix::from_elem((1, 1), self.nodes[a.id].value.sum() / n);
        self.push(v, Op::Mean(a))
    }

    pub fn sum_axis(&mut self, a: Var, reduce: Reduce) -> Var {
        let x = &self.nodes[a.id].value;
        let v = match reduce {
            Reduce::Rows => x.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Reduce::Cols => x.sum_axis(Axis(1)).insert_axis(Axis(1)),
        };
        self.push(v, Op::SumAxis(a))
    }

    pub fn mean_axis(&mut self, a: Var, reduce: Reduce) -> Var {
        let x = &self.nodes[a.id].value;
        let v = match reduce {
            Reduce::Rows => x.sum_axis(Axis(0)).insert_axis(Axis(0)) / a.rows as f64,
            Reduce::Cols => x.sum_axis(Axis(1)).insert_axis(Axis(1)) / a.cols as f64,
        };
        self.push(v, Op::MeanAxis(a, reduce))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.nodes[a.id].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[a.id].value);
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        for p in parts {
            if p.rows != first.rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.id].value.view())
            .collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked concat");
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        for p in parts {
            if p.cols != first.cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.id].value.view())
            .collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("checked concat");
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > a.cols {
            return Err(AutodiffError::Invalid {
                op: "slice_cols",
                msg: format!(
                    "range {start}..{end} out of bounds for shape {:?}",
                    a.shape()
                ),
            });
        }
        let v = self.nodes[a.id].value.slice(s![.., start..end]).to_owned();
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > a.rows {
            return Err(AutodiffError::Invalid {
                op: "slice_rows",
                msg: format!(
                    "range {start}..{end} out of bounds for shape {:?}",
                    a.shape()
                ),
            });
        }
        let v = self.nodes[a.id].value.slice(s![start..end, ..]).to_owned();
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    /// Select rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows) {
            return Err(AutodiffError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of bounds for shape {:?}", a.shape()),
            });
        }
        if indices.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "gather_rows",
                msg: "no indices".into(),
            });
        }
        let v = self.nodes[a.id].value.select(Axis(0), indices);
        Ok(self.push(v, Op::GatherRows(a, indices.to_vec())))
    }

    /// Smallest distance from any recorded non-smooth operation's input to its
    /// kink. Finite differences with a step at least this large may straddle a
    /// kink.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            let d = match &node.op {
                Op::Relu(a) => self.nodes[a.id]
                    .value
                    .fold(f64::INFINITY, |m, &x| m.min(x.abs())),
                Op::ClampMin(a, lo) => self.nodes[a.id]
                    .value
                    .fold(f64::INFINITY, |m, &x| m.min((x - lo).abs())),
                Op::Clamp(a, lo, hi) => self.nodes[a.id].value.fold(f64::INFINITY, |m, &x| {
                    m.min((x - lo).abs()).min((x - hi).abs())
                }),
                Op::Minimum(a, b) => {
                    let shape = node.value.dim();
                    let av = self.nodes[a.id]
                        .value
                        .broadcast(shape)
                        .expect("recorded shape");
                    let bv = self.nodes[b.id]
                        .value
                        .broadcast(shape)
                        .expect("recorded shape");
                    Zip::from(&av)
                        .and(&bv)
                        .fold(f64::INFINITY, |m, &x, &y| m.min((x - y).abs()))
                }
                _ => f64::INFINITY,
            };
            best = best.min(d);
        }
        best
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss.shape()));
        }
        let n = loss.id + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.id] = Some(Matrix::ones((1, 1)));

        let needs: Vec<bool> = self.nodes.iter().map(|n| n.grad).collect();
        for id in (0..n).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |v: Var| &self.nodes[v.id].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, &needs, *a, unbroadcast(&g, a.shape()));
                    accumulate(&mut adj, &needs, *b, unbroadcast(&g, b.shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, &needs, *a, unbroadcast(&g, a.shape()));
                    accumulate(&mut adj, &needs, *b, unbroadcast(&(-&g), b.shape()));
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    let av = val(*a).broadcast(shape).expect("recorded shape");
                    let bv = val(*b).broadcast(shape).expect("recorded shape");
                    accumulate(&mut adj, &needs, *a, unbroadcast(&(&g * &bv), a.shape()));
                    accumulate(&mut adj, &needs, *b, unbroadcast(&(&g * &av), b.shape()));
                }
                Op::Div(a, b) => {
                    let shape = g.dim();
                    let av = val(*a).broadcast(shape).expect("recorded shape");
                    let bv = val(*b).broadcast(shape).expect("recorded shape");
                    let ga = Zip::from(&g).and(&bv).map_collect(|&gi, &y| gi / y);
                    let gb = Zip::from(&g)
                        .and(&av)
                        .and(&bv)
                        .map_collect(|&gi, &x, &y| -gi * x / (y * y));
                    accumulate(&mut adj, &needs, *a, unbroadcast(&ga, a.shape()));
                    accumulate(&mut adj, &needs, *b, unbroadcast(&gb, b.shape()));
                }
                Op::Minimum(a, b) => {
                    let shape = g.dim();
                    let av = val(*a).broadcast(shape).expect("recorded shape");
                    let bv = val(*b).broadcast(shape).expect("recorded shape");
                    let ga =
                        Zip::from(&g)
                            .and(&av)
                            .and(&bv)
                            .map_collect(|&gi, &x, &y| if x <= y { gi } else { 0.0 });
                    let gb =
                        Zip::from(&g)
                            .and(&av)
                            .and(&bv)
                            .map_collect(|&gi, &x, &y| if x <= y { 0.0 } else { gi });
                    accumulate(&mut adj, &needs, *a, unbroadcast(&ga, a.shape()));
                    accumulate(&mut adj, &needs, *b, unbroadcast(&gb, b.shape()));
                }
                Op::MatMul(a, b) => {
                    if needs[a.id] {
                        accumulate(&mut adj, &needs, *a, g.dot(&val(*b).t()));
                    }
                    if needs[b.id] {
                        accumulate(&mut adj, &needs, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj, &needs, *a, g.t().to_owned()),
                Op::Neg(a) => accumulate(&mut adj, &needs, *a, -&g),
                Op::Scale(a, k) => accumulate(&mut adj, &needs, *a, &g * *k),
                Op::Offset(a) => accumulate(&mut adj, &needs, *a, g.clone()),
                Op::BroadcastTo(a) => accumulate(&mut adj, &needs, *a, unbroadcast(&g, a.shape())),
                Op::Exp(a) => accumulate(&mut adj, &needs, *a, &g * &node.value),
                Op::Log(a) => accumulate(&mut adj, &needs, *a, &g / val(*a)),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Softplus(a) => {
                    let d = val(*a).mapv(sigmoid);
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Square(a) => accumulate(&mut adj, &needs, *a, &g * &(val(*a) * 2.0)),
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|y| 0.5 / y);
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Sin(a) => accumulate(&mut adj, &needs, *a, &g * &val(*a).mapv(f64::cos)),
                Op::Cos(a) => accumulate(&mut adj, &needs, *a, &g * &val(*a).mapv(|x| -x.sin())),
                Op::ClampMin(a, lo) => {
                    let d = val(*a).mapv(|x| if x > *lo { 1.0 } else { 0.0 });
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Clamp(a, lo, hi) => {
                    let d = val(*a).mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    accumulate(&mut adj, &needs, *a, &g * &d)
                }
                Op::Sum(a) => accumulate(
                    &mut adj,
                    &needs,
                    *a,
                    Matrix::from_elem(a.shape(), g[[0, 0]]),
                ),
                Op::Mean(a) => {
                    let n = (a.rows * a.cols) as f64;
                    accumulate(
                        &mut adj,
                        &needs,
                        *a,
                        Matrix::from_elem(a.shape(), g[[0, 0]] / n),
                    )
                }
                Op::SumAxis(a) => {
                    let full = g.broadcast(a.shape()).expect("reduced shape").to_owned();
                    accumulate(&mut adj, &needs, *a, full)
                }
                Op::MeanAxis(a, reduce) => {
                    let n = match reduce {
                        Reduce::Rows => a.rows,
                        Reduce::Cols => a.cols,
                    } as f64;
                    let full = g.broadcast(a.shape()).expect("reduced shape").to_owned() / n;
                    accumulate(&mut adj, &needs, *a, full)
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = y * &(&g - &dot);
                    accumulate(&mut adj, &needs, *a, d)
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &g - &(&p * &total);
                    accumulate(&mut adj, &needs, *a, d)
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let piece = g.slice(s![.., at..at + p.cols]).to_owned();
                        at += p.cols;
                        accumulate(&mut adj, &needs, *p, piece);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let piece = g.slice(s![at..at + p.rows, ..]).to_owned();
                        at += p.rows;
                        accumulate(&mut adj, &needs, *p, piece);
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut full = Matrix::zeros(a.shape());
                    full.slice_mut(s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    accumulate(&mut adj, &needs, *a, full)
                }
                Op::SliceRows(a, start) => {
                    let mut full = Matrix::zeros(a.shape());
                    full.slice_mut(s![*start..*start + g.nrows(), ..])
                        .assign(&g);
                    accumulate(&mut adj, &needs, *a, full)
                }
                Op::GatherRows(a, indices) => {
                    let mut full = Matrix::zeros(a.shape());
                    for (out_row, &src) in indices.iter().enumerate() {
                        let mut dst = full.row_mut(src);
                        dst += &g.row(out_row);
                    }
                    accumulate(&mut adj, &needs, *a, full)
                }
            }
            adj[id] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], needs: &[bool], var: Var, contribution: Matrix) {
    debug_assert_eq!(contribution.dim(), var.shape());
    if !needs[var.id] {
        return;
    }
    match &mut adj[var.id] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}
