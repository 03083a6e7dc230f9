use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Neg,
    /// Subgradient 0 at the origin.
    Relu,
    /// Gradient passes where `lo <= x <= hi`.
    Clamp { lo: f64, hi: f64 },
    Sqrt,
    Cos,
    Sin,
    Acos,
    /// `x * c` for a constant `c`.
    Scale(f64),
    /// `x + c` for a constant `c`.
    Shift(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient is routed to the first maximal element.
    Max,
}

/// An operation defined outside this module that supplies its own
/// vector-Jacobian product.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the size of that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce {
        op: ReduceOp,
        input: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    LogSumExp {
        input: Var,
        axis: Option<usize>,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    AddRow(Var, Var),
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(outer, len, inner)` strides for reducing `shape` along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => Vec::new(),
        Some(a) => {
            let mut s = shape.to_vec();
            s.remove(a);
            s
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies a value into a new constant, cutting it from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "{op} expects a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Element-wise binary op. Shapes must be equal, or one side must hold a
    /// single element which is then applied to every element of the other.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        if op == BinaryOp::Div && tb.data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::domain("elementwise", what.to_string()))
            }
        };
        match op {
            UnaryOp::Log => check(ta.data().iter().all(|&x| x > 0.0), "log of non-positive value")?,
            UnaryOp::Sqrt => check(ta.data().iter().all(|&x| x >= 0.0), "sqrt of negative value")?,
            UnaryOp::Acos => check(
                ta.data().iter().all(|&x| (-1.0..=1.0).contains(&x)),
                "acos argument outside [-1, 1]",
            )?,
            UnaryOp::Clamp { lo, hi } => check(lo <= hi, "clamp with lo > hi")?,
            _ => {}
        }
        let f = |x: f64| match op {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Neg => -x,
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Clamp { lo, hi } => x.clamp(lo, hi),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Acos => x.acos(),
            UnaryOp::Scale(c) => x * c,
            UnaryOp::Shift(c) => x + c,
        };
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryOp::Clamp { lo, hi }, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Cos, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sin, a)
    }

    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Acos, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Shift(c), a)
    }

    /// Reduces along `axis` (dropping it) or over every element.
    pub fn reduce(&mut self, a: Var, op: ReduceOp, axis: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let (outer, len, inner) = match axis {
            Some(ax) if ax >= shape.len() => {
                return Err(Error::Dimension {
                    op: "reduce",
                    lhs: shape,
                    rhs: vec![ax],
                })
            }
            Some(ax) => split_axis(&shape, ax),
            None => (1, ta.numel(), 1),
        };
        if len == 0 && op == ReduceOp::Max {
            return Err(Error::Shape("max over an empty axis".into()));
        }
        let d = ta.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * len + k) * inner + i];
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += at(k);
                        }
                        out[slot] = if op == ReduceOp::Mean { s / len as f64 } else { s };
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for k in 1..len {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = best;
                    }
                }
            }
        }
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Reduce {
                op,
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceOp::Sum, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceOp::Mean, axis)
    }

    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceOp::Max, axis)
    }

    /// Max-shifted `log(sum(exp(x)))` along `axis` (dropping it).
    pub fn logsumexp(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let (outer, len, inner) = match axis {
            Some(ax) if ax >= shape.len() => {
                return Err(Error::Dimension {
                    op: "logsumexp",
                    lhs: shape,
                    rhs: vec![ax],
                })
            }
            Some(ax) => split_axis(&shape, ax),
            None => (1, ta.numel(), 1),
        };
        if len == 0 {
            return Err(Error::Shape("logsumexp over an empty axis".into()));
        }
        let d = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * len + k) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if m.is_infinite() {
                    m
                } else {
                    let s: f64 = (0..len).map(|k| (at(k) - m).exp()).sum();
                    m + s.ln()
                };
            }
        }
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSumExp { input: a, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Joins two tensors whose shapes agree everywhere except `axis`.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(k, (x, y))| k == axis || x == y);
        if !compatible {
            return Err(Error::Dimension {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, la, inner) = split_axis(&sa, axis);
        let lb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b, axis }, rg))
    }

    /// Multiplies row `i` of matrix `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "scale_rows")?;
        if self.value(factors).numel() != r {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(factors).to_vec(),
            });
        }
        let (da, dv) = (self.value(a).data(), self.value(factors).data());
        let out: Vec<f64> = (0..r * c).map(|k| da[k] * dv[k / c]).collect();
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(a) || self.rg(factors);
        Ok(self.push(value, Op::ScaleRows(a, factors), rg))
    }

    /// Multiplies column `j` of matrix `a` by `factors[j]`.
    pub fn scale_cols(&mut self, a: Var, factors: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "scale_cols")?;
        if self.value(factors).numel() != c {
            return Err(Error::Dimension {
                op: "scale_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(factors).to_vec(),
            });
        }
        let (da, dv) = (self.value(a).data(), self.value(factors).data());
        let out: Vec<f64> = (0..r * c).map(|k| da[k] * dv[k % c]).collect();
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(a) || self.rg(factors);
        Ok(self.push(value, Op::ScaleCols(a, factors), rg))
    }

    /// Adds the vector `row` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "add_row")?;
        if self.value(row).numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let (da, dv) = (self.value(a).data(), self.value(row).data());
        let out: Vec<f64> = (0..r * c).map(|k| da[k] + dv[k % c]).collect();
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Records an externally computed `output` produced from `inputs` by `op`.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Fills in `grad` for every tensor that requires one and lies upstream
    /// of `loss`. Gradients from earlier passes are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(Some(g));
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (da, db) = (ta.data(), tb.data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = da[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let n = g.len();
                // local partials (d out / d a, d out / d b) at element i
                let partial = |i: usize| -> (f64, f64) {
                    let (x, y) = (pick(da, i), pick(db, i));
                    match op {
                        BinaryOp::Add => (1.0, 1.0),
                        BinaryOp::Sub => (1.0, -1.0),
                        BinaryOp::Mul => (y, x),
                        BinaryOp::Div => (1.0 / y, -x / (y * y)),
                    }
                };
                for (side, v, len) in [(0, *a, da.len()), (1, *b, db.len())] {
                    if !self.rg(v) {
                        continue;
                    }
                    let mut out = vec![0.0; len];
                    for i in 0..n {
                        let p = partial(i);
                        let p = if side == 0 { p.0 } else { p.1 };
                        let slot = if len == 1 { 0 } else { i };
                        out[slot] += g[i] * p;
                    }
                    self.accumulate(grads, v, out);
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        gi * match *op {
                            UnaryOp::Exp => y[i],
                            UnaryOp::Log => 1.0 / x[i],
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Clamp { lo, hi } => {
                                if x[i] >= lo && x[i] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sqrt => 0.5 / y[i],
                            UnaryOp::Cos => -x[i].sin(),
                            UnaryOp::Sin => x[i].cos(),
                            UnaryOp::Acos => -1.0 / (1.0 - x[i] * x[i]).sqrt(),
                            UnaryOp::Scale(c) => c,
                            UnaryOp::Shift(_) => 1.0,
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Reduce {
                op,
                input,
                axis,
                argmax,
            } => {
                let ta = self.value(*input);
                let (outer, len, inner) = match axis {
                    Some(ax) => split_axis(ta.shape(), *ax),
                    None => (1, ta.numel(), 1),
                };
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        let gi = g[slot];
                        match op {
                            ReduceOp::Sum | ReduceOp::Mean => {
                                let w = if *op == ReduceOp::Mean { gi / len as f64 } else { gi };
                                for k in 0..len {
                                    ga[(o * len + k) * inner + i] = w;
                                }
                            }
                            ReduceOp::Max => {
                                ga[(o * len + argmax[slot]) * inner + i] = gi;
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::LogSumExp { input, axis } => {
                let ta = self.value(*input);
                let (outer, len, inner) = match axis {
                    Some(ax) => split_axis(ta.shape(), *ax),
                    None => (1, ta.numel(), 1),
                };
                let d = ta.data();
                let y = node.value.data();
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        for k in 0..len {
                            let at = (o * len + k) * inner + i;
                            ga[at] = g[slot] * (d[at] - y[slot]).exp();
                        }
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (outer, la, inner) = split_axis(sa, *axis);
                let lb = sb[*axis];
                let (na, nb) = (la * inner, lb * inner);
                let mut ga = Vec::with_capacity(outer * na);
                let mut gb = Vec::with_capacity(outer * nb);
                for o in 0..outer {
                    let base = o * (na + nb);
                    ga.extend_from_slice(&g[base..base + na]);
                    gb.extend_from_slice(&g[base + na..base + na + nb]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ScaleRows(a, v) => {
                let c = self.value(*a).cols();
                let (da, dv) = (self.value(*a).data(), self.value(*v).data());
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(k, &gk)| gk * dv[k / c]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*v) {
                    let mut gv = vec![0.0; dv.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        gv[k / c] += gk * da[k];
                    }
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::ScaleCols(a, v) => {
                let c = self.value(*a).cols();
                let (da, dv) = (self.value(*a).data(), self.value(*v).data());
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(k, &gk)| gk * dv[k % c]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*v) {
                    let mut gv = vec![0.0; dv.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        gv[k % c] += gk * da[k];
                    }
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::AddRow(a, v) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*v) {
                    let mut gv = vec![0.0; c];
                    for (k, &gk) in g.iter().enumerate() {
                        gv[k % c] += gk;
                    }
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::Custom { op, inputs } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = op.backward(&tensors, &node.value, g);
                debug_assert_eq!(parts.len(), inputs.len(), "{} backward arity", op.name());
                for (&v, part) in inputs.iter().zip(parts) {
                    self.accumulate(grads, v, part);
                }
            }
        }
    }
}
