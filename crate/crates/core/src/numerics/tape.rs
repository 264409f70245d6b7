//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so slot order is already a topological order. Calling [`Tape::backward`]
//! walks the slots in reverse and returns a fresh set of adjoints; the tape is
//! rebuilt for every forward pass.

use std::fmt;

use super::matrix::{l2_normalize_rows, matmul, softmax_rows, Matrix};
use crate::error::{Error, Result};

/// Handle to a value slot on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Receives the input values, the output value and the output adjoint, and
/// returns one adjoint per input (`None` when the input gets no gradient).
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Normalize(Var, f64),
    Softmax(Var),
    Nll { probs: Var, labels: Vec<usize>, eps: f64 },
    Sum(Var),
    SelectRows(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomBackward>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Normalize(..) => "normalize",
            Op::Softmax(..) => "softmax",
            Op::Nll { .. } => "nll",
            Op::Sum(..) => "sum",
            Op::SelectRows(..) => "select_rows",
            Op::Custom(_, c) => c.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` if `var` is untracked or
    /// does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, var: Var, like: &Matrix) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A trainable input: gradients flow to it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Adds a 1 x cols bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        let tracked = self.tracked_any(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let tracked = self.tracked_any(&[a]);
        self.push(value, Op::Scale(a, k), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let tracked = self.tracked_any(&[a]);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let value = l2_normalize_rows(self.value(a), eps);
        let tracked = self.tracked_any(&[a]);
        self.push(value, Op::Normalize(a, eps), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let tracked = self.tracked_any(&[a]);
        self.push(value, Op::Softmax(a), tracked)
    }

    /// Mean over rows of `-ln(max(p[row, label], eps))`.
    pub fn nll(&mut self, probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let p = self.value(probs);
        if labels.len() != p.rows() {
            return Err(Error::shape("nll", p.shape(), (labels.len(), 1)));
        }
        if p.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= p.cols()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: p.cols(),
            });
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p.get(r, l).max(eps).ln())
            .sum();
        let value = Matrix::scalar(total / labels.len() as f64);
        let tracked = self.tracked_any(&[probs]);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                eps,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let tracked = self.tracked_any(&[a]);
        self.push(value, Op::Sum(a), tracked)
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                src.rows()
            )));
        }
        let value = src.select_rows(indices);
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), tracked))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, rule: Box<dyn CustomBackward>) -> Var {
        let tracked = self.tracked_any(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), rule), tracked)
    }

    /// Reverse pass from a scalar slot.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        for (node, a) in self.nodes.iter().zip(adj.iter_mut()) {
            if !node.tracked {
                *a = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    acc(*a, matmul(g, &bv.transpose()).expect("matmul adjoint"));
                }
                if self.nodes[b.0].tracked {
                    acc(*b, matmul(&av.transpose(), g).expect("matmul adjoint"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, "mul", |x, y| x * y).expect("same shape"));
                acc(*b, g.zip_map(av, "mul", |x, y| x * y).expect("same shape"));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for row in g.iter_rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, db);
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::Tanh(a) => {
                let d = node
                    .value
                    .zip_map(g, "tanh", |y, gy| gy * (1.0 - y * y))
                    .expect("same shape");
                acc(*a, d);
            }
            Op::Normalize(a, eps) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < *eps {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi * dot) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Nll { probs, labels, eps } => {
                let p = self.value(*probs);
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for (r, &l) in labels.iter().enumerate() {
                    let pv = p.get(r, l);
                    if pv > *eps {
                        d.set(r, l, -scale / pv);
                    }
                }
                acc(*probs, d);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, Matrix::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::SelectRows(a, indices) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = rule.backward(&values, &node.value, g);
                for (v, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        acc(*v, d);
                    }
                }
            }
        }
    }
}
