use std::collections::BTreeMap;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stable identifier of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(pub u32);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Tape of whole-matrix operations.
///
/// Every operation appends one node holding its output value; [`Graph::backward`]
/// replays the nodes in reverse and accumulates adjoints into registered
/// parameters. Nodes that do not depend on any parameter are never visited.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamKey, Var>,
    matmul_fault: Option<f64>,
}

/// Gradients keyed by parameter. Every parameter registered on the graph has
/// an entry; unreached ones are exactly zero.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.grads.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: multiplies the left-operand adjoint of every matmul by
    /// `factor`, so gradient checks have a negative control.
    #[doc(hidden)]
    pub fn inject_matmul_fault(&mut self, factor: f64) {
        self.matmul_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable tensor. Registering the same key twice returns
    /// the original handle so shared weights accumulate one gradient.
    pub fn param(&mut self, key: ParamKey, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Shape {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let mut value = self.value(a).clone();
        let cols = sa.1;
        let r = self.value(row).as_slice().to_vec();
        for chunk in value.as_mut_slice().chunks_mut(cols.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if let Some(i) = m.as_slice().iter().position(|&x| x.is_nan() || x <= 0.0) {
            let cols = m.cols().max(1);
            return Err(Error::Domain {
                op: "log",
                row: i / cols,
                col: i % cols,
                value: m.as_slice()[i],
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries. The mean of an empty matrix is a contract error.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::contract("mean of an empty matrix"));
        }
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// `x W + b` for a `1 x out` bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Relu gate and clamp-activity pattern of every recorded op. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => out.extend(self.value(a).as_slice().iter().map(|&x| x > 0.0)),
                Op::Clamp(a, lo, hi) => {
                    out.extend(self.value(a).as_slice().iter().map(|&x| x >= lo && x <= hi))
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.value(loss).item()?;
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match node.op {
                Op::Leaf => {}
                Op::Param => adj[i] = Some(g),
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let bv = self.value(b);
                        let mut ga = Matrix::zeros(g.rows(), bv.rows());
                        gemm(&g, false, bv, true, &mut ga, 0.0);
                        if let Some(f) = self.matmul_fault {
                            ga = ga.map(|x| x * f);
                        }
                        accumulate(&mut adj, a, ga);
                    }
                    if self.rg(b) {
                        let av = self.value(a);
                        let mut gb = Matrix::zeros(av.cols(), g.cols());
                        gemm(av, true, &g, false, &mut gb, 0.0);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut adj, b, g.clone());
                    }
                    if self.rg(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut adj, b, g.map(|x| -x));
                    }
                    if self.rg(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(row) {
                        let cols = g.cols();
                        let mut gr = vec![0.0; cols];
                        for chunk in g.as_slice().chunks(cols.max(1)) {
                            for (acc, v) in gr.iter_mut().zip(chunk) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut adj, row, Matrix::new(1, cols, gr)?);
                    }
                    if self.rg(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut adj, a, g.zip_map(self.value(b), |x, y| x * y));
                    }
                    if self.rg(b) {
                        accumulate(&mut adj, b, g.zip_map(self.value(a), |x, y| x * y));
                    }
                }
                Op::Scale(a, f) => accumulate(&mut adj, a, g.map(|x| x * f)),
                Op::AddScalar(a) => accumulate(&mut adj, a, g),
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut adj, a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut adj, a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(a), |x, y| 2.0 * x * y);
                    accumulate(&mut adj, a, d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(a), |x, y| x / y);
                    accumulate(&mut adj, a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip_map(
                        self.value(a),
                        |x, y| if y >= lo && y <= hi { x } else { 0.0 },
                    );
                    accumulate(&mut adj, a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    accumulate(&mut adj, a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(a);
                    let s = g.as_slice()[0] / (r * c) as f64;
                    accumulate(&mut adj, a, Matrix::filled(r, c, s));
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (&key, &v) in &self.params {
            let g = adj.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            });
            grads.insert(key, g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
