//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are computed eagerly; [`Graph::backward`] then walks the recorded nodes in
//! exact reverse order and accumulates adjoints. Trainable parameters live
//! outside the graph as [`Tensor`]s and are bound into each new graph with
//! [`Graph::param`]; after a backward pass their gradients are pulled back out
//! with [`Graph::accumulate_into`].
//!
//! The min-max games are expressed with [`Graph::grad_reverse`], an identity
//! map whose backward pass multiplies the incoming gradient by `-lambda`.

use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm in [`Graph::bce_loss`].
pub const PROB_EPS: f64 = 1e-7;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("non-empty rows")
    }

    /// An `n x 1` column vector.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values).expect("non-empty column")
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(1, n, values).expect("non-empty row")
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

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Contract(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row_slice(i));
        }
        Self::new(idx.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        matmul_nn(
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
            &mut out,
        );
        Matrix::new(self.rows, other.cols, out)
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += a (m x k) * b (k x n)`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += g (m x n) * b^T` where `b` is `k x n`; `out` is `m x k`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out += a^T * g` where `a` is `m x k` and `g` is `m x n`; `out` is `k x n`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
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

/// A trainable parameter: a value plus an accumulated gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Tensor {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    GradReverse(Var, f64),
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
}

/// Operation tape. Confined to one thread; build a fresh one per minibatch.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Clears accumulated gradients while keeping the recorded operations.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding `value` (data or a constant).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value)
    }

    /// Records a leaf that never receives a gradient. Cheaper than
    /// [`Graph::input`] for data matrices.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    /// Records a leaf initialised from a parameter's current value.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.input(t.value.clone())
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient accumulated at `v`; all zeros if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Matrix {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows, n.value.cols))
    }

    /// Adds the gradient accumulated at `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let n = &self.nodes[v.0];
        if n.value.shape() != t.shape() {
            return Err(Error::Shape {
                op: "accumulate_into",
                left: n.value.shape(),
                right: t.shape(),
            });
        }
        if let Some(g) = &n.grad {
            t.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Adds a `1 x n` bias to every row of an `m x n` input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows {
            let start = r * value.cols;
            for (o, &bb) in value.data[start..start + value.cols].iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddBias(x, b), value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(Op::Sigmoid(x), value)
    }

    /// Mean binary cross-entropy of `m x 1` probabilities against `{0,1}`
    /// targets, optionally weighted per row. Probabilities are clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`; the gradient is evaluated at the clamped
    /// value.
    pub fn bce_loss(&mut self, p: Var, targets: &Matrix, weights: Option<&Matrix>) -> Result<Var> {
        let pv = self.value(p);
        if pv.cols != 1 || targets.shape() != pv.shape() {
            return Err(Error::Shape {
                op: "bce_loss",
                left: pv.shape(),
                right: targets.shape(),
            });
        }
        if let Some(w) = weights {
            if w.shape() != pv.shape() {
                return Err(Error::Shape {
                    op: "bce_loss",
                    left: pv.shape(),
                    right: w.shape(),
                });
            }
        }
        let m = pv.rows as f64;
        let mut total = 0.0;
        for i in 0..pv.rows {
            let pi = pv.data[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let yi = targets.data[i];
            let wi = weights.map_or(1.0, |w| w.data[i]);
            total += wi * (-yi * pi.ln() - (1.0 - yi) * (1.0 - pi).ln());
        }
        let value = Matrix::filled(1, 1, total / m);
        Ok(self.push(
            Op::Bce {
                p,
                targets: targets.data.clone(),
                weights: weights.map(|w| w.data.clone()),
            },
            value,
        ))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Contract(format!(
                "gradient reversal coefficient must be finite and nonnegative, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        Ok(self.push(Op::GradReverse(x, lambda), value))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Matrix::filled(1, 1, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "add",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        self.push(Op::Scale(x, c), value)
    }

    /// Propagates `d loss / d node` to every node recorded before `loss`,
    /// adding into each node's accumulated gradient. Calling it twice
    /// without [`Graph::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    if !matches!(self.nodes[a.0].op, Op::Constant) {
                        let ga = slot(&mut adj, *a, av);
                        matmul_nt(&g.data, &bv.data, m, n, k, &mut ga.data);
                    }
                    let gb = slot(&mut adj, *b, bv);
                    matmul_tn(&av.data, &g.data, m, k, n, &mut gb.data);
                }
                Op::AddBias(x, b) => {
                    let xv = &self.nodes[x.0].value;
                    slot(&mut adj, *x, xv).add_assign(&g);
                    let gb = slot(&mut adj, *b, &self.nodes[b.0].value);
                    for r in 0..g.rows {
                        for (o, &gv) in gb.data.iter_mut().zip(g.row_slice(r)) {
                            *o += gv;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = slot(&mut adj, *x, xv);
                    for ((o, &gv), &xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        if xi > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let s = &node.value;
                    let gx = slot(&mut adj, *x, &self.nodes[x.0].value);
                    for ((o, &gv), &si) in gx.data.iter_mut().zip(&g.data).zip(&s.data) {
                        *o += gv * si * (1.0 - si);
                    }
                }
                Op::Bce {
                    p,
                    targets,
                    weights,
                } => {
                    let pv = &self.nodes[p.0].value;
                    let upstream = g.data[0];
                    let m = pv.rows as f64;
                    let gp = slot(&mut adj, *p, pv);
                    for i in 0..pv.rows {
                        let pi = pv.data[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
                        let yi = targets[i];
                        let wi = weights.as_ref().map_or(1.0, |w| w[i]);
                        gp.data[i] += upstream * wi * (-yi / pi + (1.0 - yi) / (1.0 - pi)) / m;
                    }
                }
                Op::GradReverse(x, lambda) => {
                    // A zero coefficient cuts the path entirely.
                    if *lambda != 0.0 {
                        let gx = slot(&mut adj, *x, &self.nodes[x.0].value);
                        for (o, &gv) in gx.data.iter_mut().zip(&g.data) {
                            *o += -lambda * gv;
                        }
                    }
                }
                Op::Sum(x) => {
                    let gx = slot(&mut adj, *x, &self.nodes[x.0].value);
                    let gv = g.data[0];
                    gx.data.iter_mut().for_each(|o| *o += gv);
                }
                Op::Add(a, b) => {
                    slot(&mut adj, *a, &self.nodes[a.0].value).add_assign(&g);
                    slot(&mut adj, *b, &self.nodes[b.0].value).add_assign(&g);
                }
                Op::Scale(x, c) => {
                    let gx = slot(&mut adj, *x, &self.nodes[x.0].value);
                    for (o, &gv) in gx.data.iter_mut().zip(&g.data) {
                        *o += c * gv;
                    }
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<'a>(adj: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(like.rows, like.cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for i in 0..at.data().len() {
            let mut plus = at.clone();
            plus.data_mut()[i] += h;
            let mut minus = at.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.input(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let b = g.input(Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]));

        let a = g.input(Matrix::row(vec![1.0, 2.0]));
        let b = g.input(Matrix::column(vec![3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.scalar(c), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Matrix::zeros(2, 3));
        let b = g.input(Matrix::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = Matrix::row(vec![1.0, 2.0]);
        let b0 = Matrix::column(vec![3.0, 4.0]);
        let mut g = Graph::new();
        let a = g.input(a0.clone());
        let b = g.input(b0.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let fd = central_diff(|m| m.matmul(&b0).unwrap().data().iter().sum(), &a0, 1e-5);
        assert_eq!(g.grad(a), Matrix::row(vec![3.0, 4.0]));
        for (x, y) in fd.data().iter().zip(g.grad(a).data()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn add_bias_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let z = g.input(Matrix::row(vec![0.0, 0.0]));
        let y = g.add_bias(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let x = g.input(Matrix::row(vec![1.0, 2.0]));
        let b = g.input(Matrix::row(vec![10.0, 20.0]));
        let y = g.add_bias(x, b).unwrap();
        assert_eq!(g.value(y), &Matrix::row(vec![11.0, 22.0]));

        let mut g = Graph::new();
        let x0 = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0], [1.0, 1.0]]);
        let b0 = Matrix::row(vec![0.3, -0.7]);
        let x = g.input(x0.clone());
        let b = g.input(b0.clone());
        let y = g.add_bias(x, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let fd = central_diff(
            |bm| {
                x0.data().iter().sum::<f64>() + 3.0 * bm.data().iter().sum::<f64>()
            },
            &b0,
            1e-5,
        );
        for (x, y) in fd.data().iter().zip(g.grad(b).data()) {
            assert!((x - 3.0).abs() < 1e-8 && (y - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_leaf_gets_no_gradient() {
        let x0 = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let w0 = Matrix::from_rows(&[[0.5], [-1.0]]);
        let grads = |constant: bool| {
            let mut g = Graph::new();
            let x = if constant {
                g.constant(x0.clone())
            } else {
                g.input(x0.clone())
            };
            let w = g.input(w0.clone());
            let y = g.matmul(x, w).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            (g.grad(x), g.grad(w))
        };
        let (gx, gw) = grads(true);
        assert_eq!(gx, Matrix::zeros(2, 2));
        assert_eq!(gw, grads(false).1);
    }

    #[test]
    fn add_bias_rejects_wrong_width() {
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(2, 2));
        let b = g.input(Matrix::zeros(1, 3));
        assert!(g.add_bias(x, b).is_err());
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut g = Graph::new();
        let x = g.input(Matrix::row(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &Matrix::row(vec![0.0, 0.0, 2.0]));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Matrix::row(vec![0.0, 0.0, 1.0]));

        let mut g = Graph::new();
        let x = g.input(Matrix::row(vec![0.5, 3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(Matrix::row(vec![0.0, 40.0, -40.0]));
        let y = g.sigmoid(x);
        let v = g.value(y);
        assert_eq!(v.get(0, 0), 0.5);
        assert!((v.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(v.get(0, 2) > 0.0 && v.get(0, 2).is_finite());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).get(0, 0), 0.25);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let p = g.input(Matrix::column(vec![0.5]));
        let l = g.bce_loss(p, &Matrix::column(vec![1.0]), None).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.input(Matrix::column(vec![0.5, 0.5]));
        let l = g
            .bce_loss(
                p,
                &Matrix::column(vec![1.0, 0.0]),
                Some(&Matrix::column(vec![2.0, 0.0])),
            )
            .unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_is_finite_at_saturation() {
        let mut g = Graph::new();
        let p = g.input(Matrix::column(vec![0.0, 1.0]));
        let l = g.bce_loss(p, &Matrix::column(vec![1.0, 0.0]), None).unwrap();
        assert!(g.scalar(l).is_finite());
        g.backward(l).unwrap();
        assert!(g.grad(p).is_finite());
    }

    #[test]
    fn bce_shape_errors() {
        let mut g = Graph::new();
        let p = g.input(Matrix::column(vec![0.5, 0.5]));
        assert!(g.bce_loss(p, &Matrix::column(vec![1.0]), None).is_err());
        assert!(g
            .bce_loss(p, &Matrix::column(vec![1.0, 0.0]), Some(&Matrix::column(vec![1.0])))
            .is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let p0 = Matrix::column(vec![0.1, 0.35, 0.5, 0.62, 0.9, 0.2, 0.77, 0.45]);
        let y = Matrix::column(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let w = Matrix::column(vec![1.0, 2.0, 0.5, 1.5, 1.0, 0.3, 3.0, 1.0]);
        let mut g = Graph::new();
        let p = g.input(p0.clone());
        let l = g.bce_loss(p, &y, Some(&w)).unwrap();
        g.backward(l).unwrap();
        let f = |m: &Matrix| {
            let mut h = Graph::new();
            let p = h.input(m.clone());
            let l = h.bce_loss(p, &y, Some(&w)).unwrap();
            h.scalar(l)
        };
        let fd = central_diff(f, &p0, 1e-5);
        for (a, n) in g.grad(p).data().iter().zip(fd.data()) {
            assert!((a - n).abs() / a.abs().max(1e-12) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negates_backward() {
        let mut g = Graph::new();
        let x = g.input(Matrix::row(vec![1.0, 2.0]));
        let r = g.grad_reverse(x, 0.5).unwrap();
        assert_eq!(g.value(r), g.value(x));

        // Reference: the same graph without reversal.
        let upstream = Matrix::column(vec![0.7, -1.3]);
        let run = |reverse: bool| {
            let mut g = Graph::new();
            let x = g.input(Matrix::row(vec![1.0, 2.0]));
            let xr = if reverse { g.grad_reverse(x, 1.0).unwrap() } else { x };
            let w = g.input(upstream.clone());
            let y = g.matmul(xr, w).unwrap();
            g.backward(y).unwrap();
            g.grad(x)
        };
        let plain = run(false);
        let reversed = run(true);
        for (a, b) in plain.data().iter().zip(reversed.data()) {
            assert_eq!(*b, -a);
        }
    }

    #[test]
    fn grad_reverse_zero_lambda_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Matrix::row(vec![1.0, 2.0]));
        let r = g.grad_reverse(x, 0.0).unwrap();
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Matrix::zeros(1, 2));
        assert!(g.grad_reverse(x, -1.0).is_err());
    }

    #[test]
    fn backward_identity_and_accumulation() {
        let mut g = Graph::new();
        let p = g.input(Matrix::filled(1, 1, 3.0));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).get(0, 0), 1.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).get(0, 0), 2.0);
        g.zero_grad();
        assert_eq!(g.grad(p).get(0, 0), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let p = g.input(Matrix::zeros(2, 1));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn accumulate_into_parameter() {
        let mut t = Tensor::new(Matrix::row(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let v = g.param(&t);
        let s = g.sum(v);
        g.backward(s).unwrap();
        g.accumulate_into(v, &mut t).unwrap();
        g.accumulate_into(v, &mut t).unwrap();
        assert_eq!(t.grad, Matrix::row(vec![2.0, 2.0]));
        t.zero_grad();
        assert_eq!(t.grad, Matrix::zeros(1, 2));
    }

    #[test]
    fn matrix_construction_checks() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(
            m.select_rows(&[2, 0]).unwrap(),
            Matrix::from_rows(&[[5.0, 6.0], [1.0, 2.0]])
        );
        assert!(m.select_rows(&[3]).is_err());
    }
}
