//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints for
//! every node that depends on a leaf created with [`Graph::param`].
//!
//! Values are 2-D. Batched code keeps one point per row, so row-wise
//! reductions (`sum_cols`, `norm_rows`, `logsumexp_rows`) produce `n×1`
//! columns and the adjoint of row `i` only ever touches row `i` of the
//! inputs. That property is what lets callers split a batch into chunks
//! without changing per-row results.

use std::cell::RefCell;

use super::mat::Mat;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n×d + 1×d`, the row broadcast over every row.
    AddRow(Var, Var),
    /// `n×d ⊙ 1×d`.
    MulRow(Var, Var),
    /// `n×d ⊙ n×1`.
    MulCol(Var, Var),
    /// `n×d · s` with `s` a `1×1` node.
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    SumAll(Var),
    SumCols(Var),
    NormRows(Var),
    LogSumExpRows(Var),
    SliceCols(Var, usize),
    Concat2(Var, Var),
    Transpose(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Recording tape. Methods take `&self` so expressions can nest.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads {
    adj: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adj[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of its shape if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.adj[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f);
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn derive(&self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let t = inputs.iter().any(|&v| self.tracked(v));
        self.push(value, op, t)
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.0].value.zip_map(&n[b.0].value, |x, y| x + y)
        };
        self.derive(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.0].value.zip_map(&n[b.0].value, |x, y| x - y)
        };
        self.derive(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.0].value.zip_map(&n[b.0].value, |x, y| x * y)
        };
        self.derive(v, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let (m, r) = (&n[a.0].value, &n[row.0].value);
            assert_eq!(r.shape(), (1, m.cols()), "add_row expects a 1x{} row", m.cols());
            let mut out = m.clone();
            for i in 0..out.rows() {
                for (o, x) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                    *o += x;
                }
            }
            out
        };
        self.derive(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let (m, r) = (&n[a.0].value, &n[row.0].value);
            assert_eq!(r.shape(), (1, m.cols()), "mul_row expects a 1x{} row", m.cols());
            let mut out = m.clone();
            for i in 0..out.rows() {
                for (o, x) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                    *o *= x;
                }
            }
            out
        };
        self.derive(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let (m, c) = (&n[a.0].value, &n[col.0].value);
            assert_eq!(c.shape(), (m.rows(), 1), "mul_col expects a {}x1 column", m.rows());
            let mut out = m.clone();
            for i in 0..out.rows() {
                let s = c.as_slice()[i];
                out.row_mut(i).iter_mut().for_each(|o| *o *= s);
            }
            out
        };
        self.derive(v, Op::MulCol(a, col), &[a, col])
    }

    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[s.0].value.shape(), (1, 1), "mul_scalar expects a 1x1 factor");
            let k = n[s.0].value.as_slice()[0];
            n[a.0].value.map(|x| x * k)
        };
        self.derive(v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.0].value.matmul(&n[b.0].value)
        };
        self.derive(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of every entry, as `1×1`.
    pub fn sum(&self, a: Var) -> Var {
        let v = Mat::scalar(self.nodes.borrow()[a.0].value.sum());
        self.derive(v, Op::SumAll(a), &[a])
    }

    /// Mean of every entry, as `1×1`.
    pub fn mean(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c).max(1) as f64)
    }

    /// Per-row sums, `n×d → n×1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let m = &n[a.0].value;
            Mat::column_vector((0..m.rows()).map(|i| m.row(i).iter().sum()).collect())
        };
        self.derive(v, Op::SumCols(a), &[a])
    }

    /// Per-row Euclidean norms, `n×d → n×1`. The adjoint at a zero row is zero.
    pub fn norm_rows(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let m = &n[a.0].value;
            Mat::column_vector(
                (0..m.rows()).map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
            )
        };
        self.derive(v, Op::NormRows(a), &[a])
    }

    /// Per-row log-sum-exp, `n×d → n×1`, shifted by the row maximum.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let m = &n[a.0].value;
            Mat::column_vector((0..m.rows()).map(|i| logsumexp(m.row(i))).collect())
        };
        self.derive(v, Op::LogSumExpRows(a), &[a])
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes.borrow()[a.0].value.slice_cols(start, len);
        self.derive(v, Op::SliceCols(a, start), &[a])
    }

    /// Horizontal concatenation of two nodes with equal row counts.
    pub fn concat(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            Mat::hcat(&[&n[a.0].value, &n[b.0].value])
        };
        self.derive(v, Op::Concat2(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.transpose();
        self.derive(v, Op::Transpose(a), &[a])
    }

    pub fn concat_all(&self, parts: &[Var]) -> Var {
        let mut it = parts.iter().copied();
        let first = it.next().expect("concat_all needs at least one part");
        it.fold(first, |acc, p| self.concat(acc, p))
    }

    /// Reverse sweep seeded with ones over `out` (so a non-scalar output is
    /// differentiated through the sum of its entries).
    pub fn backward(&self, out: Var) -> Grads {
        let (r, c) = self.shape(out);
        self.backward_seeded(out, Mat::filled(r, c, 1.0))
    }

    pub fn backward_seeded(&self, out: Var, seed: Mat) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[out.0].value.shape(), "seed shape mismatch");
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut adj: Vec<Option<Mat>> = vec![None; nodes.len()];
        adj[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &nodes[idx];
            // Leaves keep their adjoints; interior ones are consumed.
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, m: Mat| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut adj[v.0] {
                    Some(a) => a.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            };
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(a, g.zip_map(val(b), |x, y| x * y));
                    acc(b, g.zip_map(val(a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    acc(a, g.clone());
                    acc(row, Mat::row_vector(g.column_sums()));
                }
                Op::MulRow(a, row) => {
                    let r = val(row);
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(r.as_slice()) {
                            *o *= x;
                        }
                    }
                    acc(a, ga);
                    acc(row, Mat::row_vector(g.zip_map(val(a), |x, y| x * y).column_sums()));
                }
                Op::MulCol(a, col) => {
                    let c = val(col);
                    let av = val(a);
                    let mut ga = g.clone();
                    let mut gc = Mat::zeros(c.rows(), 1);
                    for i in 0..ga.rows() {
                        let s = c.as_slice()[i];
                        gc.as_mut_slice()[i] = g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                        ga.row_mut(i).iter_mut().for_each(|o| *o *= s);
                    }
                    acc(a, ga);
                    acc(col, gc);
                }
                Op::MulScalar(a, s) => {
                    let k = val(s).as_slice()[0];
                    acc(a, g.map(|x| x * k));
                    let ds: f64 = g.as_slice().iter().zip(val(a).as_slice()).map(|(x, y)| x * y).sum();
                    acc(s, Mat::scalar(ds));
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].tracked {
                        acc(a, g.matmul_t(val(b)));
                    }
                    if nodes[b.0].tracked {
                        acc(b, val(a).t_matmul(&g));
                    }
                }
                Op::Scale(a, k) => acc(a, g.map(|x| x * k)),
                Op::Offset(a) => acc(a, g),
                Op::Tanh(a) => acc(a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t))),
                Op::Relu(a) => acc(a, g.zip_map(val(a), |x, y| if y > 0.0 { x } else { 0.0 })),
                Op::Softplus(a) => acc(a, g.zip_map(val(a), |x, y| x * sigmoid(y))),
                Op::Sigmoid(a) => acc(a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
                Op::Exp(a) => acc(a, g.zip_map(&node.value, |x, e| x * e)),
                Op::Log(a) => acc(a, g.zip_map(val(a), |x, y| x / y)),
                Op::Sin(a) => acc(a, g.zip_map(val(a), |x, y| x * y.cos())),
                Op::Cos(a) => acc(a, g.zip_map(val(a), |x, y| -x * y.sin())),
                Op::Square(a) => acc(a, g.zip_map(val(a), |x, y| 2.0 * x * y)),
                Op::SumAll(a) => {
                    let (r, c) = shapes[a.0];
                    acc(a, Mat::filled(r, c, g.as_slice()[0]));
                }
                Op::SumCols(a) => {
                    let (r, c) = shapes[a.0];
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        let gi = g.as_slice()[i];
                        ga.row_mut(i).iter_mut().for_each(|o| *o = gi);
                    }
                    acc(a, ga);
                }
                Op::NormRows(a) => {
                    let av = val(a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let nrm = node.value.as_slice()[i];
                        if nrm > 0.0 {
                            let s = g.as_slice()[i] / nrm;
                            for (o, x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                                *o = s * x;
                            }
                        }
                    }
                    acc(a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let av = val(a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let lse = node.value.as_slice()[i];
                        let gi = g.as_slice()[i];
                        for (o, x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = gi * (x - lse).exp();
                        }
                    }
                    acc(a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = shapes[a.0];
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(a, ga);
                }
                Op::Concat2(a, b) => {
                    let ca = shapes[a.0].1;
                    acc(a, g.slice_cols(0, ca));
                    acc(b, g.slice_cols(ca, g.cols() - ca));
                }
                Op::Transpose(a) => acc(a, g.transpose()),
            }
        }
        Grads { adj, shapes }
    }
}

impl Mat {
    fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols()];
        for r in self.iter_rows() {
            for (acc, x) in s.iter_mut().zip(r) {
                *acc += x;
            }
        }
        s
    }
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

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable `ln Σ exp(xᵢ)`; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_rule() {
        // f(x) = tanh(2x)² at x = 0.3
        let g = Graph::new();
        let x = g.param(Mat::scalar(0.3));
        let y = g.square(g.tanh(g.scale(x, 2.0)));
        let grads = g.backward(y);
        let t = (0.6f64).tanh();
        let expect = 2.0 * t * (1.0 - t * t) * 2.0;
        assert!((grads.wrt(x).as_slice()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let g = Graph::new();
        let c = g.constant(Mat::scalar(2.0));
        let x = g.param(Mat::scalar(3.0));
        let y = g.mul(c, x);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).as_slice(), &[2.0]);
    }

    #[test]
    fn norm_at_origin_has_zero_adjoint() {
        let g = Graph::new();
        let z = g.param(Mat::from_rows(&[[0.0, 0.0]]));
        let n = g.norm_rows(z);
        assert_eq!(g.backward(n).wrt(z).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn logsumexp_survives_underflow() {
        assert!((logsumexp(&[-2.0, -50.0]) - (-2.0 + (-48.0f64).exp().ln_1p())).abs() < 1e-15);
        assert_eq!(logsumexp(&[-1000.0, -1000.0]), -1000.0 + 2f64.ln());
    }
}
