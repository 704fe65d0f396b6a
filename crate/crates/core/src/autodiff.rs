//! Reverse-mode differentiation over dense matrices.
//!
//! Every value on a [`Tape`] is an `Array2<f64>`; scalars are `1 × 1`.
//! Nodes are appended in evaluation order, so the tape is a topological order
//! and [`Tape::backward`] walks it once in reverse, accumulating adjoints.
//! Sparse operands are constants; gradients reach only the dense operand and,
//! for [`Tape::spmm_values`], the per-entry values.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::special::{digamma, ln_gamma, ln_one_minus_exp_neg, sigmoid, softplus, trigamma};
use crate::stochastic::RngStream;

/// A constant sparse matrix with its transpose precomputed.
#[derive(Debug)]
pub struct SparseOperand {
    pub matrix: CsrMatrix,
    pub transpose: CsrMatrix,
    /// `(row, col)` of every stored entry, in storage order.
    pub pairs: Vec<(usize, usize)>,
}

impl SparseOperand {
    pub fn new(matrix: CsrMatrix) -> Arc<Self> {
        let rows = matrix.row_of_entries();
        let pairs = rows.into_iter().zip(matrix.indices().iter().copied()).collect();
        Arc::new(Self {
            transpose: matrix.transpose(),
            matrix,
            pairs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseOperand>, Var),
    SpMMValues(Arc<SparseOperand>, Var, Var),
    SddDot(Arc<Vec<(usize, usize)>>, Var, Var),
    GatherEdgeSum(Arc<SparseOperand>, Var, Var),
    NeighborhoodSoftmax(Arc<SparseOperand>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MulRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Recip(Var),
    Square(Var),
    ClampMin(Var, f64),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Log1mExp(Var),
    Lgamma(Var),
    Digamma(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    LogSoftmaxRows(Var),
    GatherEntries(Arc<Vec<(usize, usize)>>, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::SpMM(..) => "spmm",
            Op::SpMMValues(..) => "spmm_values",
            Op::SddDot(..) => "sdd_dot",
            Op::GatherEdgeSum(..) => "gather_edge_sum",
            Op::NeighborhoodSoftmax(..) => "neighborhood_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MulRowBroadcast(..) => "mul_row_broadcast",
            Op::MulColBroadcast(..) => "mul_col_broadcast",
            Op::Recip(..) => "recip",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softplus(..) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Log1mExp(..) => "log1mexp",
            Op::Lgamma(..) => "lgamma",
            Op::Digamma(..) => "digamma",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::GatherEntries(..) => "gather_entries",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Adjoints from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    /// Gradient of the root with respect to `v`; zero-shaped `None` when the
    /// root does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nonfinite: Option<String>,
    kink: bool,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!("{op}: operands {a:?} and {b:?}"))
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Whether a nondifferentiable point (LeakyReLU at exactly 0) was hit.
    pub fn hit_kink(&self) -> bool {
        self.kink
    }

    /// Name of the first primitive that produced a non-finite value.
    pub fn nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        if self.nonfinite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.nonfinite = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.dim(a) == self.dim(b) {
            Ok(())
        } else {
            Err(shape_err(op, self.dim(a), self.dim(b)))
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64 + Sync + Send, op: Op) -> Var {
        let v = self.value(x).mapv(f);
        self.push(v, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.0 {
            return Err(shape_err("matmul", da, db));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// S · B for constant sparse S.
    pub fn spmm(&mut self, s: &Arc<SparseOperand>, b: Var) -> Result<Var> {
        let v = s.matrix.matmul(self.value(b).view())?;
        Ok(self.push(v, Op::SpMM(s.clone(), b)))
    }

    /// S(values) · B where `values` (nnz × 1) fills the pattern of S.
    pub fn spmm_values(&mut self, pattern: &Arc<SparseOperand>, values: Var, b: Var) -> Result<Var> {
        let nnz = pattern.matrix.nnz();
        if self.dim(values) != (nnz, 1) {
            return Err(shape_err("spmm_values", self.dim(values), (nnz, 1)));
        }
        let m = pattern.matrix.with_values(self.value(values).column(0).to_vec())?;
        let v = m.matmul(self.value(b).view())?;
        Ok(self.push(v, Op::SpMMValues(pattern.clone(), values, b)))
    }

    /// out_e = A[i_e] · B[j_e] for every pair (E × 1); A and B share a column count.
    pub fn sdd_dot(&mut self, pairs: &Arc<Vec<(usize, usize)>>, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.1 {
            return Err(shape_err("sdd_dot", da, db));
        }
        let (va, vb) = (self.value(a), self.value(b));
        if pairs.iter().any(|&(i, j)| i >= da.0 || j >= db.0) {
            return Err(Error::Dimension("sdd_dot: pair outside the row range".into()));
        }
        let out: Vec<f64> = pairs.par_iter().map(|&(i, j)| va.row(i).dot(&vb.row(j))).collect();
        let v = Array2::from_shape_vec((pairs.len(), 1), out).expect("column shape");
        Ok(self.push(v, Op::SddDot(pairs.clone(), a, b)))
    }

    /// out_p = s1[row_p] + s2[col_p] over the stored entries of a pattern.
    pub fn gather_edge_sum(&mut self, pattern: &Arc<SparseOperand>, s1: Var, s2: Var) -> Result<Var> {
        let n = pattern.matrix.rows();
        if self.dim(s1) != (n, 1) || self.dim(s2) != (pattern.matrix.cols(), 1) {
            return Err(shape_err("gather_edge_sum", self.dim(s1), self.dim(s2)));
        }
        let (a, b) = (self.value(s1), self.value(s2));
        let out: Vec<f64> = pattern.pairs.iter().map(|&(i, j)| a[[i, 0]] + b[[j, 0]]).collect();
        let v = Array2::from_shape_vec((out.len(), 1), out).expect("column shape");
        Ok(self.push(v, Op::GatherEdgeSum(pattern.clone(), s1, s2)))
    }

    /// Softmax of per-entry values within each row of the pattern.
    pub fn neighborhood_softmax(&mut self, pattern: &Arc<SparseOperand>, x: Var) -> Result<Var> {
        let nnz = pattern.matrix.nnz();
        if self.dim(x) != (nnz, 1) {
            return Err(shape_err("neighborhood_softmax", self.dim(x), (nnz, 1)));
        }
        let xv = self.value(x).column(0).to_vec();
        let mut out = vec![0.0; nnz];
        let ptr = pattern.matrix.indptr();
        for r in 0..pattern.matrix.rows() {
            let span = ptr[r]..ptr[r + 1];
            if span.is_empty() {
                return Err(Error::InvalidInput(format!("node {r} has an empty neighborhood")));
            }
            let m = xv[span.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in span.clone() {
                out[p] = (xv[p] - m).exp();
                z += out[p];
            }
            for p in span {
                out[p] /= z;
            }
        }
        let v = Array2::from_shape_vec((nnz, 1), out).expect("column shape");
        Ok(self.push(v, Op::NeighborhoodSoftmax(pattern.clone(), x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a) / self.value(b);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, Op::MulScalar(x, c))
    }

    /// A (N × K) scaled column-wise by r (1 × K).
    pub fn mul_row_broadcast(&mut self, a: Var, r: Var) -> Result<Var> {
        let (da, dr) = (self.dim(a), self.dim(r));
        if dr != (1, da.1) {
            return Err(shape_err("mul_row_broadcast", da, dr));
        }
        let v = self.value(a) * self.value(r);
        Ok(self.push(v, Op::MulRowBroadcast(a, r)))
    }

    /// A (N × K) scaled row-wise by c (N × 1).
    pub fn mul_col_broadcast(&mut self, a: Var, c: Var) -> Result<Var> {
        let (da, dc) = (self.dim(a), self.dim(c));
        if dc != (da.0, 1) {
            return Err(shape_err("mul_col_broadcast", da, dc));
        }
        let v = self.value(a) * self.value(c);
        Ok(self.push(v, Op::MulColBroadcast(a, c)))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, move |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        if self.value(x).iter().any(|&v| v == 0.0) {
            self.kink = true;
        }
        self.unary(x, move |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// ln(1 − e^{−x}) for x > 0.
    pub fn log1mexp(&mut self, x: Var) -> Var {
        self.unary(x, ln_one_minus_exp_neg, Op::Log1mExp(x))
    }

    pub fn lgamma(&mut self, x: Var) -> Var {
        self.unary(x, ln_gamma, Op::Lgamma(x))
    }

    pub fn digamma(&mut self, x: Var) -> Var {
        self.unary(x, digamma, Op::Digamma(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x))
    }

    /// Column sums: N × K → 1 × K.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(x))
    }

    /// Row sums: N × K → N × 1.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        self.push(v, Op::LogSoftmaxRows(x))
    }

    /// Picks entries `(row, col)` into an m × 1 column.
    pub fn gather_entries(&mut self, x: Var, idx: &Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let (r, c) = self.dim(x);
        if idx.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::Dimension("gather_entries: index outside the matrix".into()));
        }
        let xv = self.value(x);
        let out: Vec<f64> = idx.iter().map(|&(i, j)| xv[[i, j]]).collect();
        let v = Array2::from_shape_vec((out.len(), 1), out).expect("column shape");
        Ok(self.push(v, Op::GatherEntries(idx.clone(), x)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if let Some(op) = &self.nonfinite {
            return Err(Error::Autodiff(format!("non-finite value produced by `{op}`")));
        }
        if self.dim(root) != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                self.dim(root)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Autodiff("non-finite adjoint".into()));
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
            Some(x) => *x += &d,
            slot => *slot = Some(d),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::SpMM(s, b) => {
                acc(*b, s.transpose.matmul(g.view()).expect("shapes checked forward"));
            }
            Op::SpMMValues(s, values, b) => {
                let vals = val(*values);
                let bv = val(*b);
                let mut dv = Array2::zeros((s.pairs.len(), 1));
                let mut db = Array2::zeros(bv.dim());
                for (p, &(r, c)) in s.pairs.iter().enumerate() {
                    dv[[p, 0]] = g.row(r).dot(&bv.row(c));
                    db.row_mut(c).scaled_add(vals[[p, 0]], &g.row(r));
                }
                acc(*values, dv);
                acc(*b, db);
            }
            Op::SddDot(pairs, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for (e, &(i, j)) in pairs.iter().enumerate() {
                    let ge = g[[e, 0]];
                    da.row_mut(i).scaled_add(ge, &bv.row(j));
                    db.row_mut(j).scaled_add(ge, &av.row(i));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::GatherEdgeSum(s, s1, s2) => {
                let mut d1 = Array2::zeros(val(*s1).dim());
                let mut d2 = Array2::zeros(val(*s2).dim());
                for (p, &(i, j)) in s.pairs.iter().enumerate() {
                    d1[[i, 0]] += g[[p, 0]];
                    d2[[j, 0]] += g[[p, 0]];
                }
                acc(*s1, d1);
                acc(*s2, d2);
            }
            Op::NeighborhoodSoftmax(s, x) => {
                let ptr = s.matrix.indptr();
                let mut dx = Array2::zeros(y.dim());
                for r in 0..s.matrix.rows() {
                    let span = ptr[r]..ptr[r + 1];
                    let dot: f64 = span.clone().map(|p| y[[p, 0]] * g[[p, 0]]).sum();
                    for p in span {
                        dx[[p, 0]] = y[[p, 0]] * (g[[p, 0]] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, g / bv);
                acc(*b, -(g * y) / bv);
            }
            Op::Neg(x) => acc(*x, -g),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulScalar(x, c) => acc(*x, g * *c),
            Op::MulRowBroadcast(a, r) => {
                acc(*a, g * val(*r));
                acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulColBroadcast(a, c) => {
                acc(*a, g * val(*c));
                acc(*c, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Recip(x) => acc(*x, -(g * y * y)),
            Op::Square(x) => acc(*x, g * val(*x) * 2.0),
            Op::ClampMin(x, lo) => {
                let d = Zip::from(g)
                    .and(val(*x))
                    .map_collect(|&g, &x| if x > *lo { g } else { 0.0 });
                acc(*x, d);
            }
            Op::Exp(x) => acc(*x, g * y),
            Op::Ln(x) => acc(*x, g / val(*x)),
            Op::Softplus(x) => acc(*x, Zip::from(g).and(val(*x)).map_collect(|&g, &x| g * sigmoid(x))),
            Op::LeakyRelu(x, slope) => acc(
                *x,
                Zip::from(g)
                    .and(val(*x))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { g * slope }),
            ),
            Op::Log1mExp(x) => acc(*x, Zip::from(g).and(val(*x)).map_collect(|&g, &x| g / x.exp_m1())),
            Op::Lgamma(x) => acc(*x, Zip::from(g).and(val(*x)).map_collect(|&g, &x| g * digamma(x))),
            Op::Digamma(x) => acc(*x, Zip::from(g).and(val(*x)).map_collect(|&g, &x| g * trigamma(x))),
            Op::Sum(x) => acc(*x, Array2::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::SumRows(x) => {
                let d = g.broadcast(val(*x).dim()).expect("row broadcast").to_owned();
                acc(*x, d);
            }
            Op::SumCols(x) => {
                let d = g.broadcast(val(*x).dim()).expect("column broadcast").to_owned();
                acc(*x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y.exp() * s);
                }
                acc(*x, d);
            }
            Op::GatherEntries(idx, x) => {
                let mut d = Array2::zeros(val(*x).dim());
                for (p, &(i, j)) in idx.iter().enumerate() {
                    d[[i, j]] += g[[p, 0]];
                }
                acc(*x, d);
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter, flat index, analytic, numeric)` for coordinates over tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
    /// A nondifferentiable point was touched, so the comparison is not meaningful.
    pub kink: bool,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.kink && self.failures.is_empty()
    }
}

/// |a − n| / max(|a|, |n|, floor).
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` with central finite differences
/// (step 1e-5 relative to each coordinate's magnitude, at least 1e-5).
/// Every coordinate of every parameter is perturbed.
pub fn check_gradients<F>(f: F, params: &[Array2<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Array2<f64>]| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok((tape.scalar(root), tape.hit_kink()))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let mut kink = tape.hit_kink();
    let scale = tape.scalar(root).abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        failures: Vec::new(),
        kink: false,
        coordinates: 0,
    };
    let mut work: Vec<Array2<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Array2::zeros(p.dim()));
        for (flat, &x0) in p.iter().enumerate() {
            let h = 1e-5 * x0.abs().max(1.0);
            let (r, c) = (flat / p.ncols(), flat % p.ncols());
            work[pi][[r, c]] = x0 + h;
            let (fp, k1) = eval(&work)?;
            work[pi][[r, c]] = x0 - h;
            let (fm, k2) = eval(&work)?;
            work[pi][[r, c]] = x0;
            kink |= k1 || k2;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[[r, c]];
            // truncation and rounding noise of the difference quotient
            let floor = 1e-8 * scale;
            let err = relative_error(a, numeric, floor.max(1e-10));
            report.max_rel_err = report.max_rel_err.max(err);
            report.coordinates += 1;
            if err > tolerance {
                report.failures.push((pi, flat, a, numeric));
            }
        }
    }
    report.kink = kink;
    Ok(report)
}

fn rand_mat(rng: &mut RngStream, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| lo + (hi - lo) * rng.open01())
}

/// Finite-difference checks of every primitive at fixed random inputs.
#[rustfmt::skip]
pub fn primitive_gradient_checks() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = RngStream::new(42, 0);
    let s = SparseOperand::new(
        CsrMatrix::from_triplets(4, 4, vec![(0, 0, 0.5), (0, 2, 0.3), (1, 1, 1.0), (2, 0, 0.3), (2, 3, 0.2), (3, 3, 0.7), (3, 1, 0.4)])
            .unwrap(),
    );
    let pairs = Arc::new(vec![(0, 1), (2, 3), (1, 3), (0, 0)]);
    let pos = rand_mat(&mut rng, 4, 3, 0.3, 2.0);
    let any = rand_mat(&mut rng, 4, 3, -1.5, 1.5);
    let any2 = rand_mat(&mut rng, 4, 3, -1.5, 1.5);
    let w = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
    let col = rand_mat(&mut rng, 4, 1, -1.0, 1.0);
    let row = rand_mat(&mut rng, 1, 3, -1.0, 1.0);
    let vals = rand_mat(&mut rng, 7, 1, -1.0, 1.0);
    let weights = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
    type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let s1 = s.clone();
    let s2 = s.clone();
    let s3 = s.clone();
    let s4 = s.clone();
    let p1 = pairs.clone();
    let p2 = Arc::new(vec![(0, 1), (2, 2), (3, 0), (0, 1)]);
    // weight each output so the check sees a non-trivial adjoint
    let wsum = move |t: &mut Tape, y: Var| -> Result<Var> {
        let (r, c) = t.value(y).dim();
        let w = t.leaf(Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.17 * i as f64 - 0.11 * j as f64));
        let m = t.mul(y, w)?;
        Ok(t.sum(m))
    };
    let cases: Vec<(&str, Case, Vec<Array2<f64>>)> = vec![
        ("matmul", Box::new(move |t, v| { let y = t.matmul(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), w.clone()]),
        ("spmm", Box::new(move |t, v| { let y = t.spmm(&s1, v[0])?; wsum(t, y) }), vec![any.clone()]),
        ("spmm_values", Box::new(move |t, v| { let y = t.spmm_values(&s2, v[0], v[1])?; wsum(t, y) }), vec![vals.clone(), any.clone()]),
        ("sdd_dot", Box::new(move |t, v| { let y = t.sdd_dot(&p1, v[0], v[1])?; wsum(t, y) }), vec![any.clone(), any2.clone()]),
        ("gather_edge_sum", Box::new(move |t, v| { let y = t.gather_edge_sum(&s3, v[0], v[1])?; let y = t.square(y); wsum(t, y) }), vec![col.clone(), col.clone() * 0.5]),
        ("neighborhood_softmax", Box::new(move |t, v| { let y = t.neighborhood_softmax(&s4, v[0])?; wsum(t, y) }), vec![vals.clone()]),
        ("add", Box::new(move |t, v| { let y = t.add(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), any2.clone()]),
        ("sub", Box::new(move |t, v| { let y = t.sub(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), any2.clone()]),
        ("mul", Box::new(move |t, v| { let y = t.mul(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), any2.clone()]),
        ("div", Box::new(move |t, v| { let y = t.div(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), pos.clone()]),
        ("neg", Box::new(move |t, v| { let y = t.neg(v[0]); wsum(t, y) }), vec![any.clone()]),
        ("add_scalar", Box::new(move |t, v| { let y = t.add_scalar(v[0], 2.0); let y = t.square(y); wsum(t, y) }), vec![any.clone()]),
        ("mul_scalar", Box::new(move |t, v| { let y = t.mul_scalar(v[0], -3.0); wsum(t, y) }), vec![any.clone()]),
        ("mul_row_broadcast", Box::new(move |t, v| { let y = t.mul_row_broadcast(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), row.clone()]),
        ("mul_col_broadcast", Box::new(move |t, v| { let y = t.mul_col_broadcast(v[0], v[1])?; wsum(t, y) }), vec![any.clone(), col.clone()]),
        ("recip", Box::new(move |t, v| { let y = t.recip(v[0]); wsum(t, y) }), vec![pos.clone()]),
        ("square", Box::new(move |t, v| { let y = t.square(v[0]); wsum(t, y) }), vec![any.clone()]),
        ("clamp_min", Box::new(move |t, v| { let y = t.clamp_min(v[0], 0.1); wsum(t, y) }), vec![any.clone()]),
        ("exp", Box::new(move |t, v| { let y = t.exp(v[0]); wsum(t, y) }), vec![any.clone()]),
        ("ln", Box::new(move |t, v| { let y = t.ln(v[0]); wsum(t, y) }), vec![pos.clone()]),
        ("softplus", Box::new(move |t, v| { let y = t.softplus(v[0]); wsum(t, y) }), vec![any.clone()]),
        ("leaky_relu", Box::new(move |t, v| { let y = t.leaky_relu(v[0], 0.2); wsum(t, y) }), vec![any.clone()]),
        ("log1mexp", Box::new(move |t, v| { let y = t.log1mexp(v[0]); wsum(t, y) }), vec![pos.clone()]),
        ("lgamma", Box::new(move |t, v| { let y = t.lgamma(v[0]); wsum(t, y) }), vec![pos.clone()]),
        ("digamma", Box::new(move |t, v| { let y = t.digamma(v[0]); wsum(t, y) }), vec![pos.clone()]),
        ("sum_rows", Box::new(move |t, v| { let y = t.sum_rows(v[0]); wsum(t, y) }), vec![any.clone()]),
        ("sum_cols", Box::new(move |t, v| { let y = t.sum_cols(v[0]); wsum(t, y) }), vec![any.clone()]),
        ("log_softmax_rows", Box::new(move |t, v| { let y = t.log_softmax_rows(v[0]); wsum(t, y) }), vec![weights.clone()]),
        ("gather_entries", Box::new(move |t, v| { let y = t.gather_entries(v[0], &p2)?; wsum(t, y) }), vec![any.clone()]),
    ];
    cases
        .into_iter()
        .map(|(name, f, params)| Ok((name, check_gradients(f, &params, 1e-4)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn scalar_examples() {
        let mut t = Tape::new();
        let x = t.leaf_scalar(3.0);
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!((t.scalar(y), g.get(x).unwrap()[[0, 0]]), (9.0, 6.0));

        let mut t = Tape::new();
        let x = t.leaf_scalar(0.0);
        let y = t.softplus(x);
        let g = t.backward(y).unwrap();
        assert_relative_eq!(t.scalar(y), 2f64.ln());
        assert_relative_eq!(g.get(x).unwrap()[[0, 0]], 0.5);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf_scalar(1.5);
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn errors_name_the_primitive() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, -1.0]]);
        let y = t.ln(x);
        let s = t.sum(y);
        let err = t.backward(s).unwrap_err().to_string();
        assert!(err.contains("`ln`"), "{err}");
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert!(t.backward(x).unwrap_err().to_string().contains("scalar root"));
        assert!(t.matmul(x, x).is_err());
    }

    #[test]
    fn leaky_relu_at_zero_is_flagged() {
        let r = check_gradients(
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2);
                Ok(t.sum(y))
            },
            &[array![[0.0, 1.0]]],
            1e-4,
        )
        .unwrap();
        assert!(r.kink);
        assert!(!r.passed());
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = RngStream::new(1, 0);
        let a = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
        let r = check_gradients(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                Ok(t.sum(y))
            },
            &[a, rand_mat(&mut rng, 3, 2, -1.0, 1.0)],
            1e-7,
        )
        .unwrap();
        assert!(r.passed() && r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn weibull_path_derivatives() {
        let eps: f64 = 0.37;
        let lnl = (-(-eps).ln_1p()).ln();
        let (k, lam) = (1.7, 0.8);
        let mut t = Tape::new();
        let kv = t.leaf_scalar(k);
        let lv = t.leaf_scalar(lam);
        let ik = t.recip(kv);
        let c = t.leaf_scalar(lnl);
        let e = t.mul(c, ik).unwrap();
        let e = t.exp(e);
        let th = t.mul(lv, e).unwrap();
        let g = t.backward(th).unwrap();
        let theta = t.scalar(th);
        assert_relative_eq!(
            g.get(lv).unwrap()[[0, 0]],
            (-(-eps).ln_1p()).powf(1.0 / k),
            epsilon = 1e-14
        );
        assert_relative_eq!(g.get(kv).unwrap()[[0, 0]], -theta * lnl / (k * k), epsilon = 1e-14);
    }

    #[test]
    fn every_primitive_passes_random_gradient_checks() {
        for (name, r) in primitive_gradient_checks().unwrap() {
            assert!(r.passed(), "{name}: {r:?}");
        }
    }
}
