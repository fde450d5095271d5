//! Tape-based reverse-mode differentiation over matrix operations.
//!
//! The tape records every primitive as a node holding its forward value
//! and input references. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep that visits each node once.

use crate::engine::Engine;
use crate::mat::{kernels, Mat};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRowVec(usize, usize),
    AddColVec(usize, usize),
    Relu(usize),
    Exp(usize),
    Neg(usize),
    Scale(usize, usize),
    MulConstMat(usize, Mat),
    ScaleConst(usize, f64),
    AddConst(usize),
    DivConst(usize, f64),
    ClampConst(usize, f64, f64),
    ConcatCols(usize, usize),
    SoftmaxRows(usize),
    LseRows(usize),
    LseCols(usize),
    PadDustbin(usize, usize),
    Gather(usize, Vec<(usize, usize)>),
    Sum(usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for a node; zeros when no path reached the loss.
    pub fn get(&self, var: Var, shape_like: &Mat) -> Mat {
        match &self.adjoints[var.0] {
            Some(m) => m.clone(),
            None => Mat::zeros(shape_like.rows(), shape_like.cols()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input: a tensor whose gradient will be requested.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Mat {
        &self.nodes[i].value
    }

    /// Reverse sweep from a scalar (1x1) root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward root must be scalar");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = adj[i].take() else { continue };
            self.propagate(i, &grad, &mut adj);
            adj[i] = Some(grad);
        }
        Gradients { adjoints: adj }
    }

    fn accumulate(&self, adj: &mut [Option<Mat>], idx: usize, delta: Mat) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut adj[idx] {
            Some(existing) => {
                let summed = kernels::add(existing, &delta);
                *existing = summed;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, grad: &Mat, adj: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(adj, *a, kernels::matmul_nt(grad, self.val(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(adj, *b, kernels::matmul(&self.val(*a).transpose(), grad));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(adj, *a, kernels::matmul(grad, self.val(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(adj, *b, kernels::matmul(&grad.transpose(), self.val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, grad.clone());
                self.accumulate(adj, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, grad.clone());
                self.accumulate(adj, *b, kernels::neg(grad));
            }
            Op::AddRowVec(m, row) => {
                self.accumulate(adj, *m, grad.clone());
                if self.needs(*row) {
                    let mut sums = Mat::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (j, v) in grad.row(r).iter().enumerate() {
                            sums.set(0, j, sums.get(0, j) + v);
                        }
                    }
                    self.accumulate(adj, *row, sums);
                }
            }
            Op::AddColVec(m, col) => {
                self.accumulate(adj, *m, grad.clone());
                if self.needs(*col) {
                    let mut sums = Mat::zeros(grad.rows(), 1);
                    for r in 0..grad.rows() {
                        sums.set(r, 0, grad.row(r).iter().sum());
                    }
                    self.accumulate(adj, *col, sums);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let input = self.val(*x);
                    let masked = Mat::from_fn(grad.rows(), grad.cols(), |r, c| {
                        if input.get(r, c) > 0.0 {
                            grad.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(adj, *x, masked);
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    self.accumulate(adj, *x, kernels::mul_elem(grad, self.val(i)));
                }
            }
            Op::Neg(x) => {
                self.accumulate(adj, *x, kernels::neg(grad));
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    self.accumulate(adj, *x, kernels::scale_const(grad, self.val(*s).item()));
                }
                if self.needs(*s) {
                    let dot: f64 = grad.iter().zip(self.val(*x).iter()).map(|(g, v)| g * v).sum();
                    self.accumulate(adj, *s, Mat::scalar(dot));
                }
            }
            Op::MulConstMat(x, c) => {
                if self.needs(*x) {
                    self.accumulate(adj, *x, kernels::mul_elem(grad, c));
                }
            }
            Op::ScaleConst(x, c) => {
                self.accumulate(adj, *x, kernels::scale_const(grad, *c));
            }
            Op::AddConst(x) => {
                self.accumulate(adj, *x, grad.clone());
            }
            Op::DivConst(x, c) => {
                self.accumulate(adj, *x, kernels::div_const(grad, *c));
            }
            Op::ClampConst(x, lo, hi) => {
                if self.needs(*x) {
                    let input = self.val(*x);
                    let masked = Mat::from_fn(grad.rows(), grad.cols(), |r, c| {
                        let v = input.get(r, c);
                        if v > *lo && v < *hi {
                            grad.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(adj, *x, masked);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.val(*a).cols();
                if self.needs(*a) {
                    let left = Mat::from_fn(grad.rows(), ca, |r, c| grad.get(r, c));
                    self.accumulate(adj, *a, left);
                }
                if self.needs(*b) {
                    let cb = grad.cols() - ca;
                    let right = Mat::from_fn(grad.rows(), cb, |r, c| grad.get(r, ca + c));
                    self.accumulate(adj, *b, right);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = self.val(i);
                    let mut out = Mat::zeros(grad.rows(), grad.cols());
                    for r in 0..grad.rows() {
                        let dot: f64 = grad.row(r).iter().zip(y.row(r)).map(|(g, yv)| g * yv).sum();
                        for c in 0..grad.cols() {
                            out.set(r, c, y.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                    self.accumulate(adj, *x, out);
                }
            }
            Op::LseRows(x) => {
                if self.needs(*x) {
                    let input = self.val(*x);
                    let lse = self.val(i);
                    let out = Mat::from_fn(input.rows(), input.cols(), |r, c| {
                        (input.get(r, c) - lse.get(r, 0)).exp() * grad.get(r, 0)
                    });
                    self.accumulate(adj, *x, out);
                }
            }
            Op::LseCols(x) => {
                if self.needs(*x) {
                    let input = self.val(*x);
                    let lse = self.val(i);
                    let out = Mat::from_fn(input.rows(), input.cols(), |r, c| {
                        (input.get(r, c) - lse.get(0, c)).exp() * grad.get(0, c)
                    });
                    self.accumulate(adj, *x, out);
                }
            }
            Op::PadDustbin(s, alpha) => {
                let (rows, cols) = self.val(*s).shape();
                if self.needs(*s) {
                    let inner = Mat::from_fn(rows, cols, |r, c| grad.get(r, c));
                    self.accumulate(adj, *s, inner);
                }
                if self.needs(*alpha) {
                    let mut total = 0.0;
                    for r in 0..rows {
                        total += grad.get(r, cols);
                    }
                    for c in 0..=cols {
                        total += grad.get(rows, c);
                    }
                    self.accumulate(adj, *alpha, Mat::scalar(total));
                }
            }
            Op::Gather(x, idx) => {
                if self.needs(*x) {
                    let mut out = Mat::zeros(self.val(*x).rows(), self.val(*x).cols());
                    for (k, (r, c)) in idx.iter().enumerate() {
                        out.set(*r, *c, out.get(*r, *c) + grad.get(k, 0));
                    }
                    self.accumulate(adj, *x, out);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let g = grad.item();
                    let src = self.val(*x);
                    self.accumulate(adj, *x, Mat::from_fn(src.rows(), src.cols(), |_, _| g));
                }
            }
        }
    }

    fn unary(&mut self, x: Var, value: Mat, op: Op) -> Var {
        let needs = self.needs(x.0);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, op, needs)
    }
}

impl Engine for Tape {
    type T = Var;

    fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant, false)
    }

    fn value<'a>(&'a self, t: &'a Var) -> &'a Mat {
        &self.nodes[t.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::matmul(self.val(a.0), self.val(b.0));
        self.binary(*a, *b, v, Op::MatMul(a.0, b.0))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::matmul_nt(self.val(a.0), self.val(b.0));
        self.binary(*a, *b, v, Op::MatMulNt(a.0, b.0))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::add(self.val(a.0), self.val(b.0));
        self.binary(*a, *b, v, Op::Add(a.0, b.0))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::sub(self.val(a.0), self.val(b.0));
        self.binary(*a, *b, v, Op::Sub(a.0, b.0))
    }

    fn add_row_vec(&mut self, m: &Var, row: &Var) -> Var {
        let v = kernels::add_row_vec(self.val(m.0), self.val(row.0));
        self.binary(*m, *row, v, Op::AddRowVec(m.0, row.0))
    }

    fn add_col_vec(&mut self, m: &Var, col: &Var) -> Var {
        let v = kernels::add_col_vec(self.val(m.0), self.val(col.0));
        self.binary(*m, *col, v, Op::AddColVec(m.0, col.0))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let v = kernels::relu(self.val(x.0));
        self.unary(*x, v, Op::Relu(x.0))
    }

    fn exp(&mut self, x: &Var) -> Var {
        let v = kernels::exp(self.val(x.0));
        self.unary(*x, v, Op::Exp(x.0))
    }

    fn neg(&mut self, x: &Var) -> Var {
        let v = kernels::neg(self.val(x.0));
        self.unary(*x, v, Op::Neg(x.0))
    }

    fn scale(&mut self, x: &Var, s: &Var) -> Var {
        let v = kernels::scale(self.val(x.0), self.val(s.0).item());
        self.binary(*x, *s, v, Op::Scale(x.0, s.0))
    }

    fn mul_constmat(&mut self, x: &Var, c: &Mat) -> Var {
        let v = kernels::mul_elem(self.val(x.0), c);
        self.unary(*x, v, Op::MulConstMat(x.0, c.clone()))
    }

    fn scale_const(&mut self, x: &Var, c: f64) -> Var {
        let v = kernels::scale_const(self.val(x.0), c);
        self.unary(*x, v, Op::ScaleConst(x.0, c))
    }

    fn add_const(&mut self, x: &Var, c: f64) -> Var {
        let v = kernels::add_const(self.val(x.0), c);
        self.unary(*x, v, Op::AddConst(x.0))
    }

    fn div_const(&mut self, x: &Var, c: f64) -> Var {
        let v = kernels::div_const(self.val(x.0), c);
        self.unary(*x, v, Op::DivConst(x.0, c))
    }

    fn clamp_const(&mut self, x: &Var, lo: f64, hi: f64) -> Var {
        let v = kernels::clamp_const(self.val(x.0), lo, hi);
        self.unary(*x, v, Op::ClampConst(x.0, lo, hi))
    }

    fn concat_cols(&mut self, a: &Var, b: &Var) -> Var {
        let v = kernels::concat_cols(self.val(a.0), self.val(b.0));
        self.binary(*a, *b, v, Op::ConcatCols(a.0, b.0))
    }

    fn softmax_rows(&mut self, x: &Var) -> Var {
        let v = kernels::softmax_rows(self.val(x.0));
        self.unary(*x, v, Op::SoftmaxRows(x.0))
    }

    fn lse_rows(&mut self, x: &Var) -> Var {
        let v = kernels::logsumexp_rows(self.val(x.0));
        self.unary(*x, v, Op::LseRows(x.0))
    }

    fn lse_cols(&mut self, x: &Var) -> Var {
        let v = kernels::logsumexp_cols(self.val(x.0));
        self.unary(*x, v, Op::LseCols(x.0))
    }

    fn pad_dustbin(&mut self, s: &Var, alpha: &Var) -> Var {
        let v = kernels::pad_dustbin(self.val(s.0), self.val(alpha.0).item());
        self.binary(*s, *alpha, v, Op::PadDustbin(s.0, alpha.0))
    }

    fn gather(&mut self, x: &Var, idx: &[(usize, usize)]) -> Var {
        let v = kernels::gather(self.val(x.0), idx);
        self.unary(*x, v, Op::Gather(x.0, idx.to_vec()))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let v = kernels::sum_all(self.val(x.0));
        self.unary(*x, v, Op::Sum(x.0))
    }
}
