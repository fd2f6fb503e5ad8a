//! Reverse-mode differentiation tape over dense batched matrices.
//!
//! Every node holds an `Array2<f64>`; a batch of vectors is a `rows x dim`
//! matrix and scalars are `1x1`. Backward passes *append nodes to the same
//! tape*, so a gradient is itself differentiable: calling [`Tape::backward`]
//! on an expression built from gradient nodes yields exact second-order
//! (mixed) derivatives. This is what the gradient-matching and optimality
//! regularizers rely on, since their losses contain `∇_x f̂` terms that must
//! be differentiated with respect to the model parameters.
//!
//! Kink conventions are fixed so gradients are deterministic: `relu'(0) = 0`
//! and row-wise max picks the lowest maximizing index.

use ndarray::{Array2, Axis};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`]. Plain index; cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a + b`, where `b` may be `1 x c` broadcast over the rows of `a`.
    Add(usize, usize),
    /// `a - b`, same broadcast rule as `Add`.
    Sub(usize, usize),
    Neg(usize),
    /// Elementwise product, equal shapes.
    Mul(usize, usize),
    /// `a (r x c) * b (1 x c)` broadcast over rows.
    MulRows(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    /// `a (r x m) . b (m x c)`
    MatMul(usize, usize),
    /// `a (r x m) . b^T (c x m)`
    MatMulNT(usize, usize),
    /// `a^T (m x r) . b (m x c)`
    MatMulTN(usize, usize),
    Softplus(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    /// Sum of all entries, `1 x 1`.
    SumAll(usize),
    /// Sum over columns: `r x c -> r x 1`.
    SumRows(usize),
    /// Sum over rows: `r x c -> 1 x c`.
    SumCols(usize),
    /// `1 x 1` replicated to `r x c`.
    BroadcastTo(usize),
    /// `r x 1` replicated to `r x c`.
    BroadcastCols(usize),
    /// `1 x c` replicated to `r x c`.
    BroadcastRows(usize),
    HStack(Vec<usize>),
    /// Columns `[start, start+len)` of the input.
    SliceCols(usize, usize),
    /// Input placed at column `start` of an otherwise-zero `r x total`.
    PadCols(usize, usize),
    /// Row-wise max with the (lowest) argmax per row recorded.
    RowMax(usize, Vec<usize>),
    /// `r x 1` scattered into column `idx[i]` of row `i` of an `r x c` zero matrix.
    ScatterCols(usize, Vec<usize>),
    /// Picks entry `idx[i]` of each row: `r x c -> r x 1`.
    GatherCols(usize, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Ops evaluate eagerly; `backward` builds gradient nodes
/// on the same tape.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn needs2(&self, a: Var, b: Var) -> bool {
        let nodes = self.nodes.borrow();
        nodes[a.0].needs_grad || nodes[b.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].value.dim();
        d
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Leaf that will not receive gradients.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A constant copy of `v`'s current value, cut off from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb, needs) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.clone(),
                nodes[b.0].value.clone(),
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        let value = if va.dim() == vb.dim() {
            va + vb
        } else {
            assert_eq!(vb.nrows(), 1, "add: broadcast side must be 1 x c");
            assert_eq!(va.ncols(), vb.ncols(), "add: column mismatch");
            va + &vb.row(0)
        };
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        let value = if va.dim() == vb.dim() {
            va - vb
        } else {
            assert_eq!(vb.nrows(), 1, "sub: broadcast side must be 1 x c");
            assert_eq!(va.ncols(), vb.ncols(), "sub: column mismatch");
            va - &vb.row(0)
        };
        self.push(value, Op::Sub(a.0, b.0), self.needs2(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = -self.value(a);
        self.push(value, Op::Neg(a.0), self.needs(a))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[a.0].value.dim(),
                nodes[b.0].value.dim(),
                "mul: shape mismatch"
            );
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        self.push(va * vb, Op::Mul(a.0, b.0), self.needs2(a, b))
    }

    pub fn mul_rows(&self, a: Var, b: Var) -> Var {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[b.0].value.nrows(), 1, "mul_rows: b must be 1 x c");
            assert_eq!(
                nodes[a.0].value.ncols(),
                nodes[b.0].value.ncols(),
                "mul_rows: column mismatch"
            );
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        let value = va * &vb.row(0);
        self.push(value, Op::MulRows(a.0, b.0), self.needs2(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a.0, c), self.needs(a))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddConst(a.0), self.needs(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.dot(&nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a.0, b.0), self.needs2(a, b))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.dot(&nodes[b.0].value.t())
        };
        self.push(value, Op::MatMulNT(a.0, b.0), self.needs2(a, b))
    }

    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.t().dot(&nodes[b.0].value)
        };
        self.push(value, Op::MatMulTN(a.0, b.0), self.needs2(a, b))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus_scalar);
        self.push(value, Op::Softplus(a.0), self.needs(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0), self.needs(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a.0), self.needs(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0), self.needs(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a.0), self.needs(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a.0), self.needs(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::recip);
        self.push(value, Op::Recip(a.0), self.needs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0), self.needs(a))
    }

    pub fn sum_rows(&self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(s, Op::SumRows(a.0), self.needs(a))
    }

    pub fn sum_cols(&self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(s, Op::SumCols(a.0), self.needs(a))
    }

    pub fn broadcast_to(&self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.scalar_value(a);
        self.push(
            Array2::from_elem((rows, cols), x),
            Op::BroadcastTo(a.0),
            self.needs(a),
        )
    }

    pub fn broadcast_cols(&self, a: Var, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1, "broadcast_cols: input must be r x 1");
        let value = Array2::from_shape_fn((v.nrows(), cols), |(i, _)| v[[i, 0]]);
        self.push(value, Op::BroadcastCols(a.0), self.needs(a))
    }

    pub fn broadcast_rows(&self, a: Var, rows: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1, "broadcast_rows: input must be 1 x c");
        let value = Array2::from_shape_fn((rows, v.ncols()), |(_, j)| v[[0, j]]);
        self.push(value, Op::BroadcastRows(a.0), self.needs(a))
    }

    pub fn hstack(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hstack: no inputs");
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.nrows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.ncols()).sum();
            let mut out = Array2::zeros((rows, total));
            let mut at = 0;
            let mut needs = false;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.nrows(), rows, "hstack: row mismatch");
                out.slice_mut(ndarray::s![.., at..at + v.ncols()])
                    .assign(v);
                at += v.ncols();
                needs |= nodes[p.0].needs_grad;
            }
            (out, needs)
        };
        self.push(value, Op::HStack(parts.iter().map(|p| p.0).collect()), needs)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let value = v.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a.0, start), self.needs(a))
    }

    pub fn pad_cols(&self, a: Var, start: usize, total: usize) -> Var {
        let v = self.value(a);
        let mut out = Array2::zeros((v.nrows(), total));
        out.slice_mut(ndarray::s![.., start..start + v.ncols()])
            .assign(&v);
        self.push(out, Op::PadCols(a.0, start), self.needs(a))
    }

    /// Row-wise max; ties resolve to the lowest column index.
    pub fn row_max(&self, a: Var) -> Var {
        let v = self.value(a);
        assert!(v.ncols() >= 1, "row_max: empty rows");
        let mut argmax = Vec::with_capacity(v.nrows());
        let mut value = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > best_v {
                    best_v = x;
                    best = j;
                }
            }
            argmax.push(best);
            value[[i, 0]] = best_v;
        }
        self.push(value, Op::RowMax(a.0, argmax), self.needs(a))
    }

    pub fn scatter_cols(&self, a: Var, idx: &[usize], cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1, "scatter_cols: input must be r x 1");
        assert_eq!(v.nrows(), idx.len(), "scatter_cols: index length mismatch");
        let mut out = Array2::zeros((v.nrows(), cols));
        for i in 0..v.nrows() {
            out[[i, idx[i]]] = v[[i, 0]];
        }
        self.push(out, Op::ScatterCols(a.0, idx.to_vec()), self.needs(a))
    }

    pub fn gather_cols(&self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), idx.len(), "gather_cols: index length mismatch");
        let mut out = Array2::zeros((v.nrows(), 1));
        for i in 0..v.nrows() {
            out[[i, 0]] = v[[i, idx[i]]];
        }
        self.push(out, Op::GatherCols(a.0, idx.to_vec()), self.needs(a))
    }

    /// Row-wise `log(sum(exp(z)))` with the usual max shift. The shift enters
    /// as a detached constant, which leaves the value and all derivatives
    /// exact while preventing overflow.
    pub fn lse_rows(&self, z: Var) -> Var {
        let (_, cols) = self.shape(z);
        let m = {
            let v = self.value(z);
            let mut m = Array2::zeros((v.nrows(), 1));
            for (i, row) in v.rows().into_iter().enumerate() {
                m[[i, 0]] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            self.constant(m)
        };
        let shifted = self.sub(z, self.broadcast_cols(m, cols));
        let e = self.exp(shifted);
        let s = self.sum_rows(e);
        self.add(m, self.ln(s))
    }

    /// Mean of all entries.
    pub fn mean_all(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Reverse pass from a `1 x 1` root. Returns one gradient per requested
    /// variable (zeros if the root does not depend on it). Gradients are tape
    /// nodes, so expressions built from them remain differentiable.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let snapshot_len = root.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; snapshot_len];
        grads[root.0] = Some(self.scalar(1.0));

        for idx in (0..snapshot_len).rev() {
            let Some(g) = grads[idx] else { continue };
            // Clone just the op description; values are read through self.
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[idx].needs_grad {
                    continue;
                }
                match &nodes[idx].op {
                    Op::Leaf => continue,
                    Op::Add(a, b) => OpRef::Add(*a, *b),
                    Op::Sub(a, b) => OpRef::Sub(*a, *b),
                    Op::Neg(a) => OpRef::Neg(*a),
                    Op::Mul(a, b) => OpRef::Mul(*a, *b),
                    Op::MulRows(a, b) => OpRef::MulRows(*a, *b),
                    Op::Scale(a, c) => OpRef::Scale(*a, *c),
                    Op::AddConst(a) => OpRef::AddConst(*a),
                    Op::MatMul(a, b) => OpRef::MatMul(*a, *b),
                    Op::MatMulNT(a, b) => OpRef::MatMulNT(*a, *b),
                    Op::MatMulTN(a, b) => OpRef::MatMulTN(*a, *b),
                    Op::Softplus(a) => OpRef::Softplus(*a),
                    Op::Tanh(a) => OpRef::Tanh(*a),
                    Op::Sigmoid(a) => OpRef::Sigmoid(*a),
                    Op::Relu(a) => OpRef::Relu(*a),
                    Op::Exp(a) => OpRef::Exp(*a),
                    Op::Ln(a) => OpRef::Ln(*a),
                    Op::Recip(a) => OpRef::Recip(*a),
                    Op::SumAll(a) => OpRef::SumAll(*a),
                    Op::SumRows(a) => OpRef::SumRows(*a),
                    Op::SumCols(a) => OpRef::SumCols(*a),
                    Op::BroadcastTo(a) => OpRef::BroadcastTo(*a),
                    Op::BroadcastCols(a) => OpRef::BroadcastCols(*a),
                    Op::BroadcastRows(a) => OpRef::BroadcastRows(*a),
                    Op::HStack(parts) => OpRef::HStack(parts.clone()),
                    Op::SliceCols(a, start) => OpRef::SliceCols(*a, *start),
                    Op::PadCols(a, start) => OpRef::PadCols(*a, *start),
                    Op::RowMax(a, amax) => OpRef::RowMax(*a, amax.clone()),
                    Op::ScatterCols(a, i) => OpRef::ScatterCols(*a, i.clone()),
                    Op::GatherCols(a, i) => OpRef::GatherCols(*a, i.clone()),
                }
            };
            let out = Var(idx);
            match op {
                OpRef::Add(a, b) => {
                    self.accum(&mut grads, a, g);
                    let gb = self.reduce_to(b, g);
                    self.accum(&mut grads, b, gb);
                }
                OpRef::Sub(a, b) => {
                    self.accum(&mut grads, a, g);
                    let gb = self.reduce_to(b, g);
                    let gb = self.neg(gb);
                    self.accum(&mut grads, b, gb);
                }
                OpRef::Neg(a) => {
                    let ga = self.neg(g);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Mul(a, b) => {
                    let ga = self.mul(g, Var(b));
                    self.accum(&mut grads, a, ga);
                    let gb = self.mul(g, Var(a));
                    self.accum(&mut grads, b, gb);
                }
                OpRef::MulRows(a, b) => {
                    let ga = self.mul_rows(g, Var(b));
                    self.accum(&mut grads, a, ga);
                    let gb = self.sum_cols(self.mul(g, Var(a)));
                    self.accum(&mut grads, b, gb);
                }
                OpRef::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::AddConst(a) => {
                    self.accum(&mut grads, a, g);
                }
                OpRef::MatMul(a, b) => {
                    let ga = self.matmul_nt(g, Var(b));
                    self.accum(&mut grads, a, ga);
                    let gb = self.matmul_tn(Var(a), g);
                    self.accum(&mut grads, b, gb);
                }
                OpRef::MatMulNT(a, b) => {
                    let ga = self.matmul(g, Var(b));
                    self.accum(&mut grads, a, ga);
                    let gb = self.matmul_tn(g, Var(a));
                    self.accum(&mut grads, b, gb);
                }
                OpRef::MatMulTN(a, b) => {
                    let ga = self.matmul_nt(Var(b), g);
                    self.accum(&mut grads, a, ga);
                    let gb = self.matmul(Var(a), g);
                    self.accum(&mut grads, b, gb);
                }
                OpRef::Softplus(a) => {
                    let ga = self.mul(g, self.sigmoid(Var(a)));
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Tanh(a) => {
                    let y2 = self.square(out);
                    let ga = self.mul(g, self.add_const(self.neg(y2), 1.0));
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Sigmoid(a) => {
                    let one_m = self.add_const(self.neg(out), 1.0);
                    let ga = self.mul(g, self.mul(out, one_m));
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Relu(a) => {
                    let mask = {
                        let v = self.value(Var(a));
                        self.constant(v.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
                    };
                    let ga = self.mul(g, mask);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Exp(a) => {
                    let ga = self.mul(g, out);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Ln(a) => {
                    let ga = self.mul(g, self.recip(Var(a)));
                    self.accum(&mut grads, a, ga);
                }
                OpRef::Recip(a) => {
                    let ga = self.neg(self.mul(g, self.square(out)));
                    self.accum(&mut grads, a, ga);
                }
                OpRef::SumAll(a) => {
                    let (r, c) = self.shape(Var(a));
                    let ga = self.broadcast_to(g, r, c);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::SumRows(a) => {
                    let (_, c) = self.shape(Var(a));
                    let ga = self.broadcast_cols(g, c);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::SumCols(a) => {
                    let (r, _) = self.shape(Var(a));
                    let ga = self.broadcast_rows(g, r);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::BroadcastTo(a) => {
                    let ga = self.sum_all(g);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::BroadcastCols(a) => {
                    let ga = self.sum_rows(g);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::BroadcastRows(a) => {
                    let ga = self.sum_cols(g);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::HStack(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let (_, c) = self.shape(Var(p));
                        let gp = self.slice_cols(g, at, c);
                        self.accum(&mut grads, p, gp);
                        at += c;
                    }
                }
                OpRef::SliceCols(a, start) => {
                    let (_, total) = self.shape(Var(a));
                    let ga = self.pad_cols(g, start, total);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::PadCols(a, start) => {
                    let (_, len) = self.shape(Var(a));
                    let ga = self.slice_cols(g, start, len);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::RowMax(a, amax) => {
                    let (_, c) = self.shape(Var(a));
                    let ga = self.scatter_cols(g, &amax, c);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::ScatterCols(a, idx) => {
                    let ga = self.gather_cols(g, &idx);
                    self.accum(&mut grads, a, ga);
                }
                OpRef::GatherCols(a, idx) => {
                    let (_, c) = self.shape(Var(a));
                    let ga = self.scatter_cols(g, &idx, c);
                    self.accum(&mut grads, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Array2::zeros((r, c)))
                }
            })
            .collect()
    }

    fn accum(&self, grads: &mut [Option<Var>], target: usize, contribution: Var) {
        if !self.nodes.borrow()[target].needs_grad {
            return;
        }
        if target >= grads.len() {
            // Gradient nodes created during this backward pass never receive
            // gradients themselves in the same pass.
            return;
        }
        grads[target] = Some(match grads[target] {
            Some(existing) => self.add(existing, contribution),
            None => contribution,
        });
    }

    /// Collapses `g` back to the shape of `target` when the forward op
    /// broadcast a `1 x c` operand over rows.
    fn reduce_to(&self, target: usize, g: Var) -> Var {
        let tgt_shape = self.shape(Var(target));
        let g_shape = self.shape(g);
        if tgt_shape == g_shape {
            g
        } else {
            debug_assert_eq!(tgt_shape.0, 1);
            self.sum_cols(g)
        }
    }
}

enum OpRef {
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    MulRows(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    MatMulTN(usize, usize),
    Softplus(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastTo(usize),
    BroadcastCols(usize),
    BroadcastRows(usize),
    HStack(Vec<usize>),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    RowMax(usize, Vec<usize>),
    ScatterCols(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
}

pub fn softplus_scalar(x: f64) -> f64 {
    // log1p(exp(x)) with the large-x branch to avoid overflow.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
