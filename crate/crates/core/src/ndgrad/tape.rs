//! Define-by-run tape. Ops append a node holding the forward value and
//! the operand indices; `backward` replays the records in reverse.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{NdError, NdResult, Tensor};
use crate::scalar::Scalar;

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Input,
    Param,
    Detach(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { a: usize, mul: F },
    Exp(usize),
    Ln(usize),
    LnFloor { a: usize, eps: F },
    Tanh(usize),
    Relu(usize),
    Clamp { a: usize, lo: F, hi: F },
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExpRows(usize),
    L2NormRows(usize),
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    ColMean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Reshape(usize),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradient tape. One per training step; parameters are registered with
/// [`Tape::param`] and their adjoints read back after [`Tape::backward`].
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

const L2_EPS: f64 = 1e-12;

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a length-1 node.
    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    /// Adjoint of `v` from the last `backward`, if any was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint as a tensor; zero-filled when `v` was unreachable from the
    /// loss (the contract for unused parameters).
    pub fn grad_tensor(&self, v: Var) -> Tensor<F> {
        match self.grad(v) {
            Some(g) => Tensor::new(self.shape(v), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    /// Registers a constant: gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push_unchecked(t, Op::Input, false)
    }

    /// Registers a trainable leaf: adjoints are accumulated for it.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push_unchecked(t, Op::Param, true)
    }

    fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>) -> NdResult<Var> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { op: name });
        }
        let needs = match &op {
            Op::Input | Op::Detach(_) => false,
            Op::Param => true,
            _ => self.op_operands(&op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        Ok(self.push_unchecked(value, op, needs))
    }

    fn op_operands(&self, op: &Op<F>) -> Vec<usize> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::Detach(a)
            | Op::Transpose(a)
            | Op::Affine { a, .. }
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::LnFloor { a, .. }
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Clamp { a, .. }
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExpRows(a)
            | Op::L2NormRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::RowSum(a)
            | Op::ColMean(a)
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape(a) => vec![*a],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.clone();
        self.push_unchecked(t, Op::Detach(a.0), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> NdResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(m, k, n, ta.data(), tb.data(), out.data_mut());
        self.push("matmul", out, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> NdResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(NdError::BadShape {
                op: "transpose",
                expected: "rank 2",
                got: ta.shape().to_vec(),
            });
        }
        let out = ta.t();
        self.push("transpose", out, Op::Transpose(a.0))
    }

    fn binary_shapes(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        allow_row_broadcast: bool,
    ) -> NdResult<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if allow_row_broadcast && sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            return Ok(true);
        }
        Err(NdError::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn ew2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        broadcast_ok: bool,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> NdResult<Var> {
        let bcast = self.binary_shapes(name, a, b, broadcast_ok)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if bcast {
            let mut out = ta.clone();
            let n = out.cols();
            for i in 0..out.rows() {
                for (x, &bv) in out.row_mut(i).iter_mut().zip(tb.data()) {
                    *x = f(*x, bv);
                }
            }
            debug_assert_eq!(tb.len(), n);
            out
        } else {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape(), data)?
        };
        self.push(name, out, op)
    }

    /// Elementwise sum; `b` may be a row vector broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> NdResult<Var> {
        self.ew2("add", a, b, true, Op::Add(a.0, b.0), |x, y| x + y)
    }

    /// Elementwise difference; `b` may be a broadcast row vector.
    pub fn sub(&mut self, a: Var, b: Var) -> NdResult<Var> {
        self.ew2("sub", a, b, true, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    /// Elementwise product; `b` may be a broadcast row vector.
    pub fn mul(&mut self, a: Var, b: Var) -> NdResult<Var> {
        self.ew2("mul", a, b, true, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Elementwise quotient (same shapes only). Division by zero surfaces
    /// as a non-finite error.
    pub fn div(&mut self, a: Var, b: Var) -> NdResult<Var> {
        self.ew2("div", a, b, false, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// `mul * a + add`, elementwise with constants.
    pub fn affine(&mut self, a: Var, mul: F, add: F) -> NdResult<Var> {
        let out = self.nodes[a.0].value.map(|x| mul * x + add);
        self.push("affine", out, Op::Affine { a: a.0, mul })
    }

    pub fn scale(&mut self, a: Var, mul: F) -> NdResult<Var> {
        self.affine(a, mul, F::zero())
    }

    pub fn neg(&mut self, a: Var) -> NdResult<Var> {
        self.affine(a, -F::one(), F::zero())
    }

    pub fn exp(&mut self, a: Var) -> NdResult<Var> {
        let out = self.nodes[a.0].value.map(|x| x.exp());
        self.push("exp", out, Op::Exp(a.0))
    }

    /// Natural log; any operand `<= 0` is a domain error.
    pub fn ln(&mut self, a: Var) -> NdResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.data().iter().any(|&x| x <= F::zero()) {
            return Err(NdError::Domain { op: "ln" });
        }
        let out = ta.map(|x| x.ln());
        self.push("ln", out, Op::Ln(a.0))
    }

    /// `ln(max(x, eps))`: the guard used when logging probabilities or
    /// inner products that may touch zero. Gradient is zero on the floor.
    pub fn ln_floor(&mut self, a: Var, eps: F) -> NdResult<Var> {
        let out = self.nodes[a.0].value.map(|x| x.max(eps).ln());
        self.push("ln_floor", out, Op::LnFloor { a: a.0, eps })
    }

    pub fn tanh(&mut self, a: Var) -> NdResult<Var> {
        let out = self.nodes[a.0].value.map(|x| x.tanh());
        self.push("tanh", out, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> NdResult<Var> {
        let out = self.nodes[a.0].value.map(|x| x.max(F::zero()));
        self.push("relu", out, Op::Relu(a.0))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> NdResult<Var> {
        let out = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { a: a.0, lo, hi })
    }

    fn want_rank2(&self, name: &'static str, a: Var) -> NdResult<(usize, usize)> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(NdError::BadShape {
                op: name,
                expected: "rank 2",
                got: t.shape().to_vec(),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> NdResult<Var> {
        let (m, n) = self.want_rank2("softmax", a)?;
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            softmax_row(ta.row(i), out.row_mut(i));
        }
        self.push("softmax", out, Op::Softmax(a.0))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> NdResult<Var> {
        let (m, n) = self.want_rank2("log_softmax", a)?;
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let lse = logsumexp_slice(ta.row(i));
            for (o, &x) in out.row_mut(i).iter_mut().zip(ta.row(i)) {
                *o = x - lse;
            }
        }
        self.push("log_softmax", out, Op::LogSoftmax(a.0))
    }

    /// Row-wise log-sum-exp, `[m,n] -> [m]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> NdResult<Var> {
        let (m, _) = self.want_rank2("logsumexp_rows", a)?;
        let ta = &self.nodes[a.0].value;
        let data = (0..m).map(|i| logsumexp_slice(ta.row(i))).collect();
        let out = Tensor::new(&[m], data)?;
        self.push("logsumexp_rows", out, Op::LogSumExpRows(a.0))
    }

    /// Rows scaled to unit L2 norm (small epsilon under the square root,
    /// so an all-zero row maps to zero instead of NaN).
    pub fn l2_normalize_rows(&mut self, a: Var) -> NdResult<Var> {
        let (m, n) = self.want_rank2("l2_normalize_rows", a)?;
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let inv = F::one() / row_norm(ta.row(i));
            for (o, &x) in out.row_mut(i).iter_mut().zip(ta.row(i)) {
                *o = x * inv;
            }
        }
        self.push("l2_normalize_rows", out, Op::L2NormRows(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> NdResult<Var> {
        let s: F = self.nodes[a.0].value.data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> NdResult<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(NdError::BadShape {
                op: "mean_all",
                expected: "non-empty",
                got: t.shape().to_vec(),
            });
        }
        let s: F = t.data().iter().copied().sum();
        let v = s / F::from_f64(t.len() as f64);
        self.push("mean_all", Tensor::scalar(v), Op::MeanAll(a.0))
    }

    /// Sum over the last axis, `[m,n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> NdResult<Var> {
        let (m, _) = self.want_rank2("row_sum", a)?;
        let ta = &self.nodes[a.0].value;
        let data = (0..m).map(|i| ta.row(i).iter().copied().sum()).collect();
        let out = Tensor::new(&[m], data)?;
        self.push("row_sum", out, Op::RowSum(a.0))
    }

    /// Mean over rows, `[m,n] -> [n]`.
    pub fn col_mean(&mut self, a: Var) -> NdResult<Var> {
        let (m, n) = self.want_rank2("col_mean", a)?;
        if m == 0 {
            return Err(NdError::BadShape {
                op: "col_mean",
                expected: "at least one row",
                got: vec![m, n],
            });
        }
        let means = self.nodes[a.0].value.col_means();
        let out = Tensor::new(&[n], means)?;
        self.push("col_mean", out, Op::ColMean(a.0))
    }

    /// Stacks rank-2 blocks with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[Var]) -> NdResult<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = Tensor::vstack(&tensors)?;
        self.push(
            "concat_rows",
            out,
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
        )
    }

    /// Concatenates rank-2 blocks with equal row counts, left to right.
    pub fn concat_cols(&mut self, parts: &[Var]) -> NdResult<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = Tensor::hstack(&tensors)?;
        self.push(
            "concat_cols",
            out,
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> NdResult<Var> {
        let (m, n) = self.want_rank2("slice_rows", a)?;
        if start + len > m {
            return Err(NdError::Invalid(format!(
                "slice_rows [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        let ta = &self.nodes[a.0].value;
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(&[len, n], data)?;
        self.push("slice_rows", out, Op::SliceRows { a: a.0, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> NdResult<Var> {
        let (m, n) = self.want_rank2("slice_cols", a)?;
        if start + len > n {
            return Err(NdError::Invalid(format!(
                "slice_cols [{start}, {}) out of {n} cols",
                start + len
            )));
        }
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[m, len]);
        for i in 0..m {
            out.row_mut(i)
                .copy_from_slice(&ta.row(i)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols { a: a.0, start })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> NdResult<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a.0))
    }

    /// Reverse pass from a scalar loss. Adjoints of nodes that fan out are
    /// accumulated; parameters the loss never touches keep a `None` slot
    /// (read back as zeros through [`Tape::grad_tensor`]).
    pub fn backward(&mut self, loss: Var) -> NdResult<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NdError::NonScalarLoss {
                got: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..self.nodes.len()).rev() {
            // Adjoints only ever reach nodes with a param ancestor, so
            // anything else has no VJP work to do.
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc_slot(grads: &mut [Option<Vec<F>>], idx: usize, len: usize) -> &mut Vec<F> {
        grads[idx].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn apply_vjp(&mut self, i: usize, g: &[F]) {
        // Split borrows: values are read-only here, grads are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |idx: usize| -> &Tensor<F> { &nodes[idx].value };
        match &nodes[i].op {
            Op::Input | Op::Param | Op::Detach(_) => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if nodes[*a].needs_grad {
                    let da = Self::acc_slot(grads, *a, m * k);
                    matmul_nt_into(m, n, k, g, tb.data(), da);
                }
                if nodes[*b].needs_grad {
                    let db = Self::acc_slot(grads, *b, k * n);
                    matmul_tn_into(m, k, n, ta.data(), g, db);
                }
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                if nodes[*a].needs_grad {
                    let da = Self::acc_slot(grads, *a, m * n);
                    // g has shape [n,m]
                    for i2 in 0..m {
                        for j in 0..n {
                            da[i2 * n + j] += g[j * m + i2];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let bcast = val(*a).shape() != val(*b).shape();
                if nodes[*a].needs_grad {
                    let da = Self::acc_slot(grads, *a, val(*a).len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if nodes[*b].needs_grad {
                    let nb = val(*b).len();
                    let db = Self::acc_slot(grads, *b, nb);
                    if bcast {
                        for (j, gv) in g.iter().enumerate() {
                            db[j % nb] += *gv;
                        }
                    } else {
                        for (d, &gv) in db.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                let bcast = val(*a).shape() != val(*b).shape();
                if nodes[*a].needs_grad {
                    let da = Self::acc_slot(grads, *a, val(*a).len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if nodes[*b].needs_grad {
                    let nb = val(*b).len();
                    let db = Self::acc_slot(grads, *b, nb);
                    if bcast {
                        for (j, gv) in g.iter().enumerate() {
                            db[j % nb] -= *gv;
                        }
                    } else {
                        for (d, &gv) in db.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let bcast = val(*a).shape() != val(*b).shape();
                let (ta, tb) = (val(*a), val(*b));
                if nodes[*a].needs_grad {
                    let nb = tb.len();
                    let da = Self::acc_slot(grads, *a, ta.len());
                    if bcast {
                        for (j, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                            *d += gv * tb.data()[j % nb];
                        }
                    } else {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(tb.data()) {
                            *d += gv * bv;
                        }
                    }
                }
                if nodes[*b].needs_grad {
                    let nb = tb.len();
                    let db = Self::acc_slot(grads, *b, nb);
                    if bcast {
                        for (j, &gv) in g.iter().enumerate() {
                            db[j % nb] += gv * ta.data()[j];
                        }
                    } else {
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ta.data()) {
                            *d += gv * av;
                        }
                    }
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if nodes[*a].needs_grad {
                    let da = Self::acc_slot(grads, *a, ta.len());
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv / bv;
                    }
                }
                if nodes[*b].needs_grad {
                    let db = Self::acc_slot(grads, *b, tb.len());
                    for (j, &gv) in g.iter().enumerate() {
                        let bv = tb.data()[j];
                        db[j] -= gv * ta.data()[j] / (bv * bv);
                    }
                }
            }
            Op::Affine { a, mul } => {
                if nodes[*a].needs_grad {
                    let mul = *mul;
                    let da = Self::acc_slot(grads, *a, val(*a).len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += mul * gv;
                    }
                }
            }
            Op::Exp(a) => {
                if nodes[*a].needs_grad {
                    let y = nodes[i].value.data();
                    let da = Self::acc_slot(grads, *a, y.len());
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Ln(a) => {
                if nodes[*a].needs_grad {
                    let x = val(*a).data();
                    let da = Self::acc_slot(grads, *a, x.len());
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                }
            }
            Op::LnFloor { a, eps } => {
                if nodes[*a].needs_grad {
                    let eps = *eps;
                    let x = val(*a).data();
                    let da = Self::acc_slot(grads, *a, x.len());
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv > eps {
                            *d += gv / xv;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if nodes[*a].needs_grad {
                    let y = nodes[i].value.data();
                    let da = Self::acc_slot(grads, *a, y.len());
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * (F::one() - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                if nodes[*a].needs_grad {
                    let x = val(*a).data();
                    let da = Self::acc_slot(grads, *a, x.len());
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if nodes[*a].needs_grad {
                    let (lo, hi) = (*lo, *hi);
                    let x = val(*a).data();
                    let da = Self::acc_slot(grads, *a, x.len());
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv > lo && xv < hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if nodes[*a].needs_grad {
                    let y = &nodes[i].value;
                    let (m, n) = (y.rows(), y.cols());
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = F::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for j in 0..n {
                            da[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if nodes[*a].needs_grad {
                    let y = &nodes[i].value; // log-probs
                    let (m, n) = (y.rows(), y.cols());
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: F = gr.iter().copied().sum();
                        for j in 0..n {
                            da[r * n + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if nodes[*a].needs_grad {
                    let x = val(*a);
                    let y = nodes[i].value.data();
                    let (m, n) = (x.rows(), x.cols());
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] += (x.row(r)[j] - y[r]).exp() * g[r];
                        }
                    }
                }
            }
            Op::L2NormRows(a) => {
                if nodes[*a].needs_grad {
                    let x = val(*a);
                    let (m, n) = (x.rows(), x.cols());
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        let xr = x.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = row_norm(xr);
                        let inv = F::one() / norm;
                        let mut dot = F::zero();
                        for (&gv, &xv) in gr.iter().zip(xr) {
                            dot += gv * xv;
                        }
                        let inv3 = inv * inv * inv;
                        for j in 0..n {
                            da[r * n + j] += gr[j] * inv - xr[j] * dot * inv3;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if nodes[*a].needs_grad {
                    let len = val(*a).len();
                    let da = Self::acc_slot(grads, *a, len);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if nodes[*a].needs_grad {
                    let len = val(*a).len();
                    let gv = g[0] / F::from_f64(len as f64);
                    let da = Self::acc_slot(grads, *a, len);
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::RowSum(a) => {
                if nodes[*a].needs_grad {
                    let x = val(*a);
                    let (m, n) = (x.rows(), x.cols());
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] += g[r];
                        }
                    }
                }
            }
            Op::ColMean(a) => {
                if nodes[*a].needs_grad {
                    let x = val(*a);
                    let (m, n) = (x.rows(), x.cols());
                    let inv = F::one() / F::from_f64(m as f64);
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let len = nodes[p].value.len();
                    if nodes[p].needs_grad {
                        let dp = Self::acc_slot(grads, p, len);
                        for (d, &gv) in dp.iter_mut().zip(&g[at..at + len]) {
                            *d += gv;
                        }
                    }
                    at += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = nodes[i].value.rows();
                let total = nodes[i].value.cols();
                let mut at = 0;
                for p in parts {
                    let (pm, pn) = (nodes[p].value.rows(), nodes[p].value.cols());
                    debug_assert_eq!(pm, rows);
                    if nodes[p].needs_grad {
                        let dp = Self::acc_slot(grads, p, pm * pn);
                        for r in 0..rows {
                            for j in 0..pn {
                                dp[r * pn + j] += g[r * total + at + j];
                            }
                        }
                    }
                    at += pn;
                }
            }
            Op::SliceRows { a, start } => {
                if nodes[*a].needs_grad {
                    let (start, n) = (*start, val(*a).cols());
                    let len = val(*a).len();
                    let da = Self::acc_slot(grads, *a, len);
                    for (off, &gv) in g.iter().enumerate() {
                        da[start * n + off] += gv;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if nodes[*a].needs_grad {
                    let x = val(*a);
                    let (start, m, n) = (*start, x.rows(), x.cols());
                    let out_n = nodes[i].value.cols();
                    let da = Self::acc_slot(grads, *a, m * n);
                    for r in 0..m {
                        for j in 0..out_n {
                            da[r * n + start + j] += g[r * out_n + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if nodes[*a].needs_grad {
                    let len = val(*a).len();
                    let da = Self::acc_slot(grads, *a, len);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
    }
}

fn row_norm<F: Scalar>(row: &[F]) -> F {
    let mut sq = F::from_f64(L2_EPS);
    for &x in row {
        sq += x * x;
    }
    sq.sqrt()
}

fn softmax_row<F: Scalar>(x: &[F], out: &mut [F]) {
    let mut m = x[0];
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn logsumexp_slice<F: Scalar>(x: &[F]) -> F {
    let mut m = x[0];
    for &v in x {
        if v > m {
            m = v;
        }
    }
    if !m.is_finite() {
        // All -inf rows would otherwise produce NaN; propagate the max.
        return m;
    }
    let mut sum = F::zero();
    for &v in x {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 3, &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 2, &[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert!((tape.value(y).data()[0] - 0.6).abs() <= 1e-9);
        assert!((tape.value(y).data()[1] - 0.8).abs() <= 1e-9);
    }

    #[test]
    fn l2_normalize_zero_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 3, &[0.0, 0.0, 0.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t2(1, 3, &[1.0, 2.0, 3.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_closed_form() {
        // loss = -log softmax(p)[k]; d loss/d p = softmax(p) - onehot(k)
        let logits = [0.2, -1.3, 0.7, 0.1];
        let k = 2;
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t2(1, 4, &logits));
        let lsm = tape.log_softmax(p).unwrap();
        let mask = tape.input(t2(1, 4, &[0.0, 0.0, -1.0, 0.0]));
        let picked = tape.mul(lsm, mask).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();

        let mut probs = [0.0; 4];
        softmax_row(&logits, &mut probs);
        for j in 0..4 {
            let want = probs[j] - if j == k { 1.0 } else { 0.0 };
            assert!((g[j] - want).abs() <= 1e-12, "{} vs {}", g[j], want);
        }
    }

    #[test]
    fn fanout_accumulates_both_paths() {
        // loss = sum(p) + mean(2p): d = 1 + 2/len
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t2(1, 4, &[0.5, -0.25, 2.0, 1.0]));
        let s = tape.sum_all(p).unwrap();
        let doubled = tape.scale(p, 2.0).unwrap();
        let m = tape.mean_all(doubled).unwrap();
        let loss = tape.add(s, m).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(p).unwrap() {
            assert!((g - 1.5).abs() <= 1e-12);
        }
    }

    #[test]
    fn unused_parameter_reads_back_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(t2(1, 2, &[1.0, 2.0]));
        let unused = tape.param(t2(1, 2, &[3.0, 4.0]));
        let loss = tape.sum_all(used).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_tensor(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t2(1, 2, &[1.0, 2.0]));
        let d = tape.detach(p);
        let prod = tape.mul(p, d).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        // AD sees d as a constant, so the gradient is d's value, not 2p.
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t2(1, 2, &[1.0, 2.0]));
        let e = tape.backward(p).unwrap_err();
        assert!(matches!(e, NdError::NonScalarLoss { .. }));
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 2, &[1.0, 0.0]));
        assert!(matches!(tape.ln(x), Err(NdError::Domain { .. })));
    }

    #[test]
    fn ln_floor_handles_zero_and_matches_ln_above_floor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 2, &[1.0, 0.0]));
        let y = tape.ln_floor(x, 1e-12).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert_eq!(tape.value(y).data()[1], (1e-12f64).ln());
    }

    #[test]
    fn div_by_zero_surfaces_as_non_finite() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(t2(1, 2, &[1.0, 1.0]));
        let b = tape.input(t2(1, 2, &[1.0, 0.0]));
        assert!(matches!(
            tape.div(a, b),
            Err(NdError::NonFinite { op: "div" })
        ));
    }

    #[test]
    fn broadcast_add_backward_sums_columns() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(t2(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).row(2), &[15.0, 26.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_slice_round_trip_routes_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t2(2, 2, &[1., 2., 3., 4.]));
        let b = tape.param(t2(2, 1, &[5., 6.]));
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).row(0), &[1., 2., 5.]);
        let right = tape.slice_cols(cat, 2, 1).unwrap();
        let loss = tape.sum_all(right).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let a = tape.param(t2(1, 2, &[1., 2.]));
        let b = tape.param(t2(2, 2, &[3., 4., 5., 6.]));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let mid = tape.slice_rows(cat, 1, 1).unwrap();
        assert_eq!(tape.value(mid).data(), &[3.0, 4.0]);
        let loss = tape.sum_all(mid).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t2(1, 3, &[1000.0, 1000.0, 1000.0]));
        let y = tape.logsumexp_rows(x).unwrap();
        assert!((tape.value(y).data()[0] - (1000.0 + 3.0f64.ln())).abs() <= 1e-9);
    }

    #[test]
    fn matmul_backward_matches_manual_product_rule() {
        // loss = sum(A @ B): dA = ones @ B^T, dB = A^T @ ones
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t2(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t2(3, 2, &[1., -1., 0.5, 2., -2., 0.]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        let (ta, tb) = (t2(2, 3, &[1., 2., 3., 4., 5., 6.]), t2(3, 2, &[1., -1., 0.5, 2., -2., 0.]));
        let ga = tape.grad(a).unwrap();
        let gb = tape.grad(b).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..2).map(|j| tb.at2(p, j)).sum();
                assert!((ga[i * 3 + p] - want).abs() <= 1e-12);
            }
        }
        for p in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|i| ta.at2(i, p)).sum();
                assert!((gb[p * 2 + j] - want).abs() <= 1e-12);
            }
        }
    }
}
