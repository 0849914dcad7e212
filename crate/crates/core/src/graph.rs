//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node
//! holding its value, and remembers its inputs. Node indices are therefore a
//! topological order, and [`Graph::backward`] walks the tape once in reverse.
//!
//! Leaves are either trainable parameters ([`Graph::param`]) or constants
//! ([`Graph::constant`]). Gradients only flow into nodes that depend on a
//! parameter, so frozen sub-networks cost a forward pass plus the
//! input-gradient half of their backward pass.
//!
//! The first non-finite value produced by any operation is recorded and
//! reported by [`Graph::check`] / [`Graph::backward`] together with the node
//! index and operation name.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{invert, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    PowRows(Var, Vec<i32>),
    ScaleRows(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
        denom: T,
    },
    LayerNorm {
        x: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Inverse(Var),
    GumbelHard {
        logits: Var,
        soft: Tensor<T>,
        tau: T,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::PowRows(..) => "pow_rows",
            Op::ScaleRows(..) => "scale_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Inverse(..) => "inverse",
            Op::GumbelHard { .. } => "gumbel_softmax_hard",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::BroadcastRows(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::PowRows(a, _)
            | Op::ScaleRows(a, _)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Inverse(a) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } | Op::GumbelHard { logits, .. } => vec![*logits],
            Op::LayerNorm { x, .. } => vec![*x],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A single-writer computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<'a, T: Real>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn col_sums<T: Real>(t: &Tensor<T>, out: &mut [T]) {
    let c = t.cols();
    for r in 0..t.rows() {
        for (o, &x) in out.iter_mut().zip(&t.data()[r * c..(r + 1) * c]) {
            *o = *o + x;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not scalar");
        t.data()[0]
    }

    /// Fails if any node produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some((node, op)) => Err(Error::Numeric { node, op }),
            None => Ok(()),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row`, with the `1 × n` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_op(a, row, |x, y| x + y);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a ⊙ row`, with the `1 × n` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.row_op(a, row, |x, y| x * y);
        self.push(out, Op::MulRow(a, row))
    }

    fn row_op(&self, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        assert_eq!(tr.len(), c, "row broadcast width mismatch");
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (x, &y) in chunk.iter_mut().zip(tr.data()) {
                *x = f(*x, y);
            }
        }
        out
    }

    /// Repeat a `1 × n` row `m` times.
    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Var {
        let tr = self.value(row);
        let n = tr.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(tr.data());
        }
        let out = Tensor::from_vec(&[m, n], data);
        self.push(out, Op::BroadcastRows(row))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scaled(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    /// Elementwise integer power with one exponent per row.
    pub fn pow_rows(&mut self, a: Var, exponents: Vec<i32>) -> Var {
        let ta = self.value(a);
        assert_eq!(exponents.len(), ta.rows(), "one exponent per row");
        let c = ta.cols();
        let mut out = ta.clone();
        for (r, chunk) in out.data_mut().chunks_mut(c).enumerate() {
            for x in chunk.iter_mut() {
                *x = x.powi(exponents[r]);
            }
        }
        self.push(out, Op::PowRows(a, exponents))
    }

    /// Elementwise `a^k` for a fixed integer `k`.
    pub fn powi(&mut self, a: Var, k: i32) -> Var {
        let rows = self.value(a).rows();
        self.pow_rows(a, vec![k; rows])
    }

    /// Multiply row `r` of `a` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Var {
        let ta = self.value(a);
        assert_eq!(factors.len(), ta.rows(), "one factor per row");
        let c = ta.cols();
        let mut out = ta.clone();
        for (r, chunk) in out.data_mut().chunks_mut(c).enumerate() {
            for x in chunk.iter_mut() {
                *x = *x * factors[r];
            }
        }
        self.push(out, Op::ScaleRows(a, factors))
    }

    /// Row lookup: output row `r` is row `idx[r]` of `src`.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let ts = self.value(src);
        let c = ts.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(ts.row_slice(i));
        }
        let out = Tensor::from_vec(&[idx.len(), c], data);
        self.push(out, Op::GatherRows(src, idx))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = self.value(a);
        assert!(start < end && end <= ta.cols(), "slice out of range");
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let out = Tensor::from_vec(&[ta.rows(), end - start], data);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let tp = self.value(p);
                assert_eq!(tp.rows(), rows, "concat row mismatch");
                data.extend_from_slice(tp.row_slice(r));
            }
        }
        let out = Tensor::from_vec(&[rows, total], data);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, divided by `denom`. Rows with `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, denom: T) -> Var {
        let tl = self.value(logits);
        assert_eq!(targets.len(), tl.rows(), "one target per row");
        let probs = softmax_rows(tl);
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < tl.cols(), "target out of range");
                // log p = x_t - logsumexp
                let row = tl.row_slice(r);
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let lse = m + row.iter().fold(T::zero(), |a, &x| a + (x - m).exp()).ln();
                total = total + (lse - row[t]);
            }
        }
        let out = Tensor::scalar(total / denom);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            },
        )
    }

    /// Layer normalization over each row (no affine terms), `ε = 1e-5`.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let n = T::from_usize(c).unwrap();
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for chunk in xhat.data_mut().chunks_mut(c) {
            let mean = chunk.iter().fold(T::zero(), |a, &x| a + x) / n;
            let var = chunk
                .iter()
                .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
                / n;
            let is = T::one() / (var + eps).sqrt();
            for x in chunk.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(
            xhat.clone(),
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
        )
    }

    /// Sum of all elements as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Matrix inverse. Fails on a singular input.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let inv = invert(self.value(a)).ok_or(Error::Singular("inverse"))?;
        Ok(self.push(inv, Op::Inverse(a)))
    }

    /// Hard Gumbel-softmax over each row with a straight-through gradient.
    ///
    /// Forward: one-hot of `argmax(logits + G)` with fresh Gumbel noise `G`.
    /// Backward: the gradient of `softmax((logits + G) / tau)` at the same
    /// noise draw.
    pub fn gumbel_softmax_hard(&mut self, logits: Var, tau: T, rng: &mut Rng) -> Var {
        assert!(tau > T::zero(), "temperature must be positive");
        let tl = self.value(logits);
        let mut perturbed = tl.clone();
        for x in perturbed.data_mut() {
            *x = (*x + T::from_f64_lossy(rng.gumbel())) / tau;
        }
        let soft = softmax_rows(&perturbed);
        let mut hard = Tensor::zeros(tl.shape());
        for r in 0..tl.rows() {
            let k = perturbed.argmax_row(r, tl.cols());
            hard.set(r, k, T::one());
        }
        if !tl.is_finite() {
            // Make the fault visible on this node even though `hard` is finite.
            hard.data_mut()[0] = T::nan();
        }
        self.push(hard, Op::GumbelHard { logits, soft, tau })
    }

    /// Value of `loss` and gradients for every parameter it depends on.
    pub fn forward_backward(&self, loss: Var) -> Result<(T, Gradients<T>)> {
        let grads = self.backward(loss)?;
        Ok((self.scalar(loss), grads))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check()?;
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(g) = &grads[i] {
                    if !g.is_finite() {
                        return Err(Error::Numeric {
                            node: i,
                            op: "backward:leaf",
                        });
                    }
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if rg(*a) {
                    let bv = self.value(*b).data();
                    let buf = grad_buf(grads, *a, self.value(*a).shape());
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        bv,
                        (1, n as isize),
                        T::one(),
                        buf.data_mut(),
                    );
                }
                if rg(*b) {
                    let av = self.value(*a).data();
                    let buf = grad_buf(grads, *b, self.value(*b).shape());
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av,
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::one(),
                        buf.data_mut(),
                    );
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let gt = g.transpose();
                    grad_buf(grads, *a, self.value(*a).shape()).add_assign(&gt);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if rg(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
                if rg(*b) {
                    let buf = grad_buf(grads, *b, g.shape());
                    for (x, &y) in buf.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if rg(x) {
                        let other = self.value(y).data();
                        let buf = grad_buf(grads, x, g.shape());
                        for ((d, &gi), &o) in buf.data_mut().iter_mut().zip(g.data()).zip(other) {
                            *d = *d + gi * o;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
                if rg(*row) {
                    let buf = grad_buf(grads, *row, self.value(*row).shape());
                    col_sums(g, buf.data_mut());
                }
            }
            Op::MulRow(a, row) => {
                let c = g.cols();
                if rg(*a) {
                    let rv = self.value(*row).data();
                    let buf = grad_buf(grads, *a, g.shape());
                    for (dchunk, gchunk) in buf.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
                        for ((d, &gi), &r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d = *d + gi * r;
                        }
                    }
                }
                if rg(*row) {
                    let av = self.value(*a).data();
                    let buf = grad_buf(grads, *row, self.value(*row).shape());
                    for (achunk, gchunk) in av.chunks(c).zip(g.data().chunks(c)) {
                        for ((d, &gi), &x) in buf.data_mut().iter_mut().zip(gchunk).zip(achunk) {
                            *d = *d + gi * x;
                        }
                    }
                }
            }
            Op::BroadcastRows(row) => {
                if rg(*row) {
                    let buf = grad_buf(grads, *row, self.value(*row).shape());
                    col_sums(g, buf.data_mut());
                }
            }
            Op::Scale(a, k) => {
                if rg(*a) {
                    let buf = grad_buf(grads, *a, g.shape());
                    for (d, &gi) in buf.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + gi * *k;
                    }
                }
            }
            Op::AddScalar(a) => {
                if rg(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
            }
            Op::Sigmoid(a) => self.unary_back(*a, out, g, grads, |y, _| y * (T::one() - y)),
            Op::Tanh(a) => self.unary_back(*a, out, g, grads, |y, _| T::one() - y * y),
            Op::Relu(a) => self.unary_back(*a, out, g, grads, |_, x| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::PowRows(a, exps) => {
                if rg(*a) {
                    let c = g.cols();
                    let av = self.value(*a).data();
                    let buf = grad_buf(grads, *a, g.shape());
                    for (idx, d) in buf.data_mut().iter_mut().enumerate() {
                        let k = exps[idx / c];
                        if k != 0 {
                            let kk = T::from_i32(k).unwrap();
                            *d = *d + g.data()[idx] * kk * av[idx].powi(k - 1);
                        }
                    }
                }
            }
            Op::ScaleRows(a, factors) => {
                if rg(*a) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *a, g.shape());
                    for (idx, d) in buf.data_mut().iter_mut().enumerate() {
                        *d = *d + g.data()[idx] * factors[idx / c];
                    }
                }
            }
            Op::GatherRows(src, idx) => {
                if rg(*src) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *src, self.value(*src).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut buf.data_mut()[i * c..(i + 1) * c];
                        for (d, &gi) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if rg(*a) {
                    let width = g.cols();
                    let full = self.value(*a).cols();
                    let buf = grad_buf(grads, *a, self.value(*a).shape());
                    for r in 0..g.rows() {
                        let dst = &mut buf.data_mut()[r * full + start..r * full + start + width];
                        for (d, &gi) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if rg(p) {
                        let buf = grad_buf(grads, p, self.value(p).shape());
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + width];
                            for (d, &gi) in buf.row_slice_mut(r).iter_mut().zip(src) {
                                *d = *d + gi;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        let y = out.row_slice(r);
                        let gy = g.row_slice(r);
                        let dot = y.iter().zip(gy).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        let d = &mut buf.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            d[j] = d[j] + y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                if rg(*logits) {
                    let scale = g.data()[0] / *denom;
                    let c = probs.cols();
                    let buf = grad_buf(grads, *logits, probs.shape());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = probs.row_slice(r);
                        let d = &mut buf.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[j] = d[j] + scale * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                if rg(*x) {
                    let c = g.cols();
                    let n = T::from_usize(c).unwrap();
                    let buf = grad_buf(grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let gy = g.row_slice(r);
                        let xh = xhat.row_slice(r);
                        let mean_g = gy.iter().fold(T::zero(), |a, &b| a + b) / n;
                        let mean_gx =
                            gy.iter().zip(xh).fold(T::zero(), |a, (&b, &c)| a + b * c) / n;
                        let d = &mut buf.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            d[j] = d[j] + inv_std[r] * (gy[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let s = g.data()[0];
                    let buf = grad_buf(grads, *a, self.value(*a).shape());
                    for d in buf.data_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Inverse(a) => {
                if rg(*a) {
                    // d/dX of X^{-1}: -Y^T G Y^T with Y = X^{-1}.
                    let yt = out.transpose();
                    let delta = yt.matmul(g).matmul(&yt);
                    let buf = grad_buf(grads, *a, g.shape());
                    for (d, &v) in buf.data_mut().iter_mut().zip(delta.data()) {
                        *d = *d - v;
                    }
                }
            }
            Op::GumbelHard { logits, soft, tau } => {
                if rg(*logits) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *logits, g.shape());
                    for r in 0..g.rows() {
                        let y = soft.row_slice(r);
                        let gy = g.row_slice(r);
                        let dot = y.iter().zip(gy).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        let d = &mut buf.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            d[j] = d[j] + y[j] * (gy[j] - dot) / *tau;
                        }
                    }
                }
            }
        }
    }

    /// Backward rule for elementwise ops whose derivative depends on the
    /// output `y` and/or the input `x`.
    fn unary_back(
        &self,
        a: Var,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        deriv: impl Fn(T, T) -> T,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = self.value(a).data();
        let y = out.data();
        let buf = grad_buf(grads, a, g.shape());
        for (idx, d) in buf.data_mut().iter_mut().enumerate() {
            *d = *d + g.data()[idx] * deriv(y[idx], x[idx]);
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut out = t.clone();
    for chunk in out.data_mut().chunks_mut(c) {
        let m = chunk.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for x in chunk.iter_mut() {
            *x = (*x - m).exp();
            s = s + *x;
        }
        for x in chunk.iter_mut() {
            *x = *x / s;
        }
    }
    out
}
