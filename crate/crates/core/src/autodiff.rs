//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! node order is already topological and the backward sweep is a single
//! reverse pass. Leaves keep their gradients; interior gradients are released
//! as soon as they have been propagated.
//!
//! A tape is owned by one worker. Samples processed in parallel each record
//! their own tape and their leaf gradients are reduced afterwards.

use std::sync::Arc;

use crate::error::{DapaError, Result};
use crate::rng::RngStream;
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Neg,
}

impl UnaryKind {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Neg => -x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative<T: Scalar>(self, _x: T, y: T) -> T {
        match self {
            UnaryKind::Tanh => T::one() - y * y,
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Exp => y,
            UnaryKind::Neg => -T::one(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct LstmNode<T> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    hidden: usize,
    /// Activated gates per step, laid out `[i, f, g, o]` (steps x 4h).
    gates: Vec<T>,
    /// Cell state per step (steps x h).
    cells: Vec<T>,
}

struct CccNode<T> {
    pred: Var,
    truth: Arc<Vec<T>>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_trans: bool,
        b_trans: bool,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, UnaryKind),
    SoftmaxRows(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MulConst {
        x: Var,
        factor: Arc<Vec<T>>,
    },
    Sum(Var),
    Lstm(Box<LstmNode<T>>),
    Ccc(Box<CccNode<T>>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn dim_err(msg: String) -> DapaError {
    DapaError::Dimension(msg)
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared().clone(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that always tracks gradients.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), n.value.clone())
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes its argument.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_trans: bool, b_trans: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul lhs")?;
        let (br, bc) = self.dims2(b, "matmul rhs")?;
        let (m, k) = if a_trans { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err(format!(
                "matmul inner dimensions disagree: {:?}{} x {:?}{}",
                self.shape(a),
                if a_trans { "^T" } else { "" },
                self.shape(b),
                if b_trans { "^T" } else { "" },
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), a_trans, self.value(b), b_trans, &mut out, T::zero());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
            },
            ng,
        ))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "row bias input")?;
        if self.value(bias).len() != c {
            return Err(dim_err(format!(
                "bias of shape {:?} does not match rows of width {c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o = *o + bv);
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(vec![r, c], out, Op::AddRowBias { x, bias }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), ng)
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Unary(x, kind), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }

    /// Row-wise softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = self.shape(x).last().copied().unwrap_or(1);
        let mut out = self.value(x).to_vec();
        if cols > 0 {
            for row in out.chunks_exact_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                let inv = T::one() / total;
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DapaError::Usage("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let off_axis_ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !off_axis_ok {
                return Err(dim_err(format!(
                    "concat along axis {axis}: shape {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let v = self.value(p);
                out.extend_from_slice(&v[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err(format!(
                "slice {start}..{} along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(oshape, out, Op::Slice { x, axis, start }, ng))
    }

    /// Elementwise product with a constant factor tensor.
    pub fn mul_const(&mut self, x: Var, factor: Arc<Vec<T>>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(dim_err(format!(
                "constant factor of length {} for shape {:?}",
                factor.len(),
                self.shape(x)
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(factor.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, factor }, ng))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity when not training.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DapaError::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(x, Arc::new(mask))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    /// One LSTM direction over a whole sequence.
    ///
    /// `x` is `steps x input`, `w_ih` is `4h x input`, `w_hh` is `4h x h` and
    /// `bias` has `4h` entries, gate blocks ordered input, forget, cell,
    /// output. With `reverse` the sequence is consumed from the last frame to
    /// the first; the output rows stay in the original frame order.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let (steps, input) = self.dims2(x, "lstm input")?;
        let (g4, in2) = self.dims2(w_ih, "lstm input weights")?;
        let (g4b, hidden) = self.dims2(w_hh, "lstm recurrent weights")?;
        if g4 != 4 * hidden || g4b != g4 || in2 != input || self.value(bias).len() != g4 {
            return Err(dim_err(format!(
                "lstm weights inconsistent: x {:?}, w_ih {:?}, w_hh {:?}, bias {:?}",
                self.shape(x),
                self.shape(w_ih),
                self.shape(w_hh),
                self.shape(bias)
            )));
        }
        let h = hidden;
        // Input contribution for every step at once: x * w_ih^T + b.
        let mut pre = vec![T::zero(); steps * g4];
        T::gemm(steps, input, g4, self.value(x), false, self.value(w_ih), true, &mut pre, T::zero());
        let b = self.value(bias);
        for row in pre.chunks_exact_mut(g4) {
            row.iter_mut().zip(b).for_each(|(p, &bv)| *p = *p + bv);
        }

        let whh = self.value(w_hh);
        let mut gates = pre;
        let mut cells = vec![T::zero(); steps * h];
        let mut out = vec![T::zero(); steps * h];
        let mut h_prev = vec![T::zero(); h];
        let mut c_prev = vec![T::zero(); h];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let z = &mut gates[t * g4..(t + 1) * g4];
            if k > 0 {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = *zj + dot(&whh[j * h..(j + 1) * h], &h_prev);
                }
            }
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let g_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                z[j] = i_g;
                z[h + j] = f_g;
                z[2 * h + j] = g_g;
                z[3 * h + j] = o_g;
                let c = f_g * c_prev[j] + i_g * g_g;
                cells[t * h + j] = c;
                out[t * h + j] = o_g * c.tanh();
            }
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
            h_prev.copy_from_slice(&out[t * h..(t + 1) * h]);
        }
        let ng = self.ng(x) || self.ng(w_ih) || self.ng(w_hh) || self.ng(bias);
        let node = LstmNode {
            x,
            w_ih,
            w_hh,
            bias,
            reverse,
            hidden: h,
            gates,
            cells,
        };
        Ok(self.push(vec![steps, h], out, Op::Lstm(Box::new(node)), ng))
    }

    /// `1 - CCC(pred, truth)` as a scalar node; differentiable through `pred`.
    pub fn ccc_loss(&mut self, pred: Var, truth: &[T]) -> Result<Var> {
        let m = self.value(pred).len();
        if m != truth.len() {
            return Err(dim_err(format!(
                "ccc loss: {m} predictions against {} targets",
                truth.len()
            )));
        }
        if m < 2 {
            return Err(DapaError::Usage(format!(
                "ccc loss needs at least 2 frames, got {m}"
            )));
        }
        let stats = CccStats::compute(self.value(pred), truth);
        let ng = self.ng(pred);
        let node = CccNode {
            pred,
            truth: Arc::new(truth.to_vec()),
        };
        Ok(self.push(
            vec![],
            vec![T::from_f64_lossy(1.0 - stats.ccc())],
            Op::Ccc(Box::new(node)),
            ng,
        ))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(DapaError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(loss, &[T::one()])
    }

    /// Backpropagates an upstream gradient `seed` for the node `out`.
    pub fn backward_from(&self, out: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(out).len() {
            return Err(dim_err(format!(
                "seed gradient of length {} for output of shape {:?}",
                seed.len(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        macro_rules! grad_of {
            ($v:expr) => {
                grad_buf(grads, nodes[$v.0].value.len(), $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
            } => {
                let (ta, tb) = (*a_trans, *b_trans);
                let m = node.shape[0];
                let n = node.shape[1];
                let sa = &nodes[a.0].shape;
                let k = if ta { sa[0] } else { sa[1] };
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if needs(*a) {
                    let ga = grad_of!(*a);
                    if ta {
                        T::gemm(k, n, m, bv, tb, g, true, ga, T::one());
                    } else {
                        T::gemm(m, n, k, g, false, bv, !tb, ga, T::one());
                    }
                }
                if needs(*b) {
                    let gb = grad_of!(*b);
                    if tb {
                        T::gemm(n, m, k, g, true, av, ta, gb, T::one());
                    } else {
                        T::gemm(k, m, n, av, !ta, g, false, gb, T::one());
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if needs(*x) {
                    axpy(T::one(), g, grad_of!(*x));
                }
                if needs(*bias) {
                    let gb = grad_of!(*bias);
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    axpy(T::one(), g, grad_of!(*a));
                }
                if needs(*b) {
                    axpy(T::one(), g, grad_of!(*b));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(T::one(), g, grad_of!(*a));
                }
                if needs(*b) {
                    axpy(-T::one(), g, grad_of!(*b));
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if needs(*a) {
                    let ga = grad_of!(*a);
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *o = *o + gi * bi;
                    }
                }
                if needs(*b) {
                    let gb = grad_of!(*b);
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::Scale(x, f) => {
                if needs(*x) {
                    axpy(*f, g, grad_of!(*x));
                }
            }
            Op::Unary(x, kind) => {
                if needs(*x) {
                    let xv = &nodes[x.0].value;
                    let gx = grad_of!(*x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * kind.derivative(xv[i], node.value[i]);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let cols = node.shape.last().copied().unwrap_or(1);
                    let gx = grad_of!(*x);
                    for ((grow, yrow), gxrow) in g
                        .chunks_exact(cols)
                        .zip(node.value.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let inner = dot(grow, yrow);
                        for j in 0..cols {
                            gxrow[j] = gxrow[j] + yrow[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = nodes[p.0].shape[*axis];
                    if needs(p) {
                        let gp = grad_of!(p);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            axpy(
                                T::one(),
                                &g[src..src + ext * inner],
                                &mut gp[o * ext * inner..(o + 1) * ext * inner],
                            );
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                if needs(*x) {
                    let (outer, ext, inner) = axis_split(&nodes[x.0].shape, *axis);
                    let len = node.shape[*axis];
                    let gx = grad_of!(*x);
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        axpy(
                            T::one(),
                            &g[o * len * inner..(o + 1) * len * inner],
                            &mut gx[dst..dst + len * inner],
                        );
                    }
                }
            }
            Op::MulConst { x, factor } => {
                if needs(*x) {
                    let gx = grad_of!(*x);
                    for ((o, &gi), &f) in gx.iter_mut().zip(g).zip(factor.iter()) {
                        *o = *o + gi * f;
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let gx = grad_of!(*x);
                    gx.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::Lstm(l) => self.lstm_backward(node, l, g, grads),
            Op::Ccc(c) => {
                if needs(c.pred) {
                    let pv = &nodes[c.pred.0].value;
                    let stats = CccStats::compute(pv, &c.truth);
                    let gp = grad_of!(c.pred);
                    stats.accumulate_loss_grad(pv, &c.truth, g[0], gp);
                }
            }
        }
    }

    fn lstm_backward(
        &self,
        node: &Node<T>,
        l: &LstmNode<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let h = l.hidden;
        let g4 = 4 * h;
        let steps = node.shape[0];
        let xv = &self.nodes[l.x.0].value;
        let input = self.nodes[l.x.0].shape[1];
        let whh = &self.nodes[l.w_hh.0].value;
        let wih = &self.nodes[l.w_ih.0].value;
        let hv = &node.value;

        // Pre-activation gradients for every step, and the hidden state that
        // fed each step (zero for the first processed step).
        let mut dz = vec![T::zero(); steps * g4];
        let mut h_in = vec![T::zero(); steps * h];
        let mut dh_next = vec![T::zero(); h];
        let mut dc_next = vec![T::zero(); h];
        for k in (0..steps).rev() {
            let t = if l.reverse { steps - 1 - k } else { k };
            let prev = if k == 0 {
                None
            } else if l.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            if let Some(p) = prev {
                h_in[t * h..(t + 1) * h].copy_from_slice(&hv[p * h..(p + 1) * h]);
            }
            let gate = &l.gates[t * g4..(t + 1) * g4];
            let dzt = &mut dz[t * g4..(t + 1) * g4];
            for j in 0..h {
                let (ig, fg, gg, og) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                let c = l.cells[t * h + j];
                let tc = c.tanh();
                let dh = g[t * h + j] + dh_next[j];
                let dc = dh * og * (T::one() - tc * tc) + dc_next[j];
                let c_prev = prev.map_or(T::zero(), |p| l.cells[p * h + j]);
                dzt[j] = dc * gg * ig * (T::one() - ig);
                dzt[h + j] = dc * c_prev * fg * (T::one() - fg);
                dzt[2 * h + j] = dc * ig * (T::one() - gg * gg);
                dzt[3 * h + j] = dh * tc * og * (T::one() - og);
                dc_next[j] = dc * fg;
            }
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            if prev.is_some() {
                for (j, &d) in dzt.iter().enumerate() {
                    axpy(d, &whh[j * h..(j + 1) * h], &mut dh_next);
                }
            }
        }

        if self.ng(l.x) {
            let gx = grad_buf(grads, xv.len(), l.x);
            T::gemm(steps, g4, input, &dz, false, wih, false, gx, T::one());
        }
        if self.ng(l.w_ih) {
            let gw = grad_buf(grads, wih.len(), l.w_ih);
            T::gemm(g4, steps, input, &dz, true, xv, false, gw, T::one());
        }
        if self.ng(l.w_hh) {
            let gw = grad_buf(grads, whh.len(), l.w_hh);
            T::gemm(g4, steps, h, &dz, true, &h_in, false, gw, T::one());
        }
        if self.ng(l.bias) {
            let gb = grad_buf(grads, g4, l.bias);
            for row in dz.chunks_exact(g4) {
                axpy(T::one(), row, gb);
            }
        }
    }
}

/// Population moments behind the concordance correlation coefficient.
struct CccStats {
    m: f64,
    mean_x: f64,
    mean_y: f64,
    cov: f64,
    denom: f64,
}

/// Denominators below this count as degenerate (CCC := 0).
pub const CCC_DEGENERATE_EPS: f64 = 1e-12;

impl CccStats {
    fn compute<T: Scalar>(x: &[T], y: &[T]) -> Self {
        let m = x.len() as f64;
        let mean_x = x.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let mean_y = y.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let dx = a.as_f64() - mean_x;
            let dy = b.as_f64() - mean_y;
            vx += dx * dx;
            vy += dy * dy;
            cov += dx * dy;
        }
        let (vx, vy, cov) = (vx / m, vy / m, cov / m);
        let diff = mean_x - mean_y;
        Self {
            m,
            mean_x,
            mean_y,
            cov,
            denom: vx + vy + diff * diff,
        }
    }

    fn ccc(&self) -> f64 {
        if self.denom < CCC_DEGENERATE_EPS {
            0.0
        } else {
            2.0 * self.cov / self.denom
        }
    }

    /// Adds `upstream * d(1 - CCC)/dx` into `out`.
    fn accumulate_loss_grad<T: Scalar>(&self, x: &[T], y: &[T], upstream: T, out: &mut [T]) {
        if self.denom < CCC_DEGENERATE_EPS {
            return;
        }
        let up = upstream.as_f64();
        let d2 = self.denom * self.denom;
        let shift = self.mean_x - self.mean_y;
        for i in 0..x.len() {
            let dcov = (y[i].as_f64() - self.mean_y) / self.m;
            let dden = 2.0 * (x[i].as_f64() - self.mean_x) / self.m + 2.0 * shift / self.m;
            let dccc = 2.0 * (dcov * self.denom - self.cov * dden) / d2;
            out[i] = out[i] + T::from_f64_lossy(-dccc * up);
        }
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the tensor's gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![T::zero(); t.numel()]),
        }
    }
}
