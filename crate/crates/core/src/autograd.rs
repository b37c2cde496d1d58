//! Tape-free reverse-mode automatic differentiation.
//!
//! Every backward rule is written in terms of differentiable [`Var`]
//! operations, so a gradient computed with `create_graph = true` is itself a
//! node in the graph and can be differentiated again. Second-order quantities
//! such as the gradient of a gradient norm with respect to the input are
//! obtained by calling [`grad`] twice.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::conv;
use crate::tensor::{self, broadcast_compatible, gemm, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Sigmoid,
    Softplus,
    Sqrt,
    SafeRecip,
    Relu,
    Clamp(f64, f64),
    MaskMul(Rc<Tensor>),
    Broadcast,
    SumTo,
    Reshape,
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvInputAdjoint { stride: usize, pad: usize },
    ConvWeightAdjoint { stride: usize, pad: usize },
    Gather(Rc<Vec<usize>>),
    Scatter(Rc<Vec<usize>>),
    LogSumExp,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    parents: Vec<Var>,
}

/// A tensor-valued node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf whose gradient can be requested.
    pub fn param(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    /// A leaf that never receives gradient.
    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn make(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Var(Rc::new(Node {
                value,
                requires_grad,
                op,
                parents,
            }))
        } else {
            Var::constant(value)
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::make(v, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::make(v, Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::make(v, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var {
        Var::make(self.value().map(|a| -a), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::make(self.value().map(|a| a * c), Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::make(self.value().map(|a| a + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn exp(&self) -> Var {
        Var::make(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::make(self.value().map(f64::ln), Op::Ln, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::make(self.value().map(sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::make(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    /// `1/x`, defined as 0 at `x == 0`.
    pub fn safe_recip(&self) -> Var {
        Var::make(
            self.value().map(|a| if a == 0.0 { 0.0 } else { 1.0 / a }),
            Op::SafeRecip,
            vec![self.clone()],
        )
    }

    pub fn relu(&self) -> Var {
        Var::make(self.value().map(|a| a.max(0.0)), Op::Relu, vec![self.clone()])
    }

    /// `x · sigmoid(x)`
    pub fn silu(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&self) -> Var {
        Var::make(self.value().map(softplus), Op::Softplus, vec![self.clone()])
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        Var::make(
            self.value().map(|a| a.clamp(lo, hi)),
            Op::Clamp(lo, hi),
            vec![self.clone()],
        )
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mask_mul(&self, mask: &Tensor) -> Var {
        self.mask_mul_rc(Rc::new(mask.clone()))
    }

    fn mask_mul_rc(&self, mask: Rc<Tensor>) -> Var {
        let v = self.value().zip_map(&mask, |a, m| a * m);
        Var::make(v, Op::MaskMul(mask), vec![self.clone()])
    }

    // ---- shape ----

    /// Broadcasts dims of size 1 up to `shape` (same rank).
    pub fn broadcast(&self, shape: &[usize]) -> Var {
        assert!(
            broadcast_compatible(self.shape(), shape),
            "cannot broadcast {:?} to {:?}",
            self.shape(),
            shape
        );
        if self.shape() == shape {
            return self.clone();
        }
        Var::make(tensor::broadcast_to(self.value(), shape), Op::Broadcast, vec![self.clone()])
    }

    /// Sums down to `shape` (same rank, reduced dims have size 1).
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        assert!(
            broadcast_compatible(shape, self.shape()),
            "cannot sum {:?} to {:?}",
            self.shape(),
            shape
        );
        if self.shape() == shape {
            return self.clone();
        }
        Var::make(tensor::sum_to(self.value(), shape), Op::SumTo, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value().reshape(shape).expect("reshape size mismatch");
        Var::make(v, Op::Reshape, vec![self.clone()])
    }

    pub fn transpose(&self) -> Var {
        Var::make(self.value().transpose2(), Op::Transpose, vec![self.clone()])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasting elementwise product: `other` may have size-1 dims.
    pub fn mul_bcast(&self, other: &Var) -> Var {
        self.mul(&other.broadcast(self.shape()))
    }

    pub fn add_bcast(&self, other: &Var) -> Var {
        self.add(&other.broadcast(self.shape()))
    }

    /// `[n, c, h, w]` → `[n, c]`, averaging spatial positions.
    pub fn spatial_mean(&self) -> Var {
        let s = self.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.reshape(&[n, c, hw])
            .sum_to(&[n, c, 1])
            .reshape(&[n, c])
            .scale(1.0 / hw as f64)
    }

    /// Per-row L2 norm of a batch, `[n, ...]` → `[n]`. Zero rows have zero
    /// gradient.
    pub fn row_l2_norm(&self) -> Var {
        let n = self.shape()[0];
        let flat = self.reshape(&[n, self.value().row_len()]);
        flat.mul(&flat).sum_to(&[n, 1]).reshape(&[n]).sqrt()
    }

    /// L2 norm of the whole tensor as a rank-0 value.
    pub fn l2_norm(&self) -> Var {
        self.mul(self).sum().sqrt()
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2);
        assert_eq!(b.shape().len(), 2);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dims");
        let v = Tensor::from_parts(vec![m, n], gemm(a.data(), false, b.data(), false, m, k, n));
        Var::make(v, Op::MatMul, vec![self.clone(), other.clone()])
    }

    pub fn conv2d(&self, weight: &Var, stride: usize, pad: usize) -> Var {
        let v = conv::conv2d(self.value(), weight.value(), stride, pad);
        Var::make(v, Op::Conv2d { stride, pad }, vec![self.clone(), weight.clone()])
    }

    fn conv_input_adjoint(gy: &Var, w: &Var, stride: usize, pad: usize, hw: (usize, usize)) -> Var {
        let v = conv::conv2d_input_adjoint(gy.value(), w.value(), stride, pad, hw);
        Var::make(
            v,
            Op::ConvInputAdjoint { stride, pad },
            vec![gy.clone(), w.clone()],
        )
    }

    fn conv_weight_adjoint(x: &Var, gy: &Var, stride: usize, pad: usize, k: usize) -> Var {
        let v = conv::conv2d_weight_adjoint(x.value(), gy.value(), stride, pad, k);
        Var::make(
            v,
            Op::ConvWeightAdjoint { stride, pad },
            vec![x.clone(), gy.clone()],
        )
    }

    // ---- indexing ----

    /// `[n, k]` → `[n]`, picking column `idx[i]` of row `i`.
    pub fn gather(&self, idx: &[usize]) -> Var {
        self.gather_rc(Rc::new(idx.to_vec()))
    }

    fn gather_rc(&self, idx: Rc<Vec<usize>>) -> Var {
        let (n, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(idx.len(), n, "gather index length");
        let d = self.value().data();
        let v = Tensor::from_parts(vec![n], (0..n).map(|i| d[i * k + idx[i]]).collect());
        Var::make(v, Op::Gather(idx), vec![self.clone()])
    }

    fn scatter_rc(&self, idx: Rc<Vec<usize>>, k: usize) -> Var {
        let n = self.shape()[0];
        let mut out = vec![0.0; n * k];
        for (i, &j) in idx.iter().enumerate() {
            out[i * k + j] = self.value().data()[i];
        }
        Var::make(
            Tensor::from_parts(vec![n, k], out),
            Op::Scatter(idx),
            vec![self.clone()],
        )
    }

    /// Row-wise log-sum-exp, `[n, k]` → `[n]`.
    pub fn logsumexp_rows(&self) -> Var {
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let d = self.value().data();
        let v = (0..n)
            .map(|i| {
                let row = &d[i * k..(i + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        Var::make(Tensor::from_parts(vec![n], v), Op::LogSumExp, vec![self.clone()])
    }

    /// Row-wise softmax, `[n, k]`.
    pub fn softmax_rows(&self) -> Var {
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let lse = self.logsumexp_rows().reshape(&[n, 1]).broadcast(&[n, k]);
        self.sub(&lse).exp()
    }

    /// Row-wise log-softmax, `[n, k]`.
    pub fn log_softmax_rows(&self) -> Var {
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let lse = self.logsumexp_rows().reshape(&[n, 1]).broadcast(&[n, k]);
        self.sub(&lse)
    }

    // ---- backward ----

    fn backward_step(&self, g: &Var) -> Vec<Option<Var>> {
        let p = &self.0.parents;
        match &self.0.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.neg())],
            Op::Mul => vec![Some(g.mul(&p[1])), Some(g.mul(&p[0]))],
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Exp => vec![Some(g.mul(self))],
            Op::Ln => vec![Some(g.mul(&p[0].safe_recip()))],
            Op::Sigmoid => {
                let one_minus = self.neg().add_scalar(1.0);
                vec![Some(g.mul(&self.mul(&one_minus)))]
            }
            Op::Softplus => vec![Some(g.mul(&p[0].sigmoid()))],
            Op::Sqrt => vec![Some(g.mul(&self.safe_recip()).scale(0.5))],
            Op::SafeRecip => vec![Some(g.mul(&self.mul(self)).neg())],
            Op::Relu => {
                let mask = p[0].value().map(|a| if a > 0.0 { 1.0 } else { 0.0 });
                vec![Some(g.mask_mul(&mask))]
            }
            Op::Clamp(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = p[0]
                    .value()
                    .map(|a| if a >= lo && a <= hi { 1.0 } else { 0.0 });
                vec![Some(g.mask_mul(&mask))]
            }
            Op::MaskMul(m) => vec![Some(g.mask_mul_rc(m.clone()))],
            Op::Broadcast => vec![Some(g.sum_to(p[0].shape()))],
            Op::SumTo => vec![Some(g.broadcast(p[0].shape()))],
            Op::Reshape => vec![Some(g.reshape(p[0].shape()))],
            Op::MatMul => vec![
                Some(g.matmul(&p[1].transpose())),
                Some(p[0].transpose().matmul(g)),
            ],
            Op::Transpose => vec![Some(g.transpose())],
            Op::Conv2d { stride, pad } => {
                let (x, w) = (&p[0], &p[1]);
                let hw = (x.shape()[2], x.shape()[3]);
                vec![
                    Some(Var::conv_input_adjoint(g, w, *stride, *pad, hw)),
                    Some(Var::conv_weight_adjoint(x, g, *stride, *pad, w.shape()[2])),
                ]
            }
            Op::ConvInputAdjoint { stride, pad } => {
                let (gy, w) = (&p[0], &p[1]);
                vec![
                    Some(g.conv2d(w, *stride, *pad)),
                    Some(Var::conv_weight_adjoint(g, gy, *stride, *pad, w.shape()[2])),
                ]
            }
            Op::ConvWeightAdjoint { stride, pad } => {
                let (x, gy) = (&p[0], &p[1]);
                let hw = (x.shape()[2], x.shape()[3]);
                vec![
                    Some(Var::conv_input_adjoint(gy, g, *stride, *pad, hw)),
                    Some(x.conv2d(g, *stride, *pad)),
                ]
            }
            Op::Gather(idx) => vec![Some(g.scatter_rc(idx.clone(), p[0].shape()[1]))],
            Op::Scatter(idx) => vec![Some(g.gather_rc(idx.clone()))],
            Op::LogSumExp => {
                let x = &p[0];
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let soft = x
                    .sub(&self.reshape(&[n, 1]).broadcast(&[n, k]))
                    .exp();
                vec![Some(g.reshape(&[n, 1]).broadcast(&[n, k]).mul(&soft))]
            }
        }
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gradients of `output` (seeded with ones) with respect to `inputs`.
///
/// With `create_graph` the returned gradients are differentiable graph
/// nodes; otherwise they are constants. Inputs may be interior nodes. Inputs
/// the output does not depend on receive zeros.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    let _guard = if create_graph { None } else { Some(NoGradGuard::new()) };
    let input_keys: Vec<usize> = inputs.iter().map(|i| i.key()).collect();

    // Post-order over nodes that require grad; parents precede children.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, ()> = HashMap::new();
    if output.requires_grad() {
        let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if visited.insert(v.key(), ()).is_some() {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !visited.contains_key(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    // Only nodes with an input among their ancestors (or themselves) matter.
    let mut needed: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    for v in &order {
        let is_needed = input_keys.contains(&v.key())
            || v.0.parents.iter().any(|p| needed.get(&p.key()).copied().unwrap_or(false));
        needed.insert(v.key(), is_needed);
    }
    let is_needed = |v: &Var| needed.get(&v.key()).copied().unwrap_or(false);

    let mut grads: HashMap<usize, Var> = HashMap::new();
    let mut captured: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.key(), Var::constant(Tensor::ones(output.shape())));
    for node in order.iter().rev() {
        if !is_needed(node) {
            continue;
        }
        let Some(g) = grads.remove(&node.key()) else {
            continue;
        };
        if input_keys.contains(&node.key()) {
            captured.insert(node.key(), g.clone());
        }
        if node.0.parents.iter().all(|p| !is_needed(p)) {
            continue;
        }
        let parent_grads = node.backward_step(&g);
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() || !is_needed(parent) {
                continue;
            }
            let acc = match grads.remove(&parent.key()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.key(), acc);
        }
    }

    inputs
        .iter()
        .map(|i| {
            captured
                .get(&i.key())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(i.shape())))
        })
        .collect()
}
