//! One model, two executors.
//!
//! Model code is written once against [`Ops`]. [`Eager`] evaluates it on
//! plain tensors; [`Tape`] evaluates the same calls while recording an
//! append-only Wengert list, so a single [`Tape::backward`] yields
//! reverse-mode gradients for every recorded value. Node ids are creation
//! order, and backprop visits them in strictly decreasing id order.

use crate::attention::{attend, attend_backward, rope_2d, HeadLayout, Visibility};
use crate::error::{Error, Result};
use crate::tensor::{self as t, Tensor, RENORM_FLOOR};

/// Targets, mask and weights for the fused sequence losses.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// Next-token label per position.
    pub labels: Vec<usize>,
    /// 1.0 where the position contributes to the loss.
    pub mask: Vec<f64>,
}

impl LossTargets {
    fn check(&self, logits: &Tensor) -> Result<f64> {
        if self.labels.len() != logits.rows() || self.mask.len() != logits.rows() {
            return Err(Error::dim(
                "loss",
                format!("{} labels / {} mask for {:?}", self.labels.len(), self.mask.len(), logits.shape()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= logits.cols()) {
            return Err(Error::dim("loss", format!("label {bad} outside vocab {}", logits.cols())));
        }
        let count: f64 = self.mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::EmptyLoss);
        }
        Ok(count)
    }
}

/// Weights of the distillation objective `kl_weight·KL(teacher‖student) +
/// ce_weight·CE(student, labels)`, both averaged over masked positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillWeights {
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub temperature: f64,
}

fn log_softmax_row(row: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = row.iter().map(|v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
    out.extend(row.iter().map(|v| v / temperature - lse));
}

/// Masked mean cross-entropy of `logits` against `targets.labels`.
pub fn cross_entropy(logits: &Tensor, targets: &LossTargets) -> Result<f64> {
    let count = targets.check(logits)?;
    let mut lp = Vec::new();
    let mut total = 0.0;
    for (i, (&y, &m)) in targets.labels.iter().zip(&targets.mask).enumerate() {
        if m == 0.0 {
            continue;
        }
        log_softmax_row(logits.row(i), 1.0, &mut lp);
        total -= m * lp[y];
    }
    Ok(total / count)
}

/// Returns `(total, kl, ce)` of the distillation objective.
pub fn distill_objective(
    student: &Tensor,
    teacher: &Tensor,
    targets: &LossTargets,
    w: DistillWeights,
) -> Result<(f64, f64, f64)> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim("distill_loss", format!("{:?} vs {:?}", student.shape(), teacher.shape())));
    }
    let count = targets.check(student)?;
    let (mut kl, mut ce) = (0.0, 0.0);
    let (mut ls, mut lt, mut l1) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..student.rows() {
        let m = targets.mask[i];
        if m == 0.0 {
            continue;
        }
        log_softmax_row(student.row(i), w.temperature, &mut ls);
        log_softmax_row(teacher.row(i), w.temperature, &mut lt);
        kl += m * lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        log_softmax_row(student.row(i), 1.0, &mut l1);
        ce -= m * l1[targets.labels[i]];
    }
    let (kl, ce) = (kl / count, ce / count);
    Ok((w.kl_weight * kl + w.ce_weight * ce, kl, ce))
}

/// The operation set the models are written against. Every method returns
/// a fresh value; nothing is mutated in place.
pub trait Ops {
    type V: Clone;

    /// Introduces a tensor (parameter or input).
    fn input(&mut self, x: Tensor) -> Self::V;
    /// Like [`Ops::input`], for values no gradient is wanted for.
    fn constant(&mut self, x: Tensor) -> Self::V {
        self.input(x)
    }
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_tn(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Result<Self::V>;
    /// Multiplies by a single-element value.
    fn mul_scalar(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, a: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn mul_row(&mut self, a: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn mul_col(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn silu(&mut self, a: &Self::V) -> Result<Self::V>;
    fn silu_prime(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, a: &Self::V) -> Result<Self::V>;
    fn softplus(&mut self, a: &Self::V) -> Result<Self::V>;
    fn rmsnorm(&mut self, x: &Self::V, gain: &Self::V, eps: f64) -> Result<Self::V>;
    fn l2_normalize_rows(&mut self, x: &Self::V, eps: f64) -> Result<Self::V>;
    fn conv1d(&mut self, x: &Self::V, kernel: &Self::V) -> Result<Self::V>;
    fn rope(&mut self, x: &Self::V, heads: usize, positions: &[usize], theta: f64) -> Result<Self::V>;
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V, layout: HeadLayout, vis: Visibility) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn slice_rows(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn slice_cols(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    /// Row-wise rescale to the given target norms (rows below `1e-12`
    /// untouched).
    fn renorm_rows(&mut self, w: &Self::V, targets: &[f64]) -> Result<Self::V>;
    fn norm_clip(&mut self, g: &Self::V, threshold: f64) -> Result<Self::V>;
    fn sum(&mut self, x: &Self::V) -> Result<Self::V>;
    fn mean(&mut self, x: &Self::V) -> Result<Self::V>;
    fn embedding(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;
    fn cross_entropy(&mut self, logits: &Self::V, targets: &LossTargets) -> Result<Self::V>;
    fn distill_loss(&mut self, student: &Self::V, teacher: &Tensor, targets: &LossTargets, w: DistillWeights) -> Result<Self::V>;
}

fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = (table.rows(), table.cols());
    if ids.is_empty() {
        return Err(Error::EmptyInput("embedding"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::dim("embedding", format!("token {id} outside vocab {v}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::raw(vec![ids.len(), d], out))
}

fn scalar_of(s: &Tensor, op: &'static str) -> Result<f64> {
    if s.len() != 1 {
        return Err(Error::dim(op, format!("expected a scalar, got {:?}", s.shape())));
    }
    Ok(s.item())
}

/// Plain evaluation on owned tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Tensor;

    fn input(&mut self, x: Tensor) -> Tensor {
        x
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        t::matmul(a, b)
    }
    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        t::matmul_nt(a, b)
    }
    fn matmul_tn(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        t::matmul_tn(a, b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        t::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        t::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        t::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        t::scale(a, s)
    }
    fn mul_scalar(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        t::scale(a, scalar_of(s, "mul_scalar")?)
    }
    fn add_row(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        t::add_row(a, v)
    }
    fn mul_row(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        t::mul_row(a, v)
    }
    fn mul_col(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        t::mul_col(a, s)
    }
    fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(t::silu(a))
    }
    fn silu_prime(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(t::silu_prime(a))
    }
    fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(t::sigmoid(a))
    }
    fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(t::softplus(a))
    }
    fn rmsnorm(&mut self, x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
        t::rmsnorm(x, gain, eps)
    }
    fn l2_normalize_rows(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        t::l2_normalize_rows(x, eps)
    }
    fn conv1d(&mut self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        t::causal_conv1d(x, kernel)
    }
    fn rope(&mut self, x: &Tensor, heads: usize, positions: &[usize], theta: f64) -> Result<Tensor> {
        rope_2d(x, heads, positions, theta, false)
    }
    fn attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, layout: HeadLayout, vis: Visibility) -> Result<Tensor> {
        attend(q, k, v, layout, vis)
    }
    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.reshape(shape)
    }
    fn slice_rows(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        t::slice_rows(x, start, end)
    }
    fn slice_cols(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        t::slice_cols(x, start, end)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        t::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        t::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn renorm_rows(&mut self, w: &Tensor, targets: &[f64]) -> Result<Tensor> {
        t::renorm_rows(w, targets)
    }
    fn norm_clip(&mut self, g: &Tensor, threshold: f64) -> Result<Tensor> {
        Ok(t::norm_clip(g, threshold))
    }
    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        Tensor::scalar(x.sum()).checked("sum")
    }
    fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        Tensor::scalar(x.sum() / x.len() as f64).checked("mean")
    }
    fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        embed(table, ids)
    }
    fn cross_entropy(&mut self, logits: &Tensor, targets: &LossTargets) -> Result<Tensor> {
        Tensor::scalar(cross_entropy(logits, targets)?).checked("cross_entropy")
    }
    fn distill_loss(&mut self, student: &Tensor, teacher: &Tensor, targets: &LossTargets, w: DistillWeights) -> Result<Tensor> {
        Tensor::scalar(distill_objective(student, teacher, targets, w)?.0).checked("distill_loss")
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    MatmulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Silu(Var),
    SiluPrime(Var),
    Sigmoid(Var),
    Softplus(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    L2Norm { x: Var, eps: f64 },
    Conv1d { x: Var, kernel: Var },
    Rope { x: Var, heads: usize, positions: Vec<usize>, theta: f64 },
    Attention { q: Var, k: Var, v: Var, layout: HeadLayout, vis: Visibility },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RenormRows { w: Var, targets: Vec<f64> },
    NormClip { g: Var, threshold: f64 },
    Sum(Var),
    Mean(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: LossTargets },
    Distill { student: Var, teacher: Tensor, targets: LossTargets, w: DistillWeights },
}

/// A node: the forward value plus the rule that produced it.
#[derive(Clone, Debug)]
pub struct TapeNode {
    value: Tensor,
    op: Op,
    /// False when no differentiable leaf feeds this node.
    needs_grad: bool,
}

impl TapeNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Ids of the nodes this one was computed from.
    pub fn inputs(&self) -> Vec<Var> {
        self.op.inputs()
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::MatmulNt(a, b)
            | Op::MatmulTn(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::SiluPrime(a) | Op::Sigmoid(a) | Op::Softplus(a) => vec![*a],
            Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::L2Norm { x, .. } | Op::Rope { x, .. } | Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::Conv1d { x, kernel } => vec![*x, *kernel],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
            Op::RenormRows { w, .. } => vec![*w],
            Op::NormClip { g, .. } => vec![*g],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Distill { student, .. } => vec![*student],
        }
    }
}

/// Append-only record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
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

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(TapeNode { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient. Work that only depends on constants
    /// is skipped during [`Tape::backward`].
    pub fn constant(&mut self, x: Tensor) -> Var {
        self.nodes.push(TapeNode { value: x, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse-mode sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.val(output);
        if out.len() != 1 {
            return Err(Error::dim("backward", format!("output must be a scalar, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for id in (0..=output.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let need = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if need(a) {
                    acc(*a, t::matmul_nt(g, self.val(*b))?);
                }
                if need(b) {
                    acc(*b, t::matmul_tn(self.val(*a), g)?);
                }
            }
            Op::MatmulNt(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if need(a) {
                    acc(*a, t::matmul(g, self.val(*b))?);
                }
                if need(b) {
                    acc(*b, t::matmul_tn(g, self.val(*a))?);
                }
            }
            Op::MatmulTn(a, b) => {
                // C = Aᵀ B: dA = B Gᵀ, dB = A G
                if need(a) {
                    acc(*a, t::matmul_nt(self.val(*b), g)?);
                }
                if need(b) {
                    acc(*b, t::matmul(self.val(*a), g)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if need(a) {
                    acc(*a, t::mul(g, self.val(*b))?);
                }
                if need(b) {
                    acc(*b, t::mul(g, self.val(*a))?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::MulScalar(a, s) => {
                let sv = self.val(*s).item();
                let av = self.val(*a);
                let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                acc(*a, g.map(|x| x * sv));
                acc(*s, Tensor::raw(self.val(*s).shape().to_vec(), vec![ds]));
            }
            Op::AddRow(a, v) => {
                acc(*a, g.clone());
                acc(*v, column_sums(g, None, self.val(*v).shape()));
            }
            Op::MulRow(a, v) => {
                acc(*a, t::mul_row(g, self.val(*v))?);
                acc(*v, column_sums(g, Some(self.val(*a)), self.val(*v).shape()));
            }
            Op::MulCol(a, s) => {
                let av = self.val(*a);
                acc(*a, t::mul_col(g, self.val(*s))?);
                let c = av.cols();
                let ds = g
                    .data()
                    .chunks_exact(c)
                    .zip(av.data().chunks_exact(c))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                acc(*s, Tensor::raw(self.val(*s).shape().to_vec(), ds));
            }
            Op::Silu(a) => {
                let d = self.val(*a).map(t::silu_prime_scalar);
                acc(*a, t::mul(g, &d)?);
            }
            Op::SiluPrime(a) => {
                let d = self.val(*a).map(t::silu_second_scalar);
                acc(*a, t::mul(g, &d)?);
            }
            Op::Sigmoid(_) | Op::Softplus(_) => {
                let (a, y) = match &node.op {
                    Op::Sigmoid(a) => (*a, node.value.map(|s| s * (1.0 - s))),
                    Op::Softplus(a) => (*a, self.val(*a).map(t::sigmoid_scalar)),
                    _ => unreachable!(),
                };
                acc(a, t::mul(g, &y)?);
            }
            Op::RmsNorm { x, gain, eps } => {
                let (dx, dg) = rmsnorm_backward(self.val(*x), self.val(*gain), *eps, g);
                acc(*x, dx);
                acc(*gain, dg);
            }
            Op::L2Norm { x, eps } => acc(*x, l2norm_backward(self.val(*x), *eps, g)),
            Op::Conv1d { x, kernel } => {
                let (dx, dk) = conv_backward(self.val(*x), self.val(*kernel), g);
                acc(*x, dx);
                acc(*kernel, dk);
            }
            Op::Rope { x, heads, positions, theta } => {
                let d = rope_2d(g, *heads, positions, *theta, true)?;
                acc(*x, d.reshape(self.val(*x).shape())?);
            }
            Op::Attention { q, k, v, layout, vis } => {
                let (dq, dk, dv) = attend_backward(self.val(*q), self.val(*k), self.val(*v), g, *layout, *vis);
                acc(*q, dq.reshape(self.val(*q).shape())?);
                acc(*k, dk.reshape(self.val(*k).shape())?);
                acc(*v, dv.reshape(self.val(*v).shape())?);
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.val(*x).shape())?),
            Op::SliceRows { x, start } => {
                let xv = self.val(*x);
                let mut d = Tensor::zeros(xv.shape());
                let c = xv.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let xv = self.val(*x);
                let mut d = Tensor::zeros(xv.shape());
                let (c, w) = (xv.cols(), g.cols());
                for i in 0..xv.rows() {
                    d.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    acc(*p, Tensor::raw(self.val(*p).shape().to_vec(), g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    acc(*p, t::slice_cols(g, off, off + w)?);
                    off += w;
                }
            }
            Op::RenormRows { w, targets } => acc(*w, renorm_backward(self.val(*w), targets, g)),
            Op::NormClip { g: x, threshold } => acc(*x, clip_backward(self.val(*x), *threshold, g)),
            Op::Sum(x) => acc(*x, Tensor::full(self.val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = self.val(*x).len() as f64;
                acc(*x, Tensor::full(self.val(*x).shape(), g.item() / n));
            }
            Op::Embedding { table, ids } if need(table) => {
                let tv = self.val(*table);
                let mut d = Tensor::zeros(tv.shape());
                let c = tv.cols();
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in d.data_mut()[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                acc(*table, d);
            }
            Op::Embedding { .. } => {}
            Op::CrossEntropy { logits, targets } => {
                let w = DistillWeights { kl_weight: 0.0, ce_weight: 1.0, temperature: 1.0 };
                let zeros = Tensor::zeros(self.val(*logits).shape());
                acc(*logits, distill_grad(self.val(*logits), &zeros, targets, w, g.item()));
            }
            Op::Distill { student, teacher, targets, w } => {
                acc(*student, distill_grad(self.val(*student), teacher, targets, *w, g.item()));
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor, weight: Option<&Tensor>, shape: &[usize]) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for i in 0..g.rows() {
        let gr = g.row(i);
        match weight {
            None => out.iter_mut().zip(gr).for_each(|(o, x)| *o += x),
            Some(w) => out.iter_mut().zip(gr).zip(w.row(i)).for_each(|((o, x), y)| *o += x * y),
        }
    }
    Tensor::raw(shape.to_vec(), out)
}

fn rmsnorm_backward(x: &Tensor, gain: &Tensor, eps: f64, g: &Tensor) -> (Tensor, Tensor) {
    let c = x.cols();
    let mut dx = Vec::with_capacity(x.len());
    let mut dg = vec![0.0; c];
    for (xr, gr) in x.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let r = (ms + eps).sqrt();
        if r == 0.0 {
            dx.extend(std::iter::repeat_n(0.0, c));
            continue;
        }
        let proj: f64 = xr.iter().zip(gr).zip(gain.data()).map(|((x, g), w)| x * g * w).sum();
        let k = proj / (c as f64 * r * r * r);
        for j in 0..c {
            dx.push(gain.data()[j] * gr[j] / r - xr[j] * k);
            dg[j] += gr[j] * xr[j] / r;
        }
    }
    (Tensor::raw(x.shape().to_vec(), dx), Tensor::raw(gain.shape().to_vec(), dg))
}

fn l2norm_backward(x: &Tensor, eps: f64, g: &Tensor) -> Tensor {
    let c = x.cols();
    let mut dx = Vec::with_capacity(x.len());
    for (xr, gr) in x.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        let n = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        if n == 0.0 {
            dx.extend_from_slice(gr);
            continue;
        }
        let proj: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(xr.iter().zip(gr).map(|(a, b)| b / n - a * proj / (n * n * n)));
    }
    Tensor::raw(x.shape().to_vec(), dx)
}

fn conv_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (l, d) = (x.rows(), x.cols());
    let k = kernel.rows();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for t in 0..l {
        for i in 0..k {
            let Some(src) = (t + i + 1).checked_sub(k) else { continue };
            for c in 0..d {
                let gv = g.data()[t * d + c];
                dx[src * d + c] += kernel.data()[i * d + c] * gv;
                dk[i * d + c] += x.data()[src * d + c] * gv;
            }
        }
    }
    (Tensor::raw(x.shape().to_vec(), dx), Tensor::raw(kernel.shape().to_vec(), dk))
}

fn renorm_backward(w: &Tensor, targets: &[f64], g: &Tensor) -> Tensor {
    let c = w.cols();
    let mut dw = Vec::with_capacity(w.len());
    for ((wr, gr), &target) in w.data().chunks_exact(c).zip(g.data().chunks_exact(c)).zip(targets) {
        let n = wr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < RENORM_FLOOR {
            dw.extend_from_slice(gr);
            continue;
        }
        let proj: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / (n * n);
        dw.extend(wr.iter().zip(gr).map(|(a, b)| target / n * (b - a * proj)));
    }
    Tensor::raw(w.shape().to_vec(), dw)
}

fn clip_backward(x: &Tensor, threshold: f64, g: &Tensor) -> Tensor {
    let n = x.frobenius_norm();
    if n <= threshold {
        return g.clone();
    }
    let proj: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>() / (n * n);
    let data = x.data().iter().zip(g.data()).map(|(a, b)| threshold / n * (b - a * proj)).collect();
    Tensor::raw(x.shape().to_vec(), data)
}

/// d(objective)/d(student logits), scaled by the upstream gradient.
fn distill_grad(student: &Tensor, teacher: &Tensor, targets: &LossTargets, w: DistillWeights, up: f64) -> Tensor {
    let count: f64 = targets.mask.iter().sum();
    let c = student.cols();
    let mut d = vec![0.0; student.len()];
    let (mut ls, mut lt, mut l1) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..student.rows() {
        let m = targets.mask[i];
        if m == 0.0 {
            continue;
        }
        let row = &mut d[i * c..(i + 1) * c];
        if w.kl_weight != 0.0 {
            log_softmax_row(student.row(i), w.temperature, &mut ls);
            log_softmax_row(teacher.row(i), w.temperature, &mut lt);
            let k = up * m * w.kl_weight / (count * w.temperature);
            for j in 0..c {
                row[j] += k * (ls[j].exp() - lt[j].exp());
            }
        }
        if w.ce_weight != 0.0 {
            log_softmax_row(student.row(i), 1.0, &mut l1);
            let k = up * m * w.ce_weight / count;
            for j in 0..c {
                row[j] += k * l1[j].exp();
            }
            row[targets.labels[i]] -= k;
        }
    }
    Tensor::raw(student.shape().to_vec(), d)
}

impl Ops for Tape {
    type V = Var;

    fn input(&mut self, x: Tensor) -> Var {
        self.push(x, Op::Leaf)
    }
    fn constant(&mut self, x: Tensor) -> Var {
        Tape::constant(self, x)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = t::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Matmul(*a, *b)))
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = t::matmul_nt(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatmulNt(*a, *b)))
    }
    fn matmul_tn(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = t::matmul_tn(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatmulTn(*a, *b)))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = t::add(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Add(*a, *b)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = t::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Sub(*a, *b)))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = t::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b)))
    }
    fn scale(&mut self, a: &Var, s: f64) -> Result<Var> {
        let y = t::scale(self.val(*a), s)?;
        Ok(self.push(y, Op::Scale(*a, s)))
    }
    fn mul_scalar(&mut self, a: &Var, s: &Var) -> Result<Var> {
        let k = scalar_of(self.val(*s), "mul_scalar")?;
        let y = t::scale(self.val(*a), k)?;
        Ok(self.push(y, Op::MulScalar(*a, *s)))
    }
    fn add_row(&mut self, a: &Var, v: &Var) -> Result<Var> {
        let y = t::add_row(self.val(*a), self.val(*v))?;
        Ok(self.push(y, Op::AddRow(*a, *v)))
    }
    fn mul_row(&mut self, a: &Var, v: &Var) -> Result<Var> {
        let y = t::mul_row(self.val(*a), self.val(*v))?;
        Ok(self.push(y, Op::MulRow(*a, *v)))
    }
    fn mul_col(&mut self, a: &Var, s: &Var) -> Result<Var> {
        let y = t::mul_col(self.val(*a), self.val(*s))?;
        Ok(self.push(y, Op::MulCol(*a, *s)))
    }
    fn silu(&mut self, a: &Var) -> Result<Var> {
        let y = t::silu(self.val(*a));
        Ok(self.push(y, Op::Silu(*a)))
    }
    fn silu_prime(&mut self, a: &Var) -> Result<Var> {
        let y = t::silu_prime(self.val(*a));
        Ok(self.push(y, Op::SiluPrime(*a)))
    }
    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let y = t::sigmoid(self.val(*a));
        Ok(self.push(y, Op::Sigmoid(*a)))
    }
    fn softplus(&mut self, a: &Var) -> Result<Var> {
        let y = t::softplus(self.val(*a));
        Ok(self.push(y, Op::Softplus(*a)))
    }
    fn rmsnorm(&mut self, x: &Var, gain: &Var, eps: f64) -> Result<Var> {
        let y = t::rmsnorm(self.val(*x), self.val(*gain), eps)?;
        Ok(self.push(y, Op::RmsNorm { x: *x, gain: *gain, eps }))
    }
    fn l2_normalize_rows(&mut self, x: &Var, eps: f64) -> Result<Var> {
        let y = t::l2_normalize_rows(self.val(*x), eps)?;
        Ok(self.push(y, Op::L2Norm { x: *x, eps }))
    }
    fn conv1d(&mut self, x: &Var, kernel: &Var) -> Result<Var> {
        let y = t::causal_conv1d(self.val(*x), self.val(*kernel))?;
        Ok(self.push(y, Op::Conv1d { x: *x, kernel: *kernel }))
    }
    fn rope(&mut self, x: &Var, heads: usize, positions: &[usize], theta: f64) -> Result<Var> {
        let y = rope_2d(self.val(*x), heads, positions, theta, false)?;
        Ok(self.push(y, Op::Rope { x: *x, heads, positions: positions.to_vec(), theta }))
    }
    fn attention(&mut self, q: &Var, k: &Var, v: &Var, layout: HeadLayout, vis: Visibility) -> Result<Var> {
        let y = attend(self.val(*q), self.val(*k), self.val(*v), layout, vis)?;
        Ok(self.push(y, Op::Attention { q: *q, k: *k, v: *v, layout, vis }))
    }
    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(*x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(*x)))
    }
    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let y = t::slice_rows(self.val(*x), start, end)?;
        Ok(self.push(y, Op::SliceRows { x: *x, start }))
    }
    fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let y = t::slice_cols(self.val(*x), start, end)?;
        Ok(self.push(y, Op::SliceCols { x: *x, start }))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let y = t::concat_rows(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let y = t::concat_cols(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }
    fn renorm_rows(&mut self, w: &Var, targets: &[f64]) -> Result<Var> {
        let y = t::renorm_rows(self.val(*w), targets)?;
        Ok(self.push(y, Op::RenormRows { w: *w, targets: targets.to_vec() }))
    }
    fn norm_clip(&mut self, g: &Var, threshold: f64) -> Result<Var> {
        let y = t::norm_clip(self.val(*g), threshold);
        Ok(self.push(y, Op::NormClip { g: *g, threshold }))
    }
    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.val(*x).sum()).checked("sum")?;
        Ok(self.push(y, Op::Sum(*x)))
    }
    fn mean(&mut self, x: &Var) -> Result<Var> {
        let xv = self.val(*x);
        let y = Tensor::scalar(xv.sum() / xv.len() as f64).checked("mean")?;
        Ok(self.push(y, Op::Mean(*x)))
    }
    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let y = embed(self.val(*table), ids)?;
        Ok(self.push(y, Op::Embedding { table: *table, ids: ids.to_vec() }))
    }
    fn cross_entropy(&mut self, logits: &Var, targets: &LossTargets) -> Result<Var> {
        let y = Tensor::scalar(cross_entropy(self.val(*logits), targets)?).checked("cross_entropy")?;
        Ok(self.push(y, Op::CrossEntropy { logits: *logits, targets: targets.clone() }))
    }
    fn distill_loss(&mut self, student: &Var, teacher: &Tensor, targets: &LossTargets, w: DistillWeights) -> Result<Var> {
        let (total, _, _) = distill_objective(self.val(*student), teacher, targets, w)?;
        let y = Tensor::scalar(total).checked("distill_loss")?;
        Ok(self.push(
            y,
            Op::Distill { student: *student, teacher: teacher.clone(), targets: targets.clone(), w },
        ))
    }
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn numerical_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max |a−b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -2.0, 2.0, &mut rng)
    }

    /// Checks d(sum(w ⊙ f(x)))/dx on the tape against central differences
    /// for the first argument, holding the others fixed.
    fn check_op(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|x| tape.input(x)).collect();
        let y = f(&mut tape, &vars).unwrap();
        let weights = rand(tape.value(&y).shape(), 99);
        let w = tape.input(weights.clone());
        let prod = tape.mul(&y, &w).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (which, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[which], x);
            let numeric = numerical_gradient(x, 1e-5, |probe| {
                let mut tp = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| tp.input(if j == which { probe.clone() } else { v.clone() }))
                    .collect();
                let y = f(&mut tp, &vs)?;
                Ok(tp.value(&y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
            })
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-3);
            assert!(err < tol, "input {which}: rel err {err:e}");
        }
    }

    #[test]
    fn matmul_gradients() {
        check_op(vec![rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| t.matmul(&v[0], &v[1]), 1e-6);
        check_op(vec![rand(&[3, 4], 3), rand(&[2, 4], 4)], |t, v| t.matmul_nt(&v[0], &v[1]), 1e-6);
        check_op(vec![rand(&[4, 3], 5), rand(&[4, 2], 6)], |t, v| t.matmul_tn(&v[0], &v[1]), 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let (x, w1, w2) = (rand(&[3, 4], 20), rand(&[4, 4], 21), rand(&[4, 2], 22));
        let run = |frozen: bool| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let a = if frozen { t.constant(w1.clone()) } else { t.input(w1.clone()) };
            let b = t.input(w2.clone());
            let h = t.matmul(&xv, &a).unwrap();
            let h = t.silu(&h).unwrap();
            let y = t.matmul(&h, &b).unwrap();
            let loss = t.sum(&y).unwrap();
            let g = t.backward(loss).unwrap();
            (g.get(xv).is_none(), g.get(a).cloned(), g.get(b).cloned().unwrap())
        };
        let (x_none, a_frozen, b_frozen) = run(true);
        let (_, a_live, b_live) = run(false);
        assert!(x_none && a_frozen.is_none() && a_live.is_some());
        assert_eq!(b_frozen, b_live);
    }

    #[test]
    fn elementwise_gradients() {
        let a = || rand(&[3, 5], 7);
        let b = || rand(&[3, 5], 8);
        check_op(vec![a(), b()], |t, v| t.mul(&v[0], &v[1]), 1e-5);
        check_op(vec![a(), b()], |t, v| t.sub(&v[0], &v[1]), 1e-5);
        check_op(vec![a()], |t, v| t.silu(&v[0]), 1e-5);
        check_op(vec![a()], |t, v| t.silu_prime(&v[0]), 1e-5);
        check_op(vec![a()], |t, v| t.sigmoid(&v[0]), 1e-5);
        check_op(vec![a()], |t, v| t.softplus(&v[0]), 1e-5);
        check_op(vec![a(), rand(&[1, 1], 9)], |t, v| t.mul_scalar(&v[0], &v[1]), 1e-5);
        check_op(vec![a(), rand(&[5], 10)], |t, v| t.add_row(&v[0], &v[1]), 1e-5);
        check_op(vec![a(), rand(&[5], 11)], |t, v| t.mul_row(&v[0], &v[1]), 1e-5);
        check_op(vec![a(), rand(&[3, 1], 12)], |t, v| t.mul_col(&v[0], &v[1]), 1e-5);
    }

    #[test]
    fn normalization_gradients() {
        check_op(vec![rand(&[4, 6], 13), rand(&[6], 14)], |t, v| t.rmsnorm(&v[0], &v[1], 1e-6), 1e-5);
        check_op(vec![rand(&[4, 6], 15)], |t, v| t.l2_normalize_rows(&v[0], 1e-12), 1e-5);
        check_op(vec![rand(&[4, 6], 16)], |t, v| t.renorm_rows(&v[0], &[0.5, 1.0, 2.0, 3.0]), 1e-5);
        check_op(vec![rand(&[4, 6], 17)], |t, v| t.norm_clip(&v[0], 1.0), 1e-5);
        check_op(vec![rand(&[4, 6], 18)], |t, v| t.norm_clip(&v[0], 1e3), 1e-5);
    }

    #[test]
    fn structural_gradients() {
        check_op(vec![rand(&[7, 3], 19), rand(&[4, 3], 20)], |t, v| t.conv1d(&v[0], &v[1]), 1e-5);
        check_op(vec![rand(&[5, 8], 21)], |t, v| t.rope(&v[0], 2, &[0, 3, 4, 9, 10], 10_000.0), 1e-5);
        check_op(vec![rand(&[5, 8], 22)], |t, v| t.slice_rows(&v[0], 1, 3), 1e-5);
        check_op(vec![rand(&[5, 8], 23)], |t, v| t.slice_cols(&v[0], 2, 7), 1e-5);
        check_op(vec![rand(&[2, 3], 24), rand(&[4, 3], 25)], |t, v| t.concat_rows(&[v[0], v[1]]), 1e-5);
        check_op(vec![rand(&[2, 3], 26), rand(&[2, 1], 27)], |t, v| t.concat_cols(&[v[0], v[1]]), 1e-5);
        check_op(vec![rand(&[5, 3], 28)], |t, v| t.embedding(&v[0], &[4, 0, 4, 2]), 1e-5);
        check_op(vec![rand(&[3, 4], 29)], |t, v| t.mean(&v[0]), 1e-5);
    }

    #[test]
    fn attention_gradients() {
        let layout = HeadLayout { n_heads: 4, n_kv_heads: 2, head_dim: 4 };
        for vis in [Visibility::FULL, Visibility::sliding(3, 1)] {
            check_op(
                vec![rand(&[6, 16], 30), rand(&[6, 8], 31), rand(&[6, 8], 32)],
                move |t, v| t.attention(&v[0], &v[1], &v[2], layout, vis),
                1e-5,
            );
        }
    }

    #[test]
    fn loss_gradients() {
        let targets = LossTargets { labels: vec![1, 0, 3, 2], mask: vec![1.0, 0.0, 1.0, 1.0] };
        let teacher = rand(&[4, 5], 33);
        let tg = targets.clone();
        check_op(vec![rand(&[4, 5], 34)], move |t, v| t.cross_entropy(&v[0], &tg), 1e-5);
        let w = DistillWeights { kl_weight: 1.0, ce_weight: 0.3, temperature: 2.0 };
        check_op(
            vec![rand(&[4, 5], 35)],
            move |t, v| t.distill_loss(&v[0], &teacher, &targets, w),
            1e-5,
        );
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        let z = tape.add(&y, &x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.input(rand(&[4, 6], 40));
            let b = tape.input(rand(&[6, 3], 41));
            let c = tape.matmul(&a, &b).unwrap();
            let d = tape.silu(&c).unwrap();
            let s = tape.sum(&d).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(&s).clone(), g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn node_ids_follow_creation_order() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(1.0));
        let b = tape.scale(&a, 2.0).unwrap();
        let c = tape.add(&a, &b).unwrap();
        assert!(a < b && b < c);
        assert!(tape.node(c).inputs().iter().all(|i| *i < c));
    }

    #[test]
    fn eager_and_tape_agree() {
        let x = rand(&[3, 4], 50);
        let w = rand(&[4, 4], 51);
        let mut e = Eager;
        let xe = e.input(x.clone());
        let we = e.input(w.clone());
        let ye = e.matmul(&xe, &we).unwrap();
        let ye = e.silu(&ye).unwrap();
        let mut tape = Tape::new();
        let xt = tape.input(x);
        let wt = tape.input(w);
        let yt = tape.matmul(&xt, &wt).unwrap();
        let yt = tape.silu(&yt).unwrap();
        assert_eq!(&ye, tape.value(&yt));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let targets = LossTargets { labels: vec![0, 0], mask: vec![0.0, 0.0] };
        assert!(matches!(cross_entropy(&Tensor::zeros(&[2, 3]), &targets), Err(Error::EmptyLoss)));
    }
}
