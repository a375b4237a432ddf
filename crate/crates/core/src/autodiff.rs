//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose result depends on a traced leaf.
//! Values that do not depend on any leaf (parameters bound as constants, data)
//! are never recorded, so backward only does the work the requested gradients
//! need. Nodes are appended in evaluation order, which is a topological order;
//! [`Tape::backward`] walks them once in reverse.
//!
//! An untraced tape evaluates the same kernels without recording anything,
//! which keeps traced and untraced forward passes bit-identical.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, sigmoid, Tensor};

#[derive(Clone)]
struct Operand {
    id: Option<usize>,
    value: Tensor,
}

enum Op {
    Leaf,
    Add(Operand, Operand),
    Sub(Operand, Operand),
    Mul(Operand, Operand),
    Scale(Operand, f64),
    AddScalar(Operand),
    MatMul(Operand, Operand),
    Transpose(Operand),
    Conv2d { x: Operand, w: Operand, b: Option<Operand> },
    Relu(Operand),
    Tanh(Operand),
    Silu(Operand),
    Square(Operand),
    Sqrt(Operand),
    Clamp(Operand, f64, f64),
    Sum(Operand),
    Mean(Operand),
    Reshape(Operand),
    Slice { x: Operand, axis: usize, start: usize },
    AvgPool2(Operand),
    Upsample2(Operand),
    ChannelAffine { x: Operand, scale: Operand, shift: Operand },
    AddRowVector(Operand, Operand),
    L2NormalizeRows(Operand, f64),
    LogSoftmaxRows(Operand),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records differentiable operations. Single-threaded; each trajectory or
/// training step owns its own tape.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tracing: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracing: true,
        }
    }

    /// A tape that records nothing; `backward` on its values fails.
    pub fn untraced() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracing: false,
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.tracing.then(|| self.push(Op::Leaf, value.clone()));
        Var { tape: self, id, value }
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    fn push(&self, op: Op, value: Tensor) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        nodes.len() - 1
    }

    fn record(&self, value: Tensor, inputs: &[Option<usize>], op: impl FnOnce() -> Op) -> Var<'_> {
        let id = (self.tracing && inputs.iter().any(Option::is_some)).then(|| self.push(op(), value.clone()));
        Var { tape: self, id, value }
    }

    /// Gradients of the scalar `root` with respect to every traced leaf.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if !root.value.is_scalar() {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let root_id = root.id.ok_or(Error::UntracedRoot)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for i in (0..=root_id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            let mut acc = |operand: &Operand, grad: Tensor| {
                if let Some(id) = operand.id {
                    let grad = reduce_to(grad, &operand.value);
                    match &mut grads[id] {
                        Some(buf) => buf.iter_mut().zip(grad.data()).for_each(|(b, v)| *b += v),
                        slot @ None => *slot = Some(grad.into_vec()),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    if a.id.is_some() {
                        acc(a, g.mul(&b.value)?);
                    }
                    if b.id.is_some() {
                        acc(b, g.mul(&a.value)?);
                    }
                }
                Op::Scale(a, c) => acc(a, g.scale(*c)),
                Op::AddScalar(a) => acc(a, g),
                Op::MatMul(a, b) => {
                    if a.id.is_some() {
                        acc(a, g.matmul(&b.value.transpose()?)?);
                    }
                    if b.id.is_some() {
                        acc(b, a.value.transpose()?.matmul(&g)?);
                    }
                }
                Op::Transpose(a) => acc(a, g.transpose()?),
                Op::Conv2d { x, w, b } => {
                    let cg = conv2d_backward(
                        &x.value,
                        &w.value,
                        &g,
                        x.id.is_some(),
                        w.id.is_some(),
                        b.as_ref().is_some_and(|b| b.id.is_some()),
                    )?;
                    if let Some(gx) = cg.input {
                        acc(x, gx);
                    }
                    if let Some(gw) = cg.weight {
                        acc(w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        acc(b, gb);
                    }
                }
                Op::Relu(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.value.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    acc(a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Tanh(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    acc(a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Silu(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.value.data())
                        .map(|(&gv, &x)| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    acc(a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Square(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.value.data())
                        .map(|(&gv, &x)| 2.0 * x * gv)
                        .collect();
                    acc(a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Sqrt(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv / (2.0 * y))
                        .collect();
                    acc(a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Clamp(a, lo, hi) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.value.data())
                        .map(|(&gv, &x)| if x >= *lo && x <= *hi { gv } else { 0.0 })
                        .collect();
                    acc(a, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(a, Tensor::full(a.value.shape(), gv)?);
                }
                Op::Mean(a) => {
                    let gv = g.data()[0] / a.value.numel() as f64;
                    acc(a, Tensor::full(a.value.shape(), gv)?);
                }
                Op::Reshape(a) => acc(a, g.reshape(a.value.shape())?),
                Op::Slice { x, axis, start } => {
                    let shape = x.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let (len, width) = (shape[*axis], g.shape()[*axis]);
                    let mut full = vec![0.0; x.value.numel()];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        full[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
                    }
                    acc(x, Tensor::from_parts(shape.to_vec(), full));
                }
                Op::AvgPool2(a) => {
                    let up = g.upsample2()?.scale(0.25);
                    acc(a, up);
                }
                Op::Upsample2(a) => {
                    let pooled = g.avg_pool2()?.scale(4.0);
                    acc(a, pooled);
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let s = x.value.shape();
                    let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
                    if x.id.is_some() {
                        let mut gx = Vec::with_capacity(g.numel());
                        for p in 0..nc {
                            let sv = scale.value.data()[p];
                            gx.extend(g.data()[p * hw..(p + 1) * hw].iter().map(|v| v * sv));
                        }
                        acc(x, Tensor::from_parts(s.to_vec(), gx));
                    }
                    if scale.id.is_some() {
                        let gs = (0..nc)
                            .map(|p| {
                                g.data()[p * hw..(p + 1) * hw]
                                    .iter()
                                    .zip(&x.value.data()[p * hw..(p + 1) * hw])
                                    .map(|(a, b)| a * b)
                                    .sum()
                            })
                            .collect();
                        acc(scale, Tensor::from_parts(vec![s[0], s[1]], gs));
                    }
                    if shift.id.is_some() {
                        let gb = (0..nc).map(|p| g.data()[p * hw..(p + 1) * hw].iter().sum()).collect();
                        acc(shift, Tensor::from_parts(vec![s[0], s[1]], gb));
                    }
                }
                Op::AddRowVector(x, row) => {
                    if row.id.is_some() {
                        let k = row.value.numel();
                        let mut gr = vec![0.0; k];
                        for chunk in g.data().chunks(k) {
                            gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        acc(row, Tensor::from_parts(row.value.shape().to_vec(), gr));
                    }
                    acc(x, g);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let k = a.value.shape()[1];
                    let mut gx = Vec::with_capacity(g.numel());
                    for ((gr, xr), yr) in g
                        .data()
                        .chunks(k)
                        .zip(a.value.data().chunks(k))
                        .zip(node.value.data().chunks(k))
                    {
                        let r = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        gx.extend(gr.iter().zip(yr).map(|(&gv, &y)| (gv - y * dot) / r));
                    }
                    acc(a, Tensor::from_parts(g.shape().to_vec(), gx));
                }
                Op::LogSoftmaxRows(a) => {
                    let k = a.value.shape()[1];
                    let mut gx = Vec::with_capacity(g.numel());
                    for (gr, yr) in g.data().chunks(k).zip(node.value.data().chunks(k)) {
                        let total: f64 = gr.iter().sum();
                        gx.extend(gr.iter().zip(yr).map(|(&gv, &y)| gv - y.exp() * total));
                    }
                    acc(a, Tensor::from_parts(g.shape().to_vec(), gx));
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Sum a broadcast gradient back down to a scalar operand.
fn reduce_to(grad: Tensor, operand: &Tensor) -> Tensor {
    if operand.is_scalar() && !grad.is_scalar() {
        Tensor::from_parts(operand.shape().to_vec(), vec![grad.data().iter().sum()])
    } else {
        grad
    }
}

pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not influence the root.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        var.id
            .and_then(|id| self.leaves.get(id).cloned().flatten())
            .unwrap_or_else(|| var.value.map(|_| 0.0))
    }
}

/// A value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Tensor,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_traced(&self) -> bool {
        self.id.is_some()
    }

    fn operand(&self) -> Operand {
        Operand {
            id: self.id,
            value: self.value.clone(),
        }
    }

    fn unary(&self, value: Tensor, op: impl FnOnce(Operand) -> Op) -> Var<'t> {
        self.tape.record(value, &[self.id], || op(self.operand()))
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: impl FnOnce(Operand, Operand) -> Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "operands live on different tapes");
        self.tape
            .record(value, &[self.id, other.id], || op(self.operand(), other.operand()))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.add(&other.value)?;
        Ok(self.binary(other, v, Op::Add))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.sub(&other.value)?;
        Ok(self.binary(other, v, Op::Sub))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.mul(&other.value)?;
        Ok(self.binary(other, v, Op::Mul))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value.scale(c), |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value.add_scalar(c), Op::AddScalar)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.matmul(&other.value)?;
        Ok(self.binary(other, v, Op::MatMul))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value.transpose()?, Op::Transpose))
    }

    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let v = self.value.conv2d(&weight.value, bias.map(|b| &b.value))?;
        let ids = [self.id, weight.id, bias.and_then(|b| b.id)];
        Ok(self.tape.record(v, &ids, || Op::Conv2d {
            x: self.operand(),
            w: weight.operand(),
            b: bias.map(Var::operand),
        }))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value.relu(), Op::Relu)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(self.value.tanh(), Op::Tanh)
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(self.value.silu(), Op::Silu)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.value.square(), Op::Square)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value.sqrt()?, Op::Sqrt))
    }

    /// Hard clamp; the gradient passes through in-range entries (bounds inclusive).
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(self.value.clamp(lo, hi), |a| Op::Clamp(a, lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(self.value.sum(), Op::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(self.value.mean(), Op::Mean)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        Ok(self.unary(self.value.reshape(shape)?, Op::Reshape))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value.slice(axis, start, end)?;
        Ok(self.unary(v, |x| Op::Slice { x, axis, start }))
    }

    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value.avg_pool2()?, Op::AvgPool2))
    }

    pub fn upsample2(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value.upsample2()?, Op::Upsample2))
    }

    pub fn channel_affine(&self, scale: &Var<'t>, shift: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.channel_affine(&scale.value, &shift.value)?;
        Ok(self
            .tape
            .record(v, &[self.id, scale.id, shift.id], || Op::ChannelAffine {
                x: self.operand(),
                scale: scale.operand(),
                shift: shift.operand(),
            }))
    }

    pub fn add_row_vector(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.add_row_vector(&row.value)?;
        Ok(self.binary(row, v, Op::AddRowVector))
    }

    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Var<'t>> {
        let v = self.value.l2_normalize_rows(eps)?;
        Ok(self.unary(v, |a| Op::L2NormalizeRows(a, eps)))
    }

    /// Normalise every `(n, c)` feature map of `[N, C, H, W]` over its spatial positions.
    pub fn l2_normalize_channels(&self, eps: f64) -> Result<Var<'t>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "l2_normalize_channels expects [N, C, H, W]".into(),
            });
        }
        self.reshape(&[s[0] * s[1], s[2] * s[3]])?
            .l2_normalize_rows(eps)?
            .reshape(&s)
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        Ok(self.unary(self.value.log_softmax_rows()?, Op::LogSoftmaxRows))
    }
}
