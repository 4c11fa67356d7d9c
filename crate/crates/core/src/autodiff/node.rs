//! Graph nodes and the differentiable operation set.
//!
//! Every backward rule is written in terms of the same operations, so the
//! gradient of a node is itself a node and can be differentiated again.
//! Whether an operation records its operands depends on the thread-local
//! grad mode (see [`no_grad`] and [`with_grad`]).

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use super::array::Array;
use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&DiffNode, &[DiffNode], &[bool]) -> Result<Vec<Option<DiffNode>>>>;

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<DiffNode>,
    pub(crate) backward: Option<BackwardFn>,
    pub(crate) op: &'static str,
}

impl Drop for Node {
    // Unrolled ODE graphs are thousands of nodes deep; dropping them
    // recursively would overflow small thread stacks.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(p) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(p.0) {
                stack.append(&mut inner.parents);
            }
        }
    }
}

/// A value in a dynamically built computation graph.
#[derive(Clone)]
pub struct DiffNode(pub(crate) Rc<Node>);

impl fmt::Debug for DiffNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DiffNode#{}({}, grad={}, {:?})",
            self.0.id, self.0.op, self.0.requires_grad, self.0.value
        )
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

struct ModeGuard(bool);

impl Drop for ModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

fn with_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    let _guard = ModeGuard(prev);
    f()
}

/// Run `f` without recording operations.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_mode(false, f)
}

/// Run `f` with recording forced on.
pub fn with_grad<T>(f: impl FnOnce() -> T) -> T {
    with_mode(true, f)
}

impl DiffNode {
    pub fn leaf(value: Array, requires_grad: bool) -> Self {
        DiffNode(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        }))
    }

    pub fn constant(value: Array) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> DiffNode {
        DiffNode::constant(self.0.value.clone())
    }

    /// Fresh leaf with the same value that does require grad.
    pub fn detached_leaf(&self) -> DiffNode {
        DiffNode::leaf(self.0.value.clone(), true)
    }

    fn make<F>(op: &'static str, value: Array, parents: Vec<DiffNode>, backward: F) -> DiffNode
    where
        F: Fn(&DiffNode, &[DiffNode], &[bool]) -> Result<Vec<Option<DiffNode>>> + 'static,
    {
        let requires_grad = is_grad_enabled() && parents.iter().any(DiffNode::requires_grad);
        if !requires_grad {
            return DiffNode(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                op,
            }));
        }
        DiffNode(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
            op,
        }))
    }

    // ---- binary elementwise -------------------------------------------------

    pub fn add(&self, other: &DiffNode) -> Result<DiffNode> {
        let v = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(Self::make("add", v, vec![self.clone(), other.clone()], |g, p, need| {
            Ok(vec![
                opt(need[0], || reduce_to(g, p[0].shape()))?,
                opt(need[1], || reduce_to(g, p[1].shape()))?,
            ])
        }))
    }

    pub fn sub(&self, other: &DiffNode) -> Result<DiffNode> {
        let v = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(Self::make("sub", v, vec![self.clone(), other.clone()], |g, p, need| {
            Ok(vec![
                opt(need[0], || reduce_to(g, p[0].shape()))?,
                opt(need[1], || reduce_to(&g.neg(), p[1].shape()))?,
            ])
        }))
    }

    pub fn mul(&self, other: &DiffNode) -> Result<DiffNode> {
        let v = self.value().zip_map(other.value(), |a, b| a * b)?;
        Ok(Self::make("mul", v, vec![self.clone(), other.clone()], |g, p, need| {
            Ok(vec![
                opt(need[0], || reduce_to(&g.mul(&p[1])?, p[0].shape()))?,
                opt(need[1], || reduce_to(&g.mul(&p[0])?, p[1].shape()))?,
            ])
        }))
    }

    pub fn div(&self, other: &DiffNode) -> Result<DiffNode> {
        if let Some(index) = other.value().data().iter().position(|&b| b == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        let v = self.value().zip_map(other.value(), |a, b| a / b)?;
        Ok(Self::make("div", v, vec![self.clone(), other.clone()], |g, p, need| {
            Ok(vec![
                opt(need[0], || reduce_to(&g.div(&p[1])?, p[0].shape()))?,
                opt(need[1], || {
                    let num = g.mul(&p[0])?;
                    let q = num.div(&p[1].square())?;
                    reduce_to(&q.neg(), p[1].shape())
                })?,
            ])
        }))
    }

    // ---- unary elementwise --------------------------------------------------

    pub fn neg(&self) -> DiffNode {
        Self::make("neg", self.value().map(|a| -a), vec![self.clone()], |g, _, _| {
            Ok(vec![Some(g.neg())])
        })
    }

    pub fn scale(&self, c: f64) -> DiffNode {
        Self::make("scale", self.value().map(|a| a * c), vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.scale(c))])
        })
    }

    pub fn add_scalar(&self, c: f64) -> DiffNode {
        Self::make("add_scalar", self.value().map(|a| a + c), vec![self.clone()], |g, _, _| {
            Ok(vec![Some(g.clone())])
        })
    }

    pub fn exp(&self) -> DiffNode {
        Self::make("exp", self.value().map(f64::exp), vec![self.clone()], |g, p, _| {
            Ok(vec![Some(g.mul(&p[0].exp())?)])
        })
    }

    pub fn log(&self) -> Result<DiffNode> {
        if let Some(index) = self.value().data().iter().position(|&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                index,
                value: self.value().data()[index],
            });
        }
        Ok(Self::make("log", self.value().map(f64::ln), vec![self.clone()], |g, p, _| {
            Ok(vec![Some(g.div(&p[0])?)])
        }))
    }

    /// Absolute value; the derivative at zero is taken to be zero.
    pub fn abs(&self) -> DiffNode {
        Self::make("abs", self.value().map(f64::abs), vec![self.clone()], |g, p, _| {
            let sign = p[0].value().map(sign_or_zero);
            Ok(vec![Some(g.mul(&DiffNode::constant(sign))?)])
        })
    }

    pub fn tanh(&self) -> DiffNode {
        Self::tanh_with_value(self, self.value().map(tanh))
    }

    // The backward pass rebuilds tanh(x) around the stored forward value
    // instead of re-evaluating it; higher orders still see a tanh node.
    fn tanh_with_value(x: &DiffNode, value: Array) -> DiffNode {
        let cached = value.clone();
        Self::make("tanh", value, vec![x.clone()], move |g, p, _| {
            let t = Self::tanh_with_value(&p[0], cached.clone());
            let d = t.square().neg().add_scalar(1.0);
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    pub fn square(&self) -> DiffNode {
        Self::make("square", self.value().map(|a| a * a), vec![self.clone()], |g, p, _| {
            Ok(vec![Some(g.mul(&p[0])?.scale(2.0))])
        })
    }

    pub fn sigmoid(&self) -> DiffNode {
        Self::make("sigmoid", self.value().map(sigmoid), vec![self.clone()], |g, p, _| {
            let s = p[0].sigmoid();
            let d = s.mul(&s.neg().add_scalar(1.0))?;
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    pub fn softplus(&self) -> DiffNode {
        Self::make("softplus", self.value().map(softplus), vec![self.clone()], |g, p, _| {
            Ok(vec![Some(g.mul(&p[0].sigmoid())?)])
        })
    }

    // ---- linear algebra and structure ---------------------------------------

    pub fn matmul(&self, other: &DiffNode) -> Result<DiffNode> {
        self.gemm(false, other, false)
    }

    /// `op(self) · op(other)`, with optional transposition of either side.
    pub fn gemm(&self, ta: bool, other: &DiffNode, tb: bool) -> Result<DiffNode> {
        let v = self.value().gemm(ta, other.value(), tb)?;
        Ok(Self::make("matmul", v, vec![self.clone(), other.clone()], move |g, p, need| {
            let (a, b) = (&p[0], &p[1]);
            let ga = opt(need[0], || {
                if ta {
                    b.gemm(tb, g, true)
                } else {
                    g.gemm(false, b, !tb)
                }
            })?;
            let gb = opt(need[1], || {
                if tb {
                    g.gemm(true, a, ta)
                } else {
                    a.gemm(!ta, g, false)
                }
            })?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn transpose(&self) -> Result<DiffNode> {
        let v = self.value().transpose()?;
        Ok(Self::make("transpose", v, vec![self.clone()], |g, _, _| {
            Ok(vec![Some(g.transpose()?)])
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffNode> {
        let v = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Self::make("reshape", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.reshape(&orig)?)])
        }))
    }

    /// Sum of all elements as a single-element array.
    pub fn sum(&self) -> DiffNode {
        let v = Array::scalar(self.value().sum_all());
        let shape = self.shape().to_vec();
        Self::make("sum", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.broadcast_scalar(&shape)?)])
        })
    }

    pub fn mean(&self) -> DiffNode {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<DiffNode> {
        let v = self.value().sum_axis(axis)?;
        let n = self.shape()[axis];
        Ok(Self::make("sum_axis", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.expand_axis(axis, n)?)])
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<DiffNode> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Repeat a size-one axis; the explicit form of row/column broadcasting.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<DiffNode> {
        let v = self.value().expand_axis(axis, n)?;
        Ok(Self::make("expand_axis", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.sum_axis(axis)?)])
        }))
    }

    /// Fill `shape` with the single value of this node.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<DiffNode> {
        if !self.value().is_scalar() {
            return Err(Error::invalid("broadcast_scalar needs a single-element node"));
        }
        let v = Array::full(shape, self.item())?;
        let orig = self.shape().to_vec();
        Ok(Self::make("broadcast", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.sum().reshape(&orig)?)])
        }))
    }

    pub fn concat_cols(parts: &[DiffNode]) -> Result<DiffNode> {
        let values: Vec<&Array> = parts.iter().map(DiffNode::value).collect();
        let v = Array::concat_cols(&values)?;
        let widths: Vec<usize> = values.iter().map(|a| a.cols()).collect();
        Ok(Self::make("concat_cols", v, parts.to_vec(), move |g, _, need| {
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (w, &n) in widths.iter().zip(need) {
                out.push(opt(n, || g.slice_cols(start, start + w))?);
                start += w;
            }
            Ok(out)
        }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<DiffNode> {
        let v = self.value().slice_cols(start, end)?;
        let total = self.value().cols();
        Ok(Self::make("slice_cols", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.pad_cols(start, total)?)])
        }))
    }

    pub fn pad_cols(&self, offset: usize, total: usize) -> Result<DiffNode> {
        let v = self.value().pad_cols(offset, total)?;
        let w = self.value().cols();
        Ok(Self::make("pad_cols", v, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(g.slice_cols(offset, offset + w)?)])
        }))
    }
}

fn opt(need: bool, f: impl FnOnce() -> Result<DiffNode>) -> Result<Option<DiffNode>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

/// Sum a broadcast gradient back down to an operand's shape.
fn reduce_to(g: &DiffNode, shape: &[usize]) -> Result<DiffNode> {
    if g.shape() == shape {
        Ok(g.clone())
    } else {
        g.sum().reshape(shape)
    }
}

fn sign_or_zero(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `tanh` through a single `exp`, which is several times cheaper than the
/// libm routine. Near zero the identity cancels, so small inputs use libm.
pub(crate) fn tanh(a: f64) -> f64 {
    let m = a.abs();
    if m < 0.02 {
        return a.tanh();
    }
    (1.0 - 2.0 / ((2.0 * m).exp() + 1.0)).copysign(a)
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else {
        a.exp().ln_1p()
    }
}

/// Elementwise operations addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Abs,
    Tanh,
    Square,
    Sigmoid,
    Softplus,
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div => 2,
            _ => 1,
        }
    }
}

pub fn elementwise(op: ElementwiseOp, operands: &[DiffNode]) -> Result<DiffNode> {
    if operands.len() != op.arity() {
        return Err(Error::invalid(format!(
            "{op:?} takes {} operand(s), got {}",
            op.arity(),
            operands.len()
        )));
    }
    let a = &operands[0];
    match op {
        ElementwiseOp::Add => a.add(&operands[1]),
        ElementwiseOp::Sub => a.sub(&operands[1]),
        ElementwiseOp::Mul => a.mul(&operands[1]),
        ElementwiseOp::Div => a.div(&operands[1]),
        ElementwiseOp::Exp => Ok(a.exp()),
        ElementwiseOp::Log => a.log(),
        ElementwiseOp::Abs => Ok(a.abs()),
        ElementwiseOp::Tanh => Ok(a.tanh()),
        ElementwiseOp::Square => Ok(a.square()),
        ElementwiseOp::Sigmoid => Ok(a.sigmoid()),
        ElementwiseOp::Softplus => Ok(a.softplus()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Reduce over every element, or along one axis (kept with size one).
pub fn reduce(op: ReduceOp, x: &DiffNode, axis: Option<usize>) -> Result<DiffNode> {
    match (op, axis) {
        (ReduceOp::Sum, None) => Ok(x.sum()),
        (ReduceOp::Mean, None) => Ok(x.mean()),
        (ReduceOp::Sum, Some(a)) => x.sum_axis(a),
        (ReduceOp::Mean, Some(a)) => x.mean_axis(a),
    }
}
