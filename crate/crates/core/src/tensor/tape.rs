use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, BinaryKind, UnaryKind};
use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MaxAxis(usize, Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Bilinear {
        img: usize,
        xs: usize,
        ys: usize,
    },
    ShiftH(usize, Vec<T>),
    Upsample2x(usize),
    MaxPool3(usize, Vec<usize>),
    AvgPool3(usize),
    Softmax(usize),
    Concat(Vec<usize>, usize),
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    FlipW(usize),
    Reshape(usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Bilinear { img, xs, ys } => vec![*img, *xs, *ys],
            Op::Concat(parts, _) => parts.clone(),
            Op::Unary(_, a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MaxAxis(a, _)
            | Op::ShiftH(a, _)
            | Op::Upsample2x(a)
            | Op::MaxPool3(a, _)
            | Op::AvgPool3(a)
            | Op::Softmax(a)
            | Op::Narrow { a, .. }
            | Op::FlipW(a)
            | Op::Reshape(a) => vec![*a],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for tracked leaves.
    grad: Option<Tensor<T>>,
}

/// Define-by-run record of executed operations.
///
/// Node order is execution order, so a reverse sweep is a valid topological traversal.
/// A tape is confined to one thread; create one per training step or per sample.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor whose gradient is tracked.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(value), Op::Leaf, true)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(value), Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op; the op is dropped when no input is tracked.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Rc::new(value), op, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss; gradients accumulate into tracked leaves.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if !root.value.is_scalar() {
                return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
            }
            let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
            grads.resize_with(loss.id + 1, || None);
            grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                for (input, gi) in backward_op(&nodes, node, &g) {
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&gi),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn backward_op<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &*nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    let mut out = Vec::new();
    let mut emit = |i: usize, t: Option<Tensor<T>>| {
        if let Some(t) = t {
            out.push((i, t));
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (ga, gb) = kernels::binary_backward(*kind, val(*a), val(*b), g, need(*a), need(*b));
            emit(*a, ga);
            emit(*b, gb);
        }
        Op::Unary(kind, a) => {
            emit(*a, Some(kernels::unary_backward(*kind, val(*a), &node.value, g)));
        }
        Op::Sum(a) => emit(*a, Some(Tensor::full(val(*a).shape().to_vec(), g.item()))),
        Op::Mean(a) => {
            let x = val(*a);
            let s = g.item() / T::from_usize(x.numel()).unwrap();
            emit(*a, Some(Tensor::full(x.shape().to_vec(), s)));
        }
        Op::SumAxis(a, axis) => emit(*a, Some(kernels::expand_axis(g, val(*a).shape(), *axis))),
        Op::MaxAxis(a, arg) => emit(*a, Some(kernels::scatter_arg(val(*a).shape(), arg, g))),
        Op::Conv2d { x, w, stride, pad } => {
            let (gx, gw) =
                kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, need(*x), need(*w));
            emit(*x, gx);
            emit(*w, gw);
        }
        Op::Bilinear { img, xs, ys } => {
            let (gi, gx, gy) = kernels::bilinear_backward(
                val(*img),
                val(*xs),
                val(*ys),
                g,
                need(*img),
                need(*xs) || need(*ys),
            );
            emit(*img, gi);
            if need(*xs) {
                emit(*xs, gx);
            }
            if need(*ys) {
                emit(*ys, gy);
            }
        }
        Op::ShiftH(a, shifts) => emit(*a, Some(kernels::shift_h_backward(val(*a).shape(), shifts, g))),
        Op::Upsample2x(a) => emit(*a, Some(kernels::upsample2x_backward(val(*a).shape(), g))),
        Op::MaxPool3(a, arg) => emit(*a, Some(kernels::scatter_arg(val(*a).shape(), arg, g))),
        Op::AvgPool3(a) => emit(*a, Some(kernels::avgpool3_backward(g))),
        Op::Softmax(a) => emit(*a, Some(kernels::softmax_channel_backward(&node.value, g))),
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if need(p) {
                    emit(p, Some(kernels::narrow(g, *axis, start, len).unwrap()));
                }
                start += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            emit(*a, Some(kernels::narrow_backward(val(*a).shape(), *axis, *start, g)))
        }
        Op::FlipW(a) => emit(*a, Some(kernels::flip_last(g))),
        Op::Reshape(a) => emit(*a, Some(g.reshape(val(*a).shape().to_vec()).unwrap())),
    }
    out.retain(|(i, _)| need(*i));
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// The same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.push_node(self.value(), Op::Leaf, false)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}
