//! Differentiable operations on [`Var`].

use super::kernels::{self, BinaryKind, PoolKind, UnaryKind};
use super::tape::Op;
use super::{Tensor, Var};
use crate::error::{Error, Result};
use crate::Scalar;

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, kind: BinaryKind, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = kernels::binary(kind, &self.value(), &other.value())?;
        Ok(self.tape().push(y, Op::Binary(kind, self.id(), other.id())))
    }

    fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let y = kernels::unary(kind, &self.value());
        self.tape().push(y, Op::Unary(kind, self.id()))
    }

    /// Elementwise sum; operands must share a shape, broadcast size-1 axes, or be one-element.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(UnaryKind::Abs)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(UnaryKind::Square)
    }

    pub fn elu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Elu)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::MulScalar(c))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t, T> {
        self.mul_scalar(-1.0).add_scalar(1.0)
    }

    pub fn min_scalar(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::MinScalar(c))
    }

    pub fn max_scalar(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::MaxScalar(c))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t, T> {
        let y = Tensor::scalar(self.value().sum());
        self.tape().push(y, Op::Sum(self.id()))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::Empty { op: "mean" });
        }
        let y = Tensor::scalar(v.mean());
        Ok(self.tape().push(y, Op::Mean(self.id())))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let y = kernels::sum_axis(&self.value(), axis)?;
        Ok(self.tape().push(y, Op::SumAxis(self.id(), axis)))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }

    pub fn max_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let (y, arg) = kernels::max_axis(&self.value(), axis)?;
        Ok(self.tape().push(y, Op::MaxAxis(self.id(), arg)))
    }

    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let y = kernels::conv2d(&self.value(), &weight.value(), stride, pad)?;
        Ok(self.tape().push(
            y,
            Op::Conv2d {
                x: self.id(),
                w: weight.id(),
                stride,
                pad,
            },
        ))
    }

    /// Samples `self` (NCHW) at absolute pixel coordinates `xs`, `ys` (N×1×H'×W').
    pub fn bilinear_sample(self, xs: Var<'t, T>, ys: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = kernels::bilinear_sample(&self.value(), &xs.value(), &ys.value())?;
        Ok(self.tape().push(
            y,
            Op::Bilinear {
                img: self.id(),
                xs: xs.id(),
                ys: ys.id(),
            },
        ))
    }

    /// Channel `c` of the output reads column `x - shifts[c]` of the input.
    pub fn shift_h(self, shifts: &[T]) -> Result<Var<'t, T>> {
        let y = kernels::shift_h(&self.value(), shifts)?;
        Ok(self.tape().push(y, Op::ShiftH(self.id(), shifts.to_vec())))
    }

    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let y = kernels::upsample2x(&self.value())?;
        Ok(self.tape().push(y, Op::Upsample2x(self.id())))
    }

    pub fn maxpool3x3(self) -> Result<Var<'t, T>> {
        let (y, arg) = kernels::pool3(&self.value(), PoolKind::Max)?;
        Ok(self.tape().push(y, Op::MaxPool3(self.id(), arg)))
    }

    pub fn avgpool3x3(self) -> Result<Var<'t, T>> {
        let (y, _) = kernels::pool3(&self.value(), PoolKind::Avg)?;
        Ok(self.tape().push(y, Op::AvgPool3(self.id())))
    }

    pub fn softmax_channel(self) -> Result<Var<'t, T>> {
        let y = kernels::softmax_channel(&self.value())?;
        Ok(self.tape().push(y, Op::Softmax(self.id())))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::Empty { op: "concat" })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let y = kernels::concat(&refs, axis)?;
        Ok(first
            .tape()
            .push(y, Op::Concat(parts.iter().map(|p| p.id()).collect(), axis)))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let y = kernels::narrow(&self.value(), axis, start, len)?;
        Ok(self.tape().push(
            y,
            Op::Narrow {
                a: self.id(),
                axis,
                start,
            },
        ))
    }

    pub fn flip_w(self) -> Var<'t, T> {
        let y = kernels::flip_last(&self.value());
        self.tape().push(y, Op::FlipW(self.id()))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let y = self.value().reshape(shape)?;
        Ok(self.tape().push(y, Op::Reshape(self.id())))
    }

    /// Horizontal forward difference `x[.., i+1] - x[.., i]` of an NCHW tensor.
    pub fn diff_x(self) -> Result<Var<'t, T>> {
        self.diff(3)
    }

    /// Vertical forward difference of an NCHW tensor.
    pub fn diff_y(self) -> Result<Var<'t, T>> {
        self.diff(2)
    }

    fn diff(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 4 || shape[axis] < 2 {
            return Err(Error::InvalidShape {
                op: "diff",
                shape,
                reason: "need an NCHW tensor with at least two samples along the axis".into(),
            });
        }
        let len = shape[axis];
        self.narrow(axis, 1, len - 1)?.sub(self.narrow(axis, 0, len - 1)?)
    }
}
