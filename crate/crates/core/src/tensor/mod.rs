//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every tensor is immutable. Operations on tensors that require gradients
//! record a node pointing at their parents; [`backward`] walks that graph.
//! Gradients are themselves built from tensor operations, so with
//! `create_graph = true` the returned gradients can be differentiated again.
//! That is what the meta-learning outer loop needs: the loss on a future
//! frame depends on parameters produced by a gradient step.
//!
//! Shapes are never broadcast. Binary operations require identical shapes.

mod backward;
mod kernels;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use backward::{backward, backward_calls};

const MAX_RANK: usize = 4;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Zero padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size. Kernels must have odd extents.
    Same,
    /// No padding.
    Valid,
}

/// Pointwise operations accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Abs,
    Square,
    Relu,
    Sigmoid,
    Scale(f64),
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Abs,
    Square,
    Relu,
    Sigmoid,
    Scale(f64),
    AddScalar,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Expand,
    Reshape,
    MatMul,
    Transpose,
    Conv2d { ph: usize, pw: usize },
    Conv2dInputGrad { ph: usize, pw: usize },
    Conv2dKernelGrad { ph: usize, pw: usize },
    Resample,
    ResampleAdjoint,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
}

/// An n-dimensional (rank <= 4) array of f64 values, row-major.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("data", &self.inner.data)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::invalid(format!(
            "rank {} exceeds the maximum of {MAX_RANK}",
            shape.len()
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Result of an op; records a node when any parent requires gradients.
    fn derived(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Tensor::build(shape, data, true, Some(Node { op, parents }))
        } else {
            Tensor::build(shape, data, false, None)
        }
    }

    /// Constant leaf.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_rank(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Leaf that participates in differentiation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(shape, data)?;
        Ok(t.as_param())
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Tensor::build(vec![data.len()], data.to_vec(), false, None)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::build(vec![], vec![v], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for tensors without a recorded producing operation.
    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.inner.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!(
                "item() on tensor with {} elements",
                self.numel()
            ))),
        }
    }

    /// Copy of the values without graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Copy of the values as a fresh differentiable leaf.
    pub fn as_param(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.data.clone(), true, None)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::derived(self.shape().to_vec(), data, op, vec![self.clone()])
    }

    fn zip(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, name)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::derived(
            self.shape().to_vec(),
            data,
            op,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.zip(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn exp(&self) -> Tensor {
        self.map(Op::Exp, f64::exp)
    }

    /// Natural logarithm; every value must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {v}"),
            });
        }
        Ok(self.map(Op::Log, f64::ln))
    }

    pub fn abs(&self) -> Tensor {
        self.map(Op::Abs, f64::abs)
    }

    pub fn square(&self) -> Tensor {
        self.map(Op::Square, |v| v * v)
    }

    pub fn relu(&self) -> Tensor {
        self.map(Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(Op::Sigmoid, sigmoid)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(Op::Scale(s), |v| v * s)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(Op::AddScalar, |v| v + s)
    }

    /// Clamps values into `[lo, hi]`; the gradient is zero outside that range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::derived(vec![], vec![s], Op::Sum, vec![self.clone()])
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        check_rank(shape)?;
        let v = self.item()?;
        Ok(Tensor::derived(
            shape.to_vec(),
            vec![v; numel(shape)],
            Op::Expand,
            vec![self.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_rank(shape)?;
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::derived(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Ok(Tensor::derived(
            vec![m, n],
            data,
            Op::MatMul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::derived(vec![n, m], data, Op::Transpose, vec![self.clone()]))
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::invalid(format!("{op} expects a rank-2 tensor, got {s:?}"))),
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::invalid(format!("{op} expects a rank-3 tensor, got {s:?}"))),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::invalid(format!("{op} expects a rank-4 tensor, got {s:?}"))),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Applies a pointwise operation. Binary operations need `b` with the same shape as `a`.
pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let need = |b: Option<&Tensor>| {
        b.cloned()
            .ok_or_else(|| Error::invalid(format!("{op:?} needs a second operand")))
    };
    match op {
        Elementwise::Add => a.add(&need(b)?),
        Elementwise::Sub => a.sub(&need(b)?),
        Elementwise::Mul => a.mul(&need(b)?),
        Elementwise::Exp => Ok(a.exp()),
        Elementwise::Log => a.log(),
        Elementwise::Abs => Ok(a.abs()),
        Elementwise::Square => Ok(a.square()),
        Elementwise::Relu => Ok(a.relu()),
        Elementwise::Sigmoid => Ok(a.sigmoid()),
        Elementwise::Scale(s) => Ok(a.scale(s)),
    }
}

fn same_pad(k: usize, axis: &str) -> Result<usize> {
    if k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "\"same\" padding needs an odd kernel {axis}, got {k}"
        )));
    }
    Ok(k / 2)
}

/// Cross-correlation of a `C×H×W` input with a `K×C×kh×kw` kernel (no flip),
/// zero padded. Differentiable with respect to both arguments.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "conv2d input")?;
    let (k, kc, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if c != kc {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (ph, pw) = match padding {
        Padding::Same => (same_pad(kh, "height")?, same_pad(kw, "width")?),
        Padding::Valid => (0, 0),
    };
    if kh > h + 2 * ph || kw > w + 2 * pw {
        return Err(Error::invalid(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let geo = kernels::ConvGeometry::new(c, h, w, k, kh, kw, ph, pw);
    let data = kernels::conv_forward(&geo, input.data(), kernel.data());
    Ok(Tensor::derived(
        vec![k, geo.oh, geo.ow],
        data,
        Op::Conv2d { ph, pw },
        vec![input.clone(), kernel.clone()],
    ))
}

/// Gradient of a convolution with respect to its input, given the output gradient.
pub(crate) fn conv2d_input_grad(
    grad_out: &Tensor,
    kernel: &Tensor,
    in_hw: (usize, usize),
    ph: usize,
    pw: usize,
) -> Result<Tensor> {
    let (k, _, _) = dims3(grad_out, "conv2d input grad")?;
    let (_, c, kh, kw) = dims4(kernel, "conv2d input grad")?;
    let geo = kernels::ConvGeometry::new(c, in_hw.0, in_hw.1, k, kh, kw, ph, pw);
    if grad_out.shape() != [k, geo.oh, geo.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d input grad",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![k, geo.oh, geo.ow],
        });
    }
    let data = kernels::conv_input_grad(&geo, grad_out.data(), kernel.data());
    Ok(Tensor::derived(
        vec![c, in_hw.0, in_hw.1],
        data,
        Op::Conv2dInputGrad { ph, pw },
        vec![grad_out.clone(), kernel.clone()],
    ))
}

/// Gradient of a convolution with respect to its kernel, given the output gradient.
pub(crate) fn conv2d_kernel_grad(
    input: &Tensor,
    grad_out: &Tensor,
    k_hw: (usize, usize),
    ph: usize,
    pw: usize,
) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "conv2d kernel grad")?;
    let (k, _, _) = dims3(grad_out, "conv2d kernel grad")?;
    let geo = kernels::ConvGeometry::new(c, h, w, k, k_hw.0, k_hw.1, ph, pw);
    if grad_out.shape() != [k, geo.oh, geo.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernel grad",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![k, geo.oh, geo.ow],
        });
    }
    let data = kernels::conv_kernel_grad(&geo, input.data(), grad_out.data());
    Ok(Tensor::derived(
        vec![k, c, k_hw.0, k_hw.1],
        data,
        Op::Conv2dKernelGrad { ph, pw },
        vec![input.clone(), grad_out.clone()],
    ))
}

/// Bilinear resampling of a `C×H×W` tensor onto a corner-aligned `out_h×out_w` grid.
///
/// Output row `i` samples source row `i·(H−1)/(out_h−1)`; a size-1 output axis
/// samples the center `(H−1)/2`. Differentiable with respect to the input.
pub fn bilinear_resample(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "bilinear_resample")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "bilinear_resample needs non-empty sizes, got {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let data = kernels::resample(input.data(), c, (h, w), (out_h, out_w));
    Ok(Tensor::derived(
        vec![c, out_h, out_w],
        data,
        Op::Resample,
        vec![input.clone()],
    ))
}

/// Adjoint (transpose) of [`bilinear_resample`]: scatters `C×out_h×out_w` back to `C×H×W`.
pub(crate) fn bilinear_resample_adjoint(grad: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, oh, ow) = dims3(grad, "bilinear_resample adjoint")?;
    let data = kernels::resample_adjoint(grad.data(), c, (in_h, in_w), (oh, ow));
    Ok(Tensor::derived(
        vec![c, in_h, in_w],
        data,
        Op::ResampleAdjoint,
        vec![grad.clone()],
    ))
}
