use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{bilinear_resample, bilinear_resample_adjoint, conv2d_input_grad, conv2d_kernel_grad, no_grad, Op, Tensor};
use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeometry;

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`backward`] calls made on the current thread.
pub fn backward_calls() -> u64 {
    CALLS.with(Cell::get)
}

/// Gradients of a one-element `loss` with respect to each tensor in `wrt`.
///
/// Tensors that `loss` does not depend on get a zero gradient of their own
/// shape. With `create_graph` the gradients record their own graph and can
/// be passed through `backward` again; otherwise they are constants.
pub fn backward(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(Error::invalid(format!(
            "backward needs a one-element loss, got shape {:?}",
            loss.shape()
        )));
    }
    CALLS.with(|c| c.set(c.get() + 1));
    let _guard = (!create_graph).then(no_grad);

    let wanted: HashSet<u64> = wrt.iter().map(Tensor::id).collect();
    let order = topo_order(loss);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    let mut kept: HashMap<u64, Tensor> = HashMap::new();
    if loss.requires_grad() {
        grads.insert(loss.id(), Tensor::ones(loss.shape()));
    }

    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if wanted.contains(&t.id()) {
            kept.insert(t.id(), g.clone());
        }
        let Some(node) = t.node() else {
            continue;
        };
        let parent_grads = vjp(t, &node.op, &node.parents, &g)?;
        for (p, pg) in node.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| {
            Ok(match kept.remove(&w.id()) {
                Some(g) if !create_graph => g.detach(),
                Some(g) => g,
                None => Tensor::zeros(w.shape()),
            })
        })
        .collect()
}

/// Post-order over tensors that require gradients; parents precede children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn constant_like(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::build(t.shape().to_vec(), data, false, None)
}

/// Vector-Jacobian products for one node, expressed with differentiable ops.
fn vjp(out: &Tensor, op: &Op, parents: &[Tensor], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| parents[i].requires_grad();
    let unary = |f: &dyn Fn() -> Result<Tensor>| -> Result<Vec<Option<Tensor>>> {
        Ok(vec![if need(0) { Some(f()?) } else { None }])
    };
    match op {
        Op::Add => Ok(vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![need(0).then(|| g.clone()), need(1).then(|| g.neg())]),
        Op::Mul => {
            let ga = if need(0) { Some(g.mul(&parents[1])?) } else { None };
            let gb = if need(1) { Some(g.mul(&parents[0])?) } else { None };
            Ok(vec![ga, gb])
        }
        Op::Div => {
            let ga = if need(0) { Some(g.div(&parents[1])?) } else { None };
            let gb = if need(1) {
                Some(g.mul(out)?.div(&parents[1])?.neg())
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Exp => unary(&|| g.mul(out)),
        Op::Log => unary(&|| g.div(&parents[0])),
        Op::Abs => unary(&|| g.mul(&constant_like(&parents[0], |v| v.signum() * (v != 0.0) as u8 as f64))),
        Op::Square => unary(&|| Ok(g.mul(&parents[0])?.scale(2.0))),
        Op::Relu => unary(&|| g.mul(&constant_like(&parents[0], |v| (v > 0.0) as u8 as f64))),
        Op::Sigmoid => unary(&|| g.mul(&out.mul(&out.neg().add_scalar(1.0))?)),
        Op::Scale(s) => unary(&|| Ok(g.scale(*s))),
        Op::AddScalar => unary(&|| Ok(g.clone())),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(&|| g.mul(&constant_like(&parents[0], |v| (v >= lo && v <= hi) as u8 as f64)))
        }
        Op::Sum => unary(&|| g.expand(parents[0].shape())),
        Op::Expand => unary(&|| g.sum().reshape(parents[0].shape())),
        Op::Reshape => unary(&|| g.reshape(parents[0].shape())),
        Op::MatMul => {
            let ga = if need(0) {
                Some(g.matmul(&parents[1].transpose()?)?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(parents[0].transpose()?.matmul(g)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Transpose => unary(&|| g.transpose()),
        // The three convolution ops are the partial derivatives of one trilinear
        // form <y, conv(x, k)>; each one's gradients are the other two.
        Op::Conv2d { ph, pw } => {
            let (x, k) = (&parents[0], &parents[1]);
            let gx = if need(0) {
                Some(conv2d_input_grad(g, k, (x.shape()[1], x.shape()[2]), *ph, *pw)?)
            } else {
                None
            };
            let gk = if need(1) {
                Some(conv2d_kernel_grad(x, g, (k.shape()[2], k.shape()[3]), *ph, *pw)?)
            } else {
                None
            };
            Ok(vec![gx, gk])
        }
        Op::Conv2dInputGrad { ph, pw } => {
            // out = dT/dx (y, k); upstream g has the shape of x.
            let (y, k) = (&parents[0], &parents[1]);
            let gy = if need(0) { Some(conv_raw(g, k, *ph, *pw)?) } else { None };
            let gk = if need(1) {
                Some(conv2d_kernel_grad(g, y, (k.shape()[2], k.shape()[3]), *ph, *pw)?)
            } else {
                None
            };
            Ok(vec![gy, gk])
        }
        Op::Conv2dKernelGrad { ph, pw } => {
            // out = dT/dk (x, y); upstream g has the shape of k.
            let (x, y) = (&parents[0], &parents[1]);
            let gx = if need(0) {
                Some(conv2d_input_grad(y, g, (x.shape()[1], x.shape()[2]), *ph, *pw)?)
            } else {
                None
            };
            let gy = if need(1) { Some(conv_raw(x, g, *ph, *pw)?) } else { None };
            Ok(vec![gx, gy])
        }
        Op::Resample => {
            let x = &parents[0];
            unary(&|| bilinear_resample_adjoint(g, x.shape()[1], x.shape()[2]))
        }
        Op::ResampleAdjoint => {
            let gs = parents[0].shape();
            unary(&|| bilinear_resample(g, gs[1], gs[2]))
        }
    }
}

/// Convolution with explicit padding amounts (even kernels allowed internally).
fn conv_raw(x: &Tensor, k: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ks = k.shape();
    let geo = ConvGeometry::new(xs[0], xs[1], xs[2], ks[0], ks[2], ks[3], ph, pw);
    let data = super::kernels::conv_forward(&geo, x.data(), k.data());
    Ok(Tensor::derived(
        vec![ks[0], geo.oh, geo.ow],
        data,
        Op::Conv2d { ph, pw },
        vec![x.clone(), k.clone()],
    ))
}
