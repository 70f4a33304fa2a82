//! Parameter update rules.
//!
//! [`meta_sgd_step`] is the learnable update `θ − α ⊙ ∇` used for fast
//! initialization; it stays differentiable so the outer loop can learn `α`.
//! [`sgd_step`] is the plain rule used for online updates, and [`AdamState`]
//! drives the outer loop.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_aligned(op: &'static str, a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{op}: {} parameters but {} gradients",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `θ − α ⊙ ∇θ` per parameter tensor. Differentiable in all three inputs.
pub fn meta_sgd_step(theta: &[Tensor], grads: &[Tensor], alpha: &[Tensor]) -> Result<Vec<Tensor>> {
    check_aligned("meta_sgd_step", theta, grads)?;
    check_aligned("meta_sgd_step", theta, alpha)?;
    theta
        .iter()
        .zip(grads)
        .zip(alpha)
        .map(|((p, g), a)| p.sub(&a.mul(g)?))
        .collect()
}

/// `p − lr·g`, detached from any graph.
pub fn sgd_step(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    check_aligned("sgd_step", params, grads)?;
    Ok(params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let data = p.data().iter().zip(g.data()).map(|(p, g)| p - lr * g).collect();
            Tensor::new(p.shape(), data).expect("shape preserved")
        })
        .collect())
}

/// How the per-parameter rates are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// One rate per scalar parameter, shaped like the parameter tensors.
    PerParameter,
    /// A single shared rate.
    Scalar,
}

/// Learned update rates `α`.
#[derive(Debug, Clone)]
pub struct AlphaSet {
    pub mode: AlphaMode,
    pub values: Vec<Tensor>,
}

impl AlphaSet {
    pub fn per_parameter(theta: &[Tensor], init: f64) -> Self {
        AlphaSet {
            mode: AlphaMode::PerParameter,
            values: theta.iter().map(|t| Tensor::full(t.shape(), init)).collect(),
        }
    }

    pub fn scalar(init: f64) -> Self {
        AlphaSet {
            mode: AlphaMode::Scalar,
            values: vec![Tensor::full(&[1], init)],
        }
    }

    /// Infers the mode from stored tensors: a lone one-element tensor against
    /// several (or larger) parameters means a shared rate.
    pub fn from_values(values: Vec<Tensor>, theta: &[Tensor]) -> Result<Self> {
        let scalar = values.len() == 1 && values[0].numel() == 1 && (theta.len() != 1 || theta[0].numel() != 1);
        let set = AlphaSet {
            mode: if scalar {
                AlphaMode::Scalar
            } else {
                AlphaMode::PerParameter
            },
            values,
        };
        set.expand_for(&set.values, theta)?;
        Ok(set)
    }

    /// Rate tensors shaped like `theta`, built from `values` (which may be
    /// differentiable leaves standing in for `self.values`).
    pub fn expand_for(&self, values: &[Tensor], theta: &[Tensor]) -> Result<Vec<Tensor>> {
        match self.mode {
            AlphaMode::PerParameter => {
                check_aligned("alpha", theta, values)?;
                Ok(values.to_vec())
            }
            AlphaMode::Scalar => {
                let a = values
                    .first()
                    .ok_or_else(|| Error::invalid("scalar alpha set is empty"))?;
                theta.iter().map(|t| a.expand(t.shape())).collect()
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter for one group of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update; returns the new parameters.
    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        check_aligned("adam_step", params, grads)?;
        check_aligned("adam_step", params, &self.m)?;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = p.numel();
            let (mut m, mut v, mut np) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for k in 0..n {
                let gk = g.data()[k];
                let mk = beta1 * self.m[i].data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * self.v[i].data()[k] + (1.0 - beta2) * gk * gk;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
                m.push(mk);
                v.push(vk);
                np.push(p.data()[k] - update);
            }
            self.m[i] = Tensor::new(p.shape(), m)?;
            self.v[i] = Tensor::new(p.shape(), v)?;
            out.push(Tensor::new(p.shape(), np)?);
        }
        Ok(out)
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[Tensor], grads: &[Tensor]) -> Result<(AdamState, Vec<Tensor>)> {
    let mut next = state.clone();
    let p = next.step(params, grads)?;
    Ok((next, p))
}
