//! The interface shared by the tracker heads: a differentiable loss of
//! parameters on one training example.

use crate::error::Result;
use crate::tensor::Tensor;

pub trait AdaptiveModel: Sync {
    type Example: Send + Sync;

    /// Names of the parameter tensors, in the order `loss` expects them.
    fn param_names(&self) -> Vec<String>;

    /// Scalar training loss `L(y, F(x, θ))`.
    fn loss(&self, params: &[Tensor], example: &Self::Example) -> Result<Tensor>;
}

/// Input/label pairs for one meta-training episode: an adaptation example
/// from frame `j` and an evaluation example from frame `j + δ`.
#[derive(Debug, Clone)]
pub struct Episode<E> {
    pub train: E,
    pub future: E,
}

/// `L = Σ (θ − c)²` with the target vector `c` as the example. Small enough
/// for closed-form meta-gradients.
#[derive(Debug, Clone, Default)]
pub struct QuadraticToy;

impl AdaptiveModel for QuadraticToy {
    type Example = Tensor;

    fn param_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn loss(&self, params: &[Tensor], target: &Tensor) -> Result<Tensor> {
        Ok(params[0].sub(target)?.square().sum())
    }
}
