//! Gradient oracle suite: analytic gradients against central finite
//! differences, and meta-gradients against closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crest::{gaussian_label, CrestConfig, CrestExample, CrestModel, LossVariant};
use crate::error::Result;
use crate::features::{FeatureConfig, LayerSpec};
use crate::meta::{adapted_loss, episode_gradient, MetaConfig, MetaLearnable, MetaState, ModelSpec};
use crate::model::{Episode, QuadraticToy};
use crate::optim::{AdamConfig, AdamState, AlphaSet};
use crate::sdnet::{classify, cross_entropy, SdnetConfig, SdnetExample, SdnetModel};
use crate::tensor::{backward, bilinear_resample, conv2d, Padding, Tensor};

pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const SECOND_ORDER_TOL: f64 = 1e-3;
pub const CLOSED_FORM_TOL: f64 = 1e-8;

const H: f64 = 1e-5;

/// Outcome of one oracle comparison.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    /// Largest deviation, relative to the largest reference magnitude
    /// (absolute for closed-form checks).
    pub error: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tol
    }
}

/// Max absolute difference over the max reference magnitude.
pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    let scale = want.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn bump(ts: &[Tensor], k: usize, i: usize, d: f64) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = ts.iter().map(Tensor::detach).collect();
    let mut v = out[k].data().to_vec();
    v[i] += d;
    out[k] = Tensor::new(out[k].shape(), v).expect("same shape");
    out
}

/// Central differences of a scalar function of several tensors, flattened in
/// argument order.
fn fd_gradient(f: &dyn Fn(&[Tensor]) -> Result<f64>, inputs: &[Tensor], coords: &[(usize, usize)]) -> Result<Vec<f64>> {
    coords
        .iter()
        .map(|&(k, i)| Ok((f(&bump(inputs, k, i, H))? - f(&bump(inputs, k, i, -H))?) / (2.0 * H)))
        .collect()
}

fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
        .collect()
}

fn sampled_coords(inputs: &[Tensor], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        if t.numel() <= per_tensor {
            out.extend((0..t.numel()).map(|i| (k, i)));
        } else {
            out.extend(
                rand::seq::index::sample(rng, t.numel(), per_tensor)
                    .into_iter()
                    .map(|i| (k, i)),
            );
        }
    }
    out.sort_unstable();
    out
}

fn pick(grads: &[Tensor], coords: &[(usize, usize)]) -> Vec<f64> {
    coords.iter().map(|&(k, i)| grads[k].data()[i]).collect()
}

type TensorFn<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Compares the gradient of `sum(w ⊙ f(inputs))` for a fixed random `w`.
fn first_order(name: &str, inputs: Vec<Tensor>, f: &TensorFn<'_>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let params: Vec<Tensor> = inputs.iter().map(Tensor::as_param).collect();
    let out = f(&params)?;
    let w = Tensor::new(
        out.shape(),
        (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let loss = |xs: &[Tensor]| -> Result<Tensor> { f(xs)?.mul(&w).map(|t| t.sum()) };
    let grads = backward(&loss(&params)?, &params, false)?;
    let coords = all_coords(&params);
    let fd = fd_gradient(&|xs| loss(xs)?.item(), &params, &coords)?;
    Ok(Check {
        name: format!("first-order {name}"),
        error: relative_error(&pick(&grads, &coords), &fd),
        tol: FIRST_ORDER_TOL,
    })
}

/// Differentiates `sum(v ⊙ ∇ sum(w ⊙ f))` and compares against central
/// differences of the first-order gradient.
fn second_order(name: &str, inputs: Vec<Tensor>, f: &TensorFn<'_>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let params: Vec<Tensor> = inputs.iter().map(Tensor::as_param).collect();
    let out = f(&params)?;
    let w = Tensor::new(
        out.shape(),
        (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let vs: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::new(p.shape(), (0..p.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let directional = |xs: &[Tensor], create_graph: bool| -> Result<Tensor> {
        let loss = f(xs)?.mul(&w)?.sum();
        let g = backward(&loss, xs, create_graph)?;
        let mut acc = Tensor::scalar(0.0);
        for (gi, vi) in g.iter().zip(&vs) {
            acc = acc.add(&gi.mul(vi)?.sum())?;
        }
        Ok(acc)
    };
    let grads = backward(&directional(&params, true)?, &params, false)?;
    let coords = all_coords(&params);
    let fd = fd_gradient(
        &|xs| {
            let xs: Vec<Tensor> = xs.iter().map(Tensor::as_param).collect();
            directional(&xs, false)?.item()
        },
        &params,
        &coords,
    )?;
    Ok(Check {
        name: format!("second-order {name}"),
        error: relative_error(&pick(&grads, &coords), &fd),
        tol: SECOND_ORDER_TOL,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values at least `margin` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Every differentiable tensor operation, one check each.
pub fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = [2, 3];
    let mut out = Vec::new();
    macro_rules! unary {
        ($name:expr, $x:expr, $f:expr) => {{
            let x = $x;
            out.push(first_order($name, vec![x], &|a: &[Tensor]| $f(&a[0]), rng)?);
        }};
    }
    macro_rules! binary {
        ($name:expr, $a:expr, $b:expr, $f:expr) => {{
            let (a, b) = ($a, $b);
            out.push(first_order($name, vec![a, b], &|x: &[Tensor]| $f(&x[0], &x[1]), rng)?);
        }};
    }
    binary!(
        "add",
        uniform(rng, &s, -1.0, 1.0),
        uniform(rng, &s, -1.0, 1.0),
        |a: &Tensor, b| a.add(b)
    );
    binary!(
        "sub",
        uniform(rng, &s, -1.0, 1.0),
        uniform(rng, &s, -1.0, 1.0),
        |a: &Tensor, b| a.sub(b)
    );
    binary!(
        "mul",
        uniform(rng, &s, -1.0, 1.0),
        uniform(rng, &s, -1.0, 1.0),
        |a: &Tensor, b| a.mul(b)
    );
    binary!(
        "div",
        uniform(rng, &s, -1.0, 1.0),
        uniform(rng, &s, 0.5, 1.5),
        |a: &Tensor, b| a.div(b)
    );
    unary!("exp", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| Ok(a.exp()));
    unary!("log", uniform(rng, &s, 0.5, 2.0), |a: &Tensor| a.log());
    unary!("abs", away_from(rng, &s, -1.0, 1.0, &[0.0], 0.1), |a: &Tensor| Ok(
        a.abs()
    ));
    unary!("square", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| Ok(a.square()));
    unary!("relu", away_from(rng, &s, -1.0, 1.0, &[0.0], 0.1), |a: &Tensor| Ok(
        a.relu()
    ));
    unary!("sigmoid", uniform(rng, &s, -3.0, 3.0), |a: &Tensor| Ok(a.sigmoid()));
    unary!("scale", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| Ok(a.scale(-1.7)));
    unary!("neg", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| Ok(a.neg()));
    unary!("add_scalar", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| Ok(
        a.add_scalar(0.3)
    ));
    unary!(
        "clamp",
        away_from(rng, &s, -1.0, 1.0, &[-0.5, 0.5], 0.1),
        |a: &Tensor| Ok(a.clamp(-0.5, 0.5))
    );
    unary!("sum", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| Ok(a.sum()));
    unary!("expand", uniform(rng, &[1], -1.0, 1.0), |a: &Tensor| a.expand(&[3, 2]));
    unary!("reshape", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| a.reshape(&[3, 2]));
    unary!("transpose", uniform(rng, &s, -1.0, 1.0), |a: &Tensor| a.transpose());
    binary!(
        "matmul",
        uniform(rng, &[2, 3], -1.0, 1.0),
        uniform(rng, &[3, 4], -1.0, 1.0),
        |a: &Tensor, b| a.matmul(b)
    );
    binary!(
        "conv2d same",
        uniform(rng, &[2, 5, 6], -1.0, 1.0),
        uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
        |a: &Tensor, b| conv2d(a, b, Padding::Same)
    );
    binary!(
        "conv2d valid",
        uniform(rng, &[2, 5, 6], -1.0, 1.0),
        uniform(rng, &[2, 2, 3, 2], -1.0, 1.0),
        |a: &Tensor, b| conv2d(a, b, Padding::Valid)
    );
    unary!(
        "bilinear_resample up",
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        |a: &Tensor| bilinear_resample(a, 5, 7)
    );
    unary!(
        "bilinear_resample down",
        uniform(rng, &[1, 6, 5], -1.0, 1.0),
        |a: &Tensor| bilinear_resample(a, 3, 1)
    );
    Ok(out)
}

/// Second derivatives through the ops the inner update differentiates.
pub fn second_order_op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let s = [2, 3];
    Ok(vec![
        second_order(
            "mul·exp",
            vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
            &|x| x[0].mul(&x[1].exp()),
            rng,
        )?,
        second_order(
            "div·log",
            vec![uniform(rng, &s, 0.5, 2.0), uniform(rng, &s, 0.5, 1.5)],
            &|x| x[0].log()?.div(&x[1]),
            rng,
        )?,
        second_order(
            "sigmoid·square",
            vec![uniform(rng, &s, -2.0, 2.0)],
            &|x| Ok(x[0].sigmoid().square()),
            rng,
        )?,
        second_order(
            "matmul·relu",
            vec![
                away_from(rng, &[2, 3], -1.0, 1.0, &[0.0], 0.1),
                uniform(rng, &[3, 2], -1.0, 1.0),
            ],
            &|x| Ok(x[0].relu().matmul(&x[1])?.square()),
            rng,
        )?,
        second_order(
            "conv2d",
            vec![
                uniform(rng, &[2, 4, 5], -1.0, 1.0),
                uniform(rng, &[1, 2, 3, 3], -1.0, 1.0),
            ],
            &|x| Ok(conv2d(&x[0], &x[1], Padding::Same)?.square()),
            rng,
        )?,
        second_order(
            "bilinear_resample",
            vec![uniform(rng, &[1, 3, 3], -1.0, 1.0)],
            &|x| Ok(bilinear_resample(&x[0], 5, 4)?.square()),
            rng,
        )?,
    ])
}

/// Full head losses against finite differences.
pub fn head_loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in [LossVariant::Plain, LossVariant::Weighted] {
        let model = micro_crest(variant)?;
        let theta = model.init_params(rng);
        let ex = micro_crest_example(rng, (2.0, 3.0))?;
        out.push(first_order(
            &format!("crest loss {variant:?}"),
            theta,
            &|p| crate::model::AdaptiveModel::loss(&model, p, &ex),
            rng,
        )?);
    }
    let (model, ex) = micro_sdnet(rng)?;
    let theta = model.init_params(rng);
    out.push(first_order(
        "sdnet classify",
        theta.clone(),
        &|p| classify(&ex.features, p),
        rng,
    )?);
    out.push(first_order(
        "sdnet cross-entropy",
        theta,
        &|p| cross_entropy(&classify(&ex.features, p)?, &ex.labels),
        rng,
    )?);
    Ok(out)
}

/// CREST instance with 10 parameters: a 3→1 reduction and a 1×7 canonical filter.
pub fn micro_crest(variant: LossVariant) -> Result<CrestModel> {
    CrestModel::new(CrestConfig {
        features: FeatureConfig {
            seed: 1,
            layers: vec![LayerSpec {
                out_channels: 3,
                stride: 1,
            }],
        },
        reduced_channels: 1,
        canonical: (1, 7),
        patch_size: 8,
        variant,
        lambda: 1e-2,
        ..CrestConfig::default()
    })
}

pub fn micro_crest_example(rng: &mut ChaCha8Rng, center: (f64, f64)) -> Result<CrestExample> {
    Ok(CrestExample {
        features: uniform(rng, &[3, 6, 6], 0.0, 1.0),
        label: gaussian_label(6, 6, center, 1.0)?,
        filter_dims: (3, 5),
    })
}

fn micro_sdnet(rng: &mut ChaCha8Rng) -> Result<(SdnetModel, SdnetExample)> {
    let model = SdnetModel::new(SdnetConfig {
        features: FeatureConfig {
            seed: 1,
            layers: vec![LayerSpec {
                out_channels: 2,
                stride: 2,
            }],
        },
        patch_size: 4,
        hidden: 4,
        ..SdnetConfig::default()
    })?;
    let d = model.feature_dim();
    let n = 6;
    let ex = SdnetExample {
        features: uniform(rng, &[n, d], -1.0, 1.0),
        labels: Tensor::new(&[n, 1], (0..n).map(|i| (i % 2) as f64).collect())?,
    };
    Ok((model, ex))
}

fn random_rates(state: &mut MetaState, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    state.alpha.values = state
        .alpha
        .values
        .iter()
        .map(|a| uniform(rng, a.shape(), lo, hi))
        .collect();
}

/// Meta-gradients of the adapted future loss with respect to `θ₀` and `α`,
/// against central differences on up to `per_tensor` coordinates per tensor.
pub fn meta_gradient_check<M: MetaLearnable>(
    name: &str,
    model: &M,
    state: &MetaState,
    episode: &Episode<M::Example>,
    steps: usize,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Check> {
    let g = episode_gradient(model, state, episode, steps)?;
    let n = state.theta0.len();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let (theta, alpha) = xs.split_at(n);
        let rates = state.alpha.expand_for(alpha, theta)?;
        adapted_loss(model, theta, &rates, episode, steps)
    };
    let all: Vec<Tensor> = state.theta0.iter().chain(&state.alpha.values).cloned().collect();
    let coords = sampled_coords(&all, per_tensor, rng);
    let fd = fd_gradient(&eval, &all, &coords)?;
    let analytic: Vec<Tensor> = g.theta.iter().chain(&g.alpha).cloned().collect();
    Ok(Check {
        name: format!("meta-gradient {name} T={steps}"),
        error: relative_error(&pick(&analytic, &coords), &fd),
        tol: SECOND_ORDER_TOL,
    })
}

/// Meta-gradients through one and two unrolled inner steps.
pub fn meta_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in [LossVariant::Plain, LossVariant::Weighted] {
        let model = micro_crest(variant)?;
        let mut state = model.initial_state(&MetaConfig::default(), rng.gen());
        random_rates(&mut state, rng, 0.02, 0.08);
        let ep = Episode {
            train: micro_crest_example(rng, (2.0, 3.0))?,
            future: micro_crest_example(rng, (3.0, 2.0))?,
        };
        for steps in [1, 2] {
            out.push(meta_gradient_check(
                &format!("crest {variant:?}"),
                &model,
                &state,
                &ep,
                steps,
                usize::MAX,
                rng,
            )?);
        }
    }
    let (model, train) = micro_sdnet(rng)?;
    let (_, future) = micro_sdnet(rng)?;
    let mut state = model.initial_state(&MetaConfig::default(), rng.gen());
    random_rates(&mut state, rng, 0.05, 0.2);
    let ep = Episode { train, future };
    for steps in [1, 2] {
        out.push(meta_gradient_check("sdnet", &model, &state, &ep, steps, 8, rng)?);
    }
    Ok(out)
}

/// The scalar toy `L(θ; c) = (θ − c)²` with `θ₀ = 0`, `α = 0.25`, `c = 1`
/// for both frames: one step gives `θ₁ = 0.5`, and the meta-gradients are
/// `∂/∂θ₀ = −0.5` and `∂/∂α = −2`.
pub fn toy_checks() -> Result<Vec<Check>> {
    let theta0 = vec![Tensor::from_slice(&[0.0])];
    let alpha = AlphaSet::per_parameter(&theta0, 0.25);
    let state = MetaState {
        model: ModelSpec::Crest(CrestConfig::default()),
        names: vec!["theta".into()],
        adam_theta: AdamState::new(AdamConfig::default(), &theta0),
        adam_alpha: AdamState::new(AdamConfig::default(), &alpha.values),
        theta0,
        alpha,
        iter: 0,
        rng_seed: 0,
    };
    let ep = Episode {
        train: Tensor::from_slice(&[1.0]),
        future: Tensor::from_slice(&[1.0]),
    };
    let g = episode_gradient(&QuadraticToy, &state, &ep, 1)?;
    Ok(vec![
        Check {
            name: "closed-form toy dL/dtheta0 = -0.5".into(),
            error: (g.theta[0].data()[0] + 0.5).abs(),
            tol: CLOSED_FORM_TOL,
        },
        Check {
            name: "closed-form toy dL/dalpha = -2.0".into(),
            error: (g.alpha[0].data()[0] + 2.0).abs(),
            tol: CLOSED_FORM_TOL,
        },
    ])
}

/// Runs every check with one seed.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = op_checks(&mut rng)?;
    out.extend(head_loss_checks(&mut rng)?);
    out.extend(second_order_op_checks(&mut rng)?);
    out.extend(meta_checks(&mut rng)?);
    out.extend(toy_checks()?);
    Ok(out)
}
