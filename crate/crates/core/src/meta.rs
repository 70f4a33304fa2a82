//! Meta-training of initial parameters `θ₀` and update rates `α`.
//!
//! Each episode adapts `θ₀` to frame `j` with a few differentiable
//! `θ − α ⊙ ∇` steps, scores the adapted parameters on frame `j + δ`, and
//! backpropagates that future-frame loss into `θ₀` and `α`. Gradients are
//! summed over a mini-batch and each group gets its own Adam step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crest::{CrestConfig, CrestExample, CrestModel};
use crate::data::{save_checkpoint, MetaDataset, Sequence};
use crate::error::{Error, Result};
use crate::model::{AdaptiveModel, Episode};
use crate::optim::{meta_sgd_step, AdamConfig, AdamState, AlphaMode, AlphaSet};
use crate::sdnet::{SdnetConfig, SdnetExample, SdnetModel};
use crate::tensor::{backward, Tensor};

/// Which head a state belongs to, with its full configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Crest(CrestConfig),
    Sdnet(SdnetConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Crest(_) => "crest",
            ModelSpec::Sdnet(_) => "sdnet",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaState {
    pub model: ModelSpec,
    pub names: Vec<String>,
    pub theta0: Vec<Tensor>,
    pub alpha: AlphaSet,
    pub adam_theta: AdamState,
    pub adam_alpha: AdamState,
    pub iter: u64,
    pub rng_seed: u64,
}

impl MetaState {
    /// `α` expanded to the shapes of `θ₀`.
    pub fn rates(&self) -> Result<Vec<Tensor>> {
        self.alpha.expand_for(&self.alpha.values, &self.theta0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub iters: u64,
    /// Inner steps `T`.
    pub inner_steps: usize,
    pub batch: usize,
    pub delta_max: usize,
    pub theta_lr: f64,
    pub alpha_lr: f64,
    /// Initial rate; `None` uses the head's default.
    pub alpha_init: Option<f64>,
    pub alpha_mode: AlphaMode,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            iters: 500,
            inner_steps: 1,
            batch: 8,
            delta_max: 10,
            theta_lr: 3e-3,
            alpha_lr: 1e-3,
            alpha_init: None,
            alpha_mode: AlphaMode::PerParameter,
            checkpoint_every: 100,
            log_every: 100,
            seed: 0,
        }
    }
}

/// A head that can be meta-trained on sequences.
pub trait MetaLearnable: AdaptiveModel {
    fn spec(&self) -> ModelSpec;

    fn init_theta(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor>;

    fn default_alpha(&self) -> f64;

    /// Builds the frame-`j` / frame-`j+δ` pair, or `None` when this draw
    /// cannot form a usable episode.
    fn episode(
        &self,
        seq: &Sequence,
        j: usize,
        delta: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Episode<Self::Example>>>;

    fn initial_state(&self, cfg: &MetaConfig, seed: u64) -> MetaState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta0 = self.init_theta(&mut rng);
        let init = cfg.alpha_init.unwrap_or_else(|| self.default_alpha());
        let alpha = match cfg.alpha_mode {
            AlphaMode::PerParameter => AlphaSet::per_parameter(&theta0, init),
            AlphaMode::Scalar => AlphaSet::scalar(init),
        };
        MetaState {
            model: self.spec(),
            names: self.param_names(),
            adam_theta: AdamState::new(AdamConfig::with_lr(cfg.theta_lr), &theta0),
            adam_alpha: AdamState::new(AdamConfig::with_lr(cfg.alpha_lr), &alpha.values),
            theta0,
            alpha,
            iter: 0,
            rng_seed: seed,
        }
    }
}

/// Sequence `s`, start frame `j` and offset `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSample {
    pub sequence: usize,
    pub start: usize,
    pub delta: usize,
}

const MAX_RESAMPLES: usize = 1000;

/// Draws `(s, j, δ)` from sequence lengths and sampling weights.
pub fn sample_from_lengths(
    lengths: &[usize],
    weights: &[f64],
    rng: &mut impl Rng,
    delta_max: usize,
) -> Result<EpisodeSample> {
    if lengths.is_empty() || lengths.len() != weights.len() {
        return Err(Error::invalid("episode sampling needs one weight per sequence"));
    }
    if delta_max == 0 {
        return Err(Error::invalid("delta_max must be at least 1"));
    }
    let pick = WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?;
    for _ in 0..MAX_RESAMPLES {
        let s = pick.sample(rng);
        let n = lengths[s];
        if n < 2 {
            continue;
        }
        let j = rng.gen_range(0..n - 1);
        let delta = rng.gen_range(1..=delta_max.min(n - 1 - j));
        return Ok(EpisodeSample {
            sequence: s,
            start: j,
            delta,
        });
    }
    Err(Error::data(format!(
        "no sequence with 2 or more frames after {MAX_RESAMPLES} draws"
    )))
}

pub fn sample_episode(dataset: &MetaDataset, rng: &mut impl Rng, delta_max: usize) -> Result<EpisodeSample> {
    let lengths: Vec<usize> = dataset.sequences.iter().map(Sequence::len).collect();
    sample_from_lengths(&lengths, &dataset.weights, rng, delta_max)
}

/// `steps` updates `θ ← θ − rates ⊙ ∇θ L`. With `create_graph` the result
/// stays differentiable in `theta0` and `rates`; otherwise every step is
/// taken on detached leaves.
pub fn inner_adapt<M: AdaptiveModel + ?Sized>(
    model: &M,
    theta0: &[Tensor],
    rates: &[Tensor],
    example: &M::Example,
    steps: usize,
    create_graph: bool,
) -> Result<Vec<Tensor>> {
    let mut theta: Vec<Tensor> = theta0
        .iter()
        .map(|t| {
            if t.requires_grad() && create_graph {
                t.clone()
            } else {
                t.detach().as_param()
            }
        })
        .collect();
    for step in 0..steps {
        let loss = model.loss(&theta, example)?;
        let v = loss.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("training loss {v} at inner step {step}")));
        }
        let grads = backward(&loss, &theta, create_graph)?;
        theta = meta_sgd_step(&theta, &grads, rates)?;
        if !create_graph {
            theta = theta.iter().map(|t| t.detach().as_param()).collect();
        }
    }
    if !create_graph {
        theta = theta.iter().map(Tensor::detach).collect();
    }
    Ok(theta)
}

/// Future-frame loss after adaptation, without gradients.
pub fn adapted_loss<M: AdaptiveModel + ?Sized>(
    model: &M,
    theta0: &[Tensor],
    rates: &[Tensor],
    episode: &Episode<M::Example>,
    steps: usize,
) -> Result<f64> {
    let theta1 = inner_adapt(model, theta0, rates, &episode.train, steps, false)?;
    model.loss(&theta1, &episode.future)?.item()
}

/// Future-frame loss and its gradients with respect to `θ₀` and `α`.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    pub loss: f64,
    pub theta: Vec<Tensor>,
    pub alpha: Vec<Tensor>,
}

pub fn episode_gradient<M: AdaptiveModel + ?Sized>(
    model: &M,
    state: &MetaState,
    episode: &Episode<M::Example>,
    steps: usize,
) -> Result<EpisodeGradient> {
    let theta: Vec<Tensor> = state.theta0.iter().map(Tensor::as_param).collect();
    let alpha: Vec<Tensor> = state.alpha.values.iter().map(Tensor::as_param).collect();
    let rates = state.alpha.expand_for(&alpha, &theta)?;
    let theta1 = inner_adapt(model, &theta, &rates, &episode.train, steps, true)?;
    let loss = model.loss(&theta1, &episode.future)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("future-frame loss {value}")));
    }
    let wrt: Vec<Tensor> = theta.iter().chain(&alpha).cloned().collect();
    let mut grads = backward(&loss, &wrt, false)?;
    if !grads.iter().all(Tensor::all_finite) {
        return Err(Error::NonFinite("meta-gradient".into()));
    }
    let alpha_grads = grads.split_off(theta.len());
    Ok(EpisodeGradient {
        loss: value,
        theta: grads,
        alpha: alpha_grads,
    })
}

/// Summed meta-gradients over a mini-batch.
#[derive(Debug, Clone)]
pub struct MetaGradients {
    pub theta: Vec<Tensor>,
    pub alpha: Vec<Tensor>,
    pub losses: Vec<f64>,
    pub aborted: usize,
}

pub fn accumulate<M: AdaptiveModel + ?Sized>(
    model: &M,
    state: &MetaState,
    episodes: &[Episode<M::Example>],
    steps: usize,
) -> Result<MetaGradients> {
    let mut acc = MetaGradients {
        theta: state.theta0.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        alpha: state.alpha.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        losses: Vec::new(),
        aborted: 0,
    };
    for (k, ep) in episodes.iter().enumerate() {
        match episode_gradient(model, state, ep, steps) {
            Ok(g) => {
                for (a, b) in acc.theta.iter_mut().zip(&g.theta) {
                    *a = a.add(b)?;
                }
                for (a, b) in acc.alpha.iter_mut().zip(&g.alpha) {
                    *a = a.add(b)?;
                }
                acc.losses.push(g.loss);
            }
            Err(Error::NonFinite(msg)) => {
                log::warn!("aborting episode {k}: non-finite {msg}");
                acc.aborted += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(acc)
}

/// One Adam step on `θ₀` and one on `α`. Leaves the state untouched when
/// every episode was aborted.
pub fn apply(state: &mut MetaState, grads: &MetaGradients) -> Result<bool> {
    if grads.losses.is_empty() {
        log::warn!(
            "all {} episodes aborted at iteration {}; state unchanged",
            grads.aborted,
            state.iter
        );
        return Ok(false);
    }
    state.theta0 = state.adam_theta.step(&state.theta0, &grads.theta)?;
    state.alpha.values = state.adam_alpha.step(&state.alpha.values, &grads.alpha)?;
    state.iter += 1;
    Ok(true)
}

/// Accumulate and apply; returns the mean future-frame loss, if any episode
/// survived.
pub fn meta_step<M: AdaptiveModel + ?Sized>(
    model: &M,
    state: &mut MetaState,
    episodes: &[Episode<M::Example>],
    steps: usize,
) -> Result<Option<f64>> {
    if episodes.is_empty() {
        return Err(Error::invalid("meta_step needs at least one episode"));
    }
    let grads = accumulate(model, state, episodes, steps)?;
    let mean = grads.losses.iter().sum::<f64>() / grads.losses.len().max(1) as f64;
    Ok(apply(state, &grads)?.then_some(mean))
}

/// Random stream for iteration `iter`, so training can resume bit-exactly.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

pub fn sample_batch<M: MetaLearnable + ?Sized>(
    model: &M,
    dataset: &MetaDataset,
    batch: usize,
    delta_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode<M::Example>>> {
    let mut out = Vec::with_capacity(batch);
    let mut rejected = 0;
    while out.len() < batch {
        let s = sample_episode(dataset, rng, delta_max)?;
        match model.episode(&dataset.sequences[s.sequence], s.start, s.delta, rng)? {
            Some(ep) => out.push(ep),
            None => {
                rejected += 1;
                if rejected > MAX_RESAMPLES {
                    return Err(Error::data(format!("rejected {rejected} episode draws in a row")));
                }
            }
        }
    }
    Ok(out)
}

/// Mean future-frame loss over each block of `log_every` iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iter: u64,
    pub mean_future_loss: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iter,mean_future_loss\n");
    for p in curve {
        let _ = writeln!(s, "{},{}", p.iter, p.mean_future_loss);
    }
    s
}

/// `model.ckpt` → `model.curve.csv`.
pub fn curve_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("curve.csv")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: MetaState,
    pub curve: Vec<CurvePoint>,
}

pub fn meta_train<M: MetaLearnable + ?Sized>(
    model: &M,
    dataset: &MetaDataset,
    cfg: &MetaConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    meta_train_from(model, model.initial_state(cfg, cfg.seed), dataset, cfg, out)
}

/// Runs until `state.iter` reaches `cfg.iters`, checkpointing to `out`
/// periodically and at the end.
pub fn meta_train_from<M: MetaLearnable + ?Sized>(
    model: &M,
    mut state: MetaState,
    dataset: &MetaDataset,
    cfg: &MetaConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.batch == 0 || cfg.inner_steps == 0 {
        return Err(Error::invalid("batch size and inner steps must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::data("meta-training dataset is empty"));
    }
    let mut curve = Vec::new();
    let mut window = Vec::new();
    let mut attempts = 0u64;
    while state.iter < cfg.iters {
        let mut rng = iteration_rng(state.rng_seed, state.iter.wrapping_add(attempts << 32));
        let episodes = sample_batch(model, dataset, cfg.batch, cfg.delta_max, &mut rng)?;
        match meta_step(model, &mut state, &episodes, cfg.inner_steps)? {
            Some(loss) => {
                attempts = 0;
                window.push(loss);
            }
            None => {
                attempts += 1;
                if attempts >= 100 {
                    return Err(Error::NonFinite(format!(
                        "100 consecutive aborted batches at iteration {}",
                        state.iter
                    )));
                }
                continue;
            }
        }
        let log_every = cfg.log_every.max(1);
        if state.iter.is_multiple_of(log_every) || state.iter == cfg.iters {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log::info!("iter {} mean future loss {mean:.6}", state.iter);
            curve.push(CurvePoint {
                iter: state.iter,
                mean_future_loss: mean,
            });
            window.clear();
        }
        if let Some(path) = out {
            if cfg.checkpoint_every > 0 && state.iter.is_multiple_of(cfg.checkpoint_every) && state.iter < cfg.iters {
                save_checkpoint(&state, path)?;
            }
        }
    }
    if let Some(path) = out {
        save_checkpoint(&state, path)?;
        let cp = curve_path(path);
        fs::write(&cp, curve_csv(&curve)).map_err(|e| Error::io(&cp, e))?;
    }
    Ok(TrainOutcome { state, curve })
}

impl MetaLearnable for CrestModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Crest(self.config.clone())
    }

    fn init_theta(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.init_params(rng)
    }

    fn default_alpha(&self) -> f64 {
        1e-6
    }

    /// Both crops are centered on the frame-`j` box; the future label sits at
    /// the frame-`j+δ` target. Draws whose target leaves the map are rejected.
    fn episode(
        &self,
        seq: &Sequence,
        j: usize,
        delta: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Option<Episode<CrestExample>>> {
        let (box_j, box_f) = (&seq.gt[j], &seq.gt[j + delta]);
        let train = self.example(&seq.frames[j], box_j, box_j)?;
        let window = self.window(box_j);
        let (cx, cy) = box_f.center();
        let (r, c) = self.cell_of(&window, cx, cy);
        let last = (self.map_size() - 1) as f64;
        if !(0.0..=last).contains(&r) || !(0.0..=last).contains(&c) {
            return Ok(None);
        }
        let future = CrestExample {
            features: self.features(&seq.frames[j + delta], &window)?,
            label: self.label(&window, box_f, train.filter_dims)?,
            filter_dims: train.filter_dims,
        };
        Ok(Some(Episode { train, future }))
    }
}

impl MetaLearnable for SdnetModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Sdnet(self.config.clone())
    }

    fn init_theta(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.init_params(rng)
    }

    fn default_alpha(&self) -> f64 {
        1e-4
    }

    /// Patches from both frames; one label flip shared by the pair.
    fn episode(
        &self,
        seq: &Sequence,
        j: usize,
        delta: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Episode<SdnetExample>>> {
        let flip = rng.gen_bool(0.5);
        let (np, nn) = (self.config.n_pos, self.config.n_neg);
        let draw = |k: usize, rng: &mut ChaCha8Rng| match self.sample_patches(&seq.frames[k], &seq.gt[k], np, nn, rng) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.is_data_error() => Ok(None),
            Err(e) => Err(e),
        };
        let Some(train) = draw(j, rng)? else { return Ok(None) };
        let Some(future) = draw(j + delta, rng)? else {
            return Ok(None);
        };
        Ok(Some(Episode {
            train: SdnetExample::from_batch(&train, flip),
            future: SdnetExample::from_batch(&future, flip),
        }))
    }
}
