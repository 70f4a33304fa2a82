//! Online tracking: fast initialization from meta-learned parameters,
//! per-frame localization and periodic model updates.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crest::{localize, CrestExample, CrestModel};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::image::GrayImage;
use crate::meta::{inner_adapt, MetaLearnable, MetaState};
use crate::optim::meta_sgd_step;
use crate::sdnet::{classify, PatchBatch, SdnetExample, SdnetModel};
use crate::tensor::{backward, backward_calls, Tensor};

/// Smallest box side accepted at initialization.
pub const MIN_BOX_SIDE: f64 = 4.0;

/// Rule for updates after the first frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// `θ_j = θ_{j−1} − α ⊙ ∇θ_{j−1}`
    FromPrev,
    /// `θ_j = θ₀ − α ⊙ ∇θ₀`
    FromTheta0,
    /// `β · FromPrev + (1 − β) · FromTheta0`
    Combined(f64),
    /// `θ_j = θ_{j−1} − lr · ∇θ_{j−1}`
    PlainLr,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from_prev" => Ok(Strategy::FromPrev),
            "from_theta0" => Ok(Strategy::FromTheta0),
            "plain_lr" => Ok(Strategy::PlainLr),
            _ => {
                if let Some(b) = s.strip_prefix("combined:") {
                    let beta: f64 = b.parse().map_err(|_| Error::invalid(format!("bad beta in {s:?}")))?;
                    if (0.0..=1.0).contains(&beta) {
                        return Ok(Strategy::Combined(beta));
                    }
                }
                Err(Error::invalid(format!(
                    "unknown strategy {s:?}; expected from_prev, from_theta0, combined:<beta> or plain_lr"
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Initialize once and never restart.
    Ope,
    /// Restart from ground truth `reset_gap` frames after a zero-overlap failure.
    Reset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub init_iters: usize,
    pub update_period: usize,
    pub update_iters: usize,
    pub subsequent_lr: f64,
    pub strategy: Strategy,
    pub history: usize,
    pub reset_gap: usize,
    pub seed: u64,
}

impl TrackerConfig {
    /// Two update iterations on every frame.
    pub fn crest() -> Self {
        TrackerConfig {
            init_iters: 1,
            update_period: 1,
            update_iters: 2,
            subsequent_lr: 2e-3,
            strategy: Strategy::PlainLr,
            history: 3,
            reset_gap: 5,
            seed: 0,
        }
    }

    /// Fifteen update iterations every ten frames.
    pub fn sdnet() -> Self {
        TrackerConfig {
            init_iters: 1,
            update_period: 10,
            update_iters: 15,
            subsequent_lr: 1e-3,
            strategy: Strategy::PlainLr,
            history: 10,
            reset_gap: 5,
            seed: 0,
        }
    }
}

/// Starting point of tracking: `θ₀` and the rates of the first update.
#[derive(Debug, Clone)]
pub struct InitParams {
    pub theta0: Vec<Tensor>,
    pub rates: Vec<Tensor>,
}

impl InitParams {
    pub fn from_meta(state: &MetaState) -> Result<Self> {
        Ok(InitParams {
            theta0: state.theta0.clone(),
            rates: state.rates()?,
        })
    }

    /// Same `lr` for every parameter, as used without meta-training.
    pub fn uniform(theta0: Vec<Tensor>, lr: f64) -> Self {
        let rates = theta0.iter().map(|t| Tensor::full(t.shape(), lr)).collect();
        InitParams { theta0, rates }
    }
}

/// Where the head thinks the target is, plus an optional score map.
#[derive(Debug, Clone)]
pub struct Located {
    pub bbox: BoundingBox,
    pub response: Option<GrayImage>,
}

/// A head usable by the online tracker.
pub trait OnlineHead: MetaLearnable {
    /// Training example from a frame with a trusted box.
    fn example_at(&self, frame: &GrayImage, bbox: &BoundingBox, rng: &mut ChaCha8Rng) -> Result<Option<Self::Example>>;

    fn locate(&self, params: &[Tensor], frame: &GrayImage, prev: &BoundingBox, rng: &mut ChaCha8Rng)
        -> Result<Located>;

    fn tracker_config(&self) -> TrackerConfig;
}

impl OnlineHead for CrestModel {
    fn example_at(&self, frame: &GrayImage, bbox: &BoundingBox, _rng: &mut ChaCha8Rng) -> Result<Option<CrestExample>> {
        self.example(frame, bbox, bbox).map(Some)
    }

    fn locate(
        &self,
        params: &[Tensor],
        frame: &GrayImage,
        prev: &BoundingBox,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Located> {
        let response = self.response(params, frame, prev)?;
        Ok(Located {
            bbox: localize(&response, prev),
            response: Some(response.to_image()),
        })
    }

    fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig::crest()
    }
}

impl OnlineHead for SdnetModel {
    fn example_at(&self, frame: &GrayImage, bbox: &BoundingBox, rng: &mut ChaCha8Rng) -> Result<Option<SdnetExample>> {
        let bbox = bbox.clamped_to(frame.width, frame.height);
        match self.sample_patches(frame, &bbox, self.config.n_pos, self.config.n_neg, rng) {
            Ok(b) => Ok(Some(SdnetExample::from_batch(&b, false))),
            Err(e) if e.is_data_error() => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn locate(
        &self,
        params: &[Tensor],
        frame: &GrayImage,
        prev: &BoundingBox,
        rng: &mut ChaCha8Rng,
    ) -> Result<Located> {
        let boxes = self.candidates(frame, prev, rng);
        let scores = classify(&self.featurize(frame, &boxes)?, params)?;
        Ok(Located {
            bbox: self.top_box(&boxes, scores.data()),
            response: None,
        })
    }

    fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig::sdnet()
    }
}

/// Mutable per-sequence tracking state.
#[derive(Debug, Clone)]
pub struct TrackerState<E> {
    pub params: Vec<Tensor>,
    pub prev_box: BoundingBox,
    pub frame_index: usize,
    pub history: VecDeque<E>,
    pub since_update: usize,
    /// Gradient evaluations performed so far.
    pub grad_evals: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Init,
    Ok,
    Fail,
    Skip,
}

impl Event {
    pub fn as_str(&self) -> &'static str {
        match self {
            Event::Init => "init",
            Event::Ok => "ok",
            Event::Fail => "fail",
            Event::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Option<Event> {
        match s {
            "init" => Some(Event::Init),
            "ok" => Some(Event::Ok),
            "fail" => Some(Event::Fail),
            "skip" => Some(Event::Skip),
            _ => None,
        }
    }
}

/// Box and event for one frame; skipped frames have no box.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub bbox: Option<BoundingBox>,
    pub event: Event,
}

/// Output of one sequence. `records` covers frames `1..n`; frame 0 is the
/// initialization box.
#[derive(Debug, Clone)]
pub struct TrackResult {
    pub name: String,
    pub init_box: BoundingBox,
    pub records: Vec<FrameRecord>,
    pub gt: Vec<BoundingBox>,
    pub responses: Vec<(usize, GrayImage)>,
    pub grad_evals: u64,
}

impl TrackResult {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.event == Event::Fail).count()
    }

    /// Mean IoU over frames with a prediction.
    pub fn mean_iou(&self) -> f64 {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.bbox.map(|b| iou(&b, &self.gt[r.frame])))
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// `frame,x,y,w,h,event` rows including the frame-0 initialization.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,x,y,w,h,event\n");
        let b = self.init_box;
        let _ = writeln!(s, "0,{},{},{},{},init", b.x, b.y, b.w, b.h);
        for r in &self.records {
            match r.bbox {
                Some(b) => {
                    let _ = writeln!(s, "{},{},{},{},{},{}", r.frame, b.x, b.y, b.w, b.h, r.event.as_str());
                }
                None => {
                    let _ = writeln!(s, "{},,,,,{}", r.frame, r.event.as_str());
                }
            }
        }
        s
    }
}

/// Parses the CSV written by [`TrackResult::to_csv`].
pub fn parse_track_csv(text: &str, path: &Path) -> Result<(BoundingBox, Vec<FrameRecord>)> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h.trim() == "frame,x,y,w,h,event" => {}
        _ => return Err(err(1, "missing header frame,x,y,w,h,event".into())),
    }
    let mut init = None;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(i + 1, format!("expected 6 fields, found {}", f.len())));
        }
        let frame: usize = f[0]
            .parse()
            .map_err(|_| err(i + 1, format!("bad frame index {:?}", f[0])))?;
        let event = Event::parse(f[5]).ok_or_else(|| err(i + 1, format!("unknown event {:?}", f[5])))?;
        let bbox = if f[1..5].iter().all(|v| v.is_empty()) {
            None
        } else {
            let v = f[1..5]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| err(i + 1, format!("bad number {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(i + 1, e.to_string()))?)
        };
        if frame == 0 {
            init = bbox;
            continue;
        }
        if frame != records.len() + 1 {
            return Err(err(i + 1, format!("frame {frame} out of order")));
        }
        records.push(FrameRecord { frame, bbox, event });
    }
    let init = init.ok_or_else(|| err(2, "missing frame 0 row".into()))?;
    Ok((init, records))
}

/// Tracks with one head from one starting point.
pub struct Tracker<'a, H: OnlineHead> {
    pub head: &'a H,
    pub init: &'a InitParams,
    pub config: TrackerConfig,
}

impl<'a, H: OnlineHead> Tracker<'a, H> {
    pub fn new(head: &'a H, init: &'a InitParams, config: TrackerConfig) -> Self {
        Tracker { head, init, config }
    }

    /// Adapts `θ₀` to the first frame with `n_iters` rate-scaled steps.
    pub fn initialize(
        &self,
        frame: &GrayImage,
        bbox: &BoundingBox,
        n_iters: usize,
        rng: ChaCha8Rng,
    ) -> Result<TrackerState<H::Example>> {
        if bbox.w < MIN_BOX_SIDE || bbox.h < MIN_BOX_SIDE {
            return Err(Error::invalid(format!(
                "box {bbox:?} is smaller than {MIN_BOX_SIDE} px"
            )));
        }
        if !bbox.is_inside(frame.width, frame.height) {
            return Err(Error::invalid(format!("box {bbox:?} is not inside the frame")));
        }
        let mut state = TrackerState {
            params: self.init.theta0.clone(),
            prev_box: *bbox,
            frame_index: 0,
            history: VecDeque::new(),
            since_update: 0,
            grad_evals: 0,
            rng,
        };
        let example = self
            .head
            .example_at(frame, bbox, &mut state.rng)?
            .ok_or_else(|| Error::data(format!("cannot build a training example around {bbox:?}")))?;
        let calls = backward_calls();
        state.params = inner_adapt(self.head, &self.init.theta0, &self.init.rates, &example, n_iters, false)?;
        state.grad_evals += backward_calls() - calls;
        self.remember(&mut state, example);
        Ok(state)
    }

    fn remember(&self, state: &mut TrackerState<H::Example>, example: H::Example) {
        if self.config.history == 0 {
            return;
        }
        while state.history.len() >= self.config.history {
            state.history.pop_front();
        }
        state.history.push_back(example);
    }

    /// Localizes in `frame`, stores a new example and updates on schedule.
    pub fn step(&self, state: &mut TrackerState<H::Example>, frame: &GrayImage) -> Result<Located> {
        let mut located = self
            .head
            .locate(&state.params, frame, &state.prev_box, &mut state.rng)?;
        if !located.bbox.is_inside(frame.width, frame.height) {
            if located.bbox.intersection_area(&BoundingBox {
                x: 0.0,
                y: 0.0,
                w: frame.width as f64,
                h: frame.height as f64,
            }) == 0.0
            {
                log::warn!(
                    "frame {}: box {:?} left the frame; clamping",
                    state.frame_index + 1,
                    located.bbox
                );
            }
            located.bbox = located.bbox.clamped_to(frame.width, frame.height);
        }
        state.prev_box = located.bbox;
        state.frame_index += 1;
        if let Some(ex) = self.head.example_at(frame, &located.bbox, &mut state.rng)? {
            self.remember(state, ex);
        }
        state.since_update += 1;
        if state.since_update >= self.config.update_period.max(1) && !state.history.is_empty() {
            self.update_model(state)?;
            state.since_update = 0;
        }
        Ok(located)
    }

    fn history_grad(&self, params: &[Tensor], history: &VecDeque<H::Example>, evals: &mut u64) -> Result<Vec<Tensor>> {
        let leaves: Vec<Tensor> = params.iter().map(|p| p.detach().as_param()).collect();
        let mut total: Option<Tensor> = None;
        for ex in history {
            let l = self.head.loss(&leaves, ex)?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("update_model needs stored examples"))?;
        let v = total.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("update loss {v}")));
        }
        *evals += 1;
        backward(&total, &leaves, false)
    }

    /// `update_iters` steps of the configured rule over the stored examples.
    pub fn update_model(&self, state: &mut TrackerState<H::Example>) -> Result<()> {
        if state.history.is_empty() {
            return Err(Error::invalid("update_model needs stored examples"));
        }
        let rates = &self.init.rates;
        let mut evals = 0;
        let mut run = |start: &[Tensor], lr: Option<f64>| -> Result<Vec<Tensor>> {
            let mut p = start.to_vec();
            for _ in 0..self.config.update_iters {
                let g = self.history_grad(&p, &state.history, &mut evals)?;
                p = match lr {
                    Some(lr) => crate::optim::sgd_step(&p, &g, lr)?,
                    None => meta_sgd_step(&p, &g, rates)?.iter().map(Tensor::detach).collect(),
                };
            }
            Ok(p)
        };
        let next = match self.config.strategy {
            Strategy::PlainLr => run(&state.params, Some(self.config.subsequent_lr))?,
            Strategy::FromPrev => run(&state.params, None)?,
            Strategy::FromTheta0 => run(&self.init.theta0, None)?,
            Strategy::Combined(beta) => {
                let a = run(&state.params, None)?;
                let b = run(&self.init.theta0, None)?;
                a.iter()
                    .zip(&b)
                    .map(|(a, b)| {
                        let d = a
                            .data()
                            .iter()
                            .zip(b.data())
                            .map(|(x, y)| beta * x + (1.0 - beta) * y)
                            .collect();
                        Tensor::new(a.shape(), d)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        state.grad_evals += evals;
        state.params = next;
        Ok(())
    }

    /// Tracks a whole sequence under `protocol`.
    pub fn run_sequence(&self, seq: &Sequence, protocol: Protocol, keep_responses: bool) -> Result<TrackResult> {
        if seq.len() < 2 {
            return Err(Error::data(format!("sequence {} needs at least 2 frames", seq.name)));
        }
        let rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut state = self.initialize(&seq.frames[0], &seq.gt[0], self.config.init_iters, rng)?;
        let mut records = Vec::with_capacity(seq.len() - 1);
        let mut responses = Vec::new();
        let mut grad_evals = 0;
        let mut reinit_at: Option<usize> = None;
        for f in 1..seq.len() {
            if let Some(at) = reinit_at {
                if f < at {
                    records.push(FrameRecord {
                        frame: f,
                        bbox: None,
                        event: Event::Skip,
                    });
                    continue;
                }
                grad_evals += state.grad_evals;
                let rng = std::mem::replace(&mut state.rng, ChaCha8Rng::seed_from_u64(0));
                state = self.initialize(&seq.frames[f], &seq.gt[f], self.config.init_iters, rng)?;
                state.frame_index = f;
                reinit_at = None;
                records.push(FrameRecord {
                    frame: f,
                    bbox: Some(seq.gt[f]),
                    event: Event::Init,
                });
                continue;
            }
            let located = self.step(&mut state, &seq.frames[f])?;
            if keep_responses {
                if let Some(img) = located.response {
                    responses.push((f, img));
                }
            }
            let failed = protocol == Protocol::Reset && iou(&located.bbox, &seq.gt[f]) == 0.0;
            records.push(FrameRecord {
                frame: f,
                bbox: Some(located.bbox),
                event: if failed { Event::Fail } else { Event::Ok },
            });
            if failed {
                reinit_at = Some(f + self.config.reset_gap);
            }
        }
        Ok(TrackResult {
            name: seq.name.clone(),
            init_box: seq.gt[0],
            records,
            gt: seq.gt.clone(),
            responses,
            grad_evals: grad_evals + state.grad_evals,
        })
    }
}

/// Reset-protocol events for a fixed overlap series (`overlaps[f]` for
/// frames `1..n`, index 0 unused), without a tracker in the loop.
pub fn reset_events(overlaps: &[f64], gap: usize) -> Vec<Event> {
    let mut events = Vec::with_capacity(overlaps.len().saturating_sub(1));
    let mut reinit_at: Option<usize> = None;
    for (f, &o) in overlaps.iter().enumerate().skip(1) {
        if let Some(at) = reinit_at {
            if f < at {
                events.push(Event::Skip);
                continue;
            }
            reinit_at = None;
            events.push(Event::Init);
            continue;
        }
        if o == 0.0 {
            events.push(Event::Fail);
            reinit_at = Some(f + gap);
        } else {
            events.push(Event::Ok);
        }
    }
    events
}

/// Writes `track.csv`, a copy of the ground truth and optional response maps.
pub fn write_track_output(result: &TrackResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(TRACK_FILE);
    fs::write(&csv, result.to_csv()).map_err(|e| Error::io(&csv, e))?;
    crate::data::write_groundtruth(&result.gt, &dir.join(crate::data::GROUNDTRUTH_FILE))?;
    if !result.responses.is_empty() {
        let rdir = dir.join("responses");
        fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
        for (f, img) in &result.responses {
            img.write_pgm(&rdir.join(format!("{:04}.pgm", f + 1)))?;
        }
    }
    Ok(())
}

pub const TRACK_FILE: &str = "track.csv";

/// Fraction of patches on the correct side of 0.5 after adapting `θ₀` once
/// (or `n_iters` times) to `train`.
pub fn patch_accuracy(
    head: &SdnetModel,
    init: &InitParams,
    train: &SdnetExample,
    test: &PatchBatch,
    n_iters: usize,
) -> Result<f64> {
    let params = inner_adapt(head, &init.theta0, &init.rates, train, n_iters, false)?;
    let scores = classify(&test.features, &params)?;
    Ok(crate::sdnet::accuracy(scores.data(), &test.labels))
}
