//! Sequence directories, meta-training datasets, synthetic sequences and
//! checkpoint files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::crest::{CrestConfig, LossVariant};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, LayerSpec};
use crate::geometry::{iou, BoundingBox};
use crate::image::{quantize, GrayImage};
use crate::meta::{MetaState, ModelSpec};
use crate::optim::{AdamConfig, AdamState, AlphaMode, AlphaSet};
use crate::sdnet::SdnetConfig;
use crate::tensor::Tensor;

pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";
pub const SYNTH_SPEC_FILE: &str = "synth.txt";

/// Frames with one ground-truth box each.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<GrayImage>,
    pub gt: Vec<BoundingBox>,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Vec<GrayImage>, gt: Vec<BoundingBox>) -> Result<Self> {
        let name = name.into();
        if frames.len() != gt.len() {
            return Err(Error::data(format!(
                "sequence {name}: {} frames but {} ground-truth boxes",
                frames.len(),
                gt.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::data(format!("sequence {name}: needs at least 2 frames")));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        for (i, (f, b)) in frames.iter().zip(&gt).enumerate() {
            if (f.width, f.height) != (w, h) {
                return Err(Error::data(format!(
                    "sequence {name}: frame {} is {}x{}, expected {w}x{h}",
                    i + 1,
                    f.width,
                    f.height
                )));
            }
            if !b.is_inside(w, h) {
                return Err(Error::data(format!(
                    "sequence {name}: box {} {b:?} leaves the {w}x{h} frame",
                    i + 1
                )));
            }
        }
        Ok(Sequence { name, frames, gt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }

    /// Frames `range`, keeping the name.
    pub fn slice(&self, start: usize, end: usize) -> Sequence {
        Sequence {
            name: self.name.clone(),
            frames: self.frames[start..end].to_vec(),
            gt: self.gt[start..end].to_vec(),
        }
    }
}

/// Parses `x,y,w,h` lines. Blank trailing lines are ignored.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|_| err(format!("bad number {f:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(err(format!("expected x,y,w,h but found {} fields", vals.len())));
        }
        boxes.push(BoundingBox::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| err(e.to_string()))?);
    }
    Ok(boxes)
}

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("img").join(format!("{:04}.pgm", index + 1))
}

/// Reads `img/NNNN.pgm` (1-indexed) and `groundtruth_rect.txt` from `dir`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt = parse_groundtruth(&text, &gt_path)?;
    let img_dir = dir.join("img");
    let n_frames = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    if n_frames != gt.len() {
        return Err(Error::data(format!(
            "{}: {n_frames} frames but {} ground-truth lines",
            dir.display(),
            gt.len()
        )));
    }
    let frames = (0..n_frames)
        .map(|i| GrayImage::read_pgm(&frame_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Sequence::new(name, frames, gt)
}

/// A sequence directory, or a directory whose sorted subdirectories are sequences.
pub fn load_sequences(dir: &Path) -> Result<Vec<Sequence>> {
    if dir.join(GROUNDTRUTH_FILE).exists() {
        return Ok(vec![load_sequence(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::data(format!("{}: no sequences found", dir.display())));
    }
    subdirs.iter().map(|d| load_sequence(d)).collect()
}

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img = dir.join("img");
    fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.write_pgm(&frame_path(dir, i))?;
    }
    write_groundtruth(&seq.gt, &dir.join(GROUNDTRUTH_FILE))
}

pub fn write_groundtruth(boxes: &[BoundingBox], path: &Path) -> Result<()> {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// How the target size limit is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeRule {
    /// Box area over frame area.
    Area,
    /// Larger of `w/W` and `h/H`.
    Side,
}

pub fn size_fraction(b: &BoundingBox, width: usize, height: usize, rule: SizeRule) -> f64 {
    match rule {
        SizeRule::Area => b.area() / (width * height) as f64,
        SizeRule::Side => (b.w / width as f64).max(b.h / height as f64),
    }
}

/// Frames `[start, end)` from the first frame within the limit up to the
/// next frame that exceeds it.
pub fn size_window(fracs: &[f64], max_frac: f64) -> Option<(usize, usize)> {
    let start = fracs.iter().position(|&f| f <= max_frac)?;
    let end = fracs[start..]
        .iter()
        .position(|&f| f > max_frac)
        .map_or(fracs.len(), |k| start + k);
    Some((start, end))
}

/// Meta-training sequences with per-sequence sampling weights.
#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub sequences: Vec<Sequence>,
    pub weights: Vec<f64>,
}

impl MetaDataset {
    /// Mixes datasets so that source `k` is picked with probability
    /// proportional to `weight_k`, then a sequence uniformly within it.
    pub fn mixed(parts: Vec<(MetaDataset, f64)>) -> Result<MetaDataset> {
        let mut sequences = Vec::new();
        let mut weights = Vec::new();
        for (part, w) in parts {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("source weight {w} must be positive")));
            }
            let total: f64 = part.weights.iter().sum();
            weights.extend(part.weights.iter().map(|x| w * x / total));
            sequences.extend(part.sequences);
        }
        if sequences.is_empty() {
            return Err(Error::data("meta-training dataset is empty"));
        }
        Ok(MetaDataset { sequences, weights })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Clips every sequence to its size window and drops windows shorter than 2.
pub fn build_meta_dataset(sequences: Vec<Sequence>, max_frac: f64, rule: SizeRule) -> Result<MetaDataset> {
    if sequences.is_empty() {
        return Err(Error::invalid("no sequences given"));
    }
    let mut kept = Vec::new();
    for seq in sequences {
        let (w, h) = seq.dims();
        let fracs: Vec<f64> = seq.gt.iter().map(|b| size_fraction(b, w, h, rule)).collect();
        match size_window(&fracs, max_frac) {
            Some((s, e)) if e - s >= 2 => kept.push(seq.slice(s, e)),
            _ => log::debug!("dropping {}: no window within size limit", seq.name),
        }
    }
    if kept.is_empty() {
        return Err(Error::data(format!("every sequence exceeds the size limit {max_frac}")));
    }
    let weights = vec![1.0; kept.len()];
    Ok(MetaDataset {
        sequences: kept,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    ConstantVelocity,
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Blob,
    Checker,
}

/// Parameters of a synthetic sequence. Unset start and velocity are drawn
/// from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub motion: Motion,
    pub pattern: Pattern,
    /// Per-pixel Gaussian noise; 0 gives a flat background.
    pub noise_sigma: f64,
    pub background: f64,
    pub distractors: usize,
    /// Distractor contrast relative to the target.
    pub distractor_gain: f64,
    /// Draw distractors with the other pattern instead of the target's.
    pub distractor_other: bool,
    pub target_w: f64,
    pub target_h: f64,
    pub start: Option<(f64, f64)>,
    pub velocity: Option<(f64, f64)>,
    /// Speed range for drawn velocities.
    pub speed: (f64, f64),
    /// Per-frame velocity perturbation for the random walk, whose speed is
    /// capped at `speed.1`.
    pub walk_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 64,
            height: 64,
            frames: 30,
            motion: Motion::ConstantVelocity,
            pattern: Pattern::Blob,
            noise_sigma: 0.02,
            background: 0.3,
            distractors: 0,
            distractor_gain: 0.5,
            distractor_other: false,
            target_w: 16.0,
            target_h: 16.0,
            start: None,
            velocity: None,
            speed: (0.5, 2.0),
            walk_sigma: 0.3,
        }
    }
}

impl SynthSpec {
    /// Flat `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(
            s,
            "motion={}",
            match self.motion {
                Motion::ConstantVelocity => "cv",
                Motion::RandomWalk => "rw",
            }
        );
        let _ = writeln!(
            s,
            "pattern={}",
            match self.pattern {
                Pattern::Blob => "blob",
                Pattern::Checker => "checker",
            }
        );
        let _ = writeln!(s, "noise_sigma={}", self.noise_sigma);
        let _ = writeln!(s, "background={}", self.background);
        let _ = writeln!(s, "distractors={}", self.distractors);
        let _ = writeln!(s, "distractor_gain={}", self.distractor_gain);
        let _ = writeln!(
            s,
            "distractor_pattern={}",
            if self.distractor_other { "other" } else { "same" }
        );
        let _ = writeln!(s, "target_w={}", self.target_w);
        let _ = writeln!(s, "target_h={}", self.target_h);
        if let Some((x, y)) = self.start {
            let _ = writeln!(s, "start={x},{y}");
        }
        if let Some((x, y)) = self.velocity {
            let _ = writeln!(s, "velocity={x},{y}");
        }
        let _ = writeln!(s, "speed={},{}", self.speed.0, self.speed.1);
        let _ = writeln!(s, "walk_sigma={}", self.walk_sigma);
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number {v:?} for {key}")));
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| err(format!("bad integer {v:?} for {key}")))
            };
            let pair = |v: &str| -> Result<(f64, f64)> {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| err(format!("{key} needs two values")))?;
                Ok((num(a.trim())?, num(b.trim())?))
            };
            match key {
                "width" => spec.width = int(value)?,
                "height" => spec.height = int(value)?,
                "frames" => spec.frames = int(value)?,
                "motion" => {
                    spec.motion = match value {
                        "cv" => Motion::ConstantVelocity,
                        "rw" => Motion::RandomWalk,
                        _ => return Err(err(format!("unknown motion {value:?}"))),
                    }
                }
                "pattern" => {
                    spec.pattern = match value {
                        "blob" => Pattern::Blob,
                        "checker" => Pattern::Checker,
                        _ => return Err(err(format!("unknown pattern {value:?}"))),
                    }
                }
                "noise_sigma" => spec.noise_sigma = num(value)?,
                "background" => spec.background = num(value)?,
                "distractors" => spec.distractors = int(value)?,
                "distractor_gain" => spec.distractor_gain = num(value)?,
                "distractor_pattern" => {
                    spec.distractor_other = match value {
                        "same" => false,
                        "other" => true,
                        _ => return Err(err(format!("unknown distractor pattern {value:?}"))),
                    }
                }
                "target_w" => spec.target_w = num(value)?,
                "target_h" => spec.target_h = num(value)?,
                "start" => spec.start = Some(pair(value)?),
                "velocity" => spec.velocity = Some(pair(value)?),
                "speed" => spec.speed = pair(value)?,
                "walk_sigma" => spec.walk_sigma = num(value)?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        Ok(spec)
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, size: f64, limit: f64) {
    let max = limit - size;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > max {
        *pos = 2.0 * max - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(0.0, max);
}

fn pattern_value(pattern: Pattern, b: &BoundingBox, px: f64, py: f64) -> f64 {
    match pattern {
        Pattern::Blob => {
            let (cx, cy) = b.center();
            let (sx, sy) = (b.w / 4.0, b.h / 4.0);
            0.6 * (-0.5 * (((px - cx) / sx).powi(2) + ((py - cy) / sy).powi(2))).exp()
        }
        Pattern::Checker => {
            if px < b.x || px >= b.x + b.w || py < b.y || py >= b.y + b.h {
                return 0.0;
            }
            let cell = (b.w.min(b.h) / 4.0).max(1.0);
            let k = ((px - b.x) / cell).floor() as i64 + ((py - b.y) / cell).floor() as i64;
            if k % 2 == 0 {
                0.6
            } else {
                -0.25
            }
        }
    }
}

/// Static distractor boxes with IoU ≤ 0.2 against every target box.
pub fn place_distractors(spec: &SynthSpec, gt: &[BoundingBox], rng: &mut impl Rng) -> Result<Vec<BoundingBox>> {
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut out = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let mut placed = None;
        for _ in 0..1000 {
            let b = BoundingBox::new(
                rng.gen_range(0.0..=fw - spec.target_w),
                rng.gen_range(0.0..=fh - spec.target_h),
                spec.target_w,
                spec.target_h,
            )?;
            if gt.iter().all(|g| iou(g, &b) <= 0.2) {
                placed = Some(b);
                break;
            }
        }
        out.push(placed.ok_or_else(|| Error::data("could not place a distractor away from the target path"))?);
    }
    Ok(out)
}

/// Renders a deterministic sequence; frames are quantized to 8 bits.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64, name: &str) -> Result<Sequence> {
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    if !(spec.target_w > 0.0 && spec.target_h > 0.0) || spec.target_w > fw || spec.target_h > fh {
        return Err(Error::invalid(format!(
            "target {}x{} does not fit the {}x{} frame",
            spec.target_w, spec.target_h, spec.width, spec.height
        )));
    }
    if spec.frames < 2 {
        return Err(Error::invalid("synthetic sequences need at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut y) = spec.start.unwrap_or_else(|| {
        (
            rng.gen_range(0.0..=fw - spec.target_w),
            rng.gen_range(0.0..=fh - spec.target_h),
        )
    });
    if x < 0.0 || y < 0.0 || x + spec.target_w > fw || y + spec.target_h > fh {
        return Err(Error::invalid(format!(
            "start ({x}, {y}) puts the target outside the frame"
        )));
    }
    let (mut vx, mut vy) = spec.velocity.unwrap_or_else(|| {
        let speed = rng.gen_range(spec.speed.0..=spec.speed.1);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        (speed * angle.cos(), speed * angle.sin())
    });
    let walk = Normal::new(0.0, spec.walk_sigma.max(1e-300)).map_err(|e| Error::invalid(e.to_string()))?;

    let mut gt = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            if spec.motion == Motion::RandomWalk {
                vx += walk.sample(&mut rng);
                vy += walk.sample(&mut rng);
                let speed = vx.hypot(vy);
                if speed > spec.speed.1 {
                    vx *= spec.speed.1 / speed;
                    vy *= spec.speed.1 / speed;
                }
            }
            x += vx;
            y += vy;
            reflect(&mut x, &mut vx, spec.target_w, fw);
            reflect(&mut y, &mut vy, spec.target_h, fh);
        }
        gt.push(BoundingBox::new(x, y, spec.target_w, spec.target_h)?);
    }

    let distractors = place_distractors(spec, &gt, &mut rng)?;

    let distractor_pattern = match (spec.distractor_other, spec.pattern) {
        (false, p) => p,
        (true, Pattern::Blob) => Pattern::Checker,
        (true, Pattern::Checker) => Pattern::Blob,
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frames);
    for b in &gt {
        let mut data = Vec::with_capacity(spec.width * spec.height);
        for r in 0..spec.height {
            for c in 0..spec.width {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let mut v = spec.background + pattern_value(spec.pattern, b, px, py);
                for d in &distractors {
                    v += spec.distractor_gain * pattern_value(distractor_pattern, d, px, py);
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(quantize(v));
            }
        }
        frames.push(GrayImage::new(spec.width, spec.height, data)?);
    }
    Sequence::new(name, frames, gt)
}

// Checkpoints.

const MAGIC: &[u8; 8] = b"MTRK0001";

fn layer_tensor(layers: &[LayerSpec]) -> Tensor {
    let data = layers
        .iter()
        .flat_map(|l| [l.out_channels as f64, l.stride as f64])
        .collect();
    Tensor::new(&[layers.len(), 2], data).expect("layer table")
}

fn spec_entries(spec: &ModelSpec) -> Vec<(String, Tensor)> {
    let (kind, features, head) = match spec {
        ModelSpec::Crest(c) => (
            0.0,
            &c.features,
            vec![
                c.reduced_channels as f64,
                c.canonical.0 as f64,
                c.canonical.1 as f64,
                c.patch_size as f64,
                c.search_scale,
                c.sigma_factor,
                c.lambda,
                match c.variant {
                    LossVariant::Plain => 0.0,
                    LossVariant::Weighted => 1.0,
                },
            ],
        ),
        ModelSpec::Sdnet(c) => (
            1.0,
            &c.features,
            vec![
                c.patch_size as f64,
                c.hidden as f64,
                c.n_pos as f64,
                c.n_neg as f64,
                c.pos_iou,
                c.neg_iou,
                c.n_candidates as f64,
                c.top_k as f64,
            ],
        ),
    };
    vec![
        ("config.kind".into(), Tensor::from_slice(&[kind])),
        (
            "config.feature_seed".into(),
            Tensor::from_slice(&[(features.seed >> 32) as f64, (features.seed & 0xFFFF_FFFF) as f64]),
        ),
        ("config.feature_layers".into(), layer_tensor(&features.layers)),
        ("config.head".into(), Tensor::from_slice(&head)),
    ]
}

fn adam_entries(prefix: &str, names: &[String], s: &AdamState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (n, m) in names.iter().zip(&s.m) {
        out.push((format!("{prefix}.m.{n}"), m.clone()));
    }
    for (n, v) in names.iter().zip(&s.v) {
        out.push((format!("{prefix}.v.{n}"), v.clone()));
    }
    out.push((format!("{prefix}.t"), Tensor::from_slice(&[s.t as f64])));
    let c = s.config;
    out.push((
        format!("{prefix}.hyper"),
        Tensor::from_slice(&[c.lr, c.beta1, c.beta2, c.eps]),
    ));
    out
}

fn alpha_names(state: &MetaState) -> Vec<String> {
    match state.alpha.mode {
        AlphaMode::PerParameter => state.names.clone(),
        AlphaMode::Scalar => vec!["shared".into()],
    }
}

/// Entries in file order.
pub fn checkpoint_entries(state: &MetaState) -> Vec<(String, Tensor)> {
    let mut e = Vec::new();
    for (n, t) in state.names.iter().zip(&state.theta0) {
        e.push((format!("theta0.{n}"), t.clone()));
    }
    let anames = alpha_names(state);
    for (n, t) in anames.iter().zip(&state.alpha.values) {
        e.push((format!("alpha.{n}"), t.clone()));
    }
    e.extend(adam_entries("adam_theta", &state.names, &state.adam_theta));
    e.extend(adam_entries("adam_alpha", &anames, &state.adam_alpha));
    e.extend(spec_entries(&state.model));
    e
}

pub fn checkpoint_bytes(state: &MetaState) -> Vec<u8> {
    let entries = checkpoint_entries(state);
    let mut out = MAGIC.to_vec();
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out.extend(state.rng_seed.to_le_bytes());
    out.extend(state.iter.to_le_bytes());
    out
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(state: &MetaState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, checkpoint_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, have {}",
                    self.bytes.len() - self.pos
                ),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        })
    }
}

/// Named tensors in file order.
pub type Entries = Vec<(String, Tensor)>;

/// Raw entries plus the `(seed, iteration)` trailer.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Entries, u64, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
        return r.fail(0, "bad magic, expected MTRK0001");
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64 + 2,
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank > 4 {
            return r.fail(rank_at, format!("rank {rank} of {name} exceeds 4"));
        }
        let dims_at = r.pos;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format {
                offset: dims_at as u64,
                msg: format!("dimensions {shape:?} of {name} overflow"),
            })?;
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: dims_at as u64,
            msg: e.to_string(),
        })?;
        entries.push((name, t));
    }
    let seed = r.u64("seed")?;
    let iter = r.u64("iteration")?;
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((entries, seed, iter))
}

fn take_prefixed(entries: &BTreeMap<usize, (String, Tensor)>, prefix: &str) -> Vec<(String, Tensor)> {
    entries
        .values()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn single(entries: &[(String, Tensor)], name: &str) -> Result<Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::data(format!("checkpoint lacks entry {name}")))
}

fn to_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::data(format!("checkpoint field {what} = {v} is not a count")))
    }
}

fn decode_spec(entries: &[(String, Tensor)]) -> Result<ModelSpec> {
    let kind = single(entries, "config.kind")?.data()[0];
    let seed_t = single(entries, "config.feature_seed")?;
    let seed = (to_usize(seed_t.data()[0], "seed")? as u64) << 32 | to_usize(seed_t.data()[1], "seed")? as u64;
    let layers_t = single(entries, "config.feature_layers")?;
    let layers = layers_t
        .data()
        .chunks(2)
        .map(|p| {
            Ok(LayerSpec {
                out_channels: to_usize(p[0], "channels")?,
                stride: to_usize(p[1], "stride")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let features = FeatureConfig { seed, layers };
    let head = single(entries, "config.head")?;
    let h = head.data();
    if h.len() != 8 {
        return Err(Error::data(format!("config.head has {} values, expected 8", h.len())));
    }
    if kind == 0.0 {
        Ok(ModelSpec::Crest(CrestConfig {
            features,
            reduced_channels: to_usize(h[0], "reduced_channels")?,
            canonical: (to_usize(h[1], "canonical")?, to_usize(h[2], "canonical")?),
            patch_size: to_usize(h[3], "patch_size")?,
            search_scale: h[4],
            sigma_factor: h[5],
            lambda: h[6],
            variant: if h[7] == 0.0 {
                LossVariant::Plain
            } else {
                LossVariant::Weighted
            },
        }))
    } else if kind == 1.0 {
        Ok(ModelSpec::Sdnet(SdnetConfig {
            features,
            patch_size: to_usize(h[0], "patch_size")?,
            hidden: to_usize(h[1], "hidden")?,
            n_pos: to_usize(h[2], "n_pos")?,
            n_neg: to_usize(h[3], "n_neg")?,
            pos_iou: h[4],
            neg_iou: h[5],
            n_candidates: to_usize(h[6], "n_candidates")?,
            top_k: to_usize(h[7], "top_k")?,
        }))
    } else {
        Err(Error::data(format!("unknown model kind {kind}")))
    }
}

fn decode_adam(entries: &[(String, Tensor)], prefix: &str, names: &[String]) -> Result<AdamState> {
    let get = |k: &str| single(entries, &format!("{prefix}.{k}"));
    let m = names
        .iter()
        .map(|n| get(&format!("m.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let v = names
        .iter()
        .map(|n| get(&format!("v.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let t = to_usize(get("t")?.data()[0], "adam step")? as u64;
    let hyper = get("hyper")?;
    let [lr, beta1, beta2, eps] = hyper.data() else {
        return Err(Error::data(format!("{prefix}.hyper needs 4 values")));
    };
    Ok(AdamState {
        config: AdamConfig {
            lr: *lr,
            beta1: *beta1,
            beta2: *beta2,
            eps: *eps,
        },
        m,
        v,
        t,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MetaState> {
    let (raw, rng_seed, iter) = parse_checkpoint(bytes)?;
    let indexed: BTreeMap<usize, (String, Tensor)> = raw.iter().cloned().enumerate().collect();
    let theta = take_prefixed(&indexed, "theta0.");
    let alpha = take_prefixed(&indexed, "alpha.");
    let names: Vec<String> = theta.iter().map(|(n, _)| n.clone()).collect();
    let theta0: Vec<Tensor> = theta.into_iter().map(|(_, t)| t).collect();
    let anames: Vec<String> = alpha.iter().map(|(n, _)| n.clone()).collect();
    let mode = if anames == ["shared"] {
        AlphaMode::Scalar
    } else {
        AlphaMode::PerParameter
    };
    let alpha = AlphaSet {
        mode,
        values: alpha.into_iter().map(|(_, t)| t).collect(),
    };
    alpha.expand_for(&alpha.values, &theta0)?;
    let adam_theta = decode_adam(&raw, "adam_theta", &names)?;
    let adam_alpha = decode_adam(&raw, "adam_alpha", &anames)?;
    Ok(MetaState {
        model: decode_spec(&raw)?,
        names,
        theta0,
        alpha,
        adam_theta,
        adam_alpha,
        iter,
        rng_seed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<MetaState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crest::CrestModel;
    use crate::meta::{MetaConfig, MetaLearnable};

    fn tiny_seq(n: usize, w: usize, h: usize) -> Sequence {
        let frames = (0..n).map(|_| GrayImage::filled(w, h, 0.5)).collect();
        let gt = (0..n)
            .map(|i| BoundingBox::new(i as f64, 1.0, 2.0, 2.0).unwrap())
            .collect();
        Sequence::new("t", frames, gt).unwrap()
    }

    #[test]
    fn groundtruth_parsing() {
        let p = Path::new("gt.txt");
        let b = parse_groundtruth("10,20,30,40\n1.5, 2.5 ,3,4\n\n", p).unwrap();
        assert_eq!(b[0], BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap());
        assert_eq!(b[1], BoundingBox::new(1.5, 2.5, 3.0, 4.0).unwrap());
        let err = parse_groundtruth("1,2,3,4\n1,2,x,4\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(
            parse_groundtruth("1,2,3\n", p).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn sequence_directory_round_trip_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let seq = gen_synthetic(
            &SynthSpec {
                frames: 3,
                ..SynthSpec::default()
            },
            4,
            "s",
        )
        .unwrap();
        let d = dir.path().join("s");
        write_sequence(&seq, &d).unwrap();
        let back = load_sequence(&d).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back, seq);
        assert_eq!(load_sequences(dir.path()).unwrap().len(), 1);

        write_groundtruth(&seq.gt[..2], &d.join(GROUNDTRUTH_FILE)).unwrap();
        let msg = load_sequence(&d).unwrap_err().to_string();
        assert!(msg.contains("3 frames") && msg.contains("2 ground-truth"), "{msg}");
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let frames = vec![GrayImage::filled(8, 8, 0.0); 2];
        let gt = vec![
            BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            BoundingBox::new(6.0, 0.0, 4.0, 4.0).unwrap(),
        ];
        assert!(Sequence::new("x", frames, gt).is_err());
    }

    #[test]
    fn size_window_cases() {
        assert_eq!(size_window(&[0.1; 5], 0.6), Some((0, 5)));
        assert_eq!(size_window(&[0.7, 0.5, 0.5, 0.7], 0.6), Some((1, 3)));
        assert_eq!(size_window(&[0.7, 0.8], 0.6), None);
    }

    #[test]
    fn size_window_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let n = rng.gen_range(1..20);
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            // Scan: find the first admissible frame, then extend while admissible.
            let mut want = None;
            let mut i = 0;
            while i < n && f[i] > 0.6 {
                i += 1;
            }
            if i < n {
                let mut j = i;
                while j < n && f[j] <= 0.6 {
                    j += 1;
                }
                want = Some((i, j));
            }
            let got = size_window(&f, 0.6);
            assert_eq!(got, want);
            if let Some((s, e)) = got {
                assert!(f[s..e].iter().all(|&x| x <= 0.6));
            }
        }
    }

    #[test]
    fn meta_dataset_rules() {
        // 16x16 frame: a 14x14 box covers 77% of the area but 87.5% of the side.
        let mut seq = tiny_seq(4, 16, 16);
        seq.gt[0] = BoundingBox::new(0.0, 0.0, 14.0, 14.0).unwrap();
        let ds = build_meta_dataset(vec![seq.clone()], 0.6, SizeRule::Area).unwrap();
        assert_eq!(ds.sequences[0].len(), 3);
        assert_eq!(ds.sequences[0].gt[0], seq.gt[1]);
        let whole = build_meta_dataset(vec![tiny_seq(4, 16, 16)], 0.6, SizeRule::Area).unwrap();
        assert_eq!(whole.sequences[0].len(), 4);
        let mut big = tiny_seq(2, 16, 16);
        big.gt[1] = BoundingBox::new(0.0, 0.0, 14.0, 14.0).unwrap();
        assert!(build_meta_dataset(vec![big.clone()], 0.6, SizeRule::Area).is_err());
        let mut side = tiny_seq(3, 16, 16);
        side.gt[2] = BoundingBox::new(0.0, 0.0, 11.0, 2.0).unwrap();
        assert_eq!(
            build_meta_dataset(vec![side.clone()], 0.6, SizeRule::Area)
                .unwrap()
                .sequences[0]
                .len(),
            3
        );
        assert_eq!(
            build_meta_dataset(vec![side], 0.6, SizeRule::Side).unwrap().sequences[0].len(),
            2
        );
    }

    #[test]
    fn mixed_weights() {
        let a = build_meta_dataset(
            vec![tiny_seq(3, 8, 8), tiny_seq(3, 8, 8), tiny_seq(3, 8, 8)],
            0.6,
            SizeRule::Area,
        )
        .unwrap();
        let b = build_meta_dataset(vec![tiny_seq(3, 8, 8)], 0.6, SizeRule::Area).unwrap();
        let m = MetaDataset::mixed(vec![(a, 0.7), (b, 0.3)]).unwrap();
        let w = &m.weights;
        assert!((w[0] + w[1] + w[2] - 0.7).abs() < 1e-15 && (w[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn synthetic_kinematics_and_determinism() {
        let spec = SynthSpec {
            frames: 10,
            start: Some((10.0, 10.0)),
            velocity: Some((2.0, 0.0)),
            ..SynthSpec::default()
        };
        let s = gen_synthetic(&spec, 1, "a").unwrap();
        let xs: Vec<f64> = s.gt.iter().map(|b| b.x).collect();
        assert_eq!(xs, (0..10).map(|i| 10.0 + 2.0 * i as f64).collect::<Vec<_>>());
        let t = gen_synthetic(&spec, 1, "a").unwrap();
        assert!(s.frames.iter().zip(&t.frames).all(|(a, b)| a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())));
        let u = gen_synthetic(&spec, 2, "a").unwrap();
        assert_ne!(s.frames[0], u.frames[0]);
    }

    #[test]
    fn synthetic_reflects_and_rejects_big_targets() {
        let spec = SynthSpec {
            frames: 200,
            motion: Motion::RandomWalk,
            ..SynthSpec::default()
        };
        for seed in 0..5 {
            let s = gen_synthetic(&spec, seed, "r").unwrap();
            assert!(s.gt.iter().all(|b| b.is_inside(64, 64)));
        }
        let big = SynthSpec {
            target_w: 65.0,
            ..SynthSpec::default()
        };
        assert!(gen_synthetic(&big, 0, "b").is_err());
    }

    #[test]
    fn synthetic_target_drawn_at_ground_truth() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let s = gen_synthetic(&spec, 3, "g").unwrap();
        for (f, b) in s.frames.iter().zip(&s.gt) {
            let (cx, cy) = b.center();
            let peak = f.sample(cy - 0.5, cx - 0.5);
            assert!(peak > 0.8, "{peak}");
        }
    }

    #[test]
    fn distractors_keep_away_from_target() {
        let spec = SynthSpec {
            distractors: 3,
            frames: 40,
            ..SynthSpec::default()
        };
        let mut placed = 0;
        for seed in 0..20 {
            let s = gen_synthetic(&spec, seed, "d").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match place_distractors(&spec, &s.gt, &mut rng) {
                Ok(ds) => {
                    placed += ds.len();
                    for d in &ds {
                        assert!(s.gt.iter().map(|g| iou(g, d)).fold(0.0, f64::max) <= 0.2);
                    }
                }
                Err(e) => assert!(e.is_data_error()),
            }
        }
        assert!(placed > 0);
    }

    #[test]
    fn checker_pattern_rendered_in_box() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            pattern: Pattern::Checker,
            start: Some((10.0, 20.0)),
            ..SynthSpec::default()
        };
        let s = gen_synthetic(&spec, 0, "c").unwrap();
        let f = &s.frames[0];
        // 16 px box, 4 px cells: (0,0) cell bright, (0,1) cell dark, outside is background.
        let near = |v: f64, want: f64| (v - want).abs() <= 1.0 / 255.0;
        assert!(near(f.get(22, 12), 0.9));
        assert!(near(f.get(22, 16), 0.05));
        assert!(near(f.get(5, 5), 0.3));
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SynthSpec {
            start: Some((3.0, 4.5)),
            velocity: Some((-1.0, 0.25)),
            motion: Motion::RandomWalk,
            pattern: Pattern::Checker,
            distractors: 2,
            distractor_other: true,
            ..SynthSpec::default()
        };
        let p = Path::new("synth.txt");
        assert_eq!(SynthSpec::parse(&spec.to_text(), p).unwrap(), spec);
        assert!(matches!(
            SynthSpec::parse("width=64\nbogus=1\n", p).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        assert!(SynthSpec::parse("distractor_pattern=stripes\n", p).is_err());
    }

    #[test]
    fn distractors_use_the_other_pattern() {
        let spec = SynthSpec {
            frames: 2,
            noise_sigma: 0.0,
            distractors: 1,
            distractor_gain: 1.0,
            distractor_other: true,
            ..SynthSpec::default()
        };
        let seq = gen_synthetic(&spec, 3, "d").unwrap();
        let same = gen_synthetic(
            &SynthSpec {
                distractor_other: false,
                ..spec.clone()
            },
            3,
            "d",
        )
        .unwrap();
        // Target pixels agree; distractor pixels differ because the patterns differ.
        let (w, _) = seq.dims();
        let g = seq.gt[0];
        let (cx, cy) = g.center();
        let at = |s: &Sequence, x: f64, y: f64| s.frames[0].get(y as usize, x as usize);
        assert_eq!(at(&seq, cx, cy), at(&same, cx, cy));
        let differing = seq.frames[0]
            .data
            .iter()
            .zip(&same.frames[0].data)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| ((i % w) as f64, (i / w) as f64))
            .collect::<Vec<_>>();
        assert!(!differing.is_empty());
        assert!(differing
            .iter()
            .all(|&(x, y)| !(x >= g.x && x < g.x + g.w && y >= g.y && y < g.y + g.h)));
    }

    fn sample_state() -> MetaState {
        let model = CrestModel::new(CrestConfig::default()).unwrap();
        let mut state = model.initial_state(&MetaConfig::default(), 0xDEAD_BEEF_0000_0001);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in state.adam_theta.m.iter_mut().chain(state.adam_alpha.v.iter_mut()) {
            *t = Tensor::new(t.shape(), (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        }
        state.adam_theta.t = 17;
        state.iter = 17;
        state
    }

    fn bits(t: &[Tensor]) -> Vec<Vec<u64>> {
        t.iter()
            .map(|x| x.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let state = sample_state();
        save_checkpoint(&state, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(bits(&back.theta0), bits(&state.theta0));
        assert_eq!(bits(&back.alpha.values), bits(&state.alpha.values));
        assert_eq!(bits(&back.adam_theta.m), bits(&state.adam_theta.m));
        assert_eq!(bits(&back.adam_alpha.v), bits(&state.adam_alpha.v));
        assert_eq!(back.adam_theta.t, 17);
        assert_eq!((back.iter, back.rng_seed), (17, 0xDEAD_BEEF_0000_0001));
        assert_eq!(back.model, state.model);
        assert_eq!(back.names, state.names);
        let q = dir.path().join("b.ckpt");
        save_checkpoint(&back, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        assert!(!dir.path().join("a.ckpt.tmp").exists());
    }

    #[test]
    fn checkpoint_layout_matches_independent_reader() {
        // A second reader that walks the documented layout directly.
        let state = sample_state();
        let bytes = checkpoint_bytes(&state);
        assert_eq!(&bytes[..8], b"MTRK0001");
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let mut names = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            pos += 2;
            names.push(String::from_utf8(bytes[pos..pos + len].to_vec()).unwrap());
            pos += len;
            let rank = bytes[pos] as usize;
            pos += 1;
            let mut n = 1;
            for _ in 0..rank {
                n *= u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
            }
            pos += 8 * n;
        }
        let seed = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let iter = u64::from_le_bytes(bytes[pos + 8..pos + 16].try_into().unwrap());
        assert_eq!(pos + 16, bytes.len());
        assert_eq!((seed, iter), (state.rng_seed, state.iter));
        assert_eq!(names[0], "theta0.d");
        assert!(names.contains(&"adam_alpha.hyper".to_string()));
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let bytes = checkpoint_bytes(&sample_state());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));
        let cut = &bytes[..bytes.len() - 3];
        match decode_checkpoint(cut).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset as usize, bytes.len() - 16 + 8),
            e => panic!("{e}"),
        }
        // Huge dimensions in the first entry.
        let mut huge = bytes.clone();
        let name_len = u16::from_le_bytes([huge[12], huge[13]]) as usize;
        let dims_at = 12 + 2 + name_len + 1;
        huge[dims_at..dims_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[dims_at + 4..dims_at + 8].copy_from_slice(&u32::MAX.to_le_bytes());
        match decode_checkpoint(&huge).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset as usize, dims_at),
            e => panic!("{e}"),
        }
    }
}
