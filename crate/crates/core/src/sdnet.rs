//! Tracking-by-detection head: a two-layer classifier over featurized patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::geometry::{iou, BoundingBox};
use crate::image::GrayImage;
use crate::model::AdaptiveModel;
use crate::tensor::Tensor;

const MAX_TRIALS: usize = 1000;
/// Scores are clamped to `[SCORE_EPS, 1 − SCORE_EPS]` before the log.
pub const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SdnetConfig {
    pub features: FeatureConfig,
    pub patch_size: usize,
    pub hidden: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Candidates scored per tracked frame.
    pub n_candidates: usize,
    /// Candidates averaged into the output box.
    pub top_k: usize,
}

impl Default for SdnetConfig {
    fn default() -> Self {
        SdnetConfig {
            features: FeatureConfig::default(),
            patch_size: 32,
            hidden: 32,
            n_pos: 8,
            n_neg: 24,
            pos_iou: 0.7,
            neg_iou: 0.3,
            n_candidates: 64,
            top_k: 5,
        }
    }
}

/// Featurized patches with binary labels.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `N × D`
    pub features: Tensor,
    pub labels: Vec<f64>,
    pub boxes: Vec<BoundingBox>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_tensor(&self) -> Tensor {
        Tensor::new(&[self.labels.len(), 1], self.labels.clone()).expect("labels shape")
    }

    /// Concatenates batches row-wise.
    pub fn concat(batches: &[&PatchBatch]) -> Result<PatchBatch> {
        let d = batches
            .first()
            .map(|b| b.features.shape()[1])
            .ok_or_else(|| Error::invalid("no batches to concatenate"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut boxes = Vec::new();
        for b in batches {
            if b.features.shape()[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: vec![d],
                    rhs: b.features.shape().to_vec(),
                });
            }
            data.extend_from_slice(b.features.data());
            labels.extend_from_slice(&b.labels);
            boxes.extend_from_slice(&b.boxes);
        }
        Ok(PatchBatch {
            features: Tensor::new(&[labels.len(), d], data)?,
            labels,
            boxes,
        })
    }
}

/// `w1: D×H`, `b1: 1×H`, `w2: H×1`, `b2: 1×1`.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ClassifierParams {
    pub fn from_slice(p: &[Tensor]) -> Result<Self> {
        match p {
            [w1, b1, w2, b2] => Ok(ClassifierParams {
                w1: w1.clone(),
                b1: b1.clone(),
                w2: w2.clone(),
                b2: b2.clone(),
            }),
            _ => Err(Error::invalid(format!(
                "expected 4 classifier tensors, got {}",
                p.len()
            ))),
        }
    }
}

/// Sigmoid scores `N × 1` for `N × D` patch features.
pub fn classify(features: &Tensor, params: &[Tensor]) -> Result<Tensor> {
    let p = ClassifierParams::from_slice(params)?;
    let n = features.shape()[0];
    if features.shape().len() != 2 || features.shape()[1] != p.w1.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: features.shape().to_vec(),
            rhs: p.w1.shape().to_vec(),
        });
    }
    // Bias rows are broadcast explicitly as ones(N×1) · b.
    let ones = Tensor::ones(&[n, 1]);
    let hidden = features.matmul(&p.w1)?.add(&ones.matmul(&p.b1)?)?.relu();
    let logits = hidden.matmul(&p.w2)?.add(&ones.matmul(&p.b2)?)?;
    Ok(logits.sigmoid())
}

/// Binary cross-entropy summed over patches, with clamped scores.
pub fn cross_entropy(scores: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if scores.numel() != labels.numel() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: scores.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let labels = labels.reshape(scores.shape())?;
    let p = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let pos = labels.mul(&p.log()?)?;
    let neg = labels.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0).log()?)?;
    Ok(pos.add(&neg)?.sum().neg())
}

/// Complements every label when `flip` is set.
pub fn apply_flip(labels: &[f64], flip: bool) -> Vec<f64> {
    if flip {
        labels.iter().map(|y| 1.0 - y).collect()
    } else {
        labels.to_vec()
    }
}

/// Draws one episode-level flip decision (probability 1/2) and applies it.
pub fn shuffle_labels(labels: &[f64], rng: &mut impl Rng) -> (Vec<f64>, bool) {
    let flip = rng.gen_bool(0.5);
    (apply_flip(labels, flip), flip)
}

/// One classifier training example.
#[derive(Debug, Clone)]
pub struct SdnetExample {
    pub features: Tensor,
    pub labels: Tensor,
}

impl SdnetExample {
    pub fn from_batch(batch: &PatchBatch, flip: bool) -> Self {
        let labels = apply_flip(&batch.labels, flip);
        SdnetExample {
            features: batch.features.clone(),
            labels: Tensor::new(&[labels.len(), 1], labels).expect("labels"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdnetModel {
    pub config: SdnetConfig,
    extractor: FeatureExtractor,
}

impl SdnetModel {
    pub fn new(config: SdnetConfig) -> Result<Self> {
        let extractor = FeatureExtractor::new(config.features.clone())?;
        if !config.patch_size.is_multiple_of(extractor.stride()) {
            return Err(Error::invalid("patch size must be divisible by the feature stride"));
        }
        if config.top_k == 0 || config.n_candidates < config.top_k {
            return Err(Error::invalid("need at least top_k candidates"));
        }
        Ok(SdnetModel { config, extractor })
    }

    pub fn feature_dim(&self) -> usize {
        let side = self.config.patch_size / self.extractor.stride();
        self.extractor.channels() * side * side
    }

    fn featurize_into(&self, frame: &GrayImage, b: &BoundingBox, out: &mut Vec<f64>) -> Result<()> {
        let p = self.config.patch_size;
        let mut patch = frame.crop_resize(b.x, b.y, b.w, b.h, p, p);
        let mean = patch.mean();
        patch.data.iter_mut().for_each(|v| *v -= mean);
        out.extend_from_slice(self.extractor.extract(&patch)?.data());
        Ok(())
    }

    /// Featurizes the given boxes as rows of an `N × D` tensor.
    pub fn featurize(&self, frame: &GrayImage, boxes: &[BoundingBox]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(boxes.len() * self.feature_dim());
        for b in boxes {
            self.featurize_into(frame, b, &mut data)?;
        }
        Tensor::new(&[boxes.len(), self.feature_dim()], data)
    }

    /// `n_pos` patches with IoU ≥ `pos_iou` and `n_neg` with IoU ≤ `neg_iou`
    /// against `gt`, all inside the frame. Positives come first.
    pub fn sample_patches(
        &self,
        frame: &GrayImage,
        gt: &BoundingBox,
        n_pos: usize,
        n_neg: usize,
        rng: &mut impl Rng,
    ) -> Result<PatchBatch> {
        if !gt.is_inside(frame.width, frame.height) {
            return Err(Error::invalid(format!("target box {gt:?} is not inside the frame")));
        }
        let (fw, fh) = (frame.width as f64, frame.height as f64);
        let size = 0.5 * (gt.w + gt.h);
        let jitter = Normal::new(0.0, 0.1 * size).expect("positive sigma");
        let scale = Normal::new(0.0, 0.5).expect("positive sigma");
        let mut boxes = Vec::with_capacity(n_pos + n_neg);

        for _ in 0..n_pos {
            let b = rejection(
                || {
                    let s = 1.05f64.powf(scale.sample(rng));
                    let (cx, cy) = gt.center();
                    BoundingBox::from_center(cx + jitter.sample(rng), cy + jitter.sample(rng), gt.w * s, gt.h * s)
                },
                |b| b.is_inside(frame.width, frame.height) && iou(b, gt) >= self.config.pos_iou,
                "positive patch with IoU >= pos_iou inside the frame",
            )?;
            boxes.push(b);
        }
        for _ in 0..n_neg {
            let b = rejection(
                || {
                    let s = rng.gen_range(0.8..1.2);
                    let (w, h) = ((gt.w * s).min(fw), (gt.h * s).min(fh));
                    let x = rng.gen_range(0.0..=(fw - w));
                    let y = rng.gen_range(0.0..=(fh - h));
                    BoundingBox::new(x, y, w, h)
                },
                |b| b.is_inside(frame.width, frame.height) && iou(b, gt) <= self.config.neg_iou,
                "negative patch with IoU <= neg_iou inside the frame",
            )?;
            boxes.push(b);
        }
        let mut labels = vec![1.0; n_pos];
        labels.extend(std::iter::repeat_n(0.0, n_neg));
        Ok(PatchBatch {
            features: self.featurize(frame, &boxes)?,
            labels,
            boxes,
        })
    }

    /// Translated copies of `prev` (fixed size), clamped into the frame.
    pub fn candidates(&self, frame: &GrayImage, prev: &BoundingBox, rng: &mut impl Rng) -> Vec<BoundingBox> {
        let sigma = 0.3 * 0.5 * (prev.w + prev.h);
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        (0..self.config.n_candidates)
            .map(|_| {
                prev.translated(n.sample(rng), n.sample(rng))
                    .clamped_to(frame.width, frame.height)
            })
            .collect()
    }

    /// Mean box of the `top_k` highest scores; ties keep sampling order.
    pub fn top_box(&self, boxes: &[BoundingBox], scores: &[f64]) -> BoundingBox {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
        let k = self.config.top_k.min(boxes.len());
        let (mut x, mut y, mut w, mut h) = (0.0, 0.0, 0.0, 0.0);
        for &i in &order[..k] {
            x += boxes[i].x;
            y += boxes[i].y;
            w += boxes[i].w;
            h += boxes[i].h;
        }
        let k = k as f64;
        BoundingBox {
            x: x / k,
            y: y / k,
            w: w / k,
            h: h / k,
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let d = self.feature_dim();
        let h = self.config.hidden;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let b = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-b..b)).collect()).expect("shape")
        };
        vec![
            uniform(&[d, h], d),
            uniform(&[1, h], d),
            uniform(&[h, 1], h),
            uniform(&[1, 1], h),
        ]
    }
}

fn rejection(
    mut propose: impl FnMut() -> Result<BoundingBox>,
    accept: impl Fn(&BoundingBox) -> bool,
    what: &str,
) -> Result<BoundingBox> {
    for _ in 0..MAX_TRIALS {
        if let Ok(b) = propose() {
            if accept(&b) {
                return Ok(b);
            }
        }
    }
    Err(Error::data(format!(
        "could not place a {what} after {MAX_TRIALS} trials"
    )))
}

impl AdaptiveModel for SdnetModel {
    type Example = SdnetExample;

    fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2"].iter().map(|s| s.to_string()).collect()
    }

    fn loss(&self, params: &[Tensor], ex: &SdnetExample) -> Result<Tensor> {
        cross_entropy(&classify(&ex.features, params)?, &ex.labels)
    }
}

/// Fraction of scores on the correct side of 0.5.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s > 0.5) == (**y > 0.5))
        .count();
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob_frame() -> GrayImage {
        let data = (0..64)
            .flat_map(|r| (0..64).map(move |c| (r, c)))
            .map(|(r, c)| {
                let d2 = (r as f64 - 30.0).powi(2) + (c as f64 - 26.0).powi(2);
                0.2 + 0.7 * (-d2 / 32.0).exp()
            })
            .collect();
        GrayImage::new(64, 64, data).unwrap()
    }

    fn small_model() -> SdnetModel {
        SdnetModel::new(SdnetConfig {
            patch_size: 8,
            hidden: 4,
            ..SdnetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sampling_counts_and_constraints() {
        let m = small_model();
        let gt = BoundingBox::new(18.0, 22.0, 16.0, 16.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = m.sample_patches(&blob_frame(), &gt, 8, 24, &mut rng).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b.labels.iter().sum::<f64>(), 8.0);
        assert_eq!(b.features.shape(), &[32, m.feature_dim()]);
        for (bx, y) in b.boxes.iter().zip(&b.labels) {
            assert!(bx.is_inside(64, 64));
            if *y == 1.0 {
                assert!(iou(bx, &gt) >= 0.7);
            } else {
                assert!(iou(bx, &gt) <= 0.3);
            }
        }
    }

    #[test]
    fn sampling_fails_when_negatives_impossible() {
        let m = small_model();
        let gt = BoundingBox::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let err = m
            .sample_patches(&blob_frame(), &gt, 1, 1, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap_err();
        assert!(err.to_string().contains("negative patch"));
        let outside = BoundingBox::new(60.0, 0.0, 10.0, 10.0).unwrap();
        assert!(m
            .sample_patches(&blob_frame(), &outside, 1, 1, &mut ChaCha8Rng::seed_from_u64(2))
            .is_err());
    }

    #[test]
    fn label_mean_over_draws() {
        // Monte-Carlo over many draws: the 1:3 ratio gives a label mean of 1/4.
        let m = SdnetModel::new(SdnetConfig {
            patch_size: 2,
            features: FeatureConfig {
                layers: vec![crate::features::LayerSpec {
                    out_channels: 1,
                    stride: 2,
                }],
                ..FeatureConfig::default()
            },
            ..SdnetConfig::default()
        })
        .unwrap();
        let frame = blob_frame();
        let gt = BoundingBox::new(18.0, 22.0, 16.0, 16.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut sum, mut n) = (0.0, 0usize);
        for _ in 0..10_000 {
            let b = m.sample_patches(&frame, &gt, 1, 3, &mut rng).unwrap();
            sum += b.labels.iter().sum::<f64>();
            n += b.len();
        }
        assert!((sum / n as f64 - 0.25).abs() <= 0.01);
    }

    #[test]
    fn classify_cases() {
        let m = small_model();
        let d = m.feature_dim();
        let zeros: Vec<Tensor> = m
            .init_params(&mut ChaCha8Rng::seed_from_u64(0))
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut data = row.clone();
        data.extend(&row);
        let x = Tensor::new(&[2, d], data).unwrap();
        assert_eq!(classify(&x, &zeros).unwrap().data(), &[0.5, 0.5]);
        let p = m.init_params(&mut rng);
        let s = classify(&x, &p).unwrap();
        assert_eq!(s.data()[0].to_bits(), s.data()[1].to_bits());
        assert!(classify(&Tensor::zeros(&[2, d + 1]), &p).is_err());
    }

    #[test]
    fn classify_gradient_matches_finite_differences() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = m.feature_dim();
        let x = Tensor::new(&[5, d], (0..5 * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y = Tensor::new(&[5, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let p0 = m.init_params(&mut rng);
        let params: Vec<Tensor> = p0.iter().map(Tensor::as_param).collect();
        let loss = cross_entropy(&classify(&x, &params).unwrap(), &y).unwrap();
        let g = backward(&loss, &params, false).unwrap();
        let h = 1e-6;
        for (pi, base) in p0.iter().enumerate() {
            let scale = g[pi].data().iter().fold(1e-8f64, |a, v| a.max(v.abs()));
            for i in (0..base.numel()).step_by(7) {
                let eval = |delta: f64| {
                    let mut ps = p0.clone();
                    let mut v = base.data().to_vec();
                    v[i] += delta;
                    ps[pi] = Tensor::new(base.shape(), v).unwrap();
                    cross_entropy(&classify(&x, &ps).unwrap(), &y).unwrap().item().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((g[pi].data()[i] - fd).abs() <= 1e-4 * scale, "{pi}[{i}]");
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let y = Tensor::from_slice(&[1.0, 0.0, 1.0, 0.0]);
        let perfect = Tensor::from_slice(&[1.0, 0.0, 1.0, 0.0]);
        let l = cross_entropy(&perfect, &y).unwrap().item().unwrap();
        assert!((0.0..=4.0 * 1.21e-11).contains(&l));
        let half = Tensor::full(&[4], 0.5);
        let l = cross_entropy(&half, &y).unwrap().item().unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 2.772589).abs() < 1e-6);
        assert!(cross_entropy(&half, &Tensor::from_slice(&[1.0])).is_err());

        // Independent summation oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let mut want = 0.0;
            for k in 0..n {
                want -= if ys[k] == 1.0 { p[k].ln() } else { (1.0 - p[k]).ln() };
            }
            let got = cross_entropy(&Tensor::from_slice(&p), &Tensor::from_slice(&ys))
                .unwrap()
                .item()
                .unwrap();
            assert!((got - want).abs() < 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn cross_entropy_decreases_toward_label() {
        let y = Tensor::from_slice(&[1.0, 0.0]);
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let p = Tensor::from_slice(&[k as f64 / 10.0, 0.3]);
            let l = cross_entropy(&p, &y).unwrap().item().unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
    }

    #[test]
    fn shuffle_cases() {
        assert_eq!(apply_flip(&[1.0, 1.0, 0.0, 0.0], true), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(apply_flip(&[1.0, 1.0, 0.0, 0.0], false), vec![1.0, 1.0, 0.0, 0.0]);
        let l = [1.0, 0.0, 0.0, 1.0];
        for flip in [true, false] {
            assert_eq!(apply_flip(&apply_flip(&l, flip), flip), l.to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let flips = (0..10_000).filter(|_| shuffle_labels(&l, &mut rng).1).count();
        assert!((flips as f64 / 1e4 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn top_box_tie_break() {
        let m = small_model();
        let boxes: Vec<_> = (0..8)
            .map(|i| BoundingBox::new(i as f64, 0.0, 4.0, 4.0).unwrap())
            .collect();
        let b = m.top_box(&boxes, &[0.5; 8]);
        assert_eq!(b.x, 2.0);
        let b = m.top_box(&boxes, &[0.0, 0.0, 0.0, 0.9, 0.9, 0.9, 0.9, 0.9]);
        assert_eq!(b.x, 5.0);
    }

    #[test]
    fn untrained_accuracy_near_chance_on_balanced_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, hidden) = (12, 6);
        let m = SdnetModel::new(SdnetConfig {
            patch_size: 4,
            hidden,
            ..SdnetConfig::default()
        })
        .unwrap();
        let _ = m;
        let mut total = 0.0;
        for _ in 0..1000 {
            let params = vec![
                Tensor::new(
                    &[d, hidden],
                    (0..d * hidden).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                )
                .unwrap(),
                Tensor::new(&[1, hidden], (0..hidden).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap(),
                Tensor::new(&[hidden, 1], (0..hidden).map(|_| rng.gen_range(-0.4..0.4)).collect()).unwrap(),
                Tensor::new(&[1, 1], vec![rng.gen_range(-0.4..0.4)]).unwrap(),
            ];
            let x = Tensor::new(&[8, d], (0..8 * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let labels = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
            let s = classify(&x, &params).unwrap();
            total += accuracy(s.data(), &labels);
        }
        assert!((total / 1000.0 - 0.5).abs() <= 0.1);
    }
}
