//! Correlation-filter tracker head.
//!
//! `F(x, θ)` crops a square search window around the previous box, extracts
//! fixed features, reduces channels with a learned 1×1 convolution
//! (`theta_d`), warps the canonical filter (`theta_f`) to the target's size
//! with bilinear resampling, and correlates to get a response map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::geometry::BoundingBox;
use crate::image::{self, GrayImage};
use crate::model::AdaptiveModel;
use crate::tensor::{bilinear_resample, conv2d, Padding, Tensor};

/// Cells whose absolute residual exceeds this enter the weighted loss.
pub const RESIDUAL_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// `Σ (y − ŷ)² + λ Σ f²`
    Plain,
    /// `(1/|P|) Σ_P (e^y |y − ŷ|)² + λ Σ f²` over cells with residual above the threshold.
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrestConfig {
    pub features: FeatureConfig,
    pub reduced_channels: usize,
    /// Canonical filter size in feature cells (odd).
    pub canonical: (usize, usize),
    /// Side of the resized search patch in pixels.
    pub patch_size: usize,
    /// Search window side relative to `sqrt(w·h)` of the target.
    pub search_scale: f64,
    /// Label σ relative to `sqrt(fh·fw)` of the warped filter.
    pub sigma_factor: f64,
    pub lambda: f64,
    pub variant: LossVariant,
}

impl Default for CrestConfig {
    fn default() -> Self {
        CrestConfig {
            features: FeatureConfig::default(),
            reduced_channels: 4,
            canonical: (15, 15),
            patch_size: 64,
            search_scale: 2.0,
            sigma_factor: 0.1,
            lambda: 1e-4,
            variant: LossVariant::Weighted,
        }
    }
}

/// Named view of the two parameter tensors.
#[derive(Debug, Clone)]
pub struct CrestParams {
    /// `C_out × C_in × 1 × 1`
    pub theta_d: Tensor,
    /// `1 × C_out × fh_c × fw_c`
    pub theta_f: Tensor,
}

impl CrestParams {
    pub fn from_slice(params: &[Tensor]) -> Result<Self> {
        match params {
            [d, f] => Ok(CrestParams {
                theta_d: d.clone(),
                theta_f: f.clone(),
            }),
            _ => Err(Error::invalid(format!(
                "expected 2 parameter tensors, got {}",
                params.len()
            ))),
        }
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        vec![self.theta_d, self.theta_f]
    }
}

/// Response values plus the mapping from cells to image pixels.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    /// `1 × H_r × W_r`
    pub values: Tensor,
    /// Image position `(x, y)` of the center of cell `(0, 0)`.
    pub origin: (f64, f64),
    /// Pixels per cell.
    pub cell_size: f64,
}

impl ResponseMap {
    pub fn rows(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn to_image(&self) -> GrayImage {
        image::normalized_map(self.values.data(), self.rows(), self.cols())
    }
}

/// Gaussian response `1 × h × w` peaking at `center` (row, col; may be fractional).
pub fn gaussian_label(h: usize, w: usize, center: (f64, f64), sigma: f64) -> Result<Tensor> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty label map"));
    }
    let (cr, cc) = center;
    let denom = 2.0 * sigma * sigma;
    let data = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            (-d2 / denom).exp()
        })
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Per-pixel channel mixing with a `C_out × C_in × 1 × 1` kernel.
pub fn reduce_dims(features: &Tensor, theta_d: &Tensor) -> Result<Tensor> {
    conv2d(features, theta_d, Padding::Valid)
}

/// Resizes the canonical filter `1 × C × fh_c × fw_c` to `1 × C × fh × fw`.
pub fn warp_filter(theta_f: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    let s = theta_f.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid(format!("filter must be 1×C×h×w, got {s:?}")));
    }
    if fh == 0 || fw == 0 {
        return Err(Error::invalid("warped filter size must be positive"));
    }
    let c = s[1];
    if (s[2], s[3]) == (fh, fw) {
        return Ok(theta_f.clone());
    }
    let planes = theta_f.reshape(&[c, s[2], s[3]])?;
    bilinear_resample(&planes, fh, fw)?.reshape(&[1, c, fh, fw])
}

/// Nearest odd integer ≥ 3 (ties round up).
pub fn odd_round(x: f64) -> usize {
    let k = ((x - 1.0) / 2.0).round().max(1.0) as usize;
    2 * k + 1
}

/// Mean box height and width divided by `stride`, each rounded to the nearest odd ≥ 3.
pub fn canonical_size(boxes: &[BoundingBox], stride: f64) -> Result<(usize, usize)> {
    if boxes.is_empty() {
        return Err(Error::data("canonical size needs at least one box"));
    }
    let n = boxes.len() as f64;
    let mh = boxes.iter().map(|b| b.h).sum::<f64>() / n;
    let mw = boxes.iter().map(|b| b.w).sum::<f64>() / n;
    Ok((odd_round(mh / stride), odd_round(mw / stride)))
}

/// Response of `features` to the warped filter: `conv(reduce(x), warp(f))`.
pub fn predict_response(features: &Tensor, params: &CrestParams, fh: usize, fw: usize) -> Result<Tensor> {
    let reduced = reduce_dims(features, &params.theta_d)?;
    let filter = warp_filter(&params.theta_f, fh, fw)?;
    conv2d(&reduced, &filter, Padding::Same)
}

/// Correlation-filter loss of a prediction against its label, with an L2 penalty on `filter`.
///
/// In the weighted variant the set of cells above the residual threshold is
/// treated as constant; an empty set contributes zero data loss.
pub fn crest_loss(y: &Tensor, yhat: &Tensor, filter: &Tensor, lambda: f64, variant: LossVariant) -> Result<Tensor> {
    let resid = y.sub(yhat)?;
    let data = match variant {
        LossVariant::Plain => resid.square().sum(),
        LossVariant::Weighted => {
            let mask: Vec<f64> = resid
                .data()
                .iter()
                .map(|r| (r.abs() > RESIDUAL_THRESHOLD) as u8 as f64)
                .collect();
            let count = mask.iter().sum::<f64>();
            if count == 0.0 {
                Tensor::scalar(0.0)
            } else {
                let weight = y.detach().exp();
                let mask = Tensor::new(y.shape(), mask)?;
                weight.mul(&resid.abs())?.square().mul(&mask)?.sum().scale(1.0 / count)
            }
        }
    };
    if lambda == 0.0 {
        return Ok(data);
    }
    data.add(&filter.square().sum().scale(lambda))
}

/// Row-major argmax; the first maximum wins ties.
pub fn argmax(values: &[f64], cols: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    (best / cols, best % cols)
}

/// Moves `prev_box` so its center sits on the peak cell; size is kept.
pub fn localize(response: &ResponseMap, prev_box: &BoundingBox) -> BoundingBox {
    let (r, c) = argmax(response.values.data(), response.cols());
    let cx = response.origin.0 + c as f64 * response.cell_size;
    let cy = response.origin.1 + r as f64 * response.cell_size;
    prev_box.with_center(cx, cy)
}

/// Square image region that is resized into the search patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    /// Patch pixels per image pixel.
    pub scale: f64,
}

/// One `(x, y)` pair for the correlation filter.
#[derive(Debug, Clone)]
pub struct CrestExample {
    pub features: Tensor,
    pub label: Tensor,
    pub filter_dims: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct CrestModel {
    pub config: CrestConfig,
    extractor: FeatureExtractor,
}

impl CrestModel {
    pub fn new(config: CrestConfig) -> Result<Self> {
        let extractor = FeatureExtractor::new(config.features.clone())?;
        let (fh, fw) = config.canonical;
        if fh % 2 == 0 || fw % 2 == 0 {
            return Err(Error::invalid(format!("canonical filter {fh}x{fw} must be odd")));
        }
        if config.reduced_channels == 0 || config.reduced_channels >= extractor.channels() {
            return Err(Error::invalid(format!(
                "reduced channels {} must be in 1..{}",
                config.reduced_channels,
                extractor.channels()
            )));
        }
        if !config.patch_size.is_multiple_of(extractor.stride()) {
            return Err(Error::invalid("patch size must be divisible by the feature stride"));
        }
        Ok(CrestModel { config, extractor })
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// Side of the response map in cells.
    pub fn map_size(&self) -> usize {
        self.config.patch_size / self.extractor.stride()
    }

    /// Square window whose central feature cell is centered on `around`.
    pub fn window(&self, around: &BoundingBox) -> SearchWindow {
        let side = self.config.search_scale * (around.w * around.h).sqrt();
        let scale = self.config.patch_size as f64 / side;
        let (cx, cy) = around.center();
        SearchWindow {
            x0: cx - (side + 1.0 / scale) / 2.0,
            y0: cy - (side + 1.0 / scale) / 2.0,
            side,
            scale,
        }
    }

    /// Target-specific filter size in cells.
    pub fn filter_dims(&self, window: &SearchWindow, target: &BoundingBox) -> (usize, usize) {
        let s = self.extractor.stride() as f64;
        let cap = {
            let m = self.map_size();
            if m.is_multiple_of(2) {
                m - 1
            } else {
                m
            }
        };
        (
            odd_round(target.h * window.scale / s).min(cap),
            odd_round(target.w * window.scale / s).min(cap),
        )
    }

    /// Image pixel → fractional cell `(row, col)`.
    pub fn cell_of(&self, window: &SearchWindow, x: f64, y: f64) -> (f64, f64) {
        let s = self.extractor.stride() as f64;
        let row = ((y - window.y0) * window.scale - 0.5) / s;
        let col = ((x - window.x0) * window.scale - 0.5) / s;
        (row, col)
    }

    pub fn features(&self, frame: &GrayImage, window: &SearchWindow) -> Result<Tensor> {
        let p = self.config.patch_size;
        let mut patch = frame.crop_resize(window.x0, window.y0, window.side, window.side, p, p);
        let mean = patch.mean();
        patch.data.iter_mut().for_each(|v| *v -= mean);
        self.extractor.extract(&patch)
    }

    pub fn label(&self, window: &SearchWindow, target: &BoundingBox, filter_dims: (usize, usize)) -> Result<Tensor> {
        let m = self.map_size();
        let (cx, cy) = target.center();
        let center = self.cell_of(window, cx, cy);
        let sigma = self.config.sigma_factor * ((filter_dims.0 * filter_dims.1) as f64).sqrt();
        gaussian_label(m, m, center, sigma)
    }

    /// Training example from the window around `window_box`, labelled with `target`.
    pub fn example(&self, frame: &GrayImage, window_box: &BoundingBox, target: &BoundingBox) -> Result<CrestExample> {
        let window = self.window(window_box);
        let filter_dims = self.filter_dims(&window, window_box);
        Ok(CrestExample {
            features: self.features(frame, &window)?,
            label: self.label(&window, target, filter_dims)?,
            filter_dims,
        })
    }

    pub fn respond(&self, params: &[Tensor], features: &Tensor, filter_dims: (usize, usize)) -> Result<Tensor> {
        let p = CrestParams::from_slice(params)?;
        predict_response(features, &p, filter_dims.0, filter_dims.1)
    }

    /// Response map over the window around `prev_box` in `frame`.
    pub fn response(&self, params: &[Tensor], frame: &GrayImage, prev_box: &BoundingBox) -> Result<ResponseMap> {
        let window = self.window(prev_box);
        let dims = self.filter_dims(&window, prev_box);
        let features = self.features(frame, &window)?;
        let values = self.respond(params, &features, dims)?;
        let s = self.extractor.stride() as f64;
        Ok(ResponseMap {
            values,
            origin: (window.x0 + 0.5 / window.scale, window.y0 + 0.5 / window.scale),
            cell_size: s / window.scale,
        })
    }

    /// Uniform `±sqrt(1/fan_in)` initialization of both tensors.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let cin = self.extractor.channels();
        let cout = self.config.reduced_channels;
        let (fh, fw) = self.config.canonical;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let b = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-b..b)).collect()).expect("shape")
        };
        vec![
            uniform(&[cout, cin, 1, 1], cin),
            uniform(&[1, cout, fh, fw], cout * fh * fw),
        ]
    }
}

impl AdaptiveModel for CrestModel {
    type Example = CrestExample;

    fn param_names(&self) -> Vec<String> {
        vec!["d".into(), "f".into()]
    }

    fn loss(&self, params: &[Tensor], ex: &CrestExample) -> Result<Tensor> {
        let p = CrestParams::from_slice(params)?;
        let (fh, fw) = ex.filter_dims;
        let filter = warp_filter(&p.theta_f, fh, fw)?;
        let reduced = reduce_dims(&ex.features, &p.theta_d)?;
        let yhat = conv2d(&reduced, &filter, Padding::Same)?;
        crest_loss(&ex.label, &yhat, &filter, self.config.lambda, self.config.variant)
    }
}
