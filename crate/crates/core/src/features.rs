//! Fixed random convolutional feature map.
//!
//! A stack of bias-free 3×3 convolutions with ReLU, weights drawn from a
//! seeded xorshift64* generator. The weights are never trained.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

/// xorshift64* (Vigna 2016): shifts 12, 25, 27 and multiplier
/// 0x2545F4914F6CDD1D. A zero seed is replaced by a fixed odd constant.
#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        XorShift64Star {
            state: if seed == 0 { 0x9E37_79B9_7F4A_7C15 } else { seed },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureConfig {
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

impl Default for FeatureConfig {
    /// Two layers, 8 channels, total stride 2.
    fn default() -> Self {
        FeatureConfig {
            seed: 0x5EED_F00D,
            layers: vec![
                LayerSpec {
                    out_channels: 8,
                    stride: 2,
                },
                LayerSpec {
                    out_channels: 8,
                    stride: 1,
                },
            ],
        }
    }
}

impl FeatureConfig {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_channels)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    /// Per layer: `out × in × 3 × 3`.
    weights: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.layers.is_empty() || config.layers.iter().any(|l| l.out_channels == 0 || l.stride == 0) {
            return Err(Error::invalid("feature layers need positive channels and strides"));
        }
        let mut rng = XorShift64Star::new(config.seed);
        let mut in_ch = 1;
        let mut weights = Vec::new();
        for layer in &config.layers {
            let fan_in = (in_ch * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = (0..layer.out_channels * in_ch * 9)
                .map(|_| (2.0 * rng.next_f64() - 1.0) * bound)
                .collect();
            weights.push(w);
            in_ch = layer.out_channels;
        }
        Ok(FeatureExtractor { config, weights })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        self.config.total_stride()
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    /// Feature map `C × H/s × W/s` of a patch. Cell `(i, j)` is centered on
    /// patch pixel `(i·s, j·s)`.
    pub fn extract(&self, patch: &GrayImage) -> Result<Tensor> {
        let s = self.stride();
        if !patch.height.is_multiple_of(s) || !patch.width.is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "patch {}x{} not divisible by feature stride {s}",
                patch.height, patch.width
            )));
        }
        let (mut h, mut w, mut c) = (patch.height, patch.width, 1);
        let mut x = patch.data.clone();
        for (layer, wts) in self.config.layers.iter().zip(&self.weights) {
            let (oh, ow) = (h / layer.stride, w / layer.stride);
            x = strided_conv3x3_relu(&x, c, h, w, wts, layer.out_channels, layer.stride, oh, ow);
            h = oh;
            w = ow;
            c = layer.out_channels;
        }
        Tensor::new(&[c, h, w], x)
    }
}

#[allow(clippy::too_many_arguments)]
fn strided_conv3x3_relu(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; k * oh * ow];
    for o in 0..k {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for u in 0..3 {
                        let si = (i * stride + u) as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for v in 0..3 {
                            let sj = (j * stride + v) as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            acc += x[(ch * h + si as usize) * w + sj as usize] * wts[((o * c + ch) * 3 + u) * 3 + v];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc.max(0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, phase: f64) -> GrayImage {
        let data = (0..h)
            .flat_map(|r| {
                (0..w).map(move |c| (0.5 + 0.5 * ((r as f64 * 0.7 + c as f64 * 0.3 + phase).sin())).clamp(0.0, 1.0))
            })
            .collect();
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn xorshift_known_sequence() {
        let mut r = XorShift64Star::new(1);
        // First outputs of xorshift64* seeded with 1.
        assert_eq!(r.next_u64(), 0x47E4_CE4B_896C_DD1D);
        let v = r.next_f64();
        assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn zero_patch_gives_zero_features() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let f = fx.extract(&GrayImage::filled(16, 12, 0.0)).unwrap();
        assert_eq!(f.shape(), &[8, 6, 8]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let b = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let p = ramp(32, 32, 0.3);
        let fa = a.extract(&p).unwrap();
        let fb = b.extract(&p).unwrap();
        assert!(fa.data().iter().zip(fb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let other = FeatureExtractor::new(FeatureConfig {
            seed: 7,
            ..FeatureConfig::default()
        })
        .unwrap();
        assert_ne!(other.extract(&p).unwrap().data(), fa.data());
    }

    #[test]
    fn indivisible_patch_rejected() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        assert!(fx.extract(&GrayImage::filled(15, 16, 0.5)).is_err());
    }

    #[test]
    fn shift_by_stride_shifts_interior_by_one_cell() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let s = fx.stride();
        let big = ramp(40, 40, 1.1);
        let crop = |dx: usize| {
            let data = (0..32)
                .flat_map(|r| (0..32).map(move |c| (r, c + dx)))
                .map(|(r, c)| big.get(r, c))
                .collect();
            GrayImage::new(32, 32, data).unwrap()
        };
        let a = fx.extract(&crop(0)).unwrap();
        let b = fx.extract(&crop(s)).unwrap();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        for ch in 0..c {
            for i in 2..h - 2 {
                for j in 2..w - 3 {
                    let va = a.data()[(ch * h + i) * w + j + 1];
                    let vb = b.data()[(ch * h + i) * w + j];
                    assert!((va - vb).abs() <= 1e-9);
                }
            }
        }
    }
}
