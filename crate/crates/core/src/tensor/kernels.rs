//! Raw loops behind the convolution, resampling and matrix ops.
//!
//! For every output element the convolution accumulates in the order
//! channel, kernel row, kernel column, starting from zero. The naive
//! quadruple loop produces bit-identical sums.

pub(crate) struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(c: usize, h: usize, w: usize, k: usize, kh: usize, kw: usize, ph: usize, pw: usize) -> Self {
        ConvGeometry {
            c,
            h,
            w,
            k,
            kh,
            kw,
            ph,
            pw,
            oh: h + 2 * ph + 1 - kh,
            ow: w + 2 * pw + 1 - kw,
        }
    }

    /// Output rows `i` whose source row `i + u - ph` lies inside the input.
    fn rows(&self, u: usize) -> (usize, usize) {
        let lo = self.ph.saturating_sub(u);
        let hi = (self.h + self.ph).saturating_sub(u).min(self.oh);
        (lo, hi.max(lo))
    }

    fn cols(&self, v: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(v);
        let hi = (self.w + self.pw).saturating_sub(v).min(self.ow);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_forward(g: &ConvGeometry, x: &[f64], kern: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.k * g.oh * g.ow];
    let plane = g.h * g.w;
    for o in 0..g.k {
        let out_o = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        for c in 0..g.c {
            let xc = &x[c * plane..(c + 1) * plane];
            for u in 0..g.kh {
                let (i0, i1) = g.rows(u);
                for v in 0..g.kw {
                    let wt = kern[((o * g.c + c) * g.kh + u) * g.kw + v];
                    let (j0, j1) = g.cols(v);
                    for i in i0..i1 {
                        let si = i + u - g.ph;
                        let src = &xc[si * g.w + j0 + v - g.pw..si * g.w + j1 + v - g.pw];
                        let dst = &mut out_o[i * g.ow + j0..i * g.ow + j1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_input_grad(g: &ConvGeometry, gout: &[f64], kern: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.c * g.h * g.w];
    let plane = g.h * g.w;
    for c in 0..g.c {
        let gxc = &mut gx[c * plane..(c + 1) * plane];
        for o in 0..g.k {
            let go = &gout[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            for u in 0..g.kh {
                let (i0, i1) = g.rows(u);
                for v in 0..g.kw {
                    let wt = kern[((o * g.c + c) * g.kh + u) * g.kw + v];
                    let (j0, j1) = g.cols(v);
                    for i in i0..i1 {
                        let si = i + u - g.ph;
                        let src = &go[i * g.ow + j0..i * g.ow + j1];
                        let dst = &mut gxc[si * g.w + j0 + v - g.pw..si * g.w + j1 + v - g.pw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv_kernel_grad(g: &ConvGeometry, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let mut gk = vec![0.0; g.k * g.c * g.kh * g.kw];
    let plane = g.h * g.w;
    for o in 0..g.k {
        let go = &gout[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        for c in 0..g.c {
            let xc = &x[c * plane..(c + 1) * plane];
            for u in 0..g.kh {
                let (i0, i1) = g.rows(u);
                for v in 0..g.kw {
                    let (j0, j1) = g.cols(v);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let si = i + u - g.ph;
                        let xs = &xc[si * g.w + j0 + v - g.pw..si * g.w + j1 + v - g.pw];
                        let gs = &go[i * g.ow + j0..i * g.ow + j1];
                        acc += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gk[((o * g.c + c) * g.kh + u) * g.kw + v] = acc;
                }
            }
        }
    }
    gk
}

/// Two-tap interpolation weights along one axis: `(lo, hi, frac)`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                (i * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn resample(x: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * xc[y0 * w + x0] + fx * xc[y0 * w + x1];
                let bot = (1.0 - fx) * xc[y1 * w + x0] + fx * xc[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    out
}

pub(crate) fn resample_adjoint(g: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let oc = &mut out[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = gc[i * ow + j];
                oc[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                oc[y0 * w + x1] += (1.0 - fy) * fx * v;
                oc[y1 * w + x0] += fy * (1.0 - fx) * v;
                oc[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
