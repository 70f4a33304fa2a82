//! Grayscale frames, binary PGM I/O and patch cropping.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(format!(
                "image {width}x{height} cannot hold {} values",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Bilinear sample at continuous pixel-center coordinates, replicating edges.
    pub fn sample(&self, row: f64, col: f64) -> f64 {
        let r = row.clamp(0.0, (self.height - 1) as f64);
        let c = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let top = (1.0 - fc) * self.get(r0, c0) + fc * self.get(r0, c1);
        let bot = (1.0 - fc) * self.get(r1, c0) + fc * self.get(r1, c1);
        (1.0 - fr) * top + fr * bot
    }

    /// Resamples the image region with top-left `(x0, y0)` and size
    /// `src_w × src_h` (edge coordinates, may extend past the frame) onto an
    /// `out_w × out_h` grid.
    pub fn crop_resize(&self, x0: f64, y0: f64, src_w: f64, src_h: f64, out_w: usize, out_h: usize) -> GrayImage {
        let sy = src_h / out_h as f64;
        let sx = src_w / out_w as f64;
        let mut data = Vec::with_capacity(out_w * out_h);
        for i in 0..out_h {
            let row = y0 + (i as f64 + 0.5) * sy - 0.5;
            for j in 0..out_w {
                let col = x0 + (j as f64 + 0.5) * sx - 0.5;
                data.push(self.sample(row, col));
            }
        }
        GrayImage {
            width: out_w,
            height: out_h,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Values quantized to 8 bits and encoded as binary PGM.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })
    }
}

/// Quantizes a value to the 8-bit grid used by PGM files.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported PGM magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid PGM header {w}x{h} maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| {
        format!(
            "PGM payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )
    })?;
    let scale = maxval as f64;
    let data = if bpp == 1 {
        payload.iter().map(|&b| b as f64 / scale).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

/// Min-max normalizes a `rows × cols` map into an 8-bit PGM image.
pub fn normalized_map(values: &[f64], rows: usize, cols: usize) -> GrayImage {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    GrayImage {
        width: cols,
        height: rows,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(
            3,
            2,
            vec![0.0, 1.0, 0.5, 0.25, 0.75, 0.1].into_iter().map(quantize).collect(),
        )
        .unwrap();
        let p = dir.path().join("a.pgm");
        img.write_pgm(&p).unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn pgm_header_with_comment_and_16_bit() {
        let mut bytes = b"P5\n# c\n2 1\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.data, vec![1.0, 0.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }

    #[test]
    fn crop_identity_and_sample() {
        let img = GrayImage::new(4, 3, (0..12).map(|v| v as f64 / 11.0).collect()).unwrap();
        let c = img.crop_resize(0.0, 0.0, 4.0, 3.0, 4, 3);
        assert_eq!(c, img);
        assert!(
            (img.sample(0.5, 0.5) - (img.get(0, 0) + img.get(0, 1) + img.get(1, 0) + img.get(1, 1)) / 4.0).abs()
                < 1e-15
        );
        // Outside samples replicate the border.
        assert_eq!(img.sample(-3.0, -3.0), img.get(0, 0));
    }

    #[test]
    fn normalized_map_spans_unit_range() {
        let m = normalized_map(&[2.0, 4.0, 3.0, 2.0], 2, 2);
        assert_eq!(m.data, vec![0.0, 1.0, 0.5, 0.0]);
        assert_eq!(normalized_map(&[1.0, 1.0], 1, 2).data, vec![0.0, 0.0]);
    }
}
