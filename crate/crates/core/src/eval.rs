//! Tracking metrics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{parse_groundtruth, GROUNDTRUTH_FILE};
use crate::error::{Error, Result};
use crate::geometry::{center_error, iou};
use crate::image::GrayImage;
use crate::tracker::{parse_track_csv, Event, TrackResult, TRACK_FILE};

/// Center-error threshold reported as the precision headline.
pub const PRECISION_HEADLINE_PX: usize = 20;

/// A metric sampled over ascending thresholds. `auc` is the mean of `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

impl Curve {
    fn from_values(thresholds: Vec<f64>, values: Vec<f64>) -> Curve {
        let auc = values.iter().sum::<f64>() / values.len() as f64;
        Curve {
            thresholds,
            values,
            auc,
        }
    }

    /// Value at the first threshold `>= t`.
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| x >= t - 1e-12)
            .map(|i| self.values[i])
    }

    /// `threshold,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,value\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            let _ = writeln!(s, "{t:.2},{v:.6}");
        }
        s
    }
}

pub fn success_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64).collect()
}

fn predicted(result: &TrackResult) -> impl Iterator<Item = (crate::geometry::BoundingBox, usize)> + '_ {
    result
        .records
        .iter()
        .filter(|r| matches!(r.event, Event::Ok | Event::Fail))
        .filter_map(|r| r.bbox.map(|b| (b, r.frame)))
}

fn per_sequence_curve(
    results: &[TrackResult],
    thresholds: Vec<f64>,
    metric: impl Fn(&TrackResult) -> Vec<f64>,
    pass: impl Fn(f64, f64) -> bool,
) -> Result<Curve> {
    if results.is_empty() {
        return Err(Error::invalid("no tracking results"));
    }
    let mut values = vec![0.0; thresholds.len()];
    for r in results {
        let m = metric(r);
        if m.is_empty() {
            return Err(Error::data(format!("sequence {} has no predicted frames", r.name)));
        }
        for (v, &t) in values.iter_mut().zip(&thresholds) {
            *v += m.iter().filter(|&&x| pass(x, t)).count() as f64 / m.len() as f64;
        }
    }
    for v in &mut values {
        *v /= results.len() as f64;
    }
    Ok(Curve::from_values(thresholds, values))
}

/// Fraction of tracked frames (`ok` or `fail`) with IoU strictly above each threshold,
/// averaged over sequences.
pub fn success_curve(results: &[TrackResult]) -> Result<Curve> {
    per_sequence_curve(
        results,
        success_thresholds(),
        |r| predicted(r).map(|(b, f)| iou(&b, &r.gt[f])).collect(),
        |x, t| x > t,
    )
}

/// Fraction of tracked frames with center error at most each threshold,
/// averaged over sequences.
pub fn precision_curve(results: &[TrackResult]) -> Result<Curve> {
    per_sequence_curve(
        results,
        precision_thresholds(),
        |r| predicted(r).map(|(b, f)| center_error(&b, &r.gt[f])).collect(),
        |x, t| x <= t,
    )
}

/// Reset-protocol accuracy and robustness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VotScore {
    /// Mean IoU over `ok` frames; 0 when there are none.
    pub accuracy: f64,
    /// False when no `ok` frame existed and `accuracy` is a placeholder.
    pub accuracy_defined: bool,
    /// Number of failures.
    pub robustness: usize,
}

pub fn vot_accuracy_robustness(results: &[TrackResult]) -> VotScore {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut failures = 0;
    for r in results {
        failures += r.failures();
        for rec in &r.records {
            if rec.event == Event::Ok {
                if let Some(b) = rec.bbox {
                    sum += iou(&b, &r.gt[rec.frame]);
                    n += 1;
                }
            }
        }
    }
    VotScore {
        accuracy: if n > 0 { sum / n as f64 } else { 0.0 },
        accuracy_defined: n > 0,
        robustness: failures,
    }
}

/// All metrics for a set of results.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub success: Curve,
    pub precision: Curve,
    pub vot: VotScore,
}

impl Report {
    pub fn precision_headline(&self) -> f64 {
        self.precision.at(PRECISION_HEADLINE_PX as f64).unwrap_or(0.0)
    }
}

pub fn evaluate(results: &[TrackResult]) -> Result<Report> {
    Ok(Report {
        success: success_curve(results)?,
        precision: precision_curve(results)?,
        vot: vot_accuracy_robustness(results),
    })
}

fn summary_row(s: &mut String, name: &str, r: &Report) {
    let _ = writeln!(
        s,
        "{name},{:.6},{:.6},{:.6},{},{}",
        r.success.auc,
        r.precision_headline(),
        r.vot.accuracy,
        r.vot.robustness,
        u8::from(r.vot.accuracy_defined)
    );
}

/// Writes `success.csv`, `precision.csv`, `summary.csv`, `success.svg`,
/// `precision.svg`, and response maps under `responses/<sequence>/` for
/// results that carry them.
pub fn emit_report(results: &[TrackResult], report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("success.csv", report.success.to_csv())?;
    put("precision.csv", report.precision.to_csv())?;

    let mut summary = String::from("sequence,auc,p20,accuracy,robustness,accuracy_defined\n");
    for r in results {
        summary_row(&mut summary, &r.name, &evaluate(std::slice::from_ref(r))?);
    }
    summary_row(&mut summary, "all", report);
    put("summary.csv", summary)?;

    put(
        "success.svg",
        svg_plot(
            "Success plot",
            "Overlap threshold",
            "Success rate",
            &report.success,
            1.0,
        ),
    )?;
    put(
        "precision.svg",
        svg_plot(
            "Precision plot",
            "Location error threshold (px)",
            "Precision",
            &report.precision,
            50.0,
        ),
    )?;

    for r in results.iter().filter(|r| !r.responses.is_empty()) {
        let dir = out_dir.join("responses").join(&r.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (f, img) in &r.responses {
            let p = dir.join(format!("{:04}.pgm", f + 1));
            img.write_pgm(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG line plot of one curve.
pub fn svg_plot(title: &str, xlabel: &str, ylabel: &str, curve: &Curve, xmax: f64) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let px = |x: f64| L + (W - L - R) * x / xmax;
    let py = |y: f64| H - B - (H - T - B) * y;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{} [AUC {:.3}]</text>"#,
        W / 2.0,
        xml_escape(title),
        curve.auc
    );
    let _ = writeln!(
        s,
        r#"<path d="M {:.1} {:.1} L {:.1} {:.1} L {:.1} {:.1}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(xmax),
        py(0.0)
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            px(f * xmax),
            py(0.0) + 16.0,
            trim_num(f * xmax)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{:.1}</text>"#,
            px(0.0) - 6.0,
            py(f) + 4.0,
            f
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        (px(0.0) + px(xmax)) / 2.0,
        H - 12.0,
        xml_escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (py(0.0) + py(1.0)) / 2.0,
        (py(0.0) + py(1.0)) / 2.0,
        xml_escape(ylabel)
    );
    let points: Vec<String> = curve
        .thresholds
        .iter()
        .zip(&curve.values)
        .map(|(&t, &v)| format!("{:.2},{:.2}", px(t), py(v)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn trim_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

/// Loads one result directory written by the tracker.
pub fn load_result(dir: &Path) -> Result<TrackResult> {
    let csv = dir.join(TRACK_FILE);
    let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
    let (init_box, records) = parse_track_csv(&text, &csv)?;
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt = parse_groundtruth(&gt_text, &gt_path)?;
    if records.len() + 1 != gt.len() {
        return Err(Error::data(format!(
            "{}: {} tracked frames but {} ground-truth boxes",
            dir.display(),
            records.len() + 1,
            gt.len()
        )));
    }
    let mut responses = Vec::new();
    let rdir = dir.join("responses");
    if rdir.is_dir() {
        for f in 1..gt.len() {
            let p = rdir.join(format!("{:04}.pgm", f + 1));
            if p.is_file() {
                responses.push((f, GrayImage::read_pgm(&p)?));
            }
        }
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(TrackResult {
        name,
        init_box,
        records,
        gt,
        responses,
        grad_evals: 0,
    })
}

/// Loads `dir` itself when it holds a track file, otherwise every
/// subdirectory that does, sorted by name.
pub fn load_results(dir: &Path) -> Result<Vec<TrackResult>> {
    if dir.join(TRACK_FILE).is_file() {
        return Ok(vec![load_result(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(TRACK_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(format!("{}: no {TRACK_FILE} found", dir.display())));
    }
    dirs.iter().map(|d| load_result(d)).collect()
}
