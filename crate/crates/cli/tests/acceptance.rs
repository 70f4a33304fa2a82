//! Acceptance criteria A1 to A7. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use metatrack_core::crest::{argmax, crest_loss, CrestExample};
use metatrack_core::data::{
    build_meta_dataset, checkpoint_bytes, decode_checkpoint, gen_synthetic, Pattern, SizeRule, SynthSpec,
};
use metatrack_core::eval::{emit_report, evaluate, precision_curve, vot_accuracy_robustness};
use metatrack_core::meta::{adapted_loss, meta_train, TrainOutcome};
use metatrack_core::model::Episode;
use metatrack_core::sdnet::{apply_flip, SdnetExample};
use metatrack_core::tracker::{patch_accuracy, reset_events, Event, FrameRecord, TrackResult};
use metatrack_core::{
    center_error, iou, AdamConfig, AdamState, BoundingBox, CrestConfig, CrestModel, FeatureConfig, InitParams,
    LayerSpec, LossVariant, MetaConfig, MetaLearnable, Protocol, SdnetConfig, SdnetModel, Sequence, Tensor, Tracker,
    TrackerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn report(o: &Outcome) {
    println!(
        "{} {} {}: {}",
        o.id,
        if o.passed { "PASS" } else { "FAIL" },
        o.title,
        o.detail
    );
}

/// Translating blobs: 64×64, 30 frames, constant velocity.
fn blob_sequences(seed0: u64, n: u64) -> Vec<Sequence> {
    (0..n)
        .map(|i| gen_synthetic(&SynthSpec::default(), seed0 + i, &format!("blob_{i:03}")).expect("synthetic sequence"))
        .collect()
}

/// Same geometry and motion, target pattern alternating blob/checker, two
/// distractors drawn with the other pattern at full contrast.
fn bench_spec(i: u64) -> SynthSpec {
    SynthSpec {
        pattern: if i.is_multiple_of(2) {
            Pattern::Blob
        } else {
            Pattern::Checker
        },
        distractors: 2,
        distractor_gain: 1.0,
        distractor_other: true,
        ..SynthSpec::default()
    }
}

fn bench_sequences(seed0: u64, n: u64) -> Vec<Sequence> {
    (0..n)
        .map(|i| gen_synthetic(&bench_spec(i), seed0 + i, &format!("seq_{i:03}")).expect("synthetic sequence"))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn a1() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_metatrack"))
        .args(["gradcheck", "--seed", "0"])
        .output()
        .expect("run metatrack gradcheck");
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let total = stdout
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .count();
    let failed = stdout.lines().filter(|l| l.starts_with("FAIL")).count();
    let has = |prefix: &str| stdout.lines().any(|l| l.contains(prefix));
    let coverage = has("first-order conv2d") && has("meta-gradient crest Weighted T=2") && has("closed-form toy");
    Outcome {
        id: "A1",
        title: "gradient oracle suite",
        passed: out.status.success() && failed == 0 && total > 0 && coverage && secs < 60.0,
        detail: format!(
            "{total} checks, {failed} failed, exit {:?}, {secs:.2}s (limit 60s)",
            out.status.code()
        ),
    }
}

fn a2() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        ok &= pass;
        notes.push(format!("{name} {}", if pass { "ok" } else { "WRONG" }));
    };

    let y = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
    let f = Tensor::ones(&[1, 1, 1, 1]);
    let loss = |yhat: f64| {
        crest_loss(
            &y,
            &Tensor::new(&[1, 1, 1], vec![yhat]).unwrap(),
            &f,
            0.0,
            LossVariant::Weighted,
        )
        .unwrap()
        .item()
        .unwrap()
    };
    check("weighted loss 1.847264", (loss(0.5) - 1.847264).abs() < 1e-6);
    check("below threshold 0", loss(0.95) == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut all = true;
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let v: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut best = (0, 0);
        for i in 0..r {
            for j in 0..c {
                if v[i * c + j] > v[best.0 * c + best.1] {
                    best = (i, j);
                }
            }
        }
        all &= argmax(&v, c) == best;
    }
    check("argmax vs brute force x100", all);

    let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    check("IoU 1/7", (iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);

    let g = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
    let p = BoundingBox::new(3.0, 4.0, 4.0, 4.0).unwrap();
    let r = TrackResult {
        name: "p".into(),
        init_box: g,
        records: vec![FrameRecord {
            frame: 1,
            bbox: Some(p),
            event: Event::Ok,
        }],
        gt: vec![g, g],
        responses: vec![],
        grad_evals: 0,
    };
    let pc = precision_curve(&[r]).unwrap();
    check(
        "precision 3-4-5",
        center_error(&g, &p) == 5.0 && pc.values[4] == 0.0 && pc.values[5] == 1.0,
    );

    let params = vec![Tensor::from_slice(&[3.0, -1.0])];
    let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &params);
    let next = adam.step(&params, &[Tensor::from_slice(&[2.5, -0.7])]).unwrap();
    let d = next[0].data();
    check(
        "Adam first step = -lr*sign(g)",
        (d[0] - 2.9).abs() < 1e-8 && (d[1] + 0.9).abs() < 1e-8,
    );

    Outcome {
        id: "A2",
        title: "unit-value checks",
        passed: ok,
        detail: notes.join(", "),
    }
}

const META_ITERS: u64 = 500;

/// 500 iterations, T=1, mini-batch 8, on 32 training sequences.
fn train_crest(train: Vec<Sequence>) -> (CrestModel, TrainOutcome, f64) {
    let model = CrestModel::new(CrestConfig::default()).unwrap();
    let ds = build_meta_dataset(train, 0.6, SizeRule::Area).unwrap();
    let cfg = MetaConfig {
        iters: META_ITERS,
        inner_steps: 1,
        batch: 8,
        log_every: 25,
        seed: 1,
        ..MetaConfig::default()
    };
    let start = Instant::now();
    let out = meta_train(&model, &ds, &cfg, None).expect("meta-training");
    (model, out, start.elapsed().as_secs_f64())
}

fn a3() -> Outcome {
    let (model, out, train_secs) = train_crest(blob_sequences(1000, 32));
    let (model, out) = (&model, &out);
    let start = Instant::now();
    let held = blob_sequences(5000, 8);
    let rates = out.state.rates().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let episodes: Vec<Episode<CrestExample>> = held
        .iter()
        .map(|s| model.episode(s, 0, 5, &mut rng).unwrap().expect("held-out episode"))
        .collect();
    let meta_lh = mean(
        &episodes
            .iter()
            .map(|ep| adapted_loss(model, &out.state.theta0, &rates, ep, 1).unwrap())
            .collect::<Vec<_>>(),
    );
    // Random θ₀ with one plain step, at several step sizes; compare with the best.
    let lrs = [0.0, 1e-5, 1e-4, 1e-3, 2e-3];
    let base: Vec<f64> = lrs
        .iter()
        .map(|&lr| {
            let mut v = Vec::new();
            for seed in 0..3 {
                let init = InitParams::uniform(model.initial_state(&MetaConfig::default(), 700 + seed).theta0, lr);
                for ep in &episodes {
                    v.push(adapted_loss(model, &init.theta0, &init.rates, ep, 1).unwrap());
                }
            }
            mean(&v)
        })
        .collect();
    let best_base = base.iter().cloned().fold(f64::INFINITY, f64::min);
    let secs = train_secs + start.elapsed().as_secs_f64();

    let window = |lo: u64, hi: u64| {
        let v: Vec<f64> = out
            .curve
            .iter()
            .filter(|p| p.iter > lo && p.iter <= hi)
            .map(|p| p.mean_future_loss)
            .collect();
        mean(&v)
    };
    let first = window(0, 100);
    let last = window(META_ITERS - 100, META_ITERS);
    let passed = meta_lh <= 0.5 * best_base && last < 0.5 * first && secs <= 600.0;
    Outcome {
        id: "A3",
        title: "lookahead after one init iteration (crest)",
        passed,
        detail: format!(
            "meta LH {meta_lh:.4} vs best random-init LH {best_base:.4} (ratio {:.3}, need <= 0.5; per lr {:?}); \
             training curve first-100 {first:.4} last-100 {last:.4}; {secs:.1}s (limit 600s)",
            meta_lh / best_base,
            base.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    }
}

fn a4() -> Outcome {
    let (model, out, train_secs) = train_crest(bench_sequences(1000, 32));
    let (model, out) = (&model, &out);
    let start = Instant::now();
    let meta = InitParams::from_meta(&out.state).unwrap();
    let mut meta_iou = Vec::new();
    let mut base_iou = Vec::new();
    let (mut meta_fail, mut base_fail) = (0usize, 0usize);
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let cfg = TrackerConfig {
            seed,
            ..TrackerConfig::crest()
        };
        let held = bench_sequences(9000 + seed * 100, 8);
        let base = InitParams::uniform(
            model.initial_state(&MetaConfig::default(), 500 + seed).theta0,
            cfg.subsequent_lr,
        );
        let (mut mf, mut bf) = (0, 0);
        for s in &held {
            let t = Tracker::new(model, &meta, cfg.clone());
            meta_iou.push(t.run_sequence(s, Protocol::Ope, false).unwrap().mean_iou());
            mf += t.run_sequence(s, Protocol::Reset, false).unwrap().failures();
            let t = Tracker::new(model, &base, cfg.clone());
            base_iou.push(t.run_sequence(s, Protocol::Ope, false).unwrap().mean_iou());
            bf += t.run_sequence(s, Protocol::Reset, false).unwrap().failures();
        }
        per_seed.push(format!("{mf}/{bf}"));
        meta_fail += mf;
        base_fail += bf;
    }
    let n = meta_iou.len() as f64;
    let (mi, bi) = (mean(&meta_iou), mean(&base_iou));
    Outcome {
        id: "A4",
        title: "tracking quality (crest, 8 sequences x 3 seeds)",
        passed: mi >= 0.5 && meta_fail < base_fail,
        detail: format!(
            "OPE mean IoU meta {mi:.3} (need >= 0.5), random-init {bi:.3}; reset failures per sequence meta {:.3} vs random-init {:.3} \
             (totals {meta_fail} vs {base_fail}, per seed meta/random {}); training {train_secs:.1}s, tracking {:.1}s",
            meta_fail as f64 / n,
            base_fail as f64 / n,
            per_seed.join(" "),
            start.elapsed().as_secs_f64()
        ),
    }
}

fn a5() -> Outcome {
    let start = Instant::now();
    let model = SdnetModel::new(SdnetConfig::default()).unwrap();
    let ds = build_meta_dataset(bench_sequences(1000, 32), 0.6, SizeRule::Area).unwrap();
    let cfg = MetaConfig {
        iters: 200,
        batch: 8,
        log_every: 25,
        seed: 1,
        ..MetaConfig::default()
    };
    let out = meta_train(&model, &ds, &cfg, None).expect("meta-training");
    let meta = InitParams::from_meta(&out.state).unwrap();
    let base_lr = TrackerConfig::sdnet().subsequent_lr;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut m, mut b) = (Vec::new(), Vec::new());
    for s in &bench_sequences(5000, 8) {
        let c = &model.config;
        let train = model
            .sample_patches(&s.frames[0], &s.gt[0], c.n_pos, c.n_neg, &mut rng)
            .unwrap();
        let test = model.sample_patches(&s.frames[0], &s.gt[0], 32, 32, &mut rng).unwrap();
        let ex = SdnetExample::from_batch(&train, false);
        m.push(patch_accuracy(&model, &meta, &ex, &test, 1).unwrap());
        for seed in 0..3 {
            let init = InitParams::uniform(model.initial_state(&MetaConfig::default(), 77 + seed).theta0, base_lr);
            b.push(patch_accuracy(&model, &init, &ex, &test, 1).unwrap());
        }
    }
    let (ma, ba) = (mean(&m), mean(&b));
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: "A5",
        title: "single-iteration patch accuracy (sdnet)",
        passed: ma >= 0.9 && ba <= 0.6 && secs <= 600.0,
        detail: format!(
            "meta {ma:.3} (need >= 0.9) vs random-init {ba:.3} at lr {base_lr:e} (need <= 0.6); {secs:.1}s (limit 600s)"
        ),
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn a6() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        ok &= pass;
        notes.push(format!("{name} {}", if pass { "ok" } else { "WRONG" }));
    };
    let model = CrestModel::new(CrestConfig::default()).unwrap();
    let seqs = bench_sequences(300, 4);
    let ds = build_meta_dataset(seqs.clone(), 0.6, SizeRule::Area).unwrap();
    let cfg = MetaConfig {
        iters: 6,
        batch: 2,
        seed: 42,
        ..MetaConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let (p1, p2) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    let s1 = meta_train(&model, &ds, &cfg, Some(&p1)).unwrap().state;
    meta_train(&model, &ds, &cfg, Some(&p2)).unwrap();
    let (b1, b2) = (fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    check("same seed => identical checkpoints", b1 == b2);

    let decoded = decode_checkpoint(&b1).unwrap();
    let same_values = decoded
        .theta0
        .iter()
        .chain(&decoded.alpha.values)
        .zip(s1.theta0.iter().chain(&s1.alpha.values))
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(
        "round trip bit-exact",
        same_values && checkpoint_bytes(&decoded) == b1 && decoded.iter == s1.iter,
    );

    let init = InitParams::from_meta(&s1).unwrap();
    let run = |dir: &Path| {
        let results: Vec<TrackResult> = seqs[..2]
            .iter()
            .map(|s| {
                Tracker::new(&model, &init, TrackerConfig::crest())
                    .run_sequence(s, Protocol::Reset, true)
                    .unwrap()
            })
            .collect();
        emit_report(&results, &evaluate(&results).unwrap(), dir).unwrap();
        read_dir_sorted(dir)
    };
    let (r1, r2) = (run(&tmp.path().join("r1")), run(&tmp.path().join("r2")));
    check("same inputs => identical reports", r1 == r2 && r1.len() == 5);

    let n = 31;
    let gt: Vec<BoundingBox> = (0..n).map(|_| BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap()).collect();
    let far = BoundingBox::new(40.0, 40.0, 8.0, 8.0).unwrap();
    let events = reset_events(&vec![0.0; n], 5);
    let records = events
        .iter()
        .enumerate()
        .map(|(i, e)| FrameRecord {
            frame: i + 1,
            bbox: match e {
                Event::Skip => None,
                Event::Init => Some(gt[i + 1]),
                _ => Some(far),
            },
            event: *e,
        })
        .collect();
    let never = TrackResult {
        name: "never".into(),
        init_box: gt[0],
        records,
        gt,
        responses: vec![],
        grad_evals: 0,
    };
    // Hand simulation: fail at 1, skip 2..5, reinit 6, fail 7, ... => failures at 1, 7, 13, 19, 25.
    let r = vot_accuracy_robustness(&[never]).robustness;
    check(&format!("never-overlap failures {r} == 5"), r == 5);

    Outcome {
        id: "A6",
        title: "determinism and formats",
        passed: ok,
        detail: notes.join(", "),
    }
}

fn a7() -> Outcome {
    // Small features: flip handling does not depend on the feature map.
    let model = SdnetModel::new(SdnetConfig {
        features: FeatureConfig {
            seed: 1,
            layers: vec![LayerSpec {
                out_channels: 2,
                stride: 2,
            }],
        },
        patch_size: 8,
        ..SdnetConfig::default()
    })
    .unwrap();
    let seq = gen_synthetic(&SynthSpec::default(), 1, "s").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let n_pos = model.config.n_pos as f64;
    let (mut flips, mut consistent) = (0usize, true);
    for i in 0..n {
        let ep = model
            .episode(&seq, i % 20, 1 + i % 5, &mut rng)
            .unwrap()
            .expect("episode");
        let train_flipped = ep.train.labels.data().iter().sum::<f64>() != n_pos;
        let future_flipped = ep.future.labels.data().iter().sum::<f64>() != n_pos;
        consistent &= train_flipped == future_flipped;
        flips += usize::from(train_flipped);
    }
    let freq = flips as f64 / n as f64;
    let labels: Vec<f64> = (0..1000).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    let involution = apply_flip(&apply_flip(&labels, true), true) == labels
        && apply_flip(&labels, true).iter().zip(&labels).all(|(a, b)| a + b == 1.0)
        && apply_flip(&labels, false) == labels;
    Outcome {
        id: "A7",
        title: "label shuffling statistics",
        passed: (freq - 0.5).abs() <= 0.02 && involution && consistent,
        detail: format!(
            "flip frequency {freq:.4} over {n} episodes (need 0.5 +/- 0.02), pair-consistent {consistent}, involution {involution}"
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![a1(), a2()];
    report(&outcomes[0]);
    report(&outcomes[1]);
    for criterion in [a3, a4, a5, a6, a7] {
        let o = criterion();
        report(&o);
        outcomes.push(o);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed {}", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
