use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn metatrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metatrack"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn metatrack")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = metatrack(&["--help"], dir.path());
    assert_eq!(code(&help), 0);
    for cmd in ["synth", "meta-train", "track", "eval", "gradcheck"] {
        assert!(stdout(&help).contains(cmd), "{cmd} missing from help");
        assert_eq!(code(&metatrack(&[cmd, "--help"], dir.path())), 0);
    }
    assert_eq!(code(&metatrack(&[], dir.path())), 1);
    assert_eq!(code(&metatrack(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&metatrack(&["synth", "--out", "x"], dir.path())), 1);
    assert_eq!(
        code(&metatrack(
            &["synth", "--out", "x", "--seed", "1", "--pattern", "stripes"],
            dir.path()
        )),
        1
    );
    // Target larger than the frame.
    let o = metatrack(
        &[
            "synth", "--out", "big", "--seed", "1", "--width", "10", "--height", "10",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = metatrack(&["eval", "--results", "missing", "--out", "rep"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    fs::write(dir.path().join("bad.ckpt"), b"NOTACKPT").unwrap();
    let o = metatrack(
        &[
            "track",
            "--model",
            "crest",
            "--ckpt",
            "bad.ckpt",
            "--seq",
            ".",
            "--protocol",
            "ope",
            "--out",
            "t",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte 0"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = metatrack(&["gradcheck", "--seed", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn synth_writes_sequences_and_spec() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth",
        "--out",
        "data",
        "--seed",
        "4",
        "--frames",
        "6",
        "--pattern",
        "mixed",
        "--motion",
        "rw",
        "--distractors",
        "1",
        "--count",
        "3",
    ];
    assert_eq!(code(&metatrack(&args, dir.path())), 0);
    for i in 0..3 {
        let seq = dir.path().join(format!("data/seq_{i:03}"));
        assert_eq!(fs::read_dir(seq.join("img")).unwrap().count(), 6);
        assert_eq!(
            fs::read_to_string(seq.join("groundtruth_rect.txt"))
                .unwrap()
                .lines()
                .count(),
            6
        );
        let spec = fs::read_to_string(seq.join("synth.txt")).unwrap();
        assert!(spec.contains(if i % 2 == 0 { "pattern=blob" } else { "pattern=checker" }));
        assert!(spec.contains(&format!("seed={}", 4 + i)));
    }
    // A written spec regenerates the same frames.
    let again = [
        "synth",
        "--out",
        "again",
        "--seed",
        "5",
        "--spec",
        "data/seq_001/synth.txt",
    ];
    assert_eq!(code(&metatrack(&again, dir.path())), 0);
    assert_eq!(
        fs::read(dir.path().join("again/img/0003.pgm")).unwrap(),
        fs::read(dir.path().join("data/seq_001/img/0003.pgm")).unwrap()
    );
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let synth = [
        "synth",
        "--out",
        "data",
        "--seed",
        "1",
        "--frames",
        "10",
        "--pattern",
        "blob",
        "--motion",
        "cv",
        "--count",
        "3",
    ];
    assert_eq!(code(&metatrack(&synth, p)), 0);
    for ckpt in ["a.ckpt", "b.ckpt"] {
        let o = metatrack(
            &[
                "meta-train",
                "--model",
                "crest",
                "--data",
                "data",
                "--iters",
                "3",
                "--batch",
                "2",
                "--seed",
                "9",
                "--out",
                ckpt,
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(p.join("a.ckpt")).unwrap(), fs::read(p.join("b.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(p.join("a.curve.csv")).unwrap().lines().next(),
        Some("iter,mean_future_loss")
    );

    for (out, protocol) in [("ope", "ope"), ("reset", "reset")] {
        let o = metatrack(
            &[
                "track",
                "--model",
                "crest",
                "--ckpt",
                "a.ckpt",
                "--seq",
                "data",
                "--init-iters",
                "1",
                "--protocol",
                protocol,
                "--dump-responses",
                "--out",
                out,
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(p.join(out).join("seq_000/track.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("frame,x,y,w,h,event"));
        assert_eq!(csv.lines().count(), 1 + 10);
        assert!(p.join(out).join("seq_000/responses/0002.pgm").is_file());
    }
    let o = metatrack(
        &[
            "track",
            "--model",
            "sdnet",
            "--ckpt",
            "a.ckpt",
            "--seq",
            "data",
            "--protocol",
            "ope",
            "--out",
            "x",
        ],
        p,
    );
    assert_eq!(code(&o), 2);

    for rep in ["rep1", "rep2"] {
        let o = metatrack(&["eval", "--results", "ope,reset", "--out", rep], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("success AUC"));
    }
    for f in [
        "success.csv",
        "precision.csv",
        "summary.csv",
        "success.svg",
        "precision.svg",
    ] {
        assert_eq!(
            fs::read(p.join("rep1").join(f)).unwrap(),
            fs::read(p.join("rep2").join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = fs::read_to_string(p.join("rep1/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 6 + 1);
}

#[test]
fn sdnet_training_and_baseline_tracking() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let synth = [
        "synth",
        "--out",
        "data",
        "--seed",
        "2",
        "--frames",
        "12",
        "--pattern",
        "blob",
        "--motion",
        "cv",
        "--count",
        "2",
    ];
    assert_eq!(code(&metatrack(&synth, p)), 0);
    let o = metatrack(
        &[
            "meta-train",
            "--model",
            "sdnet",
            "--data",
            "data/seq_000,data/seq_001",
            "--weights",
            "0.3,0.7",
            "--iters",
            "1",
            "--batch",
            "1",
            "--seed",
            "1",
            "--out",
            "s.ckpt",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = metatrack(
        &[
            "meta-train",
            "--model",
            "sdnet",
            "--data",
            "data",
            "--weights",
            "0.3,0.7",
            "--iters",
            "1",
            "--seed",
            "1",
            "--out",
            "x.ckpt",
        ],
        p,
    );
    assert_eq!(code(&o), 1);
    let o = metatrack(
        &[
            "track",
            "--model",
            "sdnet",
            "--ckpt",
            "s.ckpt",
            "--seq",
            "data/seq_000",
            "--protocol",
            "reset",
            "--random-init",
            "3",
            "--strategy",
            "combined:0.5",
            "--out",
            "t",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("t/track.csv").is_file());
    let o = metatrack(
        &[
            "track",
            "--model",
            "sdnet",
            "--ckpt",
            "s.ckpt",
            "--seq",
            "data/seq_000",
            "--protocol",
            "ope",
            "--strategy",
            "sideways",
            "--out",
            "t2",
        ],
        p,
    );
    assert_eq!(code(&o), 1);
}
