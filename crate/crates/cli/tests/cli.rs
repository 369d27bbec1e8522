use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclechaos")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const TINY: &[&str] = &["--set", "synth_train=30", "--set", "synth_test=12", "--set", "synth_size=8"];

fn dataset(dir: &Path) {
    let mut a = vec!["dataset", "--out", s(dir)];
    a.extend_from_slice(TINY);
    ok(&a);
}

fn train(data: &Path, out: &Path) {
    ok(&[
        "train",
        "--out",
        s(out),
        "--data",
        s(data),
        "--epochs",
        "2",
        "--set",
        "base_channels=8",
        "--set",
        "n_resblocks=1",
        "--set",
        "checkpoint_every=1",
    ]);
}

/// Every `[outputs]` entry exists and hashes to the recorded digest.
fn manifest_outputs(dir: &Path) -> Vec<String> {
    let text = read(&dir.join("manifest.txt"));
    let section = text.split("[outputs]\n").nth(1).expect("outputs section");
    section
        .lines()
        .take_while(|l| !l.is_empty())
        .map(|l| {
            let (hash, name) = l.split_once("  ").unwrap();
            let bytes = std::fs::read(dir.join(name)).unwrap();
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            assert_eq!(digest, hash, "{name}");
            name.to_string()
        })
        .collect()
}

fn csv_column(text: &str, col: usize) -> Vec<f64> {
    text.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn henon_spectrum_sums_to_log_b() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ly");
    ok(&[
        "lyapunov",
        "--benchmark",
        "henon",
        "--out",
        s(&out),
        "--set",
        "n_trajectories=5",
        "--transient",
        "100",
        "--steps",
        "5000",
    ]);
    let ex = csv_column(&read(&out.join("spectrum.csv")), 1);
    assert_eq!(ex.len(), 2);
    assert!((ex[0] + ex[1] - 0.3f64.ln()).abs() < 1e-3, "{ex:?}");
    assert!((ex[0] - 0.419).abs() < 0.01, "{ex:?}");
    let names = manifest_outputs(&out);
    for f in ["spectrum.csv", "ensemble.csv", "spectrum.svg", "hist_lambda1.svg", "hist_lambda2.svg"] {
        assert!(names.iter().any(|n| n == f), "{f} missing");
    }
    assert!(read(&out.join("manifest.txt")).contains("D_L = 1.2"));
}

#[test]
fn henon_divergence_matches_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dv");
    ok(&["diverge", "--benchmark", "henon", "--out", s(&out), "--set", "n_points=200", "--transient", "200"]);
    let text = read(&out.join("manifest.txt"));
    let slope: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("slope = "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((slope - 0.419).abs() < 0.05, "{slope}");
}

#[test]
fn identity_generator_repeats_the_initial_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    dataset(&data);
    let out = dir.path().join("gen");
    ok(&["generate", "--out", s(&out), "--data", s(&data), "--set", "generator=identity", "--steps", "4"]);
    for r in 0..3 {
        let first = std::fs::read(out.join(format!("frames/row{r}_step000.pgm"))).unwrap();
        for k in 1..=4 {
            let frame = std::fs::read(out.join(format!("frames/row{r}_step{k:03}.pgm"))).unwrap();
            assert_eq!(frame, first, "row {r} step {k}");
        }
    }
    let grid = std::fs::read(out.join("grid.pgm")).unwrap();
    assert!(grid.starts_with(b"P5\n"));
}

#[test]
fn unknown_key_is_a_usage_error_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# header\nepochs = 3\nlearning_rat = 0.1\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run.cfg:3") && err.contains("learning_rat"), "{err}");

    let out = run(&["lyapunov", "--epochs", "3", "--benchmark", "henon"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epochs"));

    let out = run(&["lyapunov", "--benchmark", "lorenz", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--benchmark"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ccgn");
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&missing),
        "--out",
        s(&dir.path().join("o")),
        "--set",
        "synth_train=3",
        "--set",
        "synth_test=3",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_records_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("ds");
    dataset(&data);
    assert_eq!(
        manifest_outputs(&data),
        ["train-images.idx3-ubyte", "train-labels.idx1-ubyte", "test-images.idx3-ubyte", "test-labels.idx1-ubyte"]
    );
    let tr = d.join("tr");
    train(&data, &tr);
    let names = manifest_outputs(&tr);
    for f in ["checkpoint.ccgn", "losses.csv", "losses.svg", "checkpoints/checkpoint_epoch1.ccgn"] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
    assert_eq!(read(&tr.join("losses.csv")).lines().count(), 3);
    let ck = tr.join("checkpoint.ccgn");
    let common = ["--data", s(&data), "--checkpoint", s(&ck)];
    let cases: &[(&str, &[&str], &[&str])] = &[
        ("generate", &[], &["grid.pgm", "grid.svg", "frames/row0_step000.pgm"]),
        (
            "lyapunov",
            &["--set", "n_trajectories=2", "--transient", "3", "--steps", "10", "--set", "m=2"],
            &["spectrum.csv", "ensemble.csv", "spectrum.svg", "hist_lambda1.svg"],
        ),
        (
            "diverge",
            &["--set", "n_points=4", "--transient", "3", "--steps", "8"],
            &["divergence.csv", "divergence.svg"],
        ),
        (
            "pr",
            &["--set", "n_initial=3", "--steps", "3", "--set", "k_range=1..3", "--k", "2"],
            &["pr_vs_k.csv", "pr_vs_k.svg", "pr_vs_step.csv", "pr_vs_step.svg"],
        ),
        ("project", &[], &["pca.csv", "pca.svg", "vectors_real.csv", "vectors_generated.csv"]),
    ];
    for (cmd, extra, expected) in cases {
        let out = d.join(cmd);
        let mut a = vec![*cmd, "--out", s(&out)];
        a.extend_from_slice(&common);
        a.extend_from_slice(extra);
        ok(&a);
        let names = manifest_outputs(&out);
        for f in *expected {
            assert!(names.iter().any(|n| n == f), "{cmd}: {f} missing from {names:?}");
        }
        let text = read(&out.join("manifest.txt"));
        assert!(text.contains("checkpoint.ccgn") && text.contains("[inputs]"), "{cmd}");
    }
    let step = read(&d.join("pr/pr_vs_step.csv"));
    assert_eq!(step.lines().nth(1), Some("0,1.000000,1.000000"));
}

#[test]
fn external_features_skip_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let (r, g) = (dir.path().join("r.csv"), dir.path().join("g.csv"));
    let rows = |off: f64| (0..12).map(|i| format!("{},{}\n", i as f64 + off, (i * i) as f64)).collect::<String>();
    std::fs::write(&r, rows(0.0)).unwrap();
    std::fs::write(&g, rows(0.0)).unwrap();
    let out = dir.path().join("pr");
    ok(&[
        "pr",
        "--embedder",
        "external",
        "--set",
        &format!("features_real={}", s(&r)),
        "--set",
        &format!("features_generated={}", s(&g)),
        "--set",
        "k_range=1..3",
        "--out",
        s(&out),
    ]);
    let text = read(&out.join("pr_vs_k.csv"));
    assert_eq!(csv_column(&text, 1), vec![1.0; 3]);
    assert_eq!(csv_column(&text, 2), vec![1.0; 3]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("ds");
    dataset(&data);
    let (a, b) = (d.join("a"), d.join("b"));
    train(&data, &a);
    train(&data, &b);
    for f in ["checkpoint.ccgn", "losses.csv", "manifest.txt"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        if f == "manifest.txt" {
            let strip = |v: Vec<u8>| String::from_utf8(v).unwrap().replace(s(&a), "").replace(s(&b), "");
            assert_eq!(strip(x), strip(y));
        } else {
            assert_eq!(x, y, "{f}");
        }
    }
    let ly = |out: &Path| {
        ok(&["lyapunov", "--benchmark", "henon", "--out", s(out), "--set", "n_trajectories=4", "--steps", "300"]);
        read(&out.join("ensemble.csv"))
    };
    assert_eq!(ly(&d.join("l1")), ly(&d.join("l2")));
}
