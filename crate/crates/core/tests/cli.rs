//! The `nna-aat` binary end to end: verbs, exit codes, determinism.
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[task]
seq_len = 6
train_size = 96
val_size = 32
test_size = 32
[model]
layers = 1
hidden = 6
[stage1]
steps = 25
batch_size = 8
warmup_steps = 2
hold_steps = 10
eval_every = 10
[stage2]
steps = 8
eval_every = 4
"#;

fn nna(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nna-aat"));
    cmd.current_dir(dir).env_clear().args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn tables_build_inspect_export() {
    let dir = setup();
    let d = dir.path();
    let o = nna(d, &["tables", "build", "--out", "t"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("budget met"));
    for f in ["tanh.pwl", "sigmoid.pwl", "tables_report.txt", "tables_report.json", "resolved_config.toml"] {
        assert!(d.join("t").join(f).exists(), "{f}");
    }
    let o = nna(d, &["tables", "inspect", "t/sigmoid.pwl"], &[]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("sigmoid"));

    let o = nna(d, &["tables", "export", "t/tanh.pwl", "--points", "33", "--out", "x"], &[]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(d.join("x/tanh_series.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,true,approx,grad"));
    assert_eq!(csv.lines().count(), 34);

    // Importing the written files reproduces them byte for byte.
    let o = nna(d, &["tables", "build", "--import", "t/tanh.pwl", "--import", "t/sigmoid.pwl", "--out", "u"], &[]);
    assert_eq!(code(&o), 0);
    for f in ["tanh.pwl", "sigmoid.pwl"] {
        assert_eq!(std::fs::read(d.join("t").join(f)).unwrap(), std::fs::read(d.join("u").join(f)).unwrap());
    }
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.pwl"), "not a table\n").unwrap();
    assert_eq!(code(&nna(d, &["tables", "inspect", "bad.pwl"], &[])), 3);
    // Too few segments to meet the error budget.
    assert_eq!(code(&nna(d, &["tables", "build", "--segments", "4", "--out", "t"], &[])), 3);
    assert_eq!(code(&nna(d, &["tables", "build", "--out", "t"], &[("NNA_AAT_BOGUS", "1")])), 2);
    std::fs::write(d.join("typo.toml"), "[stage1]\nstepz = 3\n").unwrap();
    assert_eq!(code(&nna(d, &["--config", "typo.toml", "tables", "build"], &[])), 2);
    assert_eq!(code(&nna(d, &["--config", "small.toml", "train", "--stage", "2", "--out", "r"], &[])), 2);
    assert_eq!(code(&nna(d, &["frobnicate"], &[])), 2);
    assert_eq!(code(&nna(d, &["analyze", "--checkpoint", "missing.ckpt"], &[])), 1);
}

#[test]
fn flags_and_environment_resolve_into_the_config() {
    let dir = setup();
    let d = dir.path();
    let o = nna(
        d,
        &["tables", "build"],
        &[("NNA_AAT_CONFIG", "small.toml"), ("NNA_AAT_SEED", "41"), ("NNA_AAT_OUT", "envout"), ("NNA_AAT_STAGE1_PEAK_LR", "0.005")],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(d.join("envout/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 41"));
    assert!(resolved.contains("peak_lr = 0.005"));
    assert!(resolved.contains("seq_len = 6"));
    // Flags win over the environment.
    let o = nna(d, &["--seed", "3", "--out", "flagout", "tables", "build"], &[("NNA_AAT_SEED", "41")]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(d.join("flagout/resolved_config.toml")).unwrap().contains("seed = 3"));
}

#[test]
fn train_golden_analyze_roundtrip() {
    let dir = setup();
    let d = dir.path();
    let cfg = ["--config", "small.toml"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = cfg.iter().chain(args).copied().collect();
        let o = nna(d, &all, &[]);
        (code(&o), stdout(&o), String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let (c, _, e) = run(&["train", "--stage", "1", "--out", "r"]);
    assert_eq!(c, 0, "{e}");
    let (c, _, e) = run(&["train", "--stage", "2", "--init", "r/stage1.ckpt", "--out", "r"]);
    assert_eq!(c, 0, "{e}");
    assert!(d.join("r/stage2_metrics.jsonl").exists());

    let (c, out, _) = run(&["analyze", "--checkpoint", "r/stage2.ckpt", "--out", "a"]);
    assert_eq!(c, 0);
    assert!(out.contains("z histogram"));
    assert!(d.join("a/analysis.json").exists());

    let (c, _, e) = run(&["golden", "generate", "--checkpoint", "r/stage2.ckpt", "--example", "3", "--out", "g"]);
    assert_eq!(c, 0, "{e}");
    let verify = |trace: &str| {
        run(&["golden", "verify", "--checkpoint", "r/stage2.ckpt", "--input", "g/input.bin", "--trace", trace, "--out", "g"])
    };
    let (c, out, _) = verify("g/golden.trace");
    assert_eq!(c, 0);
    assert!(out.starts_with("PASS"));

    // Flip one bit in the last value of the trace.
    let mut bytes = std::fs::read(d.join("g/golden.trace")).unwrap();
    let n = bytes.len();
    bytes[n - 4] ^= 1;
    std::fs::write(d.join("g/flipped.trace"), &bytes).unwrap();
    let (c, out, e) = verify("g/flipped.trace");
    assert_eq!(c, 4);
    assert!(out.contains("FAIL") && out.contains("head_acc"), "{out}");
    assert!(e.contains("step"), "{e}");

    // Same seed, same bytes.
    let (c, _, _) = run(&["golden", "generate", "--checkpoint", "r/stage2.ckpt", "--example", "3", "--out", "g2"]);
    assert_eq!(c, 0);
    assert_eq!(std::fs::read(d.join("g/golden.trace")).unwrap(), std::fs::read(d.join("g2/golden.trace")).unwrap());
}

#[test]
fn experiment_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    for out in ["e1", "e2"] {
        let o = nna(d, &["--config", "small.toml", "--seed", "5", "experiment", "--out", out], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("stage2-quantized"));
    }
    for f in ["summary.txt", "summary.json", "stage2.ckpt", "baseline_metrics.jsonl", "tanh.pwl"] {
        assert_eq!(std::fs::read(d.join("e1").join(f)).unwrap(), std::fs::read(d.join("e2").join(f)).unwrap(), "{f}");
    }
    // The resolved configs differ only in the output directory.
    let cfg = |out: &str| {
        let text = std::fs::read_to_string(d.join(out).join("resolved_config.toml")).unwrap();
        text.lines().filter(|l| !l.starts_with("out = ")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(cfg("e1"), cfg("e2"));
}
