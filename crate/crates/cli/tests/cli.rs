use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distillfss")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny corpus plus base, teacher and student checkpoints.
fn tiny_pipeline(root: &Path) {
    let data = root.join("data");
    ok(&[
        "synth", "--seed", "3", "--out", p(&data), "--train-items", "6", "--test-items", "3", "--source-items", "6",
        "--image-size", "32",
    ]);
    ok(&["train-base", "--seed", "3", "--data", p(&data.join("source")), "--steps", "3", "--out", p(&root.join("base"))]);
    let support = data.join("train");
    ok(&[
        "transfer", "--seed", "3", "--checkpoint", p(&root.join("base/base.ckpt")), "--support", p(&support),
        "--shots", "3", "--epochs", "1", "--out", p(&root.join("transfer")),
    ]);
    ok(&[
        "distill", "--seed", "3", "--checkpoint", p(&root.join("transfer/teacher.ckpt")), "--support", p(&support),
        "--shots", "3", "--epochs", "1", "--out", p(&root.join("distill")),
    ]);
}

#[test]
fn pipeline_writes_artifacts_and_eval_contracts_hold() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_pipeline(root);
    for f in ["base/base.ckpt", "base/base_losses.csv", "transfer/teacher.ckpt", "distill/student.ckpt"] {
        assert!(root.join(f).is_file(), "{f} missing");
    }
    let echoed = fs::read_to_string(root.join("transfer/transfer.config")).unwrap();
    assert!(echoed.contains("learning_rate"), "{echoed}");

    let test = root.join("data/test");
    let student = root.join("distill/student.ckpt");
    let refused = run(&[
        "eval", "--checkpoint", p(&student), "--test", p(&test), "--support", p(&root.join("data/train")), "--out",
        p(&root.join("e1")),
    ]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("support-free"));

    ok(&["eval", "--checkpoint", p(&student), "--test", p(&test), "--out", p(&root.join("e2"))]);
    let metrics = fs::read_to_string(root.join("e2/metrics.txt")).unwrap();
    assert!(metrics.contains("miou"), "{metrics}");

    let teacher = root.join("transfer/teacher.ckpt");
    let missing = run(&["eval", "--checkpoint", p(&teacher), "--test", p(&test), "--out", p(&root.join("e3"))]);
    assert!(!missing.status.success());

    ok(&[
        "bench", "--checkpoint", p(&teacher), "--checkpoint", p(&student), "--k", "1,2", "--out",
        p(&root.join("bench")),
    ]);
    let csv = fs::read_to_string(root.join("bench/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "{csv}");
}

#[test]
fn fixed_seed_gives_identical_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--train-items", "2", "--test-items", "1", "--source-items", "4", "--image-size", "32"]);
    let mut bytes = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        ok(&["train-base", "--seed", "9", "--data", p(&data.join("source")), "--steps", "2", "--out", p(&out)]);
        bytes.push(fs::read(out.join("base.ckpt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn non_positive_learning_rate_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--train-items", "2", "--test-items", "1", "--source-items", "2", "--image-size", "32"]);
    for lr in ["0", "-0.1"] {
        let out = run(&[
            "train-base", "--data", p(&data.join("source")), "--lr", lr, "--steps", "1", "--out",
            p(&dir.path().join("x")),
        ]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    }
    assert!(!dir.path().join("x/base.ckpt").exists());
}

#[test]
fn config_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "seed = 1\nthis line has no separator\n").unwrap();
    let out = run(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn only_cpu_device_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_distillfss"))
        .env("DISTILLFSS_DEVICE", "cuda")
        .args(["synth", "--out", p(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpu"));
}
