//! End-to-end runs of the `slip` binary: the gen-data -> pretrain ->
//! evaluate workflow, exit codes, and the gradcheck report format.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slip"))
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("slip_cli_test").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn full_cli_workflow() {
    let dir = work_dir("workflow");
    write(
        &dir.join("genspec.json"),
        r#"{"num_images": 16, "holdout_images": 16, "seed": 3,
            "shapes": ["square", "circle"], "colors": ["red", "blue"]}"#,
    );
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(dir.join("genspec.json"))
        .arg("--out")
        .arg(dir.join("corpus"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    write(
        &dir.join("exp.json"),
        r#"{
          "mode": "slip",
          "seed": 5,
          "out_dir": "run",
          "model": {"preset": "vit_nano"},
          "optim": {"batch_size": 8, "total_steps": 6, "warmup_steps": 1},
          "data": {"manifest": "corpus/manifest.jsonl", "vocab_size": 300},
          "checkpoint_every": 3
        }"#,
    );
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(dir.join("exp.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("run/metrics.csv").exists());
    assert!(dir.join("run/ckpt_0000006.bin").exists());

    write(
        &dir.join("eval.json"),
        r#"{
          "checkpoint": "run/ckpt_0000006.bin",
          "model": {"preset": "vit_nano"},
          "vocab_file": "run/vocab.txt",
          "eval_manifest": "corpus/manifest_eval.jsonl",
          "train_manifest": "corpus/manifest_eval.jsonl",
          "class_names": "corpus/classes.txt",
          "templates": "corpus/templates.txt",
          "settings": ["zeroshot", "probe"],
          "probe": {"epochs": 10}
        }"#,
    );
    let run_eval = || {
        let out = bin()
            .args(["evaluate", "--config"])
            .arg(dir.join("eval.json"))
            .arg("--out")
            .arg(dir.join("summary.json"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(dir.join("summary.json")).unwrap()
    };
    let s1 = run_eval();
    let s2 = run_eval();
    assert_eq!(s1, s2, "evaluate is not deterministic");
    assert!(s1.contains("zeroshot_acc"));
    assert!(s1.contains("probe_acc"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = work_dir("exit2");
    write(&dir.join("bad.json"), r#"{"mode": "slip", "unknown_field": 1}"#);
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(dir.join("bad.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // degenerate synthetic spec is a config error too
    write(&dir.join("spec.json"), r#"{"num_images": 4, "shapes": ["square"]}"#);
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(dir.join("spec.json"))
        .arg("--out")
        .arg(dir.join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = work_dir("exit3");
    // manifest referencing a missing image
    write(
        &dir.join("manifest.jsonl"),
        r#"{"image": "missing.png", "captions": ["a caption"]}"#,
    );
    write(
        &dir.join("exp.json"),
        r#"{
          "mode": "clip", "out_dir": "run", "model": {"preset": "vit_nano"},
          "optim": {"batch_size": 1, "total_steps": 2, "warmup_steps": 1},
          "data": {"manifest": "manifest.jsonl", "vocab_size": 300}
        }"#,
    );
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(dir.join("exp.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_reports_per_op_lines() {
    let out = bin().args(["gradcheck", "--seed", "1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in ["matmul", "softmax", "layer_norm", "gelu", "l2_normalize", "clip_loss", "simclr_loss"] {
        assert!(stdout.contains(op), "report missing {op}:\n{stdout}");
    }
    assert!(stdout.contains("max rel err"));
    assert!(stdout.contains("all gradient checks passed"));
}

#[test]
fn mode_override_flag_is_honored() {
    let dir = work_dir("override");
    write(
        &dir.join("genspec.json"),
        r#"{"num_images": 8, "seed": 1, "shapes": ["square", "circle"], "colors": ["red", "blue"]}"#,
    );
    bin()
        .args(["gen-data", "--config"])
        .arg(dir.join("genspec.json"))
        .arg("--out")
        .arg(dir.join("corpus"))
        .status()
        .unwrap();
    write(
        &dir.join("exp.json"),
        r#"{
          "mode": "slip", "out_dir": "run", "model": {"preset": "vit_nano"},
          "optim": {"batch_size": 8, "total_steps": 2, "warmup_steps": 1},
          "data": {"manifest": "corpus/manifest.jsonl", "vocab_size": 300}
        }"#,
    );
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(dir.join("exp.json"))
        .args(["--mode-override", "clip", "--seed", "9", "--out"])
        .arg(dir.join("run2").display().to_string())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(dir.join("run2/resolved_config.json")).unwrap();
    assert!(resolved.contains("\"clip\""));
    assert!(resolved.contains("\"seed\": 9"));
    // clip mode: ssl column all zeros
    let csv = fs::read_to_string(dir.join("run2/metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(4), Some("0"));
    }
}
