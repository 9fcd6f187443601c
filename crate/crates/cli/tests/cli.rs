//! End-to-end command tests against the built binary: exit codes, console
//! contracts, and file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("repdet-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "variant = n\nwidth_mult = 0.25\nnum_classes = 3\n",
    )
    .unwrap();
    path
}

fn stdout_str(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let out = repdet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown subcommand"));
    assert!(err.contains("usage:"));
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = repdet(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage:"));
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = workdir("flags");
    let cfg = tiny_config(&dir);
    let out = repdet(&[
        "build",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("m.rdet").to_str().unwrap(),
        "--frobnicate",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown flag"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn build_is_reproducible_and_fuse_verifies() {
    let dir = workdir("build-fuse");
    let cfg = tiny_config(&dir);
    let m1 = dir.join("m1.rdet");
    let m2 = dir.join("m2.rdet");
    for m in [&m1, &m2] {
        let out = repdet(&[
            "build",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            m.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let b1 = std::fs::read(&m1).unwrap();
    let b2 = std::fs::read(&m2).unwrap();
    assert_eq!(b1, b2, "same flags + seed must give identical checkpoints");

    let fused = dir.join("fused.rdet");
    let out = repdet(&[
        "fuse",
        "--in",
        m1.to_str().unwrap(),
        "--out",
        fused.to_str().unwrap(),
        "--verify",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_str(&out).contains("fusion verified"));

    // fusing a fused checkpoint is a precondition failure
    let out = repdet(&[
        "fuse",
        "--in",
        fused.to_str().unwrap(),
        "--out",
        dir.join("x.rdet").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn count_emits_key_value_lines_with_json_like() {
    let out = repdet(&["count", "--variant", "n", "--input", "640", "--json-like"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_str(&out);
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').expect("key=value lines");
        kv.insert(k.to_string(), v.to_string());
    }
    let params: u64 = kv["params"].parse().unwrap();
    let flops: u64 = kv["flops"].parse().unwrap();
    let macs: u64 = kv["macs"].parse().unwrap();
    assert_eq!(flops, 2 * macs, "both conventions reported");
    // the unfused training-time graph carries the multi-branch parameters
    assert!(params > 2_000_000, "full-width model params: {params}");
}

#[test]
fn train_eval_quantize_bench_pipeline() {
    let dir = workdir("pipeline");
    let cfg = tiny_config(&dir);
    let run = dir.join("run");

    let out = repdet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        "synth:12:3",
        "--img-size",
        "32",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "9",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.rdet").exists());
    assert!(run.join("model_ema.rdet").exists());
    let log = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert!(log.starts_with("epoch\tlr\t"));
    assert_eq!(log.lines().count(), 3, "header + one line per epoch");

    let out = repdet(&[
        "eval",
        "--in",
        run.join("model_ema.rdet").to_str().unwrap(),
        "--data",
        "synth:6:4",
        "--img-size",
        "32",
        "--mode",
        "border",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_str(&out);
    assert!(text.contains("ap = ") && text.contains("ap50 = "));

    // quantize wants a fused checkpoint
    let fused = dir.join("fused.rdet");
    let out = repdet(&[
        "fuse",
        "--in",
        run.join("model_ema.rdet").to_str().unwrap(),
        "--out",
        fused.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = dir.join("sens.tsv");
    let qout = dir.join("quant.rdet");
    let out = repdet(&[
        "quantize",
        "--in",
        fused.to_str().unwrap(),
        "--calib",
        "synth:4:7",
        "--img-size",
        "32",
        "--keep-float",
        "6",
        "--report",
        report.to_str().unwrap(),
        "--out",
        qout.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = std::fs::read_to_string(&report).unwrap();
    assert!(rep.starts_with("layer\tsnr_db\tcosine\tmse\trank\tkept_float"));
    assert_eq!(rep.lines().filter(|l| l.ends_with("\t1")).count(), 6);
    assert!(qout.exists());

    // quantize on an unfused checkpoint is a precondition failure
    let out = repdet(&[
        "quantize",
        "--in",
        run.join("model_ema.rdet").to_str().unwrap(),
        "--calib",
        "synth:2:1",
        "--img-size",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = repdet(&[
        "bench",
        "--in",
        run.join("model_ema.rdet").to_str().unwrap(),
        "--repeat",
        "3",
        "--input",
        "64",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_str(&out);
    assert!(text.contains("unfused:") && text.contains("fused  :"));
    std::fs::remove_dir_all(&dir).ok();
}
