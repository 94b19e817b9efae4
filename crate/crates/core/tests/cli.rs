//! End-to-end runs of the `maskprune` binary on a tiny model.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "n_layers=2",
    "n_heads=4",
    "head_dim=4",
    "d_hidden=16",
    "d_ffn=24",
    "seq_len=32",
    "synthetic_bytes=20000",
    "pretrain_steps=40",
    "pretrain_batch_size=4",
    "pretrain_window=32",
    "pretrain_lr=0.01",
    "pretrain_warmup=5",
    "batch_size=2",
    "window=16",
    "eta4=0.001",
];

fn maskprune(args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskprune"));
    cmd.args(args).env("RUST_LOG", "warn");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn sets(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    v.push(format!("teacher={}", dir.join("teacher.json").display()));
    v.push(format!("out_dir={}", dir.join("out").display()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn pretrain_prune_eval_stats_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = maskprune(&["pretrain"], &sets(d, &[]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("teacher.json").exists());

    let o = maskprune(&["prune"], &sets(d, &["iterations=150"]));
    let c = code(&o);
    assert!(
        c == 0 || c == 3,
        "prune exited {c}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let out = d.join("out");
    for f in [
        "trace.csv",
        "summary.json",
        "mask_stats.csv",
        "mask_hist.csv",
        "plan.json",
        "pruned.json",
        "state.json",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 150);
    assert_eq!(
        c == 0,
        summary["status"]["resource_met"] == true && summary["status"]["sparsity_met"] == true
    );
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 151);

    // the saved effective config reproduces the settings
    let o = maskprune(
        &[
            "eval",
            out.join("pruned.json").to_str().unwrap(),
            "--config",
            out.join("config.toml").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["eval_ppl"].as_f64().unwrap().is_finite());
    assert_eq!(report["masked"], false);

    let o = maskprune(
        &[
            "stats",
            out.join("state.json").to_str().unwrap(),
            "--out-dir",
            d.join("st").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert!(d.join("st/mask_hist.csv").exists());
    // a dense checkpoint carries no masks
    let o = maskprune(
        &[
            "stats",
            d.join("teacher.json").to_str().unwrap(),
            "--out-dir",
            d.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 2);

    let o = maskprune(
        &[
            "sweep",
            "--param",
            "interval_start",
            "--values",
            "1,5",
            "--seeds",
            "0,1",
        ],
        &sets(d, &["iterations=20", "interval_end=1"]),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(out.join("sweep.json").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&maskprune(&["prune"], &sets(d, &["no_such_key=1"]))),
        2
    );
    assert_eq!(
        code(&maskprune(&["prune"], &sets(d, &["iterations=many"]))),
        2
    );
    // teacher file missing
    assert_eq!(code(&maskprune(&["prune"], &sets(d, &[]))), 2);
    assert_eq!(
        code(&maskprune(&["prune", "--config", "/nonexistent.toml"], &[])),
        2
    );
    assert_eq!(code(&maskprune(&["frobnicate"], &[])), 2);
    let o = maskprune(
        &["sweep", "--param", "lr", "--values", "1,2"],
        &sets(d, &[]),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn unmet_constraint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&maskprune(
            &["pretrain"],
            &sets(d, &["pretrain_steps=10", "pretrain_max_ppl_ratio=1.0"])
        )),
        0
    );
    // three iterations cannot reach the budget
    let o = maskprune(&["prune"], &sets(d, &["iterations=3"]));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("out/summary.json").exists());
}
