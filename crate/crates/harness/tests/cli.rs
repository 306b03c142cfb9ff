use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcrl_core::evalx::{read_metrics, EvalMode};
use dcrl_core::scmgen::{load_dataset, recorded_checksum};
use dcrl_core::trainer::{load_checkpoint, read_log, CHECKPOINT_FILE, LOG_FILE};

const TINY_TRAIN: &str = r#"
phase_epochs = [1, 1, 1]
batch_size = 64
encoder_hidden = 16
flow_hidden = 8
val_pairs = 32

[score_net]
width = 16
n_blocks = 1
emb_dim = 8
layout = "flat"
"#;

fn dcrl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcrl"))
        .args(args)
        .env("DCRL_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate(root: &Path, d: usize, seed: u64, n_test: usize) -> PathBuf {
    let out = root.join(format!("data_d{d}_s{seed}"));
    ok(&dcrl(
        root,
        &[
            "generate-data",
            "--d",
            &d.to_string(),
            "--seed",
            &seed.to_string(),
            "--n-train",
            "256",
            "--n-val",
            "64",
            "--n-test",
            &n_test.to_string(),
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    out
}

#[test]
fn generate_data_is_reproducible_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let a = generate(root, 5, 0, 64);
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.d(), 5);
    let first = recorded_checksum(&a).unwrap();
    let again = generate(root, 5, 0, 64);
    assert_eq!(recorded_checksum(&again).unwrap(), first);

    let summary = ok(&dcrl(root, &["generate-data", "--d", "3", "--n-train", "10", "--n-val", "5", "--n-test", "5"]));
    assert!(summary.contains("edges="), "{summary}");
    assert!(summary.contains("target histogram"));
    assert!(root.join("data").join("d3_seed0").exists());

    for bad in [
        vec!["generate-data", "--d", "0"],
        vec!["generate-data", "--d", "17"],
        vec!["generate-data"],
        vec!["generate-data", "--d", "3", "--n-test", "0"],
        vec!["generate-data", "--d", "3", "--edge-prob", "1.5"],
        vec!["no-such-command"],
    ] {
        let out = dcrl(root, &bad);
        assert_eq!(out.status.code(), Some(1), "{bad:?}: {}", stderr(&out));
        assert!(!stderr(&out).is_empty());
    }
}

#[test]
fn train_resume_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = generate(root, 3, 1, 64);
    let cfg = root.join("train.toml");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let out_dir = root.join("run");
    let base = [
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];

    let mut partial = base.to_vec();
    partial.extend(["--stop-after", "1"]);
    ok(&dcrl(root, &partial));
    assert_eq!(load_checkpoint(out_dir.join(CHECKPOINT_FILE)).unwrap().meta.next_epoch, 1);

    let mut resume = base.to_vec();
    resume.push("--resume");
    let text = ok(&dcrl(root, &resume));
    assert!(text.contains("trained epochs 1..3"), "{text}");
    let log = read_log(out_dir.join(LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.global_epoch).collect::<Vec<_>>(), vec![0, 1, 2]);

    // resuming under a different config is refused
    let mut mismatch = resume.clone();
    mismatch.extend(["--phase-epochs", "2,2,2"]);
    assert_eq!(dcrl(root, &mismatch).status.code(), Some(2));

    fs::write(&cfg, TINY_TRAIN.replace("batch_size", "batch_sise")).unwrap();
    let out = dcrl(root, &base);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("batch_sise"), "{}", stderr(&out));

    fs::write(&cfg, TINY_TRAIN.replace("layout = \"flat\"", "layout = \"round\"")).unwrap();
    assert_eq!(dcrl(root, &base).status.code(), Some(1));

    let out = dcrl(root, &["train", "--data", root.join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing"));

    let out = dcrl(root, &["train", "--data", data.to_str().unwrap(), "--phase-epochs", "1,2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_modes_adapters_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = generate(root, 3, 2, 300);
    let cfg = root.join("train.toml");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let run = root.join("run");
    ok(&dcrl(
        root,
        &["train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()],
    ));
    let eval_cfg = root.join("eval.toml");
    fs::write(&eval_cfg, "[enco]\nalternations = 2\nsteps_per_alternation = 20\nmin_count = 5\n[dci]\nmin_samples_leaf = 5\n").unwrap();
    let ckpt = run.join(CHECKPOINT_FILE);
    let common = [
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--eval-config",
        eval_cfg.to_str().unwrap(),
    ];

    ok(&dcrl(root, &common));
    let single = read_metrics(run.join("metrics_single.jsonl")).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].mode, EvalMode::Single);
    assert_eq!(single[0].n_pairs, 300);

    let mut traj = common.to_vec();
    traj.extend(["--mode", "trajectory"]);
    ok(&dcrl(root, &traj));
    let rows = read_metrics(run.join("metrics_trajectory.jsonl")).unwrap();
    assert_eq!(rows.len(), 11);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.t, Some(k as f64 / 10.0));
    }

    let other = generate(root, 4, 2, 64);
    let mut wrong = common.to_vec();
    wrong[2] = other.to_str().unwrap();
    let out = dcrl(root, &wrong);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("d=3"), "{}", stderr(&out));

    let out = dcrl(root, &["evaluate", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "model adapter needs a checkpoint");

    fs::write(&eval_cfg, "[enco]\nalternation = 2\n").unwrap();
    let out = dcrl(root, &common);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("alternation"));
}

#[test]
fn oracle_adapter_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = generate(root, 5, 3, 10_000);
    let out_file = root.join("oracle.jsonl");
    ok(&dcrl(
        root,
        &["evaluate", "--data", data.to_str().unwrap(), "--adapter", "oracle", "--out", out_file.to_str().unwrap()],
    ));
    let rows = read_metrics(&out_file).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert_eq!(r.adapter, "ground_truth");
    assert!((r.dci_d - 1.0).abs() < 1e-6 && (r.dci_c - 1.0).abs() < 1e-6, "{r:?}");
    assert_eq!(r.shd, 0);
    assert_eq!(r.intervention_accuracy, 1.0);

    let text = ok(&dcrl(root, &["evaluate", "--data", data.to_str().unwrap(), "--adapter", "random"]));
    assert!(text.contains("random"));
    assert!(root.join("eval").join("data_d5_s3").join("random_metrics_single.jsonl").exists());
}
