//! End-to-end tests driving the compiled binary the way a user would.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fusenet");

/// Tiny run shared by the tests: 2 synthetic frames, an 8-channel
/// single-block model, three total epochs.
const TINY: &[&str] = &[
    "--synthetic-frames",
    "2",
    "--channels",
    "8",
    "--blocks",
    "1",
    "--k",
    "4",
    "--height",
    "32",
    "--width",
    "64",
    "--milestones-l2",
    "",
    "--milestones-fine",
    "",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn train(out: &Path, epochs_l2: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--epochs-l2", epochs_l2, "--epochs-fine", "0"]);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let st = train(&out, "2", &[]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("config.txt").exists());

    let ckpt = out.join("model.ckpt");
    let mut args = vec![
        "eval",
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let ev = run(&args);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let table = String::from_utf8_lossy(&ev.stdout).to_string();
    assert!(table.contains("rmse_mm") && table.contains("aggregate"));
    assert!(out.join("metrics.txt").exists());

    let mut args = vec![
        "predict",
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--viz",
        "--synthetic-frames",
        "1",
    ];
    args.extend_from_slice(&TINY[2..]);
    let pr = run(&args);
    assert!(pr.status.success(), "{}", String::from_utf8_lossy(&pr.stderr));
    let pred_png = out.join("synth_0000_pred.png");
    assert!(pred_png.exists());
    assert!(out.join("synth_0000_viz.png").exists());
    // Saved predictions reload to within the encoding quantum (1/256 m).
    let reloaded = fusenet::dataio::load_depth_png(&pred_png).unwrap();
    assert_eq!((reloaded.height, reloaded.width), (32, 64));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    assert!(train(&full, "3", &[]).status.success());
    // "Interrupt" after two epochs, then resume to the same horizon.
    assert!(train(&split, "2", &[]).status.success());
    let ckpt = split.join("model.ckpt");
    let st = train(&split, "3", &["--checkpoint", ckpt.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let a = std::fs::read(full.join("model.ckpt")).unwrap();
    let b = std::fs::read(split.join("model.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from the uninterrupted run");
}

#[test]
fn config_file_is_applied_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nchannels = 8\nblocks = 1\nk = 4\nheight = 32\nwidth = 64\n\
         synthetic_frames = 2\nepochs_l2 = 1\nepochs_fine = 0\nmilestones_l2 =\nmilestones_fine =\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    // --seed overrides nothing in the file but must be accepted alongside it.
    let st = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let echo = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("channels = 8"));
    assert!(echo.contains("seed = 7"), "flag did not override the default");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    // Config error: unknown key in the config file.
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "channles = 8\n").unwrap();
    let st = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(2), "{}", String::from_utf8_lossy(&st.stderr));
    // Config error: invalid value on a flag-mirrored key.
    let st = run(&["train", "--channels", "7"]); // odd widths are rejected
    assert_eq!(st.status.code(), Some(2));
    // Data error: missing dataset directory.
    let st = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("absent.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(3), "{}", String::from_utf8_lossy(&st.stderr));
}

#[test]
fn bench_reports_machine_readable_timings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let st = run(&[
        "bench",
        "--out",
        out.to_str().unwrap(),
        "--sample-budget",
        "500",
        "--k",
        "4",
        "--channels",
        "8",
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let text = std::fs::read_to_string(out.join("bench.txt")).unwrap();
    for key in [
        "kdtree_build_min_ms",
        "knn_tree_1k_queries_median_ms",
        "knn_brute_1k_queries_median_ms",
        "contconv_fwd_bwd_median_ms",
        "fuse_block_forward_median_ms",
    ] {
        assert!(text.contains(key), "bench output missing {key}:\n{text}");
    }
}
