//! End-to-end tests of the command-line surface: exit codes, the
//! generate → train → eval → segment → reconstruct round trip, manifest
//! plumbing, and byte-level reproducibility of rerun commands.

use std::path::Path;
use std::process::{Command, Output};

use xhved_core::data::{load_volume, read_nifti1, Volume};

fn xhved(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xhved"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("the binary under test should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("the process should not be killed by a signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_exits_zero_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = xhved(&["--help"], dir.path());
    assert_eq!(code(&out), 0, "--help should exit 0");
    assert!(
        stdout(&out).to_lowercase().contains("usage"),
        "--help should print usage text"
    );
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = xhved(&["generate-phantoms", "--count", "1", "--out", "d", "--frobnicate"], dir.path());
    assert_eq!(code(&out), 1, "an unknown flag should exit 1");
    assert!(
        stderr(&out).to_lowercase().contains("usage"),
        "an unknown flag should print usage text, got: {}",
        stderr(&out)
    );
}

#[test]
fn empty_subset_is_rejected_before_any_io() {
    let dir = tempfile::tempdir().unwrap();
    // Neither the checkpoint nor the input volume exists; the argv-level
    // subset contract must still fire first, with exit 1 rather than 2.
    let out = xhved(
        &["segment", "--checkpoint", "no.bin", "--in", "no.nii", "--subset", "0000", "--out", "s.nii"],
        dir.path(),
    );
    assert_eq!(code(&out), 1, "an empty subset is a contract violation");
    assert!(
        stderr(&out).contains("0000"),
        "the error should name the rejected subset, got: {}",
        stderr(&out)
    );
}

#[test]
fn malformed_config_names_the_field_and_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"learning_rte": 0.1}"#).unwrap();
    let out = xhved(
        &["train", "--config", "cfg.json", "--data", "d", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "a malformed config is a parse error");
    assert!(
        stderr(&out).contains("learning_rte"),
        "the error should name the offending field, got: {}",
        stderr(&out)
    );
}

#[test]
fn gradcheck_rejects_names_that_match_no_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = xhved(&["gradcheck", "--module", "not_a_module"], dir.path());
    assert_eq!(code(&out), 1, "an unknown case filter should exit 1");
    assert!(
        stderr(&out).contains("known cases"),
        "the error should list the available case names"
    );
}

#[test]
fn gradcheck_module_filter_runs_the_matching_cases() {
    let dir = tempfile::tempdir().unwrap();
    let out = xhved(&["gradcheck", "--module", "linear"], dir.path());
    assert_eq!(code(&out), 0, "the linear cases should pass: {}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("[PASS] linear"), "filtered output should show the case");
    assert!(
        !text.contains("conv3d"),
        "filtered output should omit non-matching cases"
    );
}

/// One pass through every artifact-producing command at toy scale, plus the
/// reproducibility contract: rerunning with the same manifest inputs gives
/// bit-identical checkpoints and byte-identical CSVs.
#[test]
fn round_trip_produces_consistent_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let gen = xhved(
        &["generate-phantoms", "--count", "2", "--out", "data", "--seed", "7", "--extent", "16"],
        root,
    );
    assert_eq!(code(&gen), 0, "generate-phantoms failed: {}", stderr(&gen));
    assert!(root.join("data/run_manifest.json").is_file());
    let vol: Volume<f32> = load_volume(&root.join("data"), "phantom_000").unwrap();
    assert_eq!(vol.extent(), [16, 16, 16], "phantoms should honor --extent");

    let cfg = r#"{"batch_size":2,"learning_rate":0.003,"pretrain_steps":1,"train_steps":2,"seed":9}"#;
    std::fs::write(root.join("cfg.json"), cfg).unwrap();
    let train_args = [
        "train", "--config", "cfg.json", "--data", "data", "--out", "run",
        "--channels", "2,4,6,8",
    ];
    let train = xhved(&train_args, root);
    assert_eq!(code(&train), 0, "train failed: {}", stderr(&train));
    let log = std::fs::read_to_string(root.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "header plus one row per step");
    let manifest = std::fs::read_to_string(root.join("run/run_manifest.json")).unwrap();
    assert!(
        manifest.contains("\"learning_rate\": 0.003"),
        "the manifest should embed the resolved train config"
    );

    let rerun_args = [
        "train", "--config", "cfg.json", "--data", "data", "--out", "run_b",
        "--channels", "2,4,6,8",
    ];
    let rerun = xhved(&rerun_args, root);
    assert_eq!(code(&rerun), 0, "train rerun failed: {}", stderr(&rerun));
    let ckpt_a = std::fs::read(root.join("run/checkpoint.bin")).unwrap();
    let ckpt_b = std::fs::read(root.join("run_b/checkpoint.bin")).unwrap();
    assert!(ckpt_a == ckpt_b, "same config and data should give bit-identical checkpoints");

    let eval = xhved(
        &["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--out", "grid.csv"],
        root,
    );
    assert_eq!(code(&eval), 0, "eval failed: {}", stderr(&eval));
    let grid = std::fs::read_to_string(root.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 17, "header, 15 subset rows, and an average row");
    assert!(grid.lines().last().unwrap().starts_with("avg,"));
    assert!(root.join("grid.csv.manifest.json").is_file());

    let eval_b = xhved(
        &["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--out", "grid_b.csv"],
        root,
    );
    assert_eq!(code(&eval_b), 0);
    let grid_b = std::fs::read_to_string(root.join("grid_b.csv")).unwrap();
    assert_eq!(grid, grid_b, "evaluation should be byte-reproducible");

    // Segment from a 2-modality subset given as names; files map to the
    // subset's modalities in (fl, t1, t1c, t2) order.
    let seg = xhved(
        &[
            "segment", "--checkpoint", "run/checkpoint.bin",
            "--in", "data/phantom_000_c0.nii", "data/phantom_000_c2.nii",
            "--subset", "fl,t1c", "--out", "seg.nii",
        ],
        root,
    );
    assert_eq!(code(&seg), 0, "segment failed: {}", stderr(&seg));
    let labels: Volume<f32> = read_nifti1(&root.join("seg.nii")).unwrap();
    assert_eq!(labels.extent(), [16, 16, 16]);
    assert!(
        labels.data().iter().all(|v| [0.0, 1.0, 2.0, 3.0].contains(v)),
        "the label map should only hold labels 0..=3"
    );
    assert!(root.join("seg.nii.manifest.json").is_file());

    // The same subset as a 4-bit mask must be interchangeable with names.
    let seg_mask = xhved(
        &[
            "segment", "--checkpoint", "run/checkpoint.bin",
            "--in", "data/phantom_000_c0.nii", "data/phantom_000_c2.nii",
            "--subset", "1010", "--out", "seg_mask.nii",
        ],
        root,
    );
    assert_eq!(code(&seg_mask), 0);
    let by_mask = std::fs::read(root.join("seg_mask.nii")).unwrap();
    let by_names = std::fs::read(root.join("seg.nii")).unwrap();
    assert!(by_mask == by_names, "mask and name subset forms should agree byte-for-byte");

    let rec = xhved(
        &[
            "reconstruct", "--checkpoint", "run/checkpoint.bin",
            "--in", "data/phantom_000_c3.nii", "--subset", "t2", "--out", "recon",
        ],
        root,
    );
    assert_eq!(code(&rec), 0, "reconstruct failed: {}", stderr(&rec));
    let recon: Volume<f32> = load_volume(&root.join("recon"), "recon").unwrap();
    assert_eq!(recon.shape(), [1, 4, 16, 16, 16], "all four modalities should be written");

    // Giving fewer files than the subset names is a contract violation.
    let bad = xhved(
        &[
            "segment", "--checkpoint", "run/checkpoint.bin",
            "--in", "data/phantom_000_c0.nii", "--subset", "fl,t1c", "--out", "s.nii",
        ],
        root,
    );
    assert_eq!(code(&bad), 1, "an input/subset count mismatch should exit 1");
}

/// Each ablation toggle must train and evaluate without error at toy scale.
#[test]
fn ablation_toggles_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = xhved(
        &["generate-phantoms", "--count", "1", "--out", "data", "--seed", "3", "--extent", "16"],
        root,
    );
    assert_eq!(code(&gen), 0);
    std::fs::write(
        root.join("cfg.json"),
        r#"{"batch_size":1,"learning_rate":0.003,"pretrain_steps":0,"train_steps":1,"seed":5}"#,
    )
    .unwrap();

    for flag in ["--no-save-attention", "--no-vila", "--no-sfeca"] {
        let out_dir = format!("run{}", flag.trim_start_matches("--"));
        let train = xhved(
            &[
                "train", "--config", "cfg.json", "--data", "data", "--out", &out_dir,
                "--channels", "2,4,6,8", flag,
            ],
            root,
        );
        assert_eq!(code(&train), 0, "train {flag} failed: {}", stderr(&train));
        let ckpt = format!("{out_dir}/checkpoint.bin");
        let eval = xhved(
            &["eval", "--checkpoint", &ckpt, "--data", "data", "--out", &format!("{out_dir}/g.csv")],
            root,
        );
        assert_eq!(code(&eval), 0, "eval {flag} failed: {}", stderr(&eval));
    }
}
