//! In-process CLI tests: exit codes and a miniature end-to-end pipeline.

use organoseg::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["organoseg"];
    argv.extend_from_slice(args);
    main_with_args(argv)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&["synth", "--help"]), 0);
}

#[test]
fn bad_flags_exit_one() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["synth"]), 1); // missing --out
    assert_eq!(run(&["scenario", "--case", "9", "--crops", "x", "--manifest", "y", "--out", "z"]), 1);
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(
        run(&[
            "split",
            "--crops",
            missing.to_str().unwrap(),
            "--out",
            dir.path().join("m.json").to_str().unwrap(),
        ]),
        1
    );
    assert_eq!(
        run(&[
            "report",
            "--scores",
            missing.to_str().unwrap(),
            "--out",
            dir.path().join("r").to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn pipeline_synth_prepare_split_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    assert_eq!(
        run(&[
            "synth", "--out", &p("data"), "--stacks", "2", "--slices", "1", "--width", "96",
            "--height", "96",
        ]),
        0
    );
    assert_eq!(
        run(&[
            "prepare", "--data", &p("data"), "--out", &p("crops"), "--window", "48", "--stride",
            "24", "--resize", "24", "--min-object-frac", "0.01",
        ]),
        0
    );
    assert_eq!(
        run(&["split", "--crops", &p("crops"), "--out", &p("manifest.json")]),
        0
    );
    assert!(dir.path().join("manifest.json").is_file());

    // Supervised training with two folds at one epoch, then re-evaluate the
    // saved fold checkpoint and aggregate the per-fold score files.
    assert_eq!(
        run(&[
            "train", "--crops", &p("crops"), "--manifest", &p("manifest.json"), "--out",
            &p("sup"), "--mode", "supervised", "--loss", "dice", "--folds", "2", "--epochs", "1",
            "--batch-size", "8", "--base-channels", "2",
        ]),
        0
    );
    assert!(dir.path().join("sup/fold_1/checkpoint/tensors.bin").is_file());
    assert!(dir.path().join("sup/summary.json").is_file());
    assert_eq!(
        run(&[
            "evaluate", "--crops", &p("crops"), "--manifest", &p("manifest.json"), "--ckpt",
            &p("sup/fold_0/checkpoint"), "--out", &p("eval"), "--overlays", "1",
        ]),
        0
    );
    assert!(dir.path().join("eval/scores.json").is_file());
    assert_eq!(
        run(&["report", "--scores", &p("sup/scores"), "--out", &p("rep"), "--folds", "2"]),
        0
    );
    assert!(dir.path().join("rep/tables/report.csv").is_file());

    // A restoration checkpoint is rejected as the evaluation target.
    assert_eq!(
        run(&[
            "pretrain", "--crops", &p("crops"), "--manifest", &p("manifest.json"), "--out",
            &p("pre"), "--aug", "sobel", "--epochs", "1", "--batch-size", "8",
            "--base-channels", "2",
        ]),
        0
    );
    assert_eq!(
        run(&[
            "evaluate", "--crops", &p("crops"), "--manifest", &p("manifest.json"), "--ckpt",
            &p("pre/checkpoint"), "--out", &p("eval2"),
        ]),
        1
    );
}

#[test]
fn scenario_dry_run_writes_full_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s1");
    assert_eq!(
        main_with_args([
            "organoseg", "scenario", "--case", "1", "--crops", "unused", "--manifest", "unused",
            "--out", out.to_str().unwrap(), "--dry-run",
        ]),
        0
    );
    let plans: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("plans.json")).unwrap()).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 90 * 5);
}
