//! End-to-end tests of the command-line interface: artifacts, determinism,
//! config precedence, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn msnt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msnt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn tiny_train_args<'a>(out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--task",
        "distinguish",
        "--arch",
        "single_rff",
        "--dim",
        "2",
        "--batches",
        "4",
        "--batch-size",
        "4",
        "--latent",
        "8",
        "--hidden",
        "16",
        "--eval-examples",
        "4",
        "--log-every",
        "0",
        "--out",
        out,
    ]
}

#[test]
fn train_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = msnt(&tiny_train_args("run"), dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stem = "distinguish-single_rff-d2-seed1";
    assert!(dir.path().join(format!("run/model-{stem}.ckpt")).exists());
    assert!(dir.path().join(format!("run/trace-{stem}.csv")).exists());
    assert!(dir.path().join(format!("run/loss-{stem}.svg")).exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final accuracy"), "stdout: {stdout}");
}

#[test]
fn repeated_runs_yield_byte_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let stem = "distinguish-single_rff-d2-seed1";
    assert!(msnt(&tiny_train_args("a"), dir.path()).status.success());
    assert!(msnt(&tiny_train_args("b"), dir.path()).status.success());
    let a = std::fs::read(dir.path().join(format!("a/trace-{stem}.csv"))).unwrap();
    let b = std::fs::read(dir.path().join(format!("b/trace-{stem}.csv"))).unwrap();
    assert_eq!(a, b);
    let ca = std::fs::read(dir.path().join(format!("a/model-{stem}.ckpt"))).unwrap();
    let cb = std::fs::read(dir.path().join(format!("b/model-{stem}.ckpt"))).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"task":"distinguish","arch":"single_rff","dim":2,"batches":4,"batch_size":4,"latent":8,"hidden":16,"eval_examples":4,"seed":9}"#,
    )
    .unwrap();
    // seed comes from the file, batches overridden by the flag
    let out = msnt(
        &[
            "train", "--config", "cfg.json", "--batches", "2", "--log-every", "0", "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("batches=2"), "stdout: {stdout}");
    assert!(stdout.contains("seed=9"), "stdout: {stdout}");
    assert!(dir
        .path()
        .join("run/trace-distinguish-single_rff-d2-seed9.csv")
        .exists());
}

#[test]
fn usage_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--task", "kl", "--arch", "no_such_arch"],
        vec!["train", "--task", "no_such_task"],
        vec!["train", "--task", "kl", "--arch", "multiset_transformer", "--dim-range", "2:4"],
        vec!["train", "--task", "kl", "--batches", "0"],
    ];
    for args in cases {
        let out = msnt(&args, dir.path());
        assert_eq!(
            out.status.code(),
            Some(2),
            "args {args:?}, stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn malformed_config_file_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    let out = msnt(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = msnt(&["mi-curve", "--ckpt", "nowhere.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn scaling_writes_the_cost_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = msnt(
        &[
            "scaling",
            "--sizes",
            "16,32",
            "--archs",
            "single_rff,multiset_transformer",
            "--out",
            "sc",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sc/scaling.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("arch,n_plus_m,d,macs,wall_ms"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn table_assembles_finished_trials() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = tiny_train_args("tab");
    args.extend_from_slice(&["--seed", "1"]);
    assert!(msnt(&args, dir.path()).status.success());
    let mut args = tiny_train_args("tab");
    args.extend_from_slice(&["--seed", "2"]);
    assert!(msnt(&args, dir.path()).status.success());
    let out = msnt(
        &[
            "table",
            "--task",
            "distinguish",
            "--dims",
            "2",
            "--archs",
            "single_rff",
            "--trials",
            "2",
            "--out",
            "tab",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("single_rff"), "stdout: {stdout}");
    assert!(stdout.contains('±'), "stdout: {stdout}");
}

#[test]
fn mi_curve_runs_from_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = msnt(
        &[
            "train", "--task", "mi", "--arch", "multiset_transformer", "--dim", "1",
            "--batches", "3", "--batch-size", "4", "--latent", "8", "--hidden", "16",
            "--eval-examples", "2", "--mc-eval-samples", "1000", "--log-every", "0",
            "--out", "mi",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = msnt(
        &[
            "mi-curve",
            "--ckpt",
            "mi/model-mi-multiset_transformer-d1-seed1.ckpt",
            "--dim",
            "1",
            "--set-size",
            "200",
            "--out",
            "mi",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("mi/mi_curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rho,truth,model,ksg"));
    assert_eq!(lines.count(), 19); // rho grid -0.9..=0.9 step 0.1
}
