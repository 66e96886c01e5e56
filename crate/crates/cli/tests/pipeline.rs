//! End-to-end exercises of the `dml` binary: artifact round trips,
//! run-to-run determinism, config-file precedence, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dml(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dml"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dml")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dml(dir, args);
    assert!(
        out.status.success(),
        "dml {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_and_pairs(dir: &Path) {
    ok(
        dir,
        &[
            "gen",
            "--classes",
            "4",
            "--per-class",
            "30",
            "--dim",
            "16",
            "--cluster-spread",
            "0.5",
            "--center-spread",
            "2.0",
            "--seed",
            "11",
            "--out",
            "g",
        ],
    );
    ok(
        dir,
        &[
            "pairs",
            "--data",
            "g/dataset.csv",
            "--n-similar",
            "800",
            "--n-dissimilar",
            "800",
            "--seed",
            "11",
            "--out",
            "p",
        ],
    );
}

#[test]
fn full_pipeline_produces_model_and_pr_curve() {
    let tmp = TempDir::new().unwrap();
    gen_and_pairs(tmp.path());
    ok(
        tmp.path(),
        &[
            "sequential",
            "--data",
            "g/dataset.csv",
            "--pairs",
            "p/pairs.dmlp",
            "--k",
            "6",
            "--eta",
            "0.02",
            "--batch-similar",
            "40",
            "--batch-dissimilar",
            "40",
            "--steps",
            "200",
            "--seed",
            "5",
            "--out",
            "s",
        ],
    );
    let stdout = ok(
        tmp.path(),
        &[
            "eval",
            "--model",
            "s/model.dmlm",
            "--data",
            "g/dataset.csv",
            "--pairs",
            "p/pairs.dmlp",
            "--out",
            "e",
        ],
    );
    let ap_line = stdout
        .lines()
        .find(|l| l.starts_with("average_precision="))
        .expect("AP line");
    let ap: f64 = ap_line["average_precision=".len()..].parse().unwrap();
    assert!((0.0..=1.0).contains(&ap), "AP out of range: {ap}");

    let curve = std::fs::read_to_string(tmp.path().join("e/pr_curve.csv")).unwrap();
    assert!(curve.starts_with("threshold,precision,recall"));
    assert!(curve.lines().count() > 2);
    assert!(tmp.path().join("s/manifest.txt").exists());
    assert!(tmp.path().join("s/trace_sequential.csv").exists());
}

#[test]
fn sequential_repeat_runs_are_bitwise_identical() {
    let tmp = TempDir::new().unwrap();
    gen_and_pairs(tmp.path());
    let train = |out: &str| {
        ok(
            tmp.path(),
            &[
                "sequential",
                "--data",
                "g/dataset.csv",
                "--pairs",
                "p/pairs.dmlp",
                "--k",
                "6",
                "--steps",
                "150",
                "--seed",
                "42",
                "--batch-similar",
                "30",
                "--batch-dissimilar",
                "30",
                "--out",
                out,
            ],
        );
    };
    train("run_a");
    train("run_b");
    let a = std::fs::read(tmp.path().join("run_a/model.dmlm")).unwrap();
    let b = std::fs::read(tmp.path().join("run_b/model.dmlm")).unwrap();
    assert_eq!(a, b, "same seed must reproduce the model byte-for-byte");
}

#[test]
fn role_flag_is_an_alias_for_the_subcommand() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &[
            "--role",
            "gen",
            "--classes",
            "2",
            "--per-class",
            "5",
            "--dim",
            "4",
            "--seed",
            "1",
            "--out",
            "g",
        ],
    );
    assert!(tmp.path().join("g/dataset.csv").exists());
}

#[test]
fn flags_override_config_file_values() {
    let tmp = TempDir::new().unwrap();
    gen_and_pairs(tmp.path());
    std::fs::write(
        tmp.path().join("train.conf"),
        "# training defaults\nk=3\nsteps=50\nseed=9\ndata=g/dataset.csv\npairs=p/pairs.dmlp\nbatch-similar=20\nbatch-dissimilar=20\n",
    )
    .unwrap();

    // config only: k comes from the file
    ok(
        tmp.path(),
        &["sequential", "--config", "train.conf", "--out", "from_conf"],
    );
    let bytes = std::fs::read(tmp.path().join("from_conf/model.dmlm")).unwrap();
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    assert_eq!(k, 3);

    // flag wins over the config value
    ok(
        tmp.path(),
        &[
            "sequential",
            "--config",
            "train.conf",
            "--k",
            "5",
            "--out",
            "from_flag",
        ],
    );
    let bytes = std::fs::read(tmp.path().join("from_flag/model.dmlm")).unwrap();
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    assert_eq!(k, 5);
}

#[test]
fn missing_input_reports_one_line_error_and_nonzero_exit() {
    let tmp = TempDir::new().unwrap();
    let out = dml(
        tmp.path(),
        &[
            "sequential",
            "--data",
            "nope.csv",
            "--pairs",
            "nope.dmlp",
            "--k",
            "4",
            "--out",
            "o",
        ],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
    assert_eq!(stderr.trim().lines().count(), 1, "stderr was: {stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_dml"))
        .args(["gen", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sparse_format_round_trips_through_the_cli() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &[
            "gen",
            "--classes",
            "3",
            "--per-class",
            "10",
            "--dim",
            "8",
            "--seed",
            "2",
            "--format",
            "sparse-indexed",
            "--out",
            "g",
        ],
    );
    ok(
        tmp.path(),
        &[
            "pairs",
            "--data",
            "g/dataset.sparse",
            "--format",
            "sparse-indexed",
            "--n-similar",
            "100",
            "--n-dissimilar",
            "100",
            "--seed",
            "2",
            "--out",
            "p",
        ],
    );
    assert!(tmp.path().join("p/pairs.dmlp").exists());
}
