use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const STAGES: [&str; 6] = ["synth", "train", "predict", "estimate", "assign", "report"];

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peerassign"))
        .arg("--config")
        .arg(fixture())
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn pipeline(out: &Path) {
    for stage in STAGES {
        let o = run(out, &[stage]);
        assert!(
            o.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut all = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            all.extend(files(&p));
        } else {
            all.push(p);
        }
    }
    all.sort();
    all
}

#[test]
fn pipeline_is_reproducible_across_output_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    for name in ["cohort.csv", "params.json", "estimation.json", "policy.json", "summary.txt"] {
        assert!(a.path().join(name).is_file(), "{name} missing");
    }
    assert!(a.path().join("heatmaps/q_afga.pgm").is_file());

    let fa = files(a.path());
    let fb = files(b.path());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a.path()), y.strip_prefix(b.path()));
        assert!(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn assign_without_trained_model_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth"]).status.success());
    let o = run(dir.path(), &["assign"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("params.json") && err.contains("train"), "{err}");
}

#[test]
fn invalid_configuration_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[assignment.ga]\nmutation_prob = 3.0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_peerassign"))
        .args(["--config", bad.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap(), "synth"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = run(dir.path(), &["assign", "--mut-prob", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn changed_configuration_warns_about_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth"]).status.success());
    let o = run(dir.path(), &["--seed", "99", "train"]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stale") && err.contains("cohort.csv"), "{err}");

    let o = run(dir.path(), &["predict"]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("params.json") && err.contains("stale"), "{err}");
}
