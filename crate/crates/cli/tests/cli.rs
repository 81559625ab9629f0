use std::path::Path;
use std::process::{Command, Output};

use ldaprune::io::{load_model, save_model};
use ldaprune::prune::{apply_prune, PrunePlan};

fn ldaprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldaprune")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(out: &Path) {
    let o = ldaprune(&["train", "--per-class", "20", "--epochs", "2", "--seed", "7", "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn training_twice_writes_identical_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&a);
    train(&b);
    for f in ["model.ldap", "train_log.csv", "manifest.json", "report.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ldap");
    std::fs::write(&bogus, b"NOPE1234").unwrap();
    let o = ldaprune(&["extract", "--model", s(&bogus), "--per-class", "4", "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "bad_magic");

    let o = ldaprune(&["bench", "--model", s(&bogus), "--out", s(&dir.path().join("y"))]);
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "usage");
}

#[test]
fn bench_of_identity_prune_is_even() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train(&run);
    let model = load_model(run.join("model.ldap")).unwrap();
    let keep = model
        .conv_indices()
        .iter()
        .map(|&l| (0..model.conv(l).unwrap().weight.shape()[0]).collect())
        .collect();
    let plan = PrunePlan::from_keep_lists(&model, keep, 0.0).unwrap();
    let same = dir.path().join("same.ldap");
    save_model(&apply_prune(&model, &plan).unwrap(), &same).unwrap();

    let out = dir.path().join("bench");
    let o = ldaprune(&[
        "bench", "--model", s(&run.join("model.ldap")), "--pruned", s(&same), "--per-class", "20",
        "--bench-runs", "60", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (orig, speedup): (f64, f64) = (f[2].parse().unwrap(), f[4].parse().unwrap());
        // Sub-microsecond layers are below timer resolution.
        if orig >= 1e-3 {
            assert!((0.8..=1.25).contains(&speedup), "{line}");
        }
    }
}
