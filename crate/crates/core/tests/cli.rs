use std::path::Path;
use std::process::{Command, Output};

fn evfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evfl"))
        .args(args)
        .output()
        .expect("spawn evfl")
}

fn ok(args: &[&str]) -> String {
    let o = evfl(args);
    assert!(
        o.status.success(),
        "evfl {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth -> featurize into `root/raw` and `root/feat`.
fn features(root: &Path, stations: &str) -> std::path::PathBuf {
    let (raw, feat) = (root.join("raw"), root.join("feat"));
    ok(&["synth", "--out", s(&raw), "--stations", stations, "--seed", "5", "--sessions-min", "20", "--sessions-max", "30"]);
    ok(&["featurize", "--in", s(&raw), "--out", s(&feat)]);
    feat
}

#[test]
fn federated_mlp_pipeline_and_config_replay_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let feat = features(root.path(), "4");
    assert!(feat.join("features.csv").is_file());

    let run1 = root.path().join("run1");
    let line = ok(&[
        "train", "--in", s(&feat), "--out", s(&run1), "--mode", "federated", "--model", "mlp",
        "--rounds", "6", "--fraction", "0.5", "--seed", "2",
    ]);
    assert!(line.contains("test_mae="), "{line}");
    for f in ["config.json", "preprocess.json", "checkpoint.bin", "rounds.csv", "predictions.csv", "metrics.json"] {
        assert!(run1.join(f).is_file(), "missing {f}");
    }
    let rounds = std::fs::read_to_string(run1.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().next().unwrap(), "round,val_mae,val_rmse,test_mae,test_rmse,clients");
    assert_eq!(rounds.lines().count(), 7);

    let run2 = root.path().join("run2");
    ok(&["train", "--config", s(&run1.join("config.json")), "--out", s(&run2)]);
    for f in ["rounds.csv", "predictions.csv", "checkpoint.bin", "preprocess.json", "metrics.json"] {
        assert_eq!(
            std::fs::read(run1.join(f)).unwrap(),
            std::fs::read(run2.join(f)).unwrap(),
            "{f} differs on replay"
        );
    }
}

#[test]
fn analyze_evaluate_and_report() {
    let root = tempfile::tempdir().unwrap();
    let feat = features(root.path(), "5");

    let het = root.path().join("het");
    let line = ok(&["analyze", "--in", s(&feat), "--out", s(&het)]);
    assert!(line.contains("IID"), "{line}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(het.join("heterogeneity.json")).unwrap()).unwrap();
    assert!(v["tau_iid"].as_f64().unwrap() > 0.0);

    let (e1, e2) = (root.path().join("e1"), root.path().join("e2"));
    ok(&["evaluate", "--in", s(&feat), "--out", s(&e1), "--model", "dummy-mean", "--seeds", "0,1,2"]);
    ok(&["evaluate", "--in", s(&feat), "--out", s(&e2), "--model", "lr", "--epochs", "5", "--seeds", "0,1"]);
    for seed in 0..3 {
        assert!(e1.join(format!("seed-{seed}/predictions.csv")).is_file());
    }
    let merged = root.path().join("merged");
    let table = ok(&["report", "--in", s(&e1), "--in", s(&e2), "--out", s(&merged)]);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.contains("dummy-mean") && table.contains("lr"));
    assert_eq!(std::fs::read_to_string(merged.join("results.csv")).unwrap(), table);
}

#[test]
fn exit_codes() {
    assert_eq!(evfl(&["--help"]).status.code(), Some(0));
    assert_eq!(evfl(&["no-such-command"]).status.code(), Some(1));

    let root = tempfile::tempdir().unwrap();
    let o = evfl(&["train", "--in", s(root.path()), "--out", s(&root.path().join("x")), "--fraction", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("client_fraction"));

    let o = evfl(&["featurize", "--in", s(&root.path().join("absent")), "--out", s(&root.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
