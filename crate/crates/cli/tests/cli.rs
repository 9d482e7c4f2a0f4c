use std::path::Path;
use std::process::{Command, Output};

fn autoad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoad")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(autoad(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(autoad(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(autoad(&["--config", path(&bad), "config"]).status.code(), Some(1));
    let missing = dir.path().join("nothing");
    assert_eq!(autoad(&["--data", path(&missing), "--out", path(&missing), "ingest"]).status.code(), Some(1));
}

#[test]
fn synth_then_ingest_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let base = ["--data", path(&data), "--out", path(&out)];
    let run = |extra: &[&str]| {
        let mut a: Vec<&str> = base.to_vec();
        a.extend_from_slice(extra);
        autoad(&a)
    };
    let o = run(&["synth", "--movies", "2", "--duration", "60"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["ingest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary.as_array().map(Vec::len), Some(2));
    let o = run(&["config"]);
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["paths"]["data_root"], path(&data));
}

#[test]
fn evaluate_files_mode() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.csv");
    let refs = dir.path().join("ref.csv");
    std::fs::write(&pred, "movie_id,start_s,end_s,text\nm,1,3,a man walks in.\nm,5,7,the door opens.\n").unwrap();
    std::fs::write(&refs, "start_s,end_s,kind,text\n1,3,AD,a man walks in.\n5,7,AD,the door opens.\n").unwrap();
    let o = autoad(&["evaluate", "--pred", path(&pred), "--ref", path(&refs), "--metrics", "rouge,cider"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((m["rouge_l"].as_f64().unwrap() - 100.0).abs() < 1e-9, "{m}");
}
