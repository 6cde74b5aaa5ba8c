use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_traj-diffuse"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn end_to_end_on_a_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["train", "--videos", "4", "--epochs", "1", "--steps", "8", "--out", "tiny.bin"]);
    assert!(dir.join("tiny.json").exists());

    std::fs::write(dir.join("run.json"), r#"{"mode": "tid", "cg": 50.0, "seed": 3}"#).unwrap();
    let manifest = ok(dir, &["generate", "--checkpoint", "tiny.bin", "--config", "run.json", "--omega", "1", "--out", "gen"]);
    assert!(manifest.trim().ends_with("sample.json"));
    assert!(dir.join("gen/sample_f07.pgm").exists());
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("gen/sample_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["cg"], 50.0);
    assert_eq!(resolved["omega"], 1.0);
    assert_eq!(resolved["seed"], 3);

    // same flags, same bytes
    ok(dir, &["generate", "--checkpoint", "tiny.bin", "--config", "run.json", "--omega", "1", "--out", "gen", "--stem", "again"]);
    assert_eq!(std::fs::read(dir.join("gen/sample.raw")).unwrap(), std::fs::read(dir.join("gen/again.raw")).unwrap());

    let report = ok(dir, &["evaluate", "--video", "gen/sample.json", "--trajectory", "gen/sample_trajectory.json"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["score"]["frames"], 8);

    ok(dir, &["variance-study", "--checkpoint", "tiny.bin", "--layer", "cross", "--omega", "0", "--out", "trace.csv"]);
    let csv = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,config,variance,mse_vs_baseline"));
    assert_eq!(csv.lines().count(), 1 + 4 * 8);
    assert!(dir.join("trace.gp").exists());

    ok(dir, &["sweep", "--checkpoint", "tiny.bin", "--seeds", "2", "--cg-variant", "63"]);
    let rows = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6 * 2);
    let dev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("deviations.json")).unwrap()).unwrap();
    assert_eq!(dev["report"]["checks"].as_array().unwrap().len(), 3);

    ok(dir, &["gen-data", "--videos", "3", "--out", "data"]);
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("data/index.json")).unwrap()).unwrap();
    assert_eq!(index["videos"].as_array().unwrap().len(), 3);
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["train", "--videos", "2", "--epochs", "1", "--steps", "4", "--out", "m.bin"]);
    for args in [
        &["generate", "--checkpoint", "m.bin", "--gamma", "1.5"][..],
        &["generate", "--checkpoint", "missing.bin"],
        &["generate", "--checkpoint", "m.bin", "--steps", "9"],
        &["generate", "--checkpoint", "m.bin", "--mode", "fast"],
        &["variance-study", "--checkpoint", "m.bin", "--layer", "decoder"],
    ] {
        assert_eq!(cli(dir, args).status.code(), Some(2), "{args:?}");
    }
    std::fs::write(dir.join("bad.json"), r#"{"inner_steps": 2}"#).unwrap();
    assert_eq!(cli(dir, &["generate", "--checkpoint", "m.bin", "--config", "bad.json"]).status.code(), Some(2));
}
