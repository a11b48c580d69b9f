use std::path::Path;
use std::process::Command;

fn scoreloc(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_scoreloc")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "scoreloc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_relocalise_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    scoreloc(&["synth-gen", "--out", p(&world), "--train-frames", "200", "--test-frames", "3", "--max-test-offset", "0.1"]);
    assert!(world.join("train/intrinsics.txt").exists());
    assert!(world.join("predictor.json").exists());

    let config = dir.path().join("config.toml");
    std::fs::write(&config, "preset = \"indoor\"\nenableRanking = false\n").unwrap();
    let state = dir.path().join("state.bin");
    scoreloc(&[
        "train",
        "--sequence",
        p(&world.join("train")),
        "--predictor",
        p(&world.join("predictor.json")),
        "--config",
        p(&config),
        "--state",
        p(&state),
    ]);

    let stdout = scoreloc(&["relocalise", "--state", p(&state), "--sequence", p(&world.join("test")), "--frame", "201"]);
    let poses: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(poses.as_array().unwrap().len(), 1);
    assert_eq!(poses[0]["index"], 201);
    assert!(poses[0]["pose"].is_array());

    let report = dir.path().join("report.json");
    let timing = dir.path().join("timing.csv");
    scoreloc(&[
        "evaluate",
        "--state",
        p(&state),
        "--sequence",
        p(&world.join("test")),
        "--report",
        p(&report),
        "--csv",
        p(&dir.path().join("frames.csv")),
        "--timing-csv",
        p(&timing),
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["frames"].as_array().unwrap().len(), 3);
    let timing = std::fs::read_to_string(&timing).unwrap();
    assert_eq!(timing.lines().count(), 7);
    assert!(timing.contains("Inlier Sampling and Energy Computation"));

    let novelty = dir.path().join("novelty.csv");
    scoreloc(&[
        "novelty-report",
        "--state",
        p(&state),
        "--train",
        p(&world.join("train")),
        "--test",
        p(&world.join("test")),
        "--out",
        p(&novelty),
    ]);
    assert_eq!(std::fs::read_to_string(&novelty).unwrap().lines().count(), 7);
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "notAKey = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_scoreloc"))
        .args(["train", "--sequence", "missing", "--predictions", "missing", "--config", p(&config), "--state", "s.bin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}
