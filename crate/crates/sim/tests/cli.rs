use std::path::Path;
use std::process::Command;

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tushkey-sim"))
}

#[test]
fn run_writes_a_report_and_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("out.json");
    let transcript = dir.path().join("wire.json");
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/happy_path.json");
    let out = sim()
        .args(["run", "--transport", "memory", "--scenario"])
        .arg(&scenario)
        .arg("--report")
        .arg(&report)
        .arg("--transcript")
        .arg(&transcript)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["transport"], "memory");
    assert!(json["rows"].as_array().unwrap().iter().any(|r| r["phase"] == "sync_flow"));
    let wire: serde_json::Value = serde_json::from_slice(&std::fs::read(&transcript).unwrap()).unwrap();
    assert!(wire.as_array().unwrap().len() > 5);
}

#[test]
fn adversary_exits_zero_when_all_hold() {
    let out = sim().arg("adversary").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("6/6 properties hold"), "{stdout}");
}

#[test]
fn bad_scenario_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name":"x","devices":[],"steps":[{"action":"poll","device":"ghost"}]}"#).unwrap();
    let out = sim().args(["run", "--transport", "memory", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
