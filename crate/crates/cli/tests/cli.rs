use std::path::Path;
use std::process::{Command, Output};

fn dc_twin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dc-twin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn synth(out: &Path, days: &str) {
    let status = dc_twin(&[
        "synth",
        "--profile",
        "steady",
        "--days",
        days,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn synth_run_and_replay_check() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    for file in ["topology.json", "workload.csv", "telemetry.jsonl", "config.json"] {
        assert!(dir.path().join(file).exists(), "{file} missing");
    }
    let config = dir.path().join("config.json");
    let config = config.to_str().unwrap();

    let run = dc_twin(&["run", "--config", config, "--horizon", "21600"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(run.stdout.split(|b| *b == b'\n').next().unwrap()).unwrap();
    assert_eq!(summary["windows"], 6);
    assert!(dir.path().join("workspace/reports/window-5.json").exists());
    assert!(!dir.path().join("workspace/reports/window-6.json").exists());

    let uncalibrated = dc_twin(&["run", "--config", config, "--horizon", "7200", "--no-calibration"]);
    assert!(uncalibrated.status.success());

    let check = dc_twin(&["replay-check", "--config", config]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
    assert!(String::from_utf8_lossy(&check.stdout).contains("24 windows byte-identical"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dc_twin(&["run", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let profile = dc_twin(&["synth", "--profile", "nope", "--days", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(profile.status.code(), Some(2));

    synth(dir.path(), "1");
    let config = dir.path().join("config.json");
    let bad_accel = dc_twin(&["run", "--config", config.to_str().unwrap(), "--acceleration", "warp"]);
    assert_eq!(bad_accel.status.code(), Some(2));
    let bad_horizon = dc_twin(&["run", "--config", config.to_str().unwrap(), "--horizon", "100"]);
    assert_eq!(bad_horizon.status.code(), Some(2));

    // a task larger than every host
    std::fs::write(
        dir.path().join("workload.csv"),
        "task_id,submit_time_s,core_request,fragment_index,duration_s,cpu_demand_mhz\nbig,0,64,0,60,1000\n",
    )
    .unwrap();
    let oversized = dc_twin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(oversized.status.code(), Some(2));
}

#[test]
fn source_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let config = dir.path().join("config.json");

    std::fs::write(dir.path().join("telemetry.jsonl"), "{\"ts\":0,\"power_w\":\n").unwrap();
    let corrupt = dc_twin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(corrupt.status.code(), Some(3));

    std::fs::remove_file(dir.path().join("telemetry.jsonl")).unwrap();
    let missing = dc_twin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
}
