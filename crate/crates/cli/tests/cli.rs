use std::path::Path;
use std::process::Command;

fn dissect() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dissect"));
    c.env_remove("DISSECT_OUT");
    c
}

/// A coarse scenario written through `gen-phantom`.
fn scenario(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("scenario.json");
    let status = dissect()
        .args(["gen-phantom", "--angle", "45", "--resolution", "6,8,2", "--out"])
        .arg(dir.join("wedge.mesh"))
        .arg("--scenario")
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["camera"]["width"] = 80.into();
    v["camera"]["height"] = 60.into();
    v["aps"]["stride"] = 6.into();
    v["servo"]["gains"]["kp"] = 0.05.into();
    v["servo"]["gains"]["max_iterations"] = 2.into();
    v["servo"]["sensing"]["cloud_samples"] = 300.into();
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn run_prints_a_report_and_persists_into_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let out_dir = dir.path().join("runs");
    let out = dissect().arg("run").arg(&s).env("DISSECT_OUT", &out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"], 2);
    assert!(out_dir.join("summary.csv").exists());

    let again = dissect().arg("run").arg(&s).output().unwrap();
    let second: serde_json::Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(second["digest"], report["digest"]);
}

#[test]
fn aps_map_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let map_path = dir.path().join("map.json");
    let st = dissect().arg("aps-map").arg(&s).arg("--output").arg(&map_path).status().unwrap();
    assert!(st.success());
    let map: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(map_path).unwrap()).unwrap();
    let best = map["best_score"].as_f64().unwrap();
    let max = map["faces"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|f| f["score"].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, max);

    let out = dissect().arg("batch").arg(&s).args(["--seeds", "0..2"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["stats"]["n"], 2);
}

#[test]
fn compare_and_jacobian_check() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let out = dissect()
        .arg("compare-aps")
        .arg(&s)
        .args(["--fixed", "0,0.009,0.02", "--trials", "1"])
        .arg("--out-dir")
        .arg(dir.path().join("cmp"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("| Method | Final expansion | Success rate |"));
    assert!(dir.path().join("cmp/comparison.json").exists());

    let out = dissect().arg("verify-jacobians").arg(&s).args(["--states", "2"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_observation_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dissect().args(["run", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    let s = scenario(dir.path());
    let bad = dissect().arg("compare-aps").arg(&s).args(["--fixed", "1,2"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let bad = dissect().args(["gen-phantom", "--resolution", "1,x,2", "--out"]).arg(dir.path().join("m")).output().unwrap();
    assert!(!bad.status.success());

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&s).unwrap()).unwrap();
    v["segment"]["start"] = serde_json::json!([-0.01, 0.0, 0.5]);
    std::fs::write(&s, v.to_string()).unwrap();
    let failed = dissect().arg("run").arg(&s).output().unwrap();
    assert_eq!(failed.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&failed.stdout).unwrap();
    assert_eq!(report["failure"]["category"], "geometry");
}
