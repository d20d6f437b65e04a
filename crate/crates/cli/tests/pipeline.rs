use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn crloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crloc"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn record_counts_follow_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 2.0\n");
    ok(crloc(dir.path(), &["--config", &cfg, "simulate"]));
    let log = std::fs::read_to_string(dir.path().join("sensors.jsonl")).unwrap();
    let count = |kind: &str, id: u64| {
        log.lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .filter(|v| v["type"] == kind && v["sensor_id"] == id)
            .count() as i64
    };
    // ToF 15 Hz, gyro 100 Hz, strain 20 Hz, each sampled at t = 0 too
    for (kind, id, rate) in [("tof", 0, 15.0), ("tof", 29, 15.0), ("gyro", 100, 100.0), ("strain", 215, 20.0)] {
        let n = count(kind, id);
        assert!((n - (2.0 * rate) as i64).abs() <= 1, "{kind} {id}: {n}");
    }
}

#[test]
fn zero_duration_logs_only_time_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 0.0\n");
    ok(crloc(dir.path(), &["--config", &cfg, "simulate"]));
    for name in ["sensors.jsonl", "truth.jsonl"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(!text.is_empty());
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["timestamp"], 0.0);
        }
    }
}

#[test]
fn full_pipeline_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        r#"duration = 1.5
condition = "cube"

[[scene.anomalies]]
op = "add_box"
label = "cube"
center = [0.44, 0.0, 0.35]
half_extents = [0.05, 0.05, 0.05]
yaw = 0.0
"#,
    );
    let cloud = d.join("cloud.ply").to_string_lossy().into_owned();
    let map = d.join("prior_map.ply").to_string_lossy().into_owned();
    let stages: [&[&str]; 5] = [&["simulate"], &["localize"], &["reconstruct"], &["detect"], &["eval", "--cloud", &cloud, "--map", &map]];
    let mut hashes = Vec::new();
    for _ in 0..2 {
        for stage in stages {
            let mut args = vec!["--config", cfg.as_str()];
            args.extend_from_slice(stage);
            ok(crloc(d, &args));
        }
        let mut files: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        hashes.push(files.iter().map(|p| (p.clone(), std::fs::read(p).unwrap())).collect::<Vec<_>>());
    }
    assert_eq!(hashes[0], hashes[1]);

    let csv = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("condition,ring,"));
    // header, three rings, pooled
    assert_eq!(rows.len(), 1 + 3 + 1);
    assert!(rows.iter().skip(1).all(|r| r.starts_with("cube,")));
    assert!(rows.last().unwrap().starts_with("cube,pooled,"));

    let metrics = read_json(&d.join("metrics.json"));
    assert!(metrics["cloud_rmse"].as_f64().unwrap() < 0.02);
    let anomalies = read_json(&d.join("anomalies.json"));
    assert!(!anomalies["flagged"].as_array().unwrap().is_empty());
}

#[test]
fn infinite_tau_flags_nothing_and_self_eval_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "duration = 1.0\n");
    for stage in [&["simulate"][..], &["localize"], &["reconstruct"], &["detect", "--tau", "inf"]] {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend_from_slice(stage);
        ok(crloc(d, &args));
    }
    let report = read_json(&d.join("anomalies.json"));
    assert!(report["num_points"].as_u64().unwrap() > 0);
    assert!(report["flagged"].as_array().unwrap().is_empty());

    // truth records taken from the estimate itself
    let estimate = d.join("estimate.json").to_string_lossy().into_owned();
    let truth = std::fs::read_to_string(d.join("truth.jsonl")).unwrap();
    let grid = crloc::commands::load_estimate(&d.join("estimate.json")).unwrap();
    let mut self_truth = String::new();
    for line in truth.lines() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        let (s, t) = (v["arclength"].as_f64().unwrap(), v["timestamp"].as_f64().unwrap());
        let pose = grid.interpolate_pose(s, t).unwrap();
        v["rotation"] = serde_json::json!(pose.row_major_rotation());
        v["translation"] = serde_json::json!([pose.translation.x, pose.translation.y, pose.translation.z]);
        self_truth.push_str(&v.to_string());
        self_truth.push('\n');
    }
    let truth_path = d.join("self_truth.jsonl");
    std::fs::write(&truth_path, self_truth).unwrap();
    ok(crloc(d, &["--config", &cfg, "eval", "--estimate", &estimate, "--truth", &truth_path.to_string_lossy()]));
    let pooled = &read_json(&d.join("metrics.json"))["localization"]["pooled"];
    assert!(pooled["translation"]["max"].as_f64().unwrap() < 1e-9);
    assert!(pooled["rotation"]["max"].as_f64().unwrap() < 1e-6);
}

#[test]
fn gyro_only_log_is_weakly_observable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "duration = 1.0\n");
    ok(crloc(d, &["--config", &cfg, "simulate"]));
    let log = std::fs::read_to_string(d.join("sensors.jsonl")).unwrap();
    let gyro: String = log.lines().filter(|l| l.contains(r#""type":"gyro""#)).map(|l| format!("{l}\n")).collect();
    assert!(!gyro.is_empty());
    let path = d.join("gyro.jsonl");
    std::fs::write(&path, gyro).unwrap();
    ok(crloc(d, &["--config", &cfg, "localize", "--no-map", "--log", &path.to_string_lossy()]));
    let report = read_json(&d.join("solve_report.json"));
    assert_eq!(report["weakly_observable"], true);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = d.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = crloc(d, &["localize", "--no-map", "--log", &empty.to_string_lossy()]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write_config(d, "sed = 1\n");
    assert_eq!(crloc(d, &["--config", &cfg, "simulate"]).status.code(), Some(2));

    let out = crloc(d, &["reconstruct", "--log", &d.join("missing.jsonl").to_string_lossy()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "duration = 0.0\n");
    let out = Command::new(env!("CARGO_BIN_EXE_crloc"))
        .args(["simulate"])
        .env("CRLOC_CONFIG", &cfg)
        .env("CRLOC_OUT", d.join("env_out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("env_out/sensors.jsonl").is_file());
}
