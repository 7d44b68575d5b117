//! CLI-level behavior: config validation, the error-sweep CSV's promised
//! properties, and checkpoint round trips.

use std::process::Command;

use vdiff::experiments::{
    load_checkpoint, run_error_sweep, save_checkpoint, ErrorSweepConfig,
};

#[test]
fn unknown_config_keys_are_rejected() {
    let bin = env!("CARGO_BIN_EXE_vdiff");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["error-sweep", "--set", "no_such_knob=3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_knob"), "stderr: {stderr}");
}

#[test]
fn empty_omega_sweep_is_rejected() {
    let bin = env!("CARGO_BIN_EXE_vdiff");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["sample-eval", "--set", "omegas=[]", "--set", "checkpoint=\"x\"", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("omega"), "stderr: {stderr}");
}

#[test]
fn error_sweep_rows_behave_as_documented() {
    let cfg = ErrorSweepConfig {
        seed: 3,
        t_stride: 100,
        samples_per_t: 40_000,
        ..ErrorSweepConfig::default()
    };
    let out = run_error_sweep(&cfg).unwrap();
    let csv = String::from_utf8(out.files[0].1.clone()).unwrap();
    let mut v_fixed = Vec::new();
    for line in csv.lines().skip(3) {
        let cols: Vec<&str> = line.split(',').collect();
        let (t, alpha): (usize, f64) = (cols[0].parse().unwrap(), cols[1].parse().unwrap());
        let theory: f64 = cols[2].parse().unwrap();
        let measured: f64 = cols[3].parse().unwrap();
        let (kind, mode) = (cols[4], cols[5]);
        match mode {
            // No injection, no error, exactly.
            "exact" => assert!(measured < 1e-20, "t={t} {kind}: exact measured {measured}"),
            "fixed-delta" => {
                if kind == "v-pred" {
                    v_fixed.push(measured);
                }
                // eps-pred matches the closed form where alpha_bar >= 1e-4.
                if kind == "eps-pred" && alpha >= 1e-4 {
                    assert!(
                        (measured / theory - 1.0).abs() < 0.05,
                        "t={t}: measured {measured} vs theory {theory}"
                    );
                }
            }
            _ => {}
        }
    }
    // v-pred per-unit-step error is t-independent within 5%.
    let mean = v_fixed.iter().sum::<f64>() / v_fixed.len() as f64;
    for m in &v_fixed {
        assert!((m / mean - 1.0).abs() < 0.05, "v-pred row {m} vs mean {mean}");
    }
}

#[test]
fn checkpoints_round_trip_at_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.ckpt");
    let a = vec![0.1f64, -2.75, 1.0e-3, 12345.678];
    let b = vec![std::f64::consts::PI];
    save_checkpoint(
        &path,
        serde_json::json!({"note": "round trip"}),
        7,
        &[("a".into(), &a), ("b".into(), &b)],
    )
    .unwrap();
    let (header, tensors) = load_checkpoint(&path).unwrap();
    assert_eq!(header.step, 7);
    assert_eq!(header.shapes, vec![("a".into(), 4), ("b".into(), 1)]);
    assert_eq!(tensors[0].0, "a");
    for (orig, loaded) in a.iter().zip(&tensors[0].1) {
        assert_eq!(*loaded, *orig as f32 as f64);
    }
    assert_eq!(tensors[1].1[0], std::f64::consts::PI as f32 as f64);
}

#[test]
fn config_files_load_and_set_overrides_them() {
    let bin = env!("CARGO_BIN_EXE_vdiff");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("sweep.json");
    std::fs::write(
        &cfg_path,
        r#"{"seed": 5, "t_stride": 500, "samples_per_t": 200, "psi_offsets": [0.7]}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let status = Command::new(bin)
        .args(["error-sweep", "--config"])
        .arg(&cfg_path)
        .args(["--set", "samples_per_t=300", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config_echo.json")).unwrap())
            .unwrap();
    assert_eq!(echo["config"]["seed"], 5);
    assert_eq!(echo["config"]["t_stride"], 500);
    assert_eq!(echo["config"]["samples_per_t"], 300);
    assert_eq!(echo["config"]["psi_offsets"][0], 0.7);
    let csv = std::fs::read_to_string(out_dir.join("error_sweep.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains("custom-0.7000")));
}
