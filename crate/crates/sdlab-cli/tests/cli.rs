//! End-to-end checks of the `sdlab` binary: spawn the built executable,
//! verify exit codes, and parse the JSON/CSV it emits.

use std::process::{Command, Output};

fn sdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlab"))
        .args(args)
        .output()
        .expect("failed to spawn the sdlab binary")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout should be JSON")
}

#[test]
fn oracle_check_reports_tiny_errors_and_gates_on_tolerance() {
    let out = sdlab(&[
        "oracle", "check", "--queries", "50", "--max-dim", "3", "--seed", "5", "--step", "1e-5",
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["n_queries"].as_u64(), Some(50));
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-6);

    // an unreachable tolerance must trip the dedicated exit code
    let strict = sdlab(&["oracle", "check", "--queries", "10", "--tol", "1e-18"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn translate_applies_the_offset_between_the_content_classes() {
    let out = sdlab(&[
        "flow", "translate", "--world", "b1", "--source", "class:A", "--target", "class:B",
        "--point", "-2.1", "--steps", "200",
    ]);
    let v = stdout_json(&out);
    let y = v["output"][0].as_f64().unwrap();
    assert!((y - 1.9).abs() < 1e-2, "translated point {y} should land near -2.1 + 4");
}

#[test]
fn sample_writes_csv_that_metrics_scores_as_on_target() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("samples.csv");
    let out = sdlab(&[
        "flow", "sample", "--world", "b2", "--cond", "class:C0", "--n", "64", "--steps", "64",
        "--seed", "3", "--out", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 64);
    assert!(text.lines().all(|l| l.split(',').count() == 2), "expected two columns per row");

    let report = stdout_json(&sdlab(&[
        "metrics", "report", "--world", "b2", "--cond", "class:C0", "--points",
        csv.to_str().unwrap(),
    ]));
    let frechet = report["frechet"].as_f64().unwrap();
    assert!(
        frechet.is_finite() && frechet < 5.0,
        "64 exact samples should score close to their own law, got {frechet}"
    );
}

#[test]
fn distill_run_writes_records_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "world": "b1",
            "target": "class:B",
            "source": "class:B:smooth+noisy",
            "methods": [{ "kind": "sds", "scale": 10.0 }],
            "n_particles": 8,
            "n_iters": 60,
            "record_every": 20,
            "seeds": [0, 1]
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = sdlab(&[
        "--threads", "1", "distill", "run", "--config", cfg_path.to_str().unwrap(), "--out",
        out_dir.to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    let hash = summary["config_hash"].as_str().unwrap();
    assert!(!hash.is_empty());
    assert_eq!(summary["methods"][0]["method"].as_str(), Some("sds"));
    assert_eq!(summary["methods"][0]["seeds"].as_array().unwrap().len(), 2);

    let record = std::fs::read_to_string(out_dir.join("runs/sds/record.csv")).unwrap();
    assert!(record.starts_with(&format!("# config_hash={hash}")));
    assert!(out_dir.join("summary.json").is_file());
    assert!(out_dir.join("config.json").is_file());
    assert!(out_dir.join("worlds.json").is_file());
}

#[test]
fn bad_inputs_exit_with_the_usage_code() {
    let out = sdlab(&["flow", "sample", "--world", "b9"]);
    assert_eq!(out.status.code(), Some(1));
    let out = sdlab(&["bench", "table1", "--world", "b3"]);
    assert_eq!(out.status.code(), Some(1));
}
