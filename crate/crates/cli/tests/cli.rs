use std::path::Path;
use std::process::{Command, Output};

fn decbandit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decbandit")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn smoke_run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"topology":"ring","N":5,"d":3,"T":10,"algorithm":"dlucb","realizations":3}"#);
    let out = dir.path().join("out");
    let o = decbandit(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("trace.csv"));
    assert_eq!(rows.len(), 11);
    assert_eq!(
        rows[0],
        ["t", "regret_mean", "regret_std", "per_agent_regret_mean", "comm_scalars_cum", "phases_cum", "violations_cum"]
    );
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["epsilon"], serde_json::json!(1.0 / 13.0));
    assert_eq!(summary["config"]["sigma"], serde_json::json!(0.1));
    assert!(summary["S"].as_u64().unwrap() >= 1);
    assert!(summary["theoretical_bound"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn rc_phase_count_matches_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rc");
    let o = decbandit(&[
        "run", "--topology", "ring", "-N", "6", "-d", "3", "-T", "300", "--algorithm", "rc_dlucb",
        "--realizations", "3", "--rc-threshold", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("trace.csv"));
    let last: f64 = rows.last().unwrap()[5].parse().unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(last > 0.0);
    assert_eq!(summary["phase_count"].as_f64().unwrap(), last);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let base = r#""topology":"ring","N":4,"d":2,"T":10"#;
    for (body, needle) in [
        (format!(r#"{{{base},"algorithm":"dlucb","epsilon":2}}"#), "epsilon"),
        (format!(r#"{{{base},"algorithm":"safe_dlucb"}}"#), "finite decision set"),
        (format!(r#"{{{base},"algorithm":"dlucb","bogus":true}}"#), "bogus"),
    ] {
        let cfg = write_config(dir.path(), &body);
        let o = decbandit(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{err}");
    }
    let o = decbandit(&["run", "--topology", "star", "-N", "5", "-d", "2", "-T", "5", "--algorithm", "dlucb",
        "--scheme", "normalized_laplacian", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn overwrite_is_explicit_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let args = ["run", "--topology", "erdos_renyi", "-N", "6", "-d", "2", "-T", "40", "--algorithm", "dlts",
        "--realizations", "4", "--seed", "3", "--out", out.to_str().unwrap()];
    assert!(decbandit(&args).status.success());
    let first = std::fs::read(out.join("trace.csv")).unwrap();
    assert_eq!(decbandit(&args).status.code(), Some(2));
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert!(decbandit(&again).status.success());
    assert_eq!(std::fs::read(out.join("trace.csv")).unwrap(), first);
}

#[test]
fn graph_info_reports() {
    let o = decbandit(&["graph-info", "--topology", "ring", "-N", "20"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("S: 26"), "{text}");
    assert!(text.contains("delta_max: 2"));
    assert!(text.contains("comm_matrix_check: PASS"));
    let o = decbandit(&["graph-info", "--topology", "path", "-N", "3", "--scheme", "normalized_laplacian", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["comm_matrix_check"], "FAIL");
}

#[test]
fn sweep_writes_points_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = decbandit(&[
        "sweep", "--topology", "complete", "-N", "3", "-d", "2", "-T", "20", "--algorithm", "dlucb",
        "--realizations", "2", "--axis", "algorithm", "--values", "dlucb,no_comm", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][1], "dlucb");
    assert!(out.join("algorithm=no_comm").join("trace.csv").exists());
    let o = decbandit(&["sweep", "--topology", "ring", "-N", "4", "-d", "2", "-T", "5", "--algorithm", "dlucb",
        "--axis", "T", "--values", "", "--out", out.to_str().unwrap(), "--overwrite"]);
    assert_eq!(o.status.code(), Some(2));
}
