use std::path::Path;
use std::process::{Command, Output};

use qpe_lab::harness::{read_results, AGGREGATE_HEADER, RESULTS_HEADER};

fn qpe_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpe-lab"))
        .args(args)
        .env("QPE_LAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trace_json(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = dir.join("trace.json");
    let mut all = vec!["run", "--out", path(&out)];
    all.extend_from_slice(args);
    let res = qpe_lab(&all);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap()
}

fn max_depth(trace: &serde_json::Value) -> u64 {
    trace["outcome_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["depth"].as_u64().unwrap())
        .max()
        .unwrap()
}

#[test]
fn run_minimal_budget() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_json(dir.path(), &["--n-tot", "2", "--theta", "0", "--beta", "1", "--seed", "7"]);
    assert_eq!(trace["resources_spent"].as_u64(), Some(2));
}

#[test]
fn run_noisy_depth_cap() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_json(dir.path(), &["--n-tot", "300", "--theta", "1", "--beta", "0.9", "--seed", "1"]);
    assert!(max_depth(&trace) <= 5);
    assert!(trace["resources_spent"].as_u64().unwrap() <= 300);
}

#[test]
fn run_prints_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let res = qpe_lab(&["run", "--n-tot", "64", "--theta", "2", "--out", path(&out)]);
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("estimate ") && stdout.contains("expected_loss "));
}

#[test]
fn missing_budget_is_usage_error() {
    let res = qpe_lab(&["run", "--theta", "0"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("Usage"));
}

#[test]
fn runtime_error_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let res = qpe_lab(&["run", "--n-tot", "16", "--alpha", "1.5", "--out", path(&dir.path().join("t.json"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!res.stderr.is_empty());
}

fn sweep(dir: &Path, extra: &[&str]) {
    let mut args = vec!["sweep", "--out-dir", path(dir)];
    args.extend_from_slice(extra);
    let res = qpe_lab(&args);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn smallest_sweep_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    sweep(dir.path(), &["--strategies", "adaptive", "--ladder", "64", "--k", "1", "--r", "1"]);
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], RESULTS_HEADER.join(","));
    let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().next().unwrap(), AGGREGATE_HEADER.join(","));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cells_completed"].as_u64(), Some(1));
}

#[test]
fn repeated_sweep_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = [
        "--strategies",
        "adaptive,classical,nonadaptive-doubling,qpea",
        "--ladder",
        "32,64,128",
        "--k",
        "3",
        "--r",
        "2",
        "--seed",
        "11",
    ];
    sweep(a.path(), &flags);
    sweep(b.path(), &flags);
    for file in ["results.csv", "aggregate.csv", "failures.csv", "manifest.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
}

#[test]
fn adaptive_beats_classical_from_128() {
    let dir = tempfile::tempdir().unwrap();
    sweep(
        dir.path(),
        &["--strategies", "adaptive,classical", "--ladder", "32,64,...,4096", "--k", "10", "--r", "4"],
    );
    let rows = read_results(std::fs::File::open(dir.path().join("results.csv")).unwrap()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    let mut mae = std::collections::BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let n: u64 = rec[1].parse().unwrap();
        let v: f64 = rec[2].parse().unwrap();
        mae.insert((rec[0].to_string(), n), v);
    }
    assert_eq!(rows.len(), 2 * 8 * 10 * 4);
    for n in [128u64, 256, 512, 1024, 2048, 4096] {
        let a = mae[&("adaptive".to_string(), n)];
        let c = mae[&("classical".to_string(), n)];
        assert!(a < c, "N={n}: adaptive {a} vs classical {c}");
    }
}

fn write_aggregate_fixture(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("aggregate.csv");
    let mut text = AGGREGATE_HEADER.join(",") + "\n";
    for (n, m) in [(10, 0.3), (100, 0.05), (1000, 0.006)] {
        text += &format!("adaptive,{n},{m},{m},{},{},{},10\n", m * 0.5, m * 2.0, m * m);
    }
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn plot_structure() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_aggregate_fixture(dir.path());
    let svg_path = dir.path().join("out.svg");
    let res = qpe_lab(&["plot", "--input", path(&input), "--output", path(&svg_path), "--reference", "sql"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let svg = std::fs::read_to_string(svg_path).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches(r#"class="series""#).count(), 1);
    assert_eq!(svg.matches(r#"class="errorbar""#).count(), 3);
    let reference = svg.lines().find(|l| l.contains(r#"data-curve="sql""#)).expect("sql curve");
    assert!(reference.contains("stroke-dasharray"));
    let points = reference.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(points.split_whitespace().count(), 3);
    assert!(!svg.contains("href"));
}

#[test]
fn plot_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("o.svg");
    let res = qpe_lab(&["plot", "--input", path(&empty), "--output", path(&out)]);
    assert_eq!(res.status.code(), Some(1));

    let input = write_aggregate_fixture(dir.path());
    let res = qpe_lab(&["plot", "--input", path(&input), "--output", path(&out), "--y", "nonsense"]);
    assert_eq!(res.status.code(), Some(1));
}

fn bounds(flags: &[&str]) -> Vec<(u64, f64)> {
    let mut args = vec!["bounds"];
    args.extend_from_slice(flags);
    let res = qpe_lab(&args);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8(res.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n_tot,steps_mae,mae_bound,steps_mse,mse_bound"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

fn top_ratio(rows: &[(u64, f64)]) -> f64 {
    rows[rows.len() - 1].1 / rows[rows.len() - 2].1
}

#[test]
fn bounds_scaling() {
    let rows = bounds(&["--p", "3", "--ladder", "256,512,...,1048576"]);
    assert!((top_ratio(&rows) - 0.5).abs() <= 0.05);

    let rows = bounds(&["--p", "3", "--beta", "0.9", "--ladder", "256,512,...,1048576"]);
    assert!((top_ratio(&rows) - 0.5f64.sqrt()).abs() <= 0.1 * 0.5f64.sqrt());

    let eps = 0.01;
    let rows = bounds(&["--p", "0", "--epsilon", "0.01", "--ladder", "65536,131072,...,4194304"]);
    let level = 1.5 * std::f64::consts::PI * eps;
    assert!(rows.iter().all(|r| r.1 >= level));
    assert!(rows.last().unwrap().1 <= 1.02 * level);
}

#[test]
fn bounds_infeasible_exits_one() {
    assert_eq!(qpe_lab(&["bounds", "--ladder", "2,4"]).status.code(), Some(1));
}
