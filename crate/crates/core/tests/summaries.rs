//! Aggregated CSVs must be reproducible from the per-run files alone.

use std::collections::BTreeMap;

use pid_lagrangian::exec::Execution;
use pid_lagrangian::harness::{median, recompute_run_metrics, run_limit_step, run_sweep, ExperimentSpec};
use pid_lagrangian::trainer::read_history_csv;

const SWEEP: &str = r#"
name = "integrity"
kind = "sweep"
env = { preset = "corridor_a" }
settle_band = 0.2
[train]
iterations = 120
eta = 3.0
init_logit_scale = 0.5
[grid]
k_p = [0.0, 1.0]
k_i = [0.001, 0.01]
seeds = [0, 1, 2]
"#;

fn read_csv(path: &std::path::Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn runs_and_summary_match_per_run_histories() {
    let spec = ExperimentSpec::from_toml_str(SWEEP).unwrap();
    let out = tempfile::tempdir().unwrap();
    let outcome = run_sweep(&spec, out.path(), 0, Execution::default()).unwrap();
    assert!(outcome.report.success());
    assert_eq!(outcome.runs.len(), 12);

    let runs = read_csv(&out.path().join("runs.csv"));
    let mut fom_by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut j_by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &runs {
        let history = read_history_csv(&out.path().join(&row["csv"])).unwrap();
        let m = recompute_run_metrics(&history, 5.0, 0.2, None);
        assert_eq!(num(row, "fom"), m.fom);
        assert_eq!(num(row, "final_J"), m.final_j);
        assert_eq!(num(row, "max_violation"), m.max_violation);
        assert_eq!(num(row, "last_quartile_gap"), m.last_quartile_gap);
        assert_eq!(row["settling_iteration"], m.settling_iteration.map(|s| s.to_string()).unwrap_or_default());
        let direct: f64 = history.iter().map(|r| (r.d - 5.0).max(0.0)).sum();
        assert!((direct - m.fom).abs() <= 1e-9 * direct.max(1.0));
        fom_by_key.entry(row["key"].clone()).or_default().push(m.fom);
        j_by_key.entry(row["key"].clone()).or_default().push(m.final_j);
    }

    let summary = read_csv(&out.path().join("summary.csv"));
    assert_eq!(summary.len(), 4);
    for row in &summary {
        let key = &row["key"];
        assert_eq!(num(row, "n_runs"), 3.0);
        assert_eq!(num(row, "median_fom"), median(&fom_by_key[key]));
        assert_eq!(num(row, "median_final_J"), median(&j_by_key[key]));
    }
    let pareto = read_csv(&out.path().join("pareto.csv"));
    assert_eq!(pareto.len(), 4);
    assert!(pareto.iter().any(|r| r["nondominated"] == "true"));
}

#[test]
fn overshoot_table_matches_histories() {
    let text = r#"
name = "step"
kind = "limit_step"
env = { preset = "corridor_a" }
[train]
iterations = 200
eta = 3.0
gains = { k_p = 0.25, k_i = 0.01, k_d = 0.0 }
limit_step = { iteration = 100, new_limit = 15.0 }
[grid]
k_d = [0.0, 3.0]
seeds = [0, 1]
"#;
    let spec = ExperimentSpec::from_toml_str(text).unwrap();
    let out = tempfile::tempdir().unwrap();
    run_limit_step(&spec, out.path(), 0, Execution::Sequential).unwrap();
    let runs = read_csv(&out.path().join("runs.csv"));
    let mut by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &runs {
        let history = read_history_csv(&out.path().join(&row["csv"])).unwrap();
        let tail = history[100..].iter().map(|r| (r.d - 15.0).max(0.0)).fold(0.0, f64::max);
        assert_eq!(num(row, "overshoot"), tail);
        assert!(history[..100].iter().all(|r| r.violation == (r.d - 5.0).max(0.0)));
        by_key.entry(row["key"].clone()).or_default().push(tail);
    }
    for row in read_csv(&out.path().join("overshoot.csv")) {
        assert_eq!(num(&row, "median_overshoot"), median(&by_key[&row["key"]]));
    }
}

#[test]
fn seed_offset_changes_seeds_only() {
    let spec = ExperimentSpec::from_toml_str(SWEEP).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_sweep(&spec, a.path(), 0, Execution::default()).unwrap();
    let rb = run_sweep(&spec, b.path(), 10, Execution::default()).unwrap();
    assert_eq!(ra.cells.len(), rb.cells.len());
    for (x, y) in ra.cells.iter().zip(&rb.cells) {
        assert_eq!(x.key(), y.key());
        assert_eq!(x.seed + 10, y.seed);
    }
    assert_ne!(
        std::fs::read(a.path().join("runs.csv")).unwrap(),
        std::fs::read(b.path().join("runs.csv")).unwrap()
    );
}
