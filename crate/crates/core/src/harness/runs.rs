//! Training grids: `train`, `sweep`, `limit_step` and `scale` experiments.
//!
//! Output tree under `out`:
//! - `runs/<cell>.csv` — one training history per cell
//! - `runs.csv` — per-run metrics, recomputed from the files above
//! - `summary.csv` — aggregates over seeds per grid point
//! - `pareto.csv` (sweep), `overshoot.csv` (limit_step), `distances.csv` (scale)

use std::collections::BTreeMap;
use std::path::Path;

use super::stats::{mean, median, relative_sup_distance};
use super::{balance_tag, ensure_dir, Cell, ExperimentKind, ExperimentSpec, RunReport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trainer::{
    last_quartile_mean_abs_gap, overshoot_after, read_history_csv, settled_in_last_quartile, settling_iteration, train,
    HistoryRow, LimitStep, TrainHistory,
};

/// Figures computed from one history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryMetrics {
    pub iterations: usize,
    pub final_j: f64,
    pub final_d: f64,
    pub final_lambda: f64,
    /// Sum of the violation column.
    pub fom: f64,
    pub max_violation: f64,
    pub settling_iteration: Option<usize>,
    pub settled: bool,
    pub last_quartile_gap: f64,
    pub overshoot: Option<f64>,
}

impl HistoryMetrics {
    fn empty() -> Self {
        Self {
            iterations: 0,
            final_j: f64::NAN,
            final_d: f64::NAN,
            final_lambda: f64::NAN,
            fom: f64::NAN,
            max_violation: f64::NAN,
            settling_iteration: None,
            settled: false,
            last_quartile_gap: f64::NAN,
            overshoot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub cell: String,
    pub key: String,
    pub seed: u64,
    /// `ok`, `aborted` or `failed: <reason>`.
    pub status: String,
    pub metrics: HistoryMetrics,
}

impl RunMetrics {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Metrics of one history. `limit` is the cost limit in force at the end of
/// the run and sets the settling band; the violation column already carries
/// the per-iteration limit.
pub fn recompute_run_metrics(rows: &[HistoryRow], limit: f64, band: f64, step: Option<LimitStep>) -> HistoryMetrics {
    let d: Vec<f64> = rows.iter().map(|r| r.d).collect();
    let violations = rows.iter().map(|r| r.violation);
    let Some(last) = rows.last() else {
        return HistoryMetrics::empty();
    };
    HistoryMetrics {
        iterations: rows.len(),
        final_j: last.j,
        final_d: last.d,
        final_lambda: last.lambda,
        fom: violations.clone().sum(),
        max_violation: violations.fold(0.0, f64::max),
        settling_iteration: settling_iteration(&d, limit, band),
        settled: settled_in_last_quartile(&d, limit, band),
        last_quartile_gap: last_quartile_mean_abs_gap(&d, limit),
        overshoot: step.map(|s| overshoot_after(&d, s.iteration, s.new_limit)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: String,
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub rho: f64,
    pub eta: f64,
    pub balance: String,
    pub n_runs: usize,
    pub n_failed: usize,
    pub mean_final_j: f64,
    pub median_final_j: f64,
    pub mean_fom: f64,
    pub median_fom: f64,
    pub mean_max_violation: f64,
    pub median_max_violation: f64,
    /// Unsettled runs count as settling at `iterations`.
    pub median_settling: f64,
    pub n_settled: usize,
    pub median_overshoot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSummary {
    pub rows: Vec<SummaryRow>,
}

pub const RUNS_HEADER: [&str; 15] = [
    "cell",
    "key",
    "seed",
    "status",
    "iterations",
    "final_J",
    "final_D",
    "final_lambda",
    "fom",
    "max_violation",
    "settling_iteration",
    "settled",
    "last_quartile_gap",
    "overshoot",
    "csv",
];

pub const SUMMARY_HEADER: [&str; 18] = [
    "key",
    "k_p",
    "k_i",
    "k_d",
    "rho",
    "eta",
    "balance",
    "n_runs",
    "n_failed",
    "mean_final_J",
    "median_final_J",
    "mean_fom",
    "median_fom",
    "mean_max_violation",
    "median_max_violation",
    "median_settling",
    "n_settled",
    "median_overshoot",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepSummary {
    pub fn from_runs(cells: &[Cell], runs: &[RunMetrics]) -> Self {
        let mut groups: BTreeMap<usize, (Cell, Vec<&RunMetrics>)> = BTreeMap::new();
        let mut first_of_key: BTreeMap<String, usize> = BTreeMap::new();
        for (cell, run) in cells.iter().zip(runs) {
            let slot = *first_of_key.entry(cell.key()).or_insert(cell.index);
            groups.entry(slot).or_insert_with(|| (cell.clone(), Vec::new())).1.push(run);
        }
        let rows = groups
            .into_values()
            .map(|(cell, members)| {
                let ok: Vec<&RunMetrics> = members.iter().copied().filter(|r| r.ok()).collect();
                let col = |f: fn(&HistoryMetrics) -> f64| ok.iter().map(|r| f(&r.metrics)).collect::<Vec<f64>>();
                let settling = col(|m| m.settling_iteration.unwrap_or(m.iterations) as f64);
                let overshoots: Vec<f64> = ok.iter().filter_map(|r| r.metrics.overshoot).collect();
                SummaryRow {
                    key: cell.key(),
                    k_p: cell.k_p,
                    k_i: cell.k_i,
                    k_d: cell.k_d,
                    rho: cell.rho,
                    eta: cell.eta,
                    balance: balance_tag(&cell.balance),
                    n_runs: members.len(),
                    n_failed: members.len() - ok.len(),
                    mean_final_j: mean(&col(|r| r.final_j)),
                    median_final_j: median(&col(|r| r.final_j)),
                    mean_fom: mean(&col(|r| r.fom)),
                    median_fom: median(&col(|r| r.fom)),
                    mean_max_violation: mean(&col(|r| r.max_violation)),
                    median_max_violation: median(&col(|r| r.max_violation)),
                    median_settling: median(&settling),
                    n_settled: ok.iter().filter(|r| r.metrics.settled).count(),
                    median_overshoot: (!overshoots.is_empty()).then(|| median(&overshoots)),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(SUMMARY_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.key.clone(),
                r.k_p.to_string(),
                r.k_i.to_string(),
                r.k_d.to_string(),
                r.rho.to_string(),
                r.eta.to_string(),
                r.balance.clone(),
                r.n_runs.to_string(),
                r.n_failed.to_string(),
                r.mean_final_j.to_string(),
                r.median_final_j.to_string(),
                r.mean_fom.to_string(),
                r.median_fom.to_string(),
                r.mean_max_violation.to_string(),
                r.median_max_violation.to_string(),
                r.median_settling.to_string(),
                r.n_settled.to_string(),
                opt(r.median_overshoot),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Rows not dominated in (higher mean final J, lower mean FOM).
    pub fn pareto(&self) -> Vec<(&SummaryRow, bool)> {
        self.rows
            .iter()
            .map(|r| {
                let dominated = self.rows.iter().any(|o| {
                    o.mean_final_j >= r.mean_final_j
                        && o.mean_fom <= r.mean_fom
                        && (o.mean_final_j > r.mean_final_j || o.mean_fom < r.mean_fom)
                });
                (r, !dominated && r.mean_final_j.is_finite())
            })
            .collect()
    }
}

fn write_runs_csv(path: &Path, runs: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RUNS_HEADER)?;
    for r in runs {
        let m = &r.metrics;
        w.write_record([
            r.cell.clone(),
            r.key.clone(),
            r.seed.to_string(),
            r.status.clone(),
            m.iterations.to_string(),
            m.final_j.to_string(),
            m.final_d.to_string(),
            m.final_lambda.to_string(),
            m.fom.to_string(),
            m.max_violation.to_string(),
            opt(m.settling_iteration),
            m.settled.to_string(),
            m.last_quartile_gap.to_string(),
            opt(m.overshoot),
            format!("runs/{}.csv", r.cell),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trajectory distance between two runs that differ only in reward scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDistance {
    pub group: String,
    pub rho_ref: f64,
    pub rho: f64,
    pub theta: f64,
    pub lambda: f64,
    pub d: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub report: RunReport,
    pub cells: Vec<Cell>,
    pub runs: Vec<RunMetrics>,
    pub summary: SweepSummary,
    pub distances: Vec<ScaleDistance>,
}

struct CellResult {
    metrics: RunMetrics,
    history: Option<TrainHistory>,
}

/// Limit in force at the end of a run.
fn final_limit(spec: &ExperimentSpec, env_limit: f64) -> f64 {
    spec.train.limit_step.map_or(env_limit, |s| s.new_limit)
}

fn run_cell(
    spec: &ExperimentSpec,
    env: &crate::cmdp::TabularCmdp,
    cell: &Cell,
    runs_dir: &Path,
    keep_history: bool,
) -> CellResult {
    let attempt = || -> Result<(HistoryMetrics, TrainHistory)> {
        let mut cfg = cell.config(&spec.train)?;
        cfg.record_params |= keep_history;
        cfg.exec = Execution::Sequential;
        let history = train(env, &cfg)?;
        let path = runs_dir.join(format!("{}.csv", cell.name()));
        history.save_csv(&path)?;
        let rows = read_history_csv(&path)?;
        let metrics = recompute_run_metrics(
            &rows,
            final_limit(spec, env.cost_limit()),
            spec.settle_band,
            spec.train.limit_step,
        );
        Ok((metrics, history))
    };
    match attempt() {
        Ok((metrics, history)) => CellResult {
            metrics: RunMetrics {
                cell: cell.name(),
                key: cell.key(),
                seed: cell.seed,
                status: if history.completed() { "ok" } else { "aborted" }.to_string(),
                metrics,
            },
            history: keep_history.then_some(history),
        },
        Err(e) => CellResult {
            metrics: RunMetrics {
                cell: cell.name(),
                key: cell.key(),
                seed: cell.seed,
                status: format!("failed: {e}"),
                metrics: HistoryMetrics::empty(),
            },
            history: None,
        },
    }
}

fn scale_distances(cells: &[Cell], results: &[CellResult]) -> Vec<ScaleDistance> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        let g = format!(
            "kp{}_ki{}_kd{}_eta{}_{}_s{}",
            c.k_p,
            c.k_i,
            c.k_d,
            c.eta,
            balance_tag(&c.balance),
            c.seed
        );
        groups.entry(g).or_default().push(i);
    }
    let mut out = Vec::new();
    for (group, members) in groups {
        let reference = members
            .iter()
            .copied()
            .find(|&i| cells[i].rho == 1.0)
            .unwrap_or(members[0]);
        let Some(href) = results[reference].history.as_ref() else {
            continue;
        };
        for &i in members.iter().filter(|&&i| i != reference) {
            let Some(h) = results[i].history.as_ref() else {
                continue;
            };
            let flat = |h: &TrainHistory| h.params.iter().flatten().copied().collect::<Vec<f64>>();
            out.push(ScaleDistance {
                group: group.clone(),
                rho_ref: cells[reference].rho,
                rho: cells[i].rho,
                theta: relative_sup_distance(&flat(h), &flat(href)),
                lambda: relative_sup_distance(&h.lambdas(), &href.lambdas()),
                d: relative_sup_distance(&h.costs(), &href.costs()),
            });
        }
    }
    out
}

/// Runs every cell of a training grid and writes the output tree.
pub fn run_grid(spec: &ExperimentSpec, out: &Path, seed_offset: u64, exec: Execution) -> Result<GridOutcome> {
    spec.validate()?;
    if spec.kind == ExperimentKind::Flow {
        return Err(Error::Spec("flow specs are run by the flow suite".into()));
    }
    let env = spec.build_env()?;
    let cells = spec.cells(seed_offset);
    let runs_dir = out.join("runs");
    ensure_dir(&runs_dir)?;
    let keep = spec.kind == ExperimentKind::Scale;

    let results = exec.map(&cells, |cell| run_cell(spec, &env, cell, &runs_dir, keep));

    let runs: Vec<RunMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    write_runs_csv(&out.join("runs.csv"), &runs)?;
    let summary = SweepSummary::from_runs(&cells, &runs);
    summary.write_csv(&out.join("summary.csv"))?;

    match spec.kind {
        ExperimentKind::Sweep => {
            let path = out.join("pareto.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["key", "mean_final_J", "mean_fom", "nondominated"])?;
            for (r, nd) in summary.pareto() {
                w.write_record([r.key.clone(), r.mean_final_j.to_string(), r.mean_fom.to_string(), nd.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        ExperimentKind::LimitStep => {
            let path = out.join("overshoot.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["key", "k_p", "k_i", "k_d", "n_runs", "median_overshoot", "mean_overshoot"])?;
            for r in &summary.rows {
                let values: Vec<f64> = runs
                    .iter()
                    .filter(|m| m.key == r.key && m.ok())
                    .filter_map(|m| m.metrics.overshoot)
                    .collect();
                w.write_record([
                    r.key.clone(),
                    r.k_p.to_string(),
                    r.k_i.to_string(),
                    r.k_d.to_string(),
                    values.len().to_string(),
                    median(&values).to_string(),
                    mean(&values).to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        _ => {}
    }

    let distances = if keep { scale_distances(&cells, &results) } else { Vec::new() };
    if keep {
        let path = out.join("distances.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["group", "rho_ref", "rho", "theta", "lambda", "D"])?;
        for d in &distances {
            w.write_record([
                d.group.clone(),
                d.rho_ref.to_string(),
                d.rho.to_string(),
                d.theta.to_string(),
                d.lambda.to_string(),
                d.d.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let failures = runs
        .iter()
        .filter(|r| !r.ok())
        .map(|r| (r.cell.clone(), r.status.clone()))
        .collect();
    Ok(GridOutcome {
        report: RunReport {
            cells: cells.len(),
            failures,
        },
        cells,
        runs,
        summary,
        distances,
    })
}

fn expect_kind(spec: &ExperimentSpec, kind: ExperimentKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Spec(format!(
            "spec '{}' is a {} experiment, not {}",
            spec.name,
            spec.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

pub fn run_train(spec: &ExperimentSpec, out: &Path, seed_offset: u64, exec: Execution) -> Result<GridOutcome> {
    expect_kind(spec, ExperimentKind::Train)?;
    run_grid(spec, out, seed_offset, exec)
}

pub fn run_sweep(spec: &ExperimentSpec, out: &Path, seed_offset: u64, exec: Execution) -> Result<GridOutcome> {
    expect_kind(spec, ExperimentKind::Sweep)?;
    run_grid(spec, out, seed_offset, exec)
}

pub fn run_limit_step(spec: &ExperimentSpec, out: &Path, seed_offset: u64, exec: Execution) -> Result<GridOutcome> {
    expect_kind(spec, ExperimentKind::LimitStep)?;
    run_grid(spec, out, seed_offset, exec)
}

pub fn run_scale_suite(spec: &ExperimentSpec, out: &Path, seed_offset: u64, exec: Execution) -> Result<GridOutcome> {
    expect_kind(spec, ExperimentKind::Scale)?;
    run_grid(spec, out, seed_offset, exec)
}
