//! Continuous-flow experiments: every (problem, variant) pair is integrated,
//! checked against its second-order form and summarised in `flow_report.csv`.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, ExperimentSpec, RunReport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::flow::{
    export_trajectory_csv, integrate, phase_lag, second_order_residual, MethodVariant, OscillationStats, ProblemId,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowProblemSpec {
    pub id: ProblemId,
    /// Defaults to the origin.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda0: f64,
    /// Overrides the suite step size for stiff problems.
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSuiteSpec {
    pub problems: Vec<FlowProblemSpec>,
    pub variants: Vec<MethodVariant>,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_residual_threshold")]
    pub residual_threshold: f64,
    /// Every n-th state is written to the trajectory files.
    #[serde(default = "default_stride")]
    pub trajectory_stride: usize,
    #[serde(default = "default_true")]
    pub write_trajectories: bool,
}

fn default_residual_threshold() -> f64 {
    1e-4
}

fn default_stride() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl FlowSuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.problems.is_empty() || self.variants.is_empty() {
            return Err(Error::Spec("flow suite needs at least one problem and one variant".into()));
        }
        if !(self.dt > 0.0) || !(self.t_end > self.dt) || !self.t_end.is_finite() {
            return Err(Error::Spec(format!("need 0 < dt < t_end, got dt={} t_end={}", self.dt, self.t_end)));
        }
        if self.trajectory_stride == 0 {
            return Err(Error::Spec("trajectory_stride must be positive".into()));
        }
        for v in &self.variants {
            v.validate().map_err(|e| Error::Spec(e.to_string()))?;
        }
        for p in &self.problems {
            if let Some(dt) = p.dt {
                if !(dt > 0.0) || !(self.t_end > dt) {
                    return Err(Error::Spec(format!("{}: need 0 < dt < t_end", p.id.as_str())));
                }
            }
            let dim = p.id.build().dim();
            if let Some(x0) = &p.x0 {
                if x0.len() != dim {
                    return Err(Error::Spec(format!("{}: x0 needs {dim} entries", p.id.as_str())));
                }
            }
        }
        Ok(())
    }

    pub fn dt_for(&self, problem: &FlowProblemSpec) -> f64 {
        problem.dt.unwrap_or(self.dt)
    }

    pub fn steps_for(&self, problem: &FlowProblemSpec) -> usize {
        (self.t_end / self.dt_for(problem)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowCellReport {
    pub problem: ProblemId,
    pub variant: MethodVariant,
    /// `ok` or `diverged at step n`.
    pub status: String,
    pub steps: usize,
    pub max_residual: f64,
    pub residual_ok: bool,
    pub stats: OscillationStats,
    /// λ's lag behind g, basic variant only.
    pub phase_lag: Option<f64>,
    pub final_g: f64,
    pub final_lambda: f64,
}

impl FlowCellReport {
    pub fn name(&self) -> String {
        format!("{}_{}", self.problem.as_str(), self.variant.tag())
    }
}

pub const FLOW_REPORT_HEADER: [&str; 13] = [
    "problem",
    "variant",
    "status",
    "steps",
    "max_residual",
    "residual_ok",
    "period",
    "g_overshoot",
    "crossings",
    "sign_changes_after_first",
    "phase_lag",
    "final_g",
    "final_lambda",
];

#[derive(Debug, Clone)]
pub struct FlowSuiteOutcome {
    pub report: RunReport,
    pub cells: Vec<FlowCellReport>,
}

fn run_cell(suite: &FlowSuiteSpec, problem: &FlowProblemSpec, variant: &MethodVariant, traj_dir: &Path) -> FlowCellReport {
    let p = problem.id.build();
    let x0 = problem.x0.clone().map_or_else(|| DVector::zeros(p.dim()), DVector::from_vec);
    let (dt, steps) = (suite.dt_for(problem), suite.steps_for(problem));
    let mut report = FlowCellReport {
        problem: problem.id,
        variant: *variant,
        status: "ok".into(),
        steps,
        max_residual: f64::NAN,
        residual_ok: false,
        stats: OscillationStats {
            period: None,
            overshoot: f64::NAN,
            crossings: 0,
            sign_changes_after_first: 0,
        },
        phase_lag: None,
        final_g: f64::NAN,
        final_lambda: f64::NAN,
    };
    let traj = match integrate(p.as_ref(), variant, &x0, problem.lambda0, dt, steps) {
        Ok(t) => t,
        Err(Error::Divergence { step, .. }) => {
            report.status = format!("diverged at step {step}");
            return report;
        }
        Err(e) => {
            report.status = format!("failed: {e}");
            return report;
        }
    };
    let residual = match second_order_residual(p.as_ref(), variant, &traj, dt) {
        Ok(r) => r,
        Err(e) => {
            report.status = format!("failed: {e}");
            return report;
        }
    };
    report.max_residual = residual.iter().copied().fold(0.0, f64::max);
    report.residual_ok = report.max_residual <= suite.residual_threshold;

    let times = traj.times();
    let g = traj.constraint(p.as_ref());
    let lambdas = traj.lambdas();
    report.stats = OscillationStats::of(&times, &g);
    report.final_g = *g.last().expect("nonempty");
    report.final_lambda = traj.last().lambda;
    if matches!(variant, MethodVariant::Basic { .. }) {
        if let Some(period) = report.stats.period {
            let centred: Vec<f64> = lambdas.iter().map(|l| l - report.final_lambda).collect();
            report.phase_lag = Some(phase_lag(&g, &centred, dt, period));
        }
    }

    if suite.write_trajectories {
        let stride = suite.trajectory_stride;
        let kept: Vec<usize> = (0..traj.states.len()).step_by(stride).collect();
        let thinned = crate::flow::Trajectory::from_states(
            dt * stride as f64,
            kept.iter().map(|&i| traj.states[i].clone()).collect(),
        );
        // residual[i - 1] belongs to state i
        let thinned_residual: Vec<f64> = kept
            .iter()
            .skip(1)
            .map(|&i| residual.get(i - 1).copied().unwrap_or(f64::NAN))
            .collect();
        let path = traj_dir.join(format!("{}.csv", report.name()));
        if let Err(e) = export_trajectory_csv(&path, p.as_ref(), &thinned, Some(&thinned_residual)) {
            report.status = format!("failed: {e}");
        }
    }
    report
}

fn write_report(path: &Path, cells: &[FlowCellReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FLOW_REPORT_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        w.write_record([
            c.problem.as_str().to_string(),
            c.variant.label(),
            c.status.clone(),
            c.steps.to_string(),
            c.max_residual.to_string(),
            c.residual_ok.to_string(),
            opt(c.stats.period),
            c.stats.overshoot.to_string(),
            c.stats.crossings.to_string(),
            c.stats.sign_changes_after_first.to_string(),
            opt(c.phase_lag),
            c.final_g.to_string(),
            c.final_lambda.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every (problem, variant) pair. A diverged or failed integration,
/// or a residual above the threshold, marks the cell as failed.
pub fn run_flow_suite(spec: &ExperimentSpec, out: &Path, exec: Execution) -> Result<FlowSuiteOutcome> {
    spec.validate()?;
    let suite = spec
        .flow
        .as_ref()
        .ok_or_else(|| Error::Spec("flow experiments need a [flow] table".into()))?;
    let traj_dir = out.join("trajectories");
    ensure_dir(&traj_dir)?;
    let pairs: Vec<(&FlowProblemSpec, &MethodVariant)> = suite
        .problems
        .iter()
        .flat_map(|p| suite.variants.iter().map(move |v| (p, v)))
        .collect();
    let cells = exec.map(&pairs, |(p, v)| run_cell(suite, p, v, &traj_dir));
    write_report(&out.join("flow_report.csv"), &cells)?;
    let failures = cells
        .iter()
        .filter_map(|c| {
            if c.status != "ok" {
                Some((c.name(), c.status.clone()))
            } else if !c.residual_ok {
                Some((c.name(), format!("residual {} above threshold", c.max_residual)))
            } else {
                None
            }
        })
        .collect();
    Ok(FlowSuiteOutcome {
        report: RunReport {
            cells: cells.len(),
            failures,
        },
        cells,
    })
}
