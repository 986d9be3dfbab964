//! Experiment specs, grid expansion and the CSV output tree.
//!
//! A spec is a TOML file naming an experiment kind, an environment, a base
//! training configuration and optional grid axes. Every grid cell runs
//! independently (possibly in parallel) and writes its own file; summaries
//! are computed afterwards from the per-run results.

mod flow_suite;
mod runs;
mod stats;

pub use flow_suite::{run_flow_suite, FlowCellReport, FlowSuiteOutcome, FlowProblemSpec, FlowSuiteSpec, FLOW_REPORT_HEADER};
pub use runs::{
    recompute_run_metrics, run_grid, run_limit_step, run_scale_suite, run_sweep, run_train, GridOutcome, HistoryMetrics, RunMetrics,
    ScaleDistance, SummaryRow, SweepSummary,
};
pub use stats::{mean, median, relative_sup_distance};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmdp::{make_gridworld, read_cmdp, GridSpec, TabularCmdp};
use crate::controller::PidGains;
use crate::error::{Error, Result};
use crate::trainer::{Balance, TrainConfig};

pub const DEFAULT_GRID_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Flow,
    Train,
    Sweep,
    Scale,
    LimitStep,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Flow => "flow",
            ExperimentKind::Train => "train",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Scale => "scale",
            ExperimentKind::LimitStep => "limit_step",
        }
    }
}

/// Exactly one of `preset`, `grid` or `cmdp_file`; `d` and `horizon`
/// override the environment's own values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub preset: Option<String>,
    pub grid: Option<GridSpec>,
    pub cmdp_file: Option<PathBuf>,
    pub d: Option<f64>,
    pub horizon: Option<usize>,
}

impl EnvSpec {
    pub fn corridor_a() -> Self {
        Self {
            preset: Some("corridor_a".into()),
            ..Self::default()
        }
    }

    /// Relative `cmdp_file` paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<TabularCmdp> {
        let sources = [self.preset.is_some(), self.grid.is_some(), self.cmdp_file.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(Error::Spec("env needs exactly one of preset, grid, cmdp_file".into()));
        }
        let mut cmdp = if let Some(p) = &self.preset {
            match p.as_str() {
                "corridor_a" => make_gridworld(&GridSpec::corridor_a())?,
                other => return Err(Error::Spec(format!("unknown env preset '{other}'"))),
            }
        } else if let Some(g) = &self.grid {
            make_gridworld(g)?
        } else {
            let path = self.cmdp_file.as_ref().expect("checked above");
            read_cmdp(&base_dir.join(path))?
        };
        if let Some(d) = self.d {
            cmdp = cmdp.with_cost_limit(d)?;
        }
        if let Some(h) = self.horizon {
            cmdp = cmdp.with_horizon(h)?;
        }
        Ok(cmdp)
    }
}

/// Axes of the Cartesian grid. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub k_p: Vec<f64>,
    pub k_i: Vec<f64>,
    pub k_d: Vec<f64>,
    pub rho: Vec<f64>,
    pub eta: Vec<f64>,
    pub seeds: Vec<u64>,
    pub balance: Vec<Balance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub env: Option<EnvSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridAxes,
    #[serde(default)]
    pub flow: Option<FlowSuiteSpec>,
    /// Half-width of the settling band as a fraction of the limit.
    #[serde(default = "default_band")]
    pub settle_band: f64,
    #[serde(default = "default_cap")]
    pub grid_cap: usize,
    /// Default output directory; the command line may override it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_band() -> f64 {
    0.1
}

fn default_cap() -> usize {
    DEFAULT_GRID_CAP
}

/// One point of the expanded grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub rho: f64,
    pub eta: f64,
    pub seed: u64,
    pub balance: Balance,
}

pub fn balance_tag(b: &Balance) -> String {
    match b {
        Balance::None => "none".into(),
        Balance::GradNorm { ema } => format!("gradnorm{ema}"),
        Balance::Kl { probe_eta } => format!("kl{probe_eta}"),
    }
}

impl Cell {
    /// Grid coordinates without the seed; runs sharing a key are replicates.
    pub fn key(&self) -> String {
        format!(
            "kp{}_ki{}_kd{}_rho{}_eta{}_{}",
            self.k_p,
            self.k_i,
            self.k_d,
            self.rho,
            self.eta,
            balance_tag(&self.balance)
        )
    }

    pub fn name(&self) -> String {
        format!("c{:04}_{}_s{}", self.index, self.key(), self.seed)
    }

    pub fn config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        Ok(TrainConfig {
            gains: PidGains::new(self.k_p, self.k_i, self.k_d)?,
            reward_scale: self.rho,
            eta: self.eta,
            seed: self.seed,
            balance: self.balance,
            ..base.clone()
        })
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml_str(&text)?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Spec("name must not be empty".into()));
        }
        if !(self.settle_band > 0.0) {
            return Err(Error::Spec("settle_band must be positive".into()));
        }
        match self.kind {
            ExperimentKind::Flow => {
                let flow = self.flow.as_ref().ok_or_else(|| Error::Spec("flow experiments need a [flow] table".into()))?;
                flow.validate()?;
            }
            kind => {
                if self.env.is_none() {
                    return Err(Error::Spec(format!("{} experiments need an [env] table", kind.as_str())));
                }
                self.train.validate()?;
                let n = self.grid_size();
                if n > self.grid_cap {
                    return Err(Error::Spec(format!("grid has {n} cells, cap is {}", self.grid_cap)));
                }
                if kind == ExperimentKind::LimitStep && self.train.limit_step.is_none() {
                    return Err(Error::Spec("limit_step experiments need train.limit_step".into()));
                }
                if kind == ExperimentKind::Scale && self.grid.rho.len() < 2 {
                    return Err(Error::Spec("scale experiments need at least two rho values".into()));
                }
            }
        }
        Ok(())
    }

    fn axis_len<T>(v: &[T]) -> usize {
        v.len().max(1)
    }

    pub fn grid_size(&self) -> usize {
        let g = &self.grid;
        [
            Self::axis_len(&g.balance),
            Self::axis_len(&g.k_p),
            Self::axis_len(&g.k_i),
            Self::axis_len(&g.k_d),
            Self::axis_len(&g.rho),
            Self::axis_len(&g.eta),
            Self::axis_len(&g.seeds),
        ]
        .iter()
        .fold(1usize, |acc, n| acc.saturating_mul(*n))
    }

    /// Cartesian product in the fixed order balance, k_p, k_i, k_d, rho,
    /// eta, seed (seed fastest). `seed_offset` is added to every seed.
    pub fn cells(&self, seed_offset: u64) -> Vec<Cell> {
        let b = &self.train;
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let balances = if self.grid.balance.is_empty() {
            vec![b.balance]
        } else {
            self.grid.balance.clone()
        };
        let seeds = if self.grid.seeds.is_empty() {
            vec![b.seed]
        } else {
            self.grid.seeds.clone()
        };
        let mut out = Vec::new();
        for balance in &balances {
            for &k_p in &or(&self.grid.k_p, b.gains.k_p()) {
                for &k_i in &or(&self.grid.k_i, b.gains.k_i()) {
                    for &k_d in &or(&self.grid.k_d, b.gains.k_d()) {
                        for &rho in &or(&self.grid.rho, b.reward_scale) {
                            for &eta in &or(&self.grid.eta, b.eta) {
                                for &seed in &seeds {
                                    out.push(Cell {
                                        index: out.len(),
                                        k_p,
                                        k_i,
                                        k_d,
                                        rho,
                                        eta,
                                        seed: seed.wrapping_add(seed_offset),
                                        balance: *balance,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn build_env(&self) -> Result<TabularCmdp> {
        self.env
            .as_ref()
            .ok_or_else(|| Error::Spec("missing [env] table".into()))?
            .build(&self.base_dir)
    }
}

/// What a harness run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub cells: usize,
    /// `(cell, reason)` for every failed cell.
    pub failures: Vec<(String, String)>,
}

impl RunReport {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs any spec, dispatching on its kind.
pub fn run_spec(spec: &ExperimentSpec, out: &Path, seed_offset: u64, exec: crate::exec::Execution) -> Result<RunReport> {
    match spec.kind {
        ExperimentKind::Flow => run_flow_suite(spec, out, exec).map(|r| r.report),
        ExperimentKind::Train => run_train(spec, out, seed_offset, exec).map(|r| r.report),
        ExperimentKind::Sweep => run_sweep(spec, out, seed_offset, exec).map(|r| r.report),
        ExperimentKind::LimitStep => run_limit_step(spec, out, seed_offset, exec).map(|r| r.report),
        ExperimentKind::Scale => run_scale_suite(spec, out, seed_offset, exec).map(|r| r.report),
    }
}
