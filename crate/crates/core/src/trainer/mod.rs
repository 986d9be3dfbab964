//! Constraint-controlled policy-gradient training.
//!
//! Each iteration evaluates the current policy (exactly or by sampling),
//! feeds the episodic cost `D` to the multiplier controller, forms the
//! combined direction from `∇J` and `∇J_C`, and takes one ascent step.

mod balance;
mod metrics;

pub use balance::{
    balanced_gradient, kl_balance, kl_ratio_from, weighted_kl, Balance, BalanceState, ObjectiveForm, BETA_GUARD,
};
pub use metrics::{
    cost_fom, last_quartile_mean_abs_gap, max_violation, overshoot_after, settled_in_last_quartile,
    settling_iteration,
};

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{evaluate, sample_episodes, sampled_policy_gradient, Signal, SoftmaxPolicy, TabularCmdp};
use crate::controller::{lambda_to_u, reset, pid_update, PidGains, SmoothingConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Exact,
    Sampled { n_episodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    #[default]
    Raw,
    /// Divide the update by its global norm when nonzero.
    DirectionNormalized,
}

/// Replace the cost limit from `iteration` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitStep {
    pub iteration: usize,
    pub new_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub eta: f64,
    pub gains: PidGains,
    pub smoothing: SmoothingConfig,
    pub mode: GradientMode,
    pub objective_form: ObjectiveForm,
    pub balance: Balance,
    pub reward_scale: f64,
    pub step_rule: StepRule,
    pub lambda0: f64,
    pub controller_enabled: bool,
    pub seed: u64,
    /// Initial logits are drawn uniformly from `[-s, s]` using `seed`; 0
    /// starts from the uniform policy.
    pub init_logit_scale: f64,
    pub limit_step: Option<LimitStep>,
    /// Keep a copy of θ at every iteration.
    pub record_params: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            eta: 1.0,
            gains: PidGains::new(0.0, 0.01, 0.0).expect("valid gains"),
            smoothing: SmoothingConfig::off(),
            mode: GradientMode::Exact,
            objective_form: ObjectiveForm::Rescaled,
            balance: Balance::None,
            reward_scale: 1.0,
            step_rule: StepRule::Raw,
            lambda0: 0.0,
            controller_enabled: true,
            seed: 0,
            init_logit_scale: 0.0,
            limit_step: None,
            record_params: false,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.reward_scale > 0.0) || !self.reward_scale.is_finite() {
            return Err(Error::invalid(format!("reward_scale must be positive, got {}", self.reward_scale)));
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(Error::invalid(format!("lambda0 must be finite and >= 0, got {}", self.lambda0)));
        }
        if !(self.init_logit_scale >= 0.0) || !self.init_logit_scale.is_finite() {
            return Err(Error::invalid("init_logit_scale must be finite and >= 0"));
        }
        if let GradientMode::Sampled { n_episodes: 0 } = self.mode {
            return Err(Error::invalid("sampled mode needs n_episodes >= 1"));
        }
        if let Some(ls) = self.limit_step {
            if !(ls.new_limit >= 0.0) || !ls.new_limit.is_finite() {
                return Err(Error::invalid("limit step must set a finite, nonnegative limit"));
            }
        }
        // serde bypasses the constructors
        PidGains::new(self.gains.k_p(), self.gains.k_i(), self.gains.k_d())?;
        SmoothingConfig::new(self.smoothing.ema_p(), self.smoothing.ema_d(), self.smoothing.d_delay())?;
        self.balance.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// Return under the scaled rewards.
    pub j: f64,
    pub j_c: f64,
    pub d: f64,
    pub lambda: f64,
    pub u: f64,
    pub beta: f64,
    /// `(D − limit)₊` against the limit in force at this iteration.
    pub violation: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
    pub policy: SoftmaxPolicy,
    /// θ at each iteration, when requested.
    pub params: Vec<Vec<f64>>,
    /// Iteration at which a non-finite gradient stopped training; records
    /// cover every earlier iteration.
    pub aborted_at: Option<usize>,
}

pub const HISTORY_HEADER: [&str; 8] = ["k", "J", "J_C", "D", "lambda", "u", "beta", "violation"];

impl TrainHistory {
    pub fn completed(&self) -> bool {
        self.aborted_at.is_none()
    }

    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.d).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }

    /// `Σ_k (D_k − d)₊`
    pub fn cost_fom(&self, d: f64) -> f64 {
        cost_fom(&self.costs(), d)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HISTORY_HEADER)?;
        for r in &self.records {
            out.write_record([
                r.k.to_string(),
                r.j.to_string(),
                r.j_c.to_string(),
                r.d.to_string(),
                r.lambda.to_string(),
                r.u.to_string(),
                r.beta.to_string(),
                r.violation.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// One row of a history CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub k: usize,
    pub j: f64,
    pub j_c: f64,
    pub d: f64,
    pub lambda: f64,
    pub u: f64,
    pub beta: f64,
    pub violation: f64,
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(HISTORY_HEADER) {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        };
        rows.push(HistoryRow {
            k: rec[0].parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
            j: f(1)?,
            j_c: f(2)?,
            d: f(3)?,
            lambda: f(4)?,
            u: f(5)?,
            beta: f(6)?,
            violation: f(7)?,
        });
    }
    Ok(rows)
}

pub fn initial_policy(cmdp: &TabularCmdp, config: &TrainConfig) -> SoftmaxPolicy {
    let mut policy = SoftmaxPolicy::for_cmdp(cmdp);
    if config.init_logit_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_logit_scale;
        policy.logits_mut().iter_mut().for_each(|t| *t = rng.random_range(-s..=s));
    }
    policy
}

/// Seed of the rollout batch at iteration `k`.
fn batch_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Discounted state-visitation frequencies of a batch, normalized.
fn empirical_weights(n_states: usize, batch: &crate::cmdp::SampleBatch, discount: f64) -> Vec<f64> {
    let mut w = vec![0.0; n_states];
    for e in &batch.episodes {
        let mut disc = 1.0;
        for &s in &e.states {
            w[s as usize] += disc;
            disc *= discount;
        }
    }
    let z: f64 = w.iter().sum();
    if z > 0.0 {
        w.iter_mut().for_each(|v| *v /= z);
    }
    w
}

struct Observation {
    j: f64,
    j_c: f64,
    d: f64,
    grad_j: Vec<f64>,
    grad_jc: Vec<f64>,
    kl_ratio: Option<f64>,
}

fn observe(cmdp: &TabularCmdp, policy: &SoftmaxPolicy, config: &TrainConfig, k: usize) -> Result<Observation> {
    let probe = match config.balance {
        Balance::Kl { probe_eta } => Some(probe_eta),
        _ => None,
    };
    match config.mode {
        GradientMode::Exact => {
            let e = evaluate(cmdp, &policy.table())?;
            let grad_j = e.gradient(Signal::Reward);
            let grad_jc = e.gradient(Signal::Cost);
            let kl_ratio = probe.map(|eta| kl_ratio_from(policy, &grad_j, &grad_jc, &e.state_weights(), eta));
            Ok(Observation {
                j: e.values.j,
                j_c: e.values.j_c,
                d: e.values.d,
                grad_j,
                grad_jc,
                kl_ratio,
            })
        }
        GradientMode::Sampled { n_episodes } => {
            let batch = sample_episodes(cmdp, policy, n_episodes, batch_seed(config.seed, k), config.exec)?;
            let grad_j = sampled_policy_gradient(policy, &batch, Signal::Reward, cmdp.discount());
            let grad_jc = sampled_policy_gradient(policy, &batch, Signal::Cost, cmdp.discount());
            let kl_ratio = probe.map(|eta| {
                let w = empirical_weights(cmdp.n_states(), &batch, cmdp.discount());
                kl_ratio_from(policy, &grad_j, &grad_jc, &w, eta)
            });
            Ok(Observation {
                j: batch.estimates.j,
                j_c: batch.estimates.j_c,
                d: batch.estimates.d,
                grad_j,
                grad_jc,
                kl_ratio,
            })
        }
    }
}

/// Runs `config.iterations` iterations from [`initial_policy`].
pub fn train(cmdp: &TabularCmdp, config: &TrainConfig) -> Result<TrainHistory> {
    train_from(cmdp, config, initial_policy(cmdp, config))
}

pub fn train_from(cmdp: &TabularCmdp, config: &TrainConfig, mut policy: SoftmaxPolicy) -> Result<TrainHistory> {
    config.validate()?;
    if policy.n_states() != cmdp.n_states() || policy.n_actions() != cmdp.n_actions() {
        return Err(Error::invalid("policy shape does not match the CMDP"));
    }
    let scaled = if config.reward_scale == 1.0 {
        cmdp.clone()
    } else {
        cmdp.with_reward_scale(config.reward_scale)?
    };
    let mut limit = cmdp.cost_limit();
    let mut ctrl = reset(&config.gains, &config.smoothing);
    let mut bal = BalanceState::default();
    let mut records = Vec::with_capacity(config.iterations);
    let mut params = Vec::new();
    let mut aborted_at = None;

    for k in 0..config.iterations {
        if let Some(ls) = config.limit_step {
            if k == ls.iteration {
                limit = ls.new_limit;
            }
        }
        let obs = observe(&scaled, &policy, config, k)?;
        let finite = [obs.j, obs.j_c, obs.d].iter().all(|v| v.is_finite())
            && obs.grad_j.iter().chain(&obs.grad_jc).all(|v| v.is_finite());
        if !finite {
            aborted_at = Some(k);
            break;
        }

        let lambda = if config.controller_enabled {
            let (next, out) = pid_update(&ctrl, &config.gains, &config.smoothing, obs.d, limit)?;
            ctrl = next;
            out.lambda
        } else {
            config.lambda0
        };
        let u = lambda_to_u(lambda)?;

        let (mut dir, beta, next_bal) = balanced_gradient(
            &obs.grad_j,
            &obs.grad_jc,
            lambda,
            config.objective_form,
            config.balance,
            &bal,
            obs.kl_ratio,
        )?;
        bal = next_bal;

        if config.record_params {
            params.push(policy.logits().to_vec());
        }
        records.push(IterationRecord {
            k,
            j: obs.j,
            j_c: obs.j_c,
            d: obs.d,
            lambda,
            u,
            beta,
            violation: (obs.d - limit).max(0.0),
            limit,
        });

        if dir.iter().any(|v| !v.is_finite()) {
            aborted_at = Some(k + 1);
            break;
        }
        if config.step_rule == StepRule::DirectionNormalized {
            let n = balance::norm(&dir);
            if n > 0.0 {
                dir.iter_mut().for_each(|v| *v /= n);
            }
        }
        policy.ascend(&dir, config.eta);
    }

    Ok(TrainHistory {
        records,
        policy,
        params,
        aborted_at,
    })
}
