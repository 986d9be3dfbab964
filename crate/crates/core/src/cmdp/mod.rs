//! Finite constrained MDPs with tabular softmax policies.

mod eval;
mod grid;
mod io;
mod oracle;
mod sample;

pub use eval::{
    evaluate, exact_policy_gradient, exact_values, finite_horizon_return, PolicyEvaluation, Signal,
    ValueEstimates,
};
pub use grid::{make_gridworld, GridSpec, GridRewards};
pub use io::{cmdp_from_text, cmdp_to_text, read_cmdp, write_cmdp};
pub use oracle::{
    brute_force_oracle, default_lambda_grid, lagrangian_greedy_policy, lagrangian_search_oracle, ConstraintMeasure, OracleResult, Witness,
    ENUMERATION_LIMIT,
};
pub use sample::{sample_episodes, sampled_policy_gradient, Episode, SampleBatch};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-10;

/// `P[s][a][s']`, `R[s][a][s']` and `C[s][a][s']` stored flat in
/// `(s, a, s')` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCmdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    cost: Vec<f64>,
    discount: f64,
    cost_limit: f64,
    initial_dist: Vec<f64>,
    horizon: usize,
}

impl TabularCmdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        cost: Vec<f64>,
        discount: f64,
        cost_limit: f64,
        initial_dist: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("need at least one state and one action"));
        }
        let len = n_states * n_actions * n_states;
        for (name, t) in [("transition", &transition), ("reward", &reward), ("cost", &cost)] {
            if t.len() != len {
                return Err(Error::invalid(format!("{name} has {} entries, expected {len}", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
        }
        if cost.iter().any(|&c| c < 0.0) {
            return Err(Error::invalid("costs must be nonnegative"));
        }
        for (row, chunk) in transition.chunks(n_states).enumerate() {
            check_distribution(chunk).map_err(|e| {
                Error::invalid(format!(
                    "P[{}][{}] is not a distribution: {e}",
                    row / n_actions,
                    row % n_actions
                ))
            })?;
        }
        if initial_dist.len() != n_states {
            return Err(Error::invalid("initial distribution has the wrong length"));
        }
        check_distribution(&initial_dist).map_err(|e| Error::invalid(format!("initial distribution: {e}")))?;
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0, 1), got {discount}")));
        }
        if !(cost_limit >= 0.0) || !cost_limit.is_finite() {
            return Err(Error::invalid(format!("cost limit must be finite and >= 0, got {cost_limit}")));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            cost,
            discount,
            cost_limit,
            initial_dist,
            horizon,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn cost_limit(&self) -> f64 {
        self.cost_limit
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    #[inline]
    fn idx(&self, s: usize, a: usize, s2: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + s2
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[self.idx(s, a, s2)]
    }
    #[inline]
    pub fn r(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.reward[self.idx(s, a, s2)]
    }
    #[inline]
    pub fn c(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.cost[self.idx(s, a, s2)]
    }

    /// Next-state distribution `P[s][a][·]`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = self.idx(s, a, 0);
        &self.transition[start..start + self.n_states]
    }

    /// Copy with every reward multiplied by `rho`; costs untouched.
    pub fn with_reward_scale(&self, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::invalid(format!("reward scale must be positive, got {rho}")));
        }
        let mut out = self.clone();
        out.reward.iter_mut().for_each(|r| *r *= rho);
        Ok(out)
    }

    pub fn with_cost_limit(&self, d: f64) -> Result<Self> {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("cost limit must be finite and >= 0, got {d}")));
        }
        let mut out = self.clone();
        out.cost_limit = d;
        Ok(out)
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    /// Expected one-step reward and cost for each `(s, a)`, flat `s * A + a`.
    pub(crate) fn expected_step(&self) -> (Vec<f64>, Vec<f64>) {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut r = vec![0.0; ns * na];
        let mut c = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let base = self.idx(s, a, 0);
                let mut er = 0.0;
                let mut ec = 0.0;
                for s2 in 0..ns {
                    let p = self.transition[base + s2];
                    er += p * self.reward[base + s2];
                    ec += p * self.cost[base + s2];
                }
                r[s * na + a] = er;
                c[s * na + a] = ec;
            }
        }
        (r, c)
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err("negative or NaN entry".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Tabular softmax policy `π(a|s) ∝ exp θ[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::invalid("logit table has the wrong size"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn for_cmdp(cmdp: &TabularCmdp) -> Self {
        Self::uniform(cmdp.n_states, cmdp.n_actions)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s * self.n_actions..(s + 1) * self.n_actions];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn table(&self) -> PolicyTable {
        let mut probs = Vec::with_capacity(self.logits.len());
        for s in 0..self.n_states {
            probs.extend(self.probs(s));
        }
        PolicyTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs,
        }
    }

    /// Adds `step * direction` to the logits.
    pub fn ascend(&mut self, direction: &[f64], step: f64) {
        for (t, d) in self.logits.iter_mut().zip(direction) {
            *t += step * d;
        }
    }
}

/// Explicit action probabilities `π[s][a]`, flat `s * A + a`. Unlike
/// [`SoftmaxPolicy`] this can represent deterministic policies exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::invalid("policy table has the wrong size"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row).map_err(|e| Error::invalid(format!("π(·|{s}): {e}")))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// Per-state mixture `w·a + (1 − w)·b`.
    pub fn mix(a: &PolicyTable, b: &PolicyTable, w: f64) -> Self {
        let probs = a.probs.iter().zip(&b.probs).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        Self {
            n_states: a.n_states,
            n_actions: a.n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}
