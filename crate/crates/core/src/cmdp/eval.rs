//! Exact policy evaluation and exact policy gradients.

use nalgebra::{DMatrix, DVector};

use super::{PolicyTable, SoftmaxPolicy, TabularCmdp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimates {
    /// Discounted return from the initial distribution.
    pub j: f64,
    /// Discounted cost from the initial distribution.
    pub j_c: f64,
    /// Expected non-discounted episodic cost over the horizon.
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Reward,
    Cost,
}

/// Everything the exact gradient needs, computed once per policy.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub values: ValueEstimates,
    pub v: Vec<f64>,
    pub v_c: Vec<f64>,
    /// `Q[s * A + a]`
    pub q: Vec<f64>,
    pub q_c: Vec<f64>,
    /// Unnormalized discounted state occupancy `μᵀ(I − γP_π)⁻¹`.
    pub occupancy: Vec<f64>,
    probs: Vec<f64>,
    n_actions: usize,
}

impl PolicyEvaluation {
    /// `∂J/∂θ[s][a] = d(s) π(a|s) (Q(s,a) − V(s))` for the softmax
    /// parameterization whose probabilities were evaluated.
    pub fn gradient(&self, signal: Signal) -> Vec<f64> {
        let (q, v) = match signal {
            Signal::Reward => (&self.q, &self.v),
            Signal::Cost => (&self.q_c, &self.v_c),
        };
        let na = self.n_actions;
        (0..q.len())
            .map(|i| {
                let s = i / na;
                self.occupancy[s] * self.probs[i] * (q[i] - v[s])
            })
            .collect()
    }

    /// Discounted occupancy normalized to a distribution.
    pub fn state_weights(&self) -> Vec<f64> {
        let z: f64 = self.occupancy.iter().sum();
        self.occupancy.iter().map(|d| d / z).collect()
    }
}

fn markov_chain(cmdp: &TabularCmdp, policy: &PolicyTable) -> DMatrix<f64> {
    let ns = cmdp.n_states();
    let na = cmdp.n_actions();
    let mut p = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (s2, &pr) in cmdp.next_dist(s, a).iter().enumerate() {
                p[(s, s2)] += w * pr;
            }
        }
    }
    p
}

fn check_shape(cmdp: &TabularCmdp, policy: &PolicyTable) -> Result<()> {
    if policy.n_states() != cmdp.n_states() || policy.n_actions() != cmdp.n_actions() {
        return Err(Error::invalid(format!(
            "policy is {}x{}, CMDP is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            cmdp.n_states(),
            cmdp.n_actions()
        )));
    }
    Ok(())
}

pub fn evaluate(cmdp: &TabularCmdp, policy: &PolicyTable) -> Result<PolicyEvaluation> {
    check_shape(cmdp, policy)?;
    let ns = cmdp.n_states();
    let na = cmdp.n_actions();
    let gamma = cmdp.discount();
    let (er, ec) = cmdp.expected_step();

    let p_pi = markov_chain(cmdp, policy);
    let mut r_pi = DVector::zeros(ns);
    let mut c_pi = DVector::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            r_pi[s] += policy.prob(s, a) * er[s * na + a];
            c_pi[s] += policy.prob(s, a) * ec[s * na + a];
        }
    }

    let system = DMatrix::identity(ns, ns) - &p_pi * gamma;
    let lu = system.clone().lu();
    let singular = || Error::Singular("I - γP_π".into());
    let v = lu.solve(&r_pi).ok_or_else(singular)?;
    let v_c = lu.solve(&c_pi).ok_or_else(singular)?;
    let mu = DVector::from_column_slice(cmdp.initial_dist());
    let occupancy = system.transpose().lu().solve(&mu).ok_or_else(singular)?;

    let j = mu.dot(&v);
    let j_c = mu.dot(&v_c);

    // non-discounted episodic cost: Σ_{t<H} μᵀ P_π^t c_π
    let mut dist = mu.transpose();
    let mut d = 0.0;
    for t in 0..cmdp.horizon() {
        d += (&dist * &c_pi)[0];
        if t + 1 < cmdp.horizon() {
            dist = &dist * &p_pi;
        }
    }

    let mut q = vec![0.0; ns * na];
    let mut q_c = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let next = cmdp.next_dist(s, a);
            let (mut fv, mut fc) = (0.0, 0.0);
            for (s2, &pr) in next.iter().enumerate() {
                fv += pr * v[s2];
                fc += pr * v_c[s2];
            }
            q[s * na + a] = er[s * na + a] + gamma * fv;
            q_c[s * na + a] = ec[s * na + a] + gamma * fc;
        }
    }

    let probs = (0..ns).flat_map(|s| policy.row(s).to_vec()).collect();
    Ok(PolicyEvaluation {
        values: ValueEstimates { j, j_c, d },
        v: v.iter().copied().collect(),
        v_c: v_c.iter().copied().collect(),
        q,
        q_c,
        occupancy: occupancy.iter().copied().collect(),
        probs,
        n_actions: na,
    })
}

pub fn exact_values(cmdp: &TabularCmdp, policy: &SoftmaxPolicy) -> Result<ValueEstimates> {
    Ok(evaluate(cmdp, &policy.table())?.values)
}

pub fn exact_policy_gradient(cmdp: &TabularCmdp, policy: &SoftmaxPolicy, signal: Signal) -> Result<Vec<f64>> {
    Ok(evaluate(cmdp, &policy.table())?.gradient(signal))
}

/// Discounted return truncated at the horizon, `Σ_{t<H} γᵗ μᵀP_π^t r_π`.
pub fn finite_horizon_return(cmdp: &TabularCmdp, policy: &PolicyTable) -> Result<f64> {
    check_shape(cmdp, policy)?;
    let ns = cmdp.n_states();
    let na = cmdp.n_actions();
    let (er, _) = cmdp.expected_step();
    let p_pi = markov_chain(cmdp, policy);
    let r_pi = DVector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * er[s * na + a]).sum());
    let mut dist = DVector::from_column_slice(cmdp.initial_dist()).transpose();
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..cmdp.horizon() {
        total += disc * (&dist * &r_pi)[0];
        dist = &dist * &p_pi;
        disc *= cmdp.discount();
    }
    Ok(total)
}
