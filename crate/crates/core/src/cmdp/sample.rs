//! Monte Carlo rollouts and score-function gradient estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Signal, SoftmaxPolicy, TabularCmdp, ValueEstimates};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Vec<u32>,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub discounted_return: f64,
    pub discounted_cost: f64,
    pub episodic_cost: f64,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub episodes: Vec<Episode>,
    pub estimates: ValueEstimates,
}

impl SampleBatch {
    /// Standard errors of the three estimates.
    pub fn standard_errors(&self) -> ValueEstimates {
        let n = self.episodes.len() as f64;
        let se = |f: &dyn Fn(&Episode) -> f64, mean: f64| {
            if self.episodes.len() < 2 {
                return 0.0;
            }
            let var = self.episodes.iter().map(|e| (f(e) - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        ValueEstimates {
            j: se(&|e| e.discounted_return, self.estimates.j),
            j_c: se(&|e| e.discounted_cost, self.estimates.j_c),
            d: se(&|e| e.episodic_cost, self.estimates.d),
        }
    }
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap at the top; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn rollout(cmdp: &TabularCmdp, action_probs: &[Vec<f64>], seed: u64, index: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let h = cmdp.horizon();
    let gamma = cmdp.discount();
    let mut ep = Episode {
        states: Vec::with_capacity(h),
        actions: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
        costs: Vec::with_capacity(h),
        discounted_return: 0.0,
        discounted_cost: 0.0,
        episodic_cost: 0.0,
    };
    let mut s = sample_index(&mut rng, cmdp.initial_dist());
    let mut disc = 1.0;
    for _ in 0..h {
        let a = sample_index(&mut rng, &action_probs[s]);
        let s2 = sample_index(&mut rng, cmdp.next_dist(s, a));
        let (r, c) = (cmdp.r(s, a, s2), cmdp.c(s, a, s2));
        ep.states.push(s as u32);
        ep.actions.push(a as u32);
        ep.rewards.push(r);
        ep.costs.push(c);
        ep.discounted_return += disc * r;
        ep.discounted_cost += disc * c;
        ep.episodic_cost += c;
        disc *= gamma;
        s = s2;
    }
    ep
}

/// Rolls out `n_episodes` episodes of length `horizon`. Episode `i` draws
/// from its own ChaCha stream `(seed, i)`, so the batch is identical under
/// sequential and parallel execution.
pub fn sample_episodes(
    cmdp: &TabularCmdp,
    policy: &SoftmaxPolicy,
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<SampleBatch> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    if policy.n_states() != cmdp.n_states() || policy.n_actions() != cmdp.n_actions() {
        return Err(Error::invalid("policy shape does not match the CMDP"));
    }
    let action_probs: Vec<Vec<f64>> = (0..cmdp.n_states()).map(|s| policy.probs(s)).collect();
    let episodes = exec.map_range(n_episodes, |i| rollout(cmdp, &action_probs, seed, i));

    let n = n_episodes as f64;
    let mut est = ValueEstimates {
        j: 0.0,
        j_c: 0.0,
        d: 0.0,
    };
    for e in &episodes {
        est.j += e.discounted_return;
        est.j_c += e.discounted_cost;
        est.d += e.episodic_cost;
    }
    est.j /= n;
    est.j_c /= n;
    est.d /= n;
    Ok(SampleBatch {
        episodes,
        estimates: est,
    })
}

/// Score-function estimate of `∇_θ J` (or `∇_θ J_C`):
/// `(1/N) Σ_i Σ_t γᵗ (G_t − b_t) ∇ log π(a_t|s_t)`, with `G_t` the discounted
/// signal-to-go and `b_t` the batch mean of `G_t` at step `t`.
pub fn sampled_policy_gradient(
    policy: &SoftmaxPolicy,
    batch: &SampleBatch,
    signal: Signal,
    discount: f64,
) -> Vec<f64> {
    let na = policy.n_actions();
    let mut grad = vec![0.0; policy.logits().len()];
    let n = batch.episodes.len();
    if n == 0 {
        return grad;
    }
    let probs: Vec<Vec<f64>> = (0..policy.n_states()).map(|s| policy.probs(s)).collect();

    let to_go: Vec<Vec<f64>> = batch
        .episodes
        .iter()
        .map(|e| {
            let xs = match signal {
                Signal::Reward => &e.rewards,
                Signal::Cost => &e.costs,
            };
            let mut g = vec![0.0; xs.len()];
            let mut acc = 0.0;
            for t in (0..xs.len()).rev() {
                acc = xs[t] + discount * acc;
                g[t] = acc;
            }
            g
        })
        .collect();
    let len = to_go.iter().map(|g| g.len()).max().unwrap_or(0);
    let baseline: Vec<f64> = (0..len)
        .map(|t| {
            let (sum, cnt) = to_go
                .iter()
                .filter_map(|g| g.get(t))
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            sum / cnt.max(1) as f64
        })
        .collect();

    for (e, g) in batch.episodes.iter().zip(&to_go) {
        let mut disc = 1.0;
        for t in 0..g.len() {
            let (s, a) = (e.states[t] as usize, e.actions[t] as usize);
            let w = disc * (g[t] - baseline[t]);
            for b in 0..na {
                let ind = if b == a { 1.0 } else { 0.0 };
                grad[s * na + b] += w * (ind - probs[s][b]);
            }
            disc *= discount;
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    grad
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{random_cmdp, random_policy};
    use super::super::{exact_policy_gradient, exact_values};
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn deterministic_cmdp_and_policy_match_exact_values() {
        // 3-cycle, deterministic moves, policy saturated on action 0
        let (ns, na) = (3, 2);
        let mut p = vec![0.0; ns * na * ns];
        let mut r = vec![0.0; ns * na * ns];
        let mut c = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let s2 = (s + 1 + a) % ns;
                let i = (s * na + a) * ns + s2;
                p[i] = 1.0;
                r[i] = s as f64 + 0.5;
                c[i] = if s2 == 2 { 1.0 } else { 0.0 };
            }
        }
        let m = TabularCmdp::new(ns, na, p, r, c, 0.5, 1.0, vec![1.0, 0.0, 0.0], 80).unwrap();
        let pol = SoftmaxPolicy::from_logits(ns, na, vec![800.0, -800.0, 800.0, -800.0, 800.0, -800.0]).unwrap();
        let batch = sample_episodes(&m, &pol, 3, 99, Execution::Sequential).unwrap();
        let exact = exact_values(&m, &pol).unwrap();
        // 0.5^80 truncation is far below round-off
        assert_relative_eq!(batch.estimates.j, exact.j, max_relative = 1e-14);
        assert_relative_eq!(batch.estimates.j_c, exact.j_c, max_relative = 1e-14);
        assert_relative_eq!(batch.estimates.d, exact.d, max_relative = 1e-14);
    }

    #[test]
    fn same_seed_same_rollouts_across_execution_modes() {
        let m = random_cmdp(5, 3, 2);
        let pol = random_policy(5, 3, 2);
        let a = sample_episodes(&m, &pol, 64, 7, Execution::Sequential).unwrap();
        let b = sample_episodes(&m, &pol, 64, 7, Execution::Parallel).unwrap();
        let c = sample_episodes(&m, &pol, 64, 8, Execution::Sequential).unwrap();
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.estimates, b.estimates);
        assert_ne!(a.episodes, c.episodes);
    }

    #[test]
    fn estimates_within_three_standard_errors() {
        let m = random_cmdp(5, 3, 4).with_horizon(200).unwrap();
        let pol = random_policy(5, 3, 4);
        let exact = exact_values(&m, &pol).unwrap();
        let batch = sample_episodes(&m, &pol, 4000, 1, Execution::Parallel).unwrap();
        let se = batch.standard_errors();
        assert!((batch.estimates.j - exact.j).abs() <= 3.0 * se.j);
        assert!((batch.estimates.j_c - exact.j_c).abs() <= 3.0 * se.j_c);
        assert!((batch.estimates.d - exact.d).abs() <= 3.0 * se.d);
    }

    #[test]
    fn error_shrinks_like_inverse_root_n() {
        let m = random_cmdp(4, 2, 6).with_horizon(150).unwrap();
        let pol = random_policy(4, 2, 6);
        let exact = exact_values(&m, &pol).unwrap().j;
        let rmse = |n: usize| {
            let trials = 40;
            let mse: f64 = (0..trials)
                .map(|k| {
                    let b = sample_episodes(&m, &pol, n, 1000 + k, Execution::Parallel).unwrap();
                    (b.estimates.j - exact).powi(2)
                })
                .sum::<f64>()
                / trials as f64;
            mse.sqrt()
        };
        let ratio = rmse(50) / rmse(800);
        // sqrt(16) = 4
        assert!(ratio > 2.5 && ratio < 6.0, "ratio {ratio}");
    }

    #[test]
    fn sampled_gradient_is_close_to_exact() {
        let m = random_cmdp(3, 2, 9).with_horizon(120).unwrap();
        let pol = random_policy(3, 2, 9);
        let exact = exact_policy_gradient(&m, &pol, Signal::Reward).unwrap();
        let batch = sample_episodes(&m, &pol, 20_000, 5, Execution::Parallel).unwrap();
        let est = sampled_policy_gradient(&pol, &batch, Signal::Reward, m.discount());
        let norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = exact.iter().zip(&est).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 0.1 * norm, "err {err} norm {norm}");
    }

    #[test]
    fn rejects_zero_episodes() {
        let m = random_cmdp(2, 2, 1);
        assert!(sample_episodes(&m, &SoftmaxPolicy::for_cmdp(&m), 0, 0, Execution::Sequential).is_err());
    }
}
