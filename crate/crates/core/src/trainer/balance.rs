//! Combining the reward and cost gradients into one update direction.

use serde::{Deserialize, Serialize};

use crate::cmdp::{evaluate, PolicyEvaluation, Signal, SoftmaxPolicy, TabularCmdp};
use crate::controller::lambda_to_u;
use crate::error::{Error, Result};

/// Below this norm the cost gradient is treated as zero.
pub const BETA_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveForm {
    /// `(∇J − λβ∇J_C) / (1 + λ)`
    #[default]
    Rescaled,
    /// `(1 − u)∇J − uβ∇J_C` with `u = λ / (1 + λ)`
    UAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    /// `β = 1`
    #[default]
    None,
    /// `β = ‖∇J‖ / ‖∇J_C‖`, smoothed by an EMA with coefficient `ema`
    /// (0 disables smoothing).
    GradNorm { ema: f64 },
    /// `β` from the KL divergence of reward-only and cost-only probe steps.
    Kl { probe_eta: f64 },
}

impl Balance {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Balance::None => Ok(()),
            Balance::GradNorm { ema } if (0.0..1.0).contains(&ema) => Ok(()),
            Balance::GradNorm { ema } => Err(Error::invalid(format!("grad_norm ema must lie in [0, 1), got {ema}"))),
            Balance::Kl { probe_eta } if probe_eta > 0.0 && probe_eta.is_finite() => Ok(()),
            Balance::Kl { probe_eta } => Err(Error::invalid(format!("probe_eta must be positive, got {probe_eta}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BalanceState {
    /// Smoothed gradient-norm ratio; `None` until the first usable ratio.
    pub beta_hat: Option<f64>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Returns `(direction, β_k, next state)`. `kl_ratio` supplies β for
/// [`Balance::Kl`], which needs the CMDP and is computed by the caller.
pub fn balanced_gradient(
    grad_j: &[f64],
    grad_jc: &[f64],
    lambda: f64,
    form: ObjectiveForm,
    balance: Balance,
    state: &BalanceState,
    kl_ratio: Option<f64>,
) -> Result<(Vec<f64>, f64, BalanceState)> {
    if grad_j.len() != grad_jc.len() {
        return Err(Error::invalid("gradient shapes differ"));
    }
    let u = lambda_to_u(lambda)?;
    let mut next = *state;
    let beta = match balance {
        Balance::None => 1.0,
        Balance::GradNorm { ema } => {
            let nc = norm(grad_jc);
            if nc < BETA_GUARD {
                state.beta_hat.unwrap_or(1.0)
            } else {
                let ratio = norm(grad_j) / nc;
                let smoothed = match state.beta_hat {
                    Some(prev) => ema * prev + (1.0 - ema) * ratio,
                    None => ratio,
                };
                next.beta_hat = Some(smoothed);
                smoothed
            }
        }
        Balance::Kl { .. } => kl_ratio.ok_or_else(|| Error::invalid("kl balance needs a precomputed ratio"))?,
    };

    let dir = match form {
        ObjectiveForm::Rescaled => {
            let s = 1.0 / (1.0 + lambda);
            grad_j.iter().zip(grad_jc).map(|(j, c)| s * (j - lambda * beta * c)).collect()
        }
        ObjectiveForm::UAffine => grad_j
            .iter()
            .zip(grad_jc)
            .map(|(j, c)| (1.0 - u) * j - u * beta * c)
            .collect(),
    };
    Ok((dir, beta, next))
}

/// Occupancy-weighted `KL(π_θ ‖ π_θ')`.
pub fn weighted_kl(policy: &SoftmaxPolicy, other: &SoftmaxPolicy, weights: &[f64]) -> f64 {
    (0..policy.n_states())
        .map(|s| {
            let p = policy.probs(s);
            let q = other.probs(s);
            let kl: f64 = p
                .iter()
                .zip(&q)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, qi)| pi * (pi / qi).ln())
                .sum();
            weights[s] * kl.max(0.0)
        })
        .sum()
}

/// `β_KL` from given gradients and state weights. Returns 1 when the cost
/// gradient is negligible or both probe divergences vanish.
pub fn kl_ratio_from(
    policy: &SoftmaxPolicy,
    grad_j: &[f64],
    grad_jc: &[f64],
    weights: &[f64],
    probe_eta: f64,
) -> f64 {
    if norm(grad_jc) < BETA_GUARD {
        return 1.0;
    }
    let mut pr = policy.clone();
    pr.ascend(grad_j, probe_eta);
    let mut pc = policy.clone();
    pc.ascend(grad_jc, probe_eta);
    let kr = weighted_kl(policy, &pr, weights);
    let kc = weighted_kl(policy, &pc, weights);
    if kc <= 0.0 {
        return 1.0;
    }
    kr / kc
}

pub(crate) fn kl_ratio_exact(policy: &SoftmaxPolicy, eval: &PolicyEvaluation, probe_eta: f64) -> f64 {
    kl_ratio_from(
        policy,
        &eval.gradient(Signal::Reward),
        &eval.gradient(Signal::Cost),
        &eval.state_weights(),
        probe_eta,
    )
}

pub fn kl_balance(cmdp: &TabularCmdp, policy: &SoftmaxPolicy, probe_eta: f64) -> Result<f64> {
    if !(probe_eta > 0.0) || !probe_eta.is_finite() {
        return Err(Error::invalid(format!("probe_eta must be positive, got {probe_eta}")));
    }
    let eval = evaluate(cmdp, &policy.table())?;
    Ok(kl_ratio_exact(policy, &eval, probe_eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn grad_norm_example() {
        let (d, beta, st) = balanced_gradient(
            &[3.0, 4.0],
            &[0.0, 1.0],
            1.0,
            ObjectiveForm::UAffine,
            Balance::GradNorm { ema: 0.0 },
            &BalanceState::default(),
            None,
        )
        .unwrap();
        assert_eq!(beta, 5.0);
        assert_eq!(st.beta_hat, Some(5.0));
        assert_relative_eq!(d[0], 1.5, epsilon = 1e-15);
        assert_relative_eq!(d[1], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_lambda_gives_reward_gradient() {
        let gj = [0.3, -1.2, 2.0];
        let gc = [5.0, 1.0, -3.0];
        for form in [ObjectiveForm::Rescaled, ObjectiveForm::UAffine] {
            for bal in [Balance::None, Balance::GradNorm { ema: 0.9 }, Balance::Kl { probe_eta: 0.1 }] {
                let (d, _, _) = balanced_gradient(&gj, &gc, 0.0, form, bal, &BalanceState::default(), Some(7.0)).unwrap();
                assert_eq!(d, gj.to_vec());
            }
        }
    }

    #[test]
    fn ema_starts_at_first_ratio_then_smooths() {
        let b = Balance::GradNorm { ema: 0.9 };
        let (_, b1, s1) =
            balanced_gradient(&[2.0], &[1.0], 1.0, ObjectiveForm::Rescaled, b, &BalanceState::default(), None).unwrap();
        assert_eq!(b1, 2.0);
        let (_, b2, _) = balanced_gradient(&[4.0], &[1.0], 1.0, ObjectiveForm::Rescaled, b, &s1, None).unwrap();
        assert_relative_eq!(b2, 0.9 * 2.0 + 0.1 * 4.0, epsilon = 1e-15);
    }

    #[test]
    fn guard_keeps_previous_beta() {
        let b = Balance::GradNorm { ema: 0.5 };
        let (_, beta, s) =
            balanced_gradient(&[1.0], &[0.0], 2.0, ObjectiveForm::Rescaled, b, &BalanceState::default(), None).unwrap();
        assert_eq!(beta, 1.0);
        assert_eq!(s.beta_hat, None);
        let st = BalanceState { beta_hat: Some(3.0) };
        let (_, beta, s) = balanced_gradient(&[1.0], &[1e-13], 2.0, ObjectiveForm::Rescaled, b, &st, None).unwrap();
        assert_eq!(beta, 3.0);
        assert_eq!(s, st);
    }

    #[test]
    fn kl_mode_requires_ratio() {
        let r = balanced_gradient(&[1.0], &[1.0], 1.0, ObjectiveForm::Rescaled, Balance::Kl { probe_eta: 0.1 }, &BalanceState::default(), None);
        assert!(r.is_err());
    }

    #[test]
    fn reward_scaling_scales_beta_and_direction() {
        let gj = [0.7, -0.2, 1.1, 0.4];
        let gc = [0.1, 0.9, -0.3, 0.2];
        let b = Balance::GradNorm { ema: 0.0 };
        let rho = 10.0;
        let scaled: Vec<f64> = gj.iter().map(|v| rho * v).collect();
        let (d1, b1, _) = balanced_gradient(&gj, &gc, 0.8, ObjectiveForm::Rescaled, b, &BalanceState::default(), None).unwrap();
        let (d2, b2, _) = balanced_gradient(&scaled, &gc, 0.8, ObjectiveForm::Rescaled, b, &BalanceState::default(), None).unwrap();
        assert_relative_eq!(b2, rho * b1, max_relative = 1e-14);
        for (x, y) in d1.iter().zip(&d2) {
            assert_relative_eq!(*y, rho * x, max_relative = 1e-13);
        }
        assert_relative_eq!(cosine(&d1, &d2), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn unbalanced_reward_scale_acts_like_dividing_lambda() {
        let gj = [0.7, -0.2, 1.1];
        let gc = [0.1, 0.9, -0.3];
        let (rho, lambda) = (10.0, 3.0);
        let scaled: Vec<f64> = gj.iter().map(|v| rho * v).collect();
        let st = BalanceState::default();
        let (d_scaled, _, _) = balanced_gradient(&scaled, &gc, lambda, ObjectiveForm::Rescaled, Balance::None, &st, None).unwrap();
        let (d_eff, _, _) =
            balanced_gradient(&gj, &gc, lambda / rho, ObjectiveForm::Rescaled, Balance::None, &st, None).unwrap();
        assert_relative_eq!(cosine(&d_scaled, &d_eff), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn identical_gradients_give_unit_kl_ratio() {
        let pol = SoftmaxPolicy::from_logits(2, 3, vec![0.1, -0.4, 0.3, 1.0, 0.0, -1.0]).unwrap();
        let g = [0.5, -0.1, 0.2, -0.3, 0.4, 0.0];
        assert_eq!(kl_ratio_from(&pol, &g, &g, &[0.6, 0.4], 0.3), 1.0);
    }

    #[test]
    fn kl_ratio_tends_to_square_of_gradient_ratio() {
        let pol = SoftmaxPolicy::from_logits(2, 3, vec![0.1, -0.4, 0.3, 1.0, 0.0, -1.0]).unwrap();
        let gc = [0.5, -0.1, 0.2, -0.3, 0.4, 0.0];
        let gj: Vec<f64> = gc.iter().map(|v| 2.0 * v).collect();
        let w = [0.6, 0.4];
        let errs: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&eta| (kl_ratio_from(&pol, &gj, &gc, &w, eta) - 4.0).abs())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-2, "{errs:?}");
    }

    #[test]
    fn zero_cost_gradient_hits_sentinel() {
        let pol = SoftmaxPolicy::uniform(2, 2);
        assert_eq!(kl_ratio_from(&pol, &[1.0, 0.0, 0.0, 1.0], &[0.0; 4], &[0.5, 0.5], 0.1), 1.0);
    }

    proptest! {
        #[test]
        fn forms_are_identical(
            gj in prop::collection::vec(-10.0f64..10.0, 1..8),
            seed in prop::collection::vec(-10.0f64..10.0, 8),
            lambda in 0.0f64..100.0,
            beta in 0.01f64..50.0,
        ) {
            let gc = &seed[..gj.len()];
            let st = BalanceState { beta_hat: Some(beta) };
            let (d1, _, _) = balanced_gradient(&gj, gc, lambda, ObjectiveForm::Rescaled, Balance::Kl { probe_eta: 1.0 }, &st, Some(beta)).unwrap();
            let (d2, _, _) = balanced_gradient(&gj, gc, lambda, ObjectiveForm::UAffine, Balance::Kl { probe_eta: 1.0 }, &st, Some(beta)).unwrap();
            let scale = norm(&d1).max(norm(&gj)).max(norm(gc) * beta);
            for (x, y) in d1.iter().zip(&d2) {
                prop_assert!((x - y).abs() <= 1e-12 * scale.max(1e-300));
            }
        }
    }
}
