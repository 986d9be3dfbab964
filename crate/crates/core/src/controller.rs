//! PID control of a Lagrange multiplier for an inequality constraint
//! `J_C <= d`.
//!
//! The controller is a pure state transition: [`pid_update`] takes the
//! previous [`ControllerState`] and one cost observation and returns the
//! next state together with the multiplier. Per iteration:
//!
//! ```text
//! Δ  = J_C - d
//! ∂  = (J_C - J_C[k - delay])+
//! I  = (I + Δ)+
//! Δ~ = c_p Δ~ + (1 - c_p) Δ
//! ∂~ = c_d ∂~ + (1 - c_d) ∂
//! λ  = (K_P Δ~ + K_I I + K_D ∂~)+
//! ```
//!
//! With `ema_p = ema_d = 0` and `d_delay = 1` this is the plain PID rule;
//! with `K_P = K_D = 0` it is the classic projected Lagrange multiplier
//! update `λ ← (λ + K_I (J_C - d))+`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    k_p: f64,
    k_i: f64,
    k_d: f64,
}

impl PidGains {
    pub fn new(k_p: f64, k_i: f64, k_d: f64) -> Result<Self> {
        for (name, v) in [("k_p", k_p), ("k_i", k_i), ("k_d", k_d)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("gain {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { k_p, k_i, k_d })
    }

    /// Integral-only gains: the traditional multiplier update.
    pub fn integral(k_i: f64) -> Result<Self> {
        Self::new(0.0, k_i, 0.0)
    }

    pub fn k_p(&self) -> f64 {
        self.k_p
    }

    pub fn k_i(&self) -> f64 {
        self.k_i
    }

    pub fn k_d(&self) -> f64 {
        self.k_d
    }
}

/// Smoothing of the proportional and derivative inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    ema_p: f64,
    ema_d: f64,
    d_delay: usize,
}

impl SmoothingConfig {
    pub fn new(ema_p: f64, ema_d: f64, d_delay: usize) -> Result<Self> {
        for (name, v) in [("ema_p", ema_p), ("ema_d", ema_d)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if d_delay == 0 {
            return Err(Error::invalid("d_delay must be >= 1"));
        }
        Ok(Self {
            ema_p,
            ema_d,
            d_delay,
        })
    }

    /// No smoothing, one-step difference.
    pub fn off() -> Self {
        Self {
            ema_p: 0.0,
            ema_d: 0.0,
            d_delay: 1,
        }
    }

    /// The long-run deep-RL settings: EMA 0.95 on the P input, 0.9 on the D
    /// input, difference taken 15 iterations back.
    pub fn long_run() -> Self {
        Self {
            ema_p: 0.95,
            ema_d: 0.9,
            d_delay: 15,
        }
    }

    pub fn ema_p(&self) -> f64 {
        self.ema_p
    }

    pub fn ema_d(&self) -> f64 {
        self.ema_d
    }

    pub fn d_delay(&self) -> usize {
        self.d_delay
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self::off()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub integral: f64,
    /// Most recent observation at the back; at most `d_delay + 1` entries.
    pub cost_window: VecDeque<f64>,
    pub ema_error: f64,
    pub ema_diff: f64,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub lambda: f64,
    pub u: f64,
}

impl ControlOutput {
    fn from_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            u: lambda / (1.0 + lambda),
        }
    }
}

pub fn reset(_gains: &PidGains, smoothing: &SmoothingConfig) -> ControllerState {
    ControllerState {
        integral: 0.0,
        cost_window: VecDeque::with_capacity(smoothing.d_delay + 1),
        ema_error: 0.0,
        ema_diff: 0.0,
        iteration: 0,
    }
}

pub fn lambda_to_u(lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda.is_infinite() {
        return Ok(1.0);
    }
    Ok(lambda / (1.0 + lambda))
}

pub fn pid_update(
    state: &ControllerState,
    gains: &PidGains,
    smoothing: &SmoothingConfig,
    cost: f64,
    limit: f64,
) -> Result<(ControllerState, ControlOutput)> {
    if !cost.is_finite() {
        return Err(Error::invalid(format!("cost must be finite, got {cost}")));
    }
    if !limit.is_finite() {
        return Err(Error::invalid(format!("limit must be finite, got {limit}")));
    }

    let mut window = state.cost_window.clone();
    window.push_back(cost);
    while window.len() > smoothing.d_delay + 1 {
        window.pop_front();
    }
    // During warm-up the front is the earliest observation; on the first
    // call it is the current one, so the difference is zero.
    let delayed = *window.front().expect("window holds the current cost");

    let error = cost - limit;
    let diff = (cost - delayed).max(0.0);
    let integral = (state.integral + error).max(0.0);

    let ema_error = smoothing.ema_p * state.ema_error + (1.0 - smoothing.ema_p) * error;
    let ema_diff = smoothing.ema_d * state.ema_diff + (1.0 - smoothing.ema_d) * diff;

    let lambda = (gains.k_p * ema_error + gains.k_i * integral + gains.k_d * ema_diff).max(0.0);

    let next = ControllerState {
        integral,
        cost_window: window,
        ema_error,
        ema_diff,
        iteration: state.iteration + 1,
    };
    Ok((next, ControlOutput::from_lambda(lambda)))
}

/// Owning wrapper around the pure transition for callers that keep one
/// controller alive across a loop.
#[derive(Debug, Clone)]
pub struct PidController {
    gains: PidGains,
    smoothing: SmoothingConfig,
    state: ControllerState,
}

impl PidController {
    pub fn new(gains: PidGains, smoothing: SmoothingConfig) -> Self {
        let state = reset(&gains, &smoothing);
        Self {
            gains,
            smoothing,
            state,
        }
    }

    pub fn update(&mut self, cost: f64, limit: f64) -> Result<ControlOutput> {
        let (next, out) = pid_update(&self.state, &self.gains, &self.smoothing, cost, limit)?;
        self.state = next;
        Ok(out)
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn gains(&self) -> &PidGains {
        &self.gains
    }

    pub fn smoothing(&self) -> &SmoothingConfig {
        &self.smoothing
    }

    pub fn reset(&mut self) {
        self.state = reset(&self.gains, &self.smoothing);
    }
}
