//! Measurements on sampled trajectories: zero crossings, ringing period,
//! overshoot and the lag between two signals.

use std::io::Write;
use std::path::Path;

use super::{ConstrainedProblem, Trajectory};
use crate::error::{Error, Result};

/// Relative deadband below which sign flips are treated as round-off.
pub const CROSSING_DEADBAND: f64 = 1e-9;

/// Interpolated times at which `signal` changes sign. A crossing counts only
/// once the signal has moved past `±CROSSING_DEADBAND · max|signal|` on the
/// new side; its time is the last sign change before that point.
pub fn zero_crossings(times: &[f64], signal: &[f64]) -> Vec<f64> {
    let n = signal.len().min(times.len());
    let tol = CROSSING_DEADBAND * signal[..n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::new();
    let mut side = 0.0;
    let mut last_change = None;
    for i in 0..n {
        let v = signal[i];
        if i > 0 {
            let a = signal[i - 1];
            if (a < 0.0 && v >= 0.0) || (a > 0.0 && v <= 0.0) || (a == 0.0 && v != 0.0) {
                let t = if a == v { times[i] } else { times[i - 1] + a / (a - v) * (times[i] - times[i - 1]) };
                last_change = Some(t);
            }
        }
        if v.abs() > tol {
            let s = v.signum();
            if side != 0.0 && s != side {
                out.push(last_change.unwrap_or(times[i]));
            }
            side = s;
        }
    }
    out
}

/// Full ringing period, estimated as twice the mean spacing of successive
/// zero crossings. `None` with fewer than two crossings.
pub fn ringing_period(times: &[f64], signal: &[f64]) -> Option<f64> {
    let z = zero_crossings(times, signal);
    if z.len() < 2 {
        return None;
    }
    Some(2.0 * (z[z.len() - 1] - z[0]) / (z.len() - 1) as f64)
}

/// Largest excursion past zero on the side opposite to the initial value.
/// Zero when the signal never crosses.
pub fn overshoot(signal: &[f64]) -> f64 {
    let Some(&first) = signal.iter().find(|v| **v != 0.0) else {
        return 0.0;
    };
    let s = first.signum();
    signal.iter().map(|v| (-s * v).max(0.0)).fold(0.0, f64::max)
}

/// Lag (in time units) by which `follower` trails `leader`: the shift
/// `τ ∈ [0, max_lag]` maximizing the mean of `leader(t)·follower(t + τ)` over
/// the overlap, refined by
/// a parabolic fit around the discrete peak. Both signals should already be
/// centred on their equilibrium.
pub fn phase_lag(leader: &[f64], follower: &[f64], dt: f64, max_lag: f64) -> f64 {
    let n = leader.len().min(follower.len());
    let max_shift = ((max_lag / dt).round() as usize).min(n.saturating_sub(1));
    let corr = |shift: usize| -> f64 {
        let m = n - shift;
        (0..m).map(|t| leader[t] * follower[t + shift]).sum::<f64>() / m as f64
    };
    let values: Vec<f64> = (0..=max_shift).map(corr).collect();
    let best = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut shift = best as f64;
    if best > 0 && best < max_shift {
        let (a, b, c) = (values[best - 1], values[best], values[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom != 0.0 {
            shift += 0.5 * (a - c) / denom;
        }
    }
    shift * dt
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscillationStats {
    pub period: Option<f64>,
    pub overshoot: f64,
    pub crossings: usize,
    /// Zero crossings after the first one.
    pub sign_changes_after_first: usize,
}

impl OscillationStats {
    pub fn of(times: &[f64], signal: &[f64]) -> Self {
        let z = zero_crossings(times, signal);
        Self {
            period: ringing_period(times, signal),
            overshoot: overshoot(signal),
            crossings: z.len(),
            sign_changes_after_first: z.len().saturating_sub(1),
        }
    }
}

/// Writes `t, x_0..x_{n-1}, lambda, g, residual`. The residual column is
/// empty at the two endpoints.
pub fn export_trajectory_csv(
    path: &Path,
    problem: &dyn ConstrainedProblem,
    trajectory: &Trajectory,
    residual: Option<&[f64]>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let n = problem.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend(["lambda", "g", "residual"].map(String::from));
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;

    let last = trajectory.states.len().saturating_sub(1);
    for (i, s) in trajectory.states.iter().enumerate() {
        let mut row = vec![s.t.to_string()];
        row.extend(s.x.iter().map(|v| v.to_string()));
        row.push(s.lambda.to_string());
        row.push(problem.g(&s.x).to_string());
        let r = match residual {
            Some(r) if i > 0 && i < last => r.get(i - 1).map(|v| v.to_string()).unwrap_or_default(),
            _ => String::new(),
        };
        row.push(r);
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
