use nalgebra::DVector;

use super::{flow_rhs, ConstrainedProblem, FlowState, MethodVariant};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    /// `steps + 1` states, the first being the initial condition.
    pub states: Vec<FlowState>,
    /// `increments[i]` is the unrounded RK4 update taking `states[i].x` to
    /// `states[i + 1].x`. Finite differences built from these do not pick up
    /// the rounding of the stored positions.
    pub increments: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Builds a trajectory from bare states; increments are recovered as
    /// differences of consecutive positions.
    pub fn from_states(dt: f64, states: Vec<FlowState>) -> Self {
        let increments = states.windows(2).map(|w| &w[1].x - &w[0].x).collect();
        Self { dt, states, increments }
    }

    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.lambda).collect()
    }

    pub fn constraint(&self, problem: &dyn ConstrainedProblem) -> Vec<f64> {
        self.states.iter().map(|s| problem.g(&s.x)).collect()
    }
}

/// One classical fourth-order Runge-Kutta step of the joint `(x, λ)` flow.
pub fn rk4_step(
    problem: &dyn ConstrainedProblem,
    variant: &MethodVariant,
    state: &FlowState,
    dt: f64,
) -> FlowState {
    let (dx, dl) = rk4_increment(problem, variant, state, dt);
    FlowState {
        x: &state.x + dx,
        lambda: state.lambda + dl,
        t: state.t + dt,
    }
}

fn rk4_increment(
    problem: &dyn ConstrainedProblem,
    variant: &MethodVariant,
    state: &FlowState,
    dt: f64,
) -> (DVector<f64>, f64) {
    let at = |x: DVector<f64>, lambda: f64, t: f64| flow_rhs(problem, variant, &FlowState { x, lambda, t });
    let h = 0.5 * dt;
    let (k1x, k1l) = at(state.x.clone(), state.lambda, state.t);
    let (k2x, k2l) = at(&state.x + &k1x * h, state.lambda + h * k1l, state.t + h);
    let (k3x, k3l) = at(&state.x + &k2x * h, state.lambda + h * k2l, state.t + h);
    let (k4x, k4l) = at(&state.x + &k3x * dt, state.lambda + dt * k3l, state.t + dt);

    let dx = (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
    let dl = (k1l + 2.0 * k2l + 2.0 * k3l + k4l) * (dt / 6.0);
    (dx, dl)
}

/// Kahan-compensated `sum += inc`.
fn compensated_add(sum: &mut f64, comp: &mut f64, inc: f64) {
    let y = inc - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

pub fn integrate(
    problem: &dyn ConstrainedProblem,
    variant: &MethodVariant,
    x0: &DVector<f64>,
    lambda0: f64,
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    variant.validate()?;
    if x0.len() != problem.dim() {
        return Err(Error::invalid(format!(
            "x0 has length {}, problem dimension is {}",
            x0.len(),
            problem.dim()
        )));
    }
    if !(dt > 0.0) || !(dt * steps as f64).is_finite() {
        return Err(Error::invalid(format!("dt must be positive with finite horizon, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be positive"));
    }

    let mut states = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    let mut cur = FlowState::new(x0.clone(), lambda0, 0.0);
    if !cur.is_finite() {
        return Err(Error::invalid("initial state must be finite"));
    }
    let mut comp_x = DVector::zeros(x0.len());
    let mut comp_l = 0.0;
    states.push(cur.clone());
    for step in 1..=steps {
        let (dx, dl) = rk4_increment(problem, variant, &cur, dt);
        let mut next = cur.clone();
        for i in 0..dx.len() {
            compensated_add(&mut next.x[i], &mut comp_x[i], dx[i]);
        }
        compensated_add(&mut next.lambda, &mut comp_l, dl);
        next.t = step as f64 * dt;
        if !next.is_finite() || !dx.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                step,
                t: next.t,
                last_x: cur.x.iter().copied().collect(),
                last_lambda: cur.lambda,
            });
        }
        states.push(next.clone());
        increments.push(dx);
        cur = next;
    }
    Ok(Trajectory {
        dt,
        states,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::QuadraticLinear;
    use nalgebra::dvector;

    #[test]
    fn basic_flow_converges_to_kkt_point() {
        let q = QuadraticLinear::new(3).unwrap();
        let traj = integrate(&q, &MethodVariant::Basic { alpha: 1.0 }, &DVector::zeros(3), 0.0, 1e-3, 40_000).unwrap();
        assert_eq!(traj.states.len(), 40_001);
        let last = traj.last();
        assert!((last.x[0] - 1.0).abs() < 1e-3);
        assert!(last.x[1].abs() < 1e-3 && last.x[2].abs() < 1e-3);
        assert!((last.lambda + 1.0).abs() < 1e-3);
    }

    #[test]
    fn rk4_is_fourth_order_on_linear_flow() {
        // Basic flow on the quadratic problem is linear with a closed-form
        // solution; compare global error at t = 1 for two step sizes.
        let q = QuadraticLinear::new(1).unwrap();
        let v = MethodVariant::Basic { alpha: 4.0 };
        let exact = |t: f64| {
            // x'' + x' + 4(x - 1) = 0, x(0) = 0, x'(0) = 0
            let w = (4.0f64 - 0.25).sqrt();
            1.0 - (-0.5 * t).exp() * ((w * t).cos() + 0.5 / w * (w * t).sin())
        };
        let err = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let tr = integrate(&q, &v, &dvector![0.0], 0.0, dt, n).unwrap();
            (tr.last().x[0] - exact(1.0)).abs()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.3, "observed order {order}");
    }

    #[test]
    fn divergence_is_reported_with_last_finite_state() {
        let q = QuadraticLinear::new(2).unwrap();
        let v = MethodVariant::Basic { alpha: 1.0 };
        match integrate(&q, &v, &dvector![1e300, 0.0], 0.0, 1e3, 50) {
            Err(Error::Divergence { step, last_x, .. }) => {
                assert!(step >= 1);
                assert!(last_x.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let q = QuadraticLinear::new(2).unwrap();
        let v = MethodVariant::Basic { alpha: 1.0 };
        assert!(integrate(&q, &v, &dvector![0.0], 0.0, 1e-3, 10).is_err());
        assert!(integrate(&q, &v, &dvector![0.0, 0.0], 0.0, -1e-3, 10).is_err());
        assert!(integrate(&q, &v, &dvector![0.0, 0.0], 0.0, 1e-3, 0).is_err());
    }
}
