//! Continuous-time differential multiplier flows.
//!
//! The primal flow is always `ẋ = −∇f − λ∇g` (plus `−c·g·∇g` for the
//! quadratic penalty). The multiplier flow depends on the method:
//!
//! | variant | `λ̇` |
//! |---------|------|
//! | Basic   | `α g` |
//! | PI      | `α g + β ġ` |
//! | ID      | `α g + γ g̈` |
//! | PID     | `α g + β ġ + γ g̈` |
//! | Penalty | `α g` |
//!
//! `g̈` depends on `ẍ`, which depends on `λ̇`. Solving the scalar relation
//! gives
//!
//! ```text
//! λ̇ = [α g + β ∇gᵀẋ + γ (ẋᵀ∇²g ẋ − ∇gᵀ A ẋ)] / (1 + γ‖∇g‖²),   A = ∇²f + λ∇²g
//! ```
//!
//! which is the `B⁻¹ = (I + γ∇g∇gᵀ)⁻¹` coupling of the second-order form.

mod analysis;
mod integrate;
mod problems;

pub use analysis::{
    export_trajectory_csv, overshoot, phase_lag, ringing_period, zero_crossings, OscillationStats,
};
pub use integrate::{integrate, rk4_step, Trajectory};
pub use problems::{
    oracle_check, ConstrainedProblem, OracleReport, ProblemId, QuadraticLinear, QuadraticSphere,
    RosenbrockLinear, ORACLE_TOLERANCE,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: DVector<f64>,
    pub lambda: f64,
    pub t: f64,
}

impl FlowState {
    pub fn new(x: DVector<f64>, lambda: f64, t: f64) -> Self {
        Self { x, lambda, t }
    }

    pub fn is_finite(&self) -> bool {
        self.lambda.is_finite() && self.t.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodVariant {
    Basic { alpha: f64 },
    #[serde(rename = "pi")]
    PI { alpha: f64, beta: f64 },
    #[serde(rename = "id")]
    ID { alpha: f64, gamma: f64 },
    #[serde(rename = "pid")]
    PID { alpha: f64, beta: f64, gamma: f64 },
    Penalty { alpha: f64, c: f64 },
}

impl MethodVariant {
    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha();
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
        }
        let (beta, gamma, c) = (self.beta(), self.gamma(), self.penalty());
        for (name, v) in [("beta", beta), ("gamma", gamma), ("c", c)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            MethodVariant::Basic { alpha }
            | MethodVariant::PI { alpha, .. }
            | MethodVariant::ID { alpha, .. }
            | MethodVariant::PID { alpha, .. }
            | MethodVariant::Penalty { alpha, .. } => alpha,
        }
    }

    /// Proportional coefficient; zero for variants without one.
    pub fn beta(&self) -> f64 {
        match *self {
            MethodVariant::PI { beta, .. } | MethodVariant::PID { beta, .. } => beta,
            _ => 0.0,
        }
    }

    /// Derivative coefficient; zero for variants without one.
    pub fn gamma(&self) -> f64 {
        match *self {
            MethodVariant::ID { gamma, .. } | MethodVariant::PID { gamma, .. } => gamma,
            _ => 0.0,
        }
    }

    /// Quadratic penalty weight; zero unless `Penalty`.
    pub fn penalty(&self) -> f64 {
        match *self {
            MethodVariant::Penalty { c, .. } => c,
            _ => 0.0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MethodVariant::Basic { alpha } => format!("basic(alpha={alpha})"),
            MethodVariant::PI { alpha, beta } => format!("pi(alpha={alpha},beta={beta})"),
            MethodVariant::ID { alpha, gamma } => format!("id(alpha={alpha},gamma={gamma})"),
            MethodVariant::PID { alpha, beta, gamma } => {
                format!("pid(alpha={alpha},beta={beta},gamma={gamma})")
            }
            MethodVariant::Penalty { alpha, c } => format!("penalty(alpha={alpha},c={c})"),
        }
    }

    /// Short filesystem-safe tag.
    pub fn tag(&self) -> String {
        match *self {
            MethodVariant::Basic { alpha } => format!("basic_a{alpha}"),
            MethodVariant::PI { alpha, beta } => format!("pi_a{alpha}_b{beta}"),
            MethodVariant::ID { alpha, gamma } => format!("id_a{alpha}_g{gamma}"),
            MethodVariant::PID { alpha, beta, gamma } => format!("pid_a{alpha}_b{beta}_g{gamma}"),
            MethodVariant::Penalty { alpha, c } => format!("penalty_a{alpha}_c{c}"),
        }
    }

    fn has_derivative(&self) -> bool {
        matches!(self, MethodVariant::ID { .. } | MethodVariant::PID { .. })
    }
}

/// `A = ∇²f + λ∇²g`.
fn hessian_of_lagrangian(problem: &dyn ConstrainedProblem, x: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
    problem.hess_f(x) + problem.hess_g(x) * lambda
}

pub fn flow_rhs(
    problem: &dyn ConstrainedProblem,
    variant: &MethodVariant,
    state: &FlowState,
) -> (DVector<f64>, f64) {
    let x = &state.x;
    let g = problem.g(x);
    let grad_g = problem.grad_g(x);

    let mut xdot = -problem.grad_f(x) - &grad_g * state.lambda;
    let c = variant.penalty();
    if c != 0.0 {
        xdot -= &grad_g * (c * g);
    }

    let alpha = variant.alpha();
    let beta = variant.beta();
    let mut numer = alpha * g;
    if beta != 0.0 {
        numer += beta * grad_g.dot(&xdot);
    }
    let lambdadot = if variant.has_derivative() {
        let gamma = variant.gamma();
        let a = hessian_of_lagrangian(problem, x, state.lambda);
        let curvature = xdot.dot(&(problem.hess_g(x) * &xdot));
        let coupling = grad_g.dot(&(a * &xdot));
        (numer + gamma * (curvature - coupling)) / (1.0 + gamma * grad_g.norm_squared())
    } else {
        numer
    };
    (xdot, lambdadot)
}

/// `B = I + γ∇g∇gᵀ`.
fn coupling_matrix(grad_g: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    let n = grad_g.len();
    DMatrix::identity(n, n) + grad_g * grad_g.transpose() * gamma
}

fn solve_spd(b: &DMatrix<f64>, rhs: DMatrix<f64>) -> DMatrix<f64> {
    b.clone()
        .cholesky()
        .expect("I + γ∇g∇gᵀ is positive definite for γ >= 0")
        .solve(&rhs)
}

pub fn damping_matrix(problem: &dyn ConstrainedProblem, variant: &MethodVariant, state: &FlowState) -> DMatrix<f64> {
    let x = &state.x;
    let a = hessian_of_lagrangian(problem, x, state.lambda);
    let grad_g = problem.grad_g(x);
    let outer = &grad_g * grad_g.transpose();
    match *variant {
        MethodVariant::Basic { .. } => a,
        MethodVariant::PI { beta, .. } => a + outer * beta,
        MethodVariant::Penalty { c, .. } => a + outer * c + problem.hess_g(x) * (c * problem.g(x)),
        MethodVariant::ID { gamma, .. } => solve_spd(&coupling_matrix(&grad_g, gamma), a),
        MethodVariant::PID { beta, gamma, .. } => {
            solve_spd(&coupling_matrix(&grad_g, gamma), a + outer * beta)
        }
    }
}

/// Forcing term of the second-order equation for `variant`.
fn forcing(
    problem: &dyn ConstrainedProblem,
    variant: &MethodVariant,
    x: &DVector<f64>,
    xdot: &DVector<f64>,
) -> DVector<f64> {
    let g = problem.g(x);
    let grad_g = problem.grad_g(x);
    let alpha = variant.alpha();
    if variant.has_derivative() {
        let gamma = variant.gamma();
        let scale = alpha * g + gamma * xdot.dot(&(problem.hess_g(x) * xdot));
        let b = coupling_matrix(&grad_g, gamma);
        let rhs = DMatrix::from_column_slice(grad_g.len(), 1, grad_g.as_slice());
        let solved = solve_spd(&b, rhs);
        DVector::from_column_slice(solved.as_slice()) * scale
    } else {
        grad_g * (alpha * g)
    }
}

/// Evaluates `‖ẍ + D ẋ + F‖` at each interior point of the trajectory, with
/// `ẋ` and `ẍ` from central differences of `x(t)` and `D`, `F` the damping
/// matrix and forcing term of `variant`'s second-order equation.
///
/// The differences are formed from the trajectory's step increments, so
/// `ẍ = (δᵢ − δᵢ₋₁)/dt²` is free of the `ulp(x)/dt²` noise that differencing
/// stored positions would add.
pub fn second_order_residual(
    problem: &dyn ConstrainedProblem,
    variant: &MethodVariant,
    trajectory: &Trajectory,
    dt: f64,
) -> Result<Vec<f64>> {
    let states = &trajectory.states;
    if states.len() < 3 {
        return Err(Error::TrajectoryTooShort {
            needed: 3,
            got: states.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if trajectory.increments.len() + 1 != states.len() {
        return Err(Error::invalid("trajectory increments do not match its states"));
    }
    let out = (1..states.len() - 1)
        .map(|i| {
            let cur = &states[i];
            let (back, fwd) = (&trajectory.increments[i - 1], &trajectory.increments[i]);
            let xdot = (fwd + back) / (2.0 * dt);
            let xddot = (fwd - back) / (dt * dt);
            let damping = damping_matrix(problem, variant, cur);
            let lhs = xddot + damping * &xdot + forcing(problem, variant, &cur.x, &xdot);
            lhs.norm()
        })
        .collect();
    Ok(out)
}
