//! Analytic equality-constrained test problems `min f(x) s.t. g(x) = 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective and scalar equality constraint with first and second
/// derivative oracles.
pub trait ConstrainedProblem: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> &str;

    fn f(&self, x: &DVector<f64>) -> f64;
    fn grad_f(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hess_f(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn g(&self, x: &DVector<f64>) -> f64;
    fn grad_g(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hess_g(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `f = ½‖x‖²`, `g = x₀ − 1`. Solution `x* = e₀`, `λ* = −1`.
#[derive(Debug, Clone)]
pub struct QuadraticLinear {
    dim: usize,
}

impl QuadraticLinear {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        Ok(Self { dim })
    }
}

impl ConstrainedProblem for QuadraticLinear {
    fn dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> &str {
        "quadratic_linear"
    }
    fn f(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.norm_squared()
    }
    fn grad_f(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn hess_f(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
    fn g(&self, x: &DVector<f64>) -> f64 {
        x[0] - 1.0
    }
    fn grad_g(&self, _x: &DVector<f64>) -> DVector<f64> {
        let mut e = DVector::zeros(self.dim);
        e[0] = 1.0;
        e
    }
    fn hess_g(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }
}

/// `f = ½‖x − c‖²`, `g = ‖x‖² − r²`: projection of `c` onto a sphere.
#[derive(Debug, Clone)]
pub struct QuadraticSphere {
    center: DVector<f64>,
    radius: f64,
}

impl QuadraticSphere {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !(radius > 0.0) {
            return Err(Error::invalid("radius must be positive"));
        }
        Ok(Self {
            center: DVector::from_vec(center),
            radius,
        })
    }

    /// The instance used by the flow suite: `c = (2, 1)`, `r = 1`.
    pub fn standard() -> Self {
        Self::new(vec![2.0, 1.0], 1.0).expect("valid constants")
    }
}

impl ConstrainedProblem for QuadraticSphere {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn name(&self) -> &str {
        "quadratic_sphere"
    }
    fn f(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x - &self.center).norm_squared()
    }
    fn grad_f(&self, x: &DVector<f64>) -> DVector<f64> {
        x - &self.center
    }
    fn hess_f(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }
    fn g(&self, x: &DVector<f64>) -> f64 {
        x.norm_squared() - self.radius * self.radius
    }
    fn grad_g(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * x
    }
    fn hess_g(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) * 2.0
    }
}

/// Two-dimensional Rosenbrock objective with the linear constraint
/// `x₀ + x₁ − 1 = 0`.
#[derive(Debug, Clone)]
pub struct RosenbrockLinear {
    a: f64,
    b: f64,
}

impl RosenbrockLinear {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }
}

impl Default for RosenbrockLinear {
    fn default() -> Self {
        Self::new(1.0, 10.0)
    }
}

impl ConstrainedProblem for RosenbrockLinear {
    fn dim(&self) -> usize {
        2
    }
    fn name(&self) -> &str {
        "rosenbrock_linear"
    }
    fn f(&self, x: &DVector<f64>) -> f64 {
        let (u, v) = (x[0], x[1]);
        (self.a - u).powi(2) + self.b * (v - u * u).powi(2)
    }
    fn grad_f(&self, x: &DVector<f64>) -> DVector<f64> {
        let (u, v) = (x[0], x[1]);
        let w = v - u * u;
        DVector::from_vec(vec![
            -2.0 * (self.a - u) - 4.0 * self.b * u * w,
            2.0 * self.b * w,
        ])
    }
    fn hess_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (u, v) = (x[0], x[1]);
        let h00 = 2.0 - 4.0 * self.b * (v - u * u) + 8.0 * self.b * u * u;
        let h01 = -4.0 * self.b * u;
        DMatrix::from_row_slice(2, 2, &[h00, h01, h01, 2.0 * self.b])
    }
    fn g(&self, x: &DVector<f64>) -> f64 {
        x[0] + x[1] - 1.0
    }
    fn grad_g(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![1.0, 1.0])
    }
    fn hess_g(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
}

/// Named problems addressable from experiment spec files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    QuadraticLinear,
    QuadraticSphere,
    RosenbrockLinear,
}

impl ProblemId {
    pub fn build(self) -> Box<dyn ConstrainedProblem> {
        match self {
            ProblemId::QuadraticLinear => Box::new(QuadraticLinear::new(2).expect("dim 2")),
            ProblemId::QuadraticSphere => Box::new(QuadraticSphere::standard()),
            ProblemId::RosenbrockLinear => Box::new(RosenbrockLinear::default()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemId::QuadraticLinear => "quadratic_linear",
            ProblemId::QuadraticSphere => "quadratic_sphere",
            ProblemId::RosenbrockLinear => "rosenbrock_linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub probes: usize,
    /// Largest relative error seen over all gradient and Hessian entries.
    pub worst_relative_error: f64,
}

/// Relative tolerance the derivative oracles must meet.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

type ScalarFn<'a> = &'a dyn Fn(&DVector<f64>) -> f64;
type VectorFn<'a> = &'a dyn Fn(&DVector<f64>) -> DVector<f64>;

/// Compares analytic gradients and Hessians against central differences
/// at seeded random probe points in `[-2, 2]^n`.
pub fn oracle_check(problem: &dyn ConstrainedProblem, probes: usize, seed: u64) -> Result<OracleReport> {
    let n = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;

    for _ in 0..probes {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let checks: [(&str, ScalarFn, DVector<f64>); 2] = [
            ("grad_f", &|y| problem.f(y), problem.grad_f(&x)),
            ("grad_g", &|y| problem.g(y), problem.grad_g(&x)),
        ];
        for (which, value, analytic) in checks {
            let numeric = central_gradient(value, &x);
            worst = worst.max(compare(which, analytic.as_slice(), numeric.as_slice())?);
        }

        let hess_checks: [(&str, VectorFn, DMatrix<f64>); 2] = [
            ("hess_f", &|y| problem.grad_f(y), problem.hess_f(&x)),
            ("hess_g", &|y| problem.grad_g(y), problem.hess_g(&x)),
        ];
        for (which, grad, analytic) in hess_checks {
            let numeric = central_jacobian(grad, &x);
            worst = worst.max(compare(which, analytic.as_slice(), numeric.as_slice())?);
        }
    }

    Ok(OracleReport {
        probes,
        worst_relative_error: worst,
    })
}

fn fd_step(xi: f64) -> f64 {
    1e-5 * xi.abs().max(1.0)
}

fn central_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let h = fd_step(x[i]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

fn central_jacobian(grad: &dyn Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (grad(&xp) - grad(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn compare(which: &'static str, analytic: &[f64], numeric: &[f64]) -> Result<f64> {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (coord, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / scale;
        if !(rel <= ORACLE_TOLERANCE) {
            return Err(Error::OracleMismatch {
                which,
                coord,
                analytic: a,
                numeric: n,
            });
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
