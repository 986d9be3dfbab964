//! Acceptance checks. Each test prints one `PASS`/`FAIL` line with the
//! measured quantities; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pid_lagrangian::cmdp::{
    default_lambda_grid, exact_policy_gradient, exact_values, lagrangian_search_oracle, make_gridworld,
    ConstraintMeasure, GridSpec, Signal, SoftmaxPolicy, TabularCmdp,
};
use pid_lagrangian::controller::{pid_update, reset, PidGains, SmoothingConfig};
use pid_lagrangian::exec::Execution;
use pid_lagrangian::flow::{
    damping_matrix, integrate, phase_lag, second_order_residual, ConstrainedProblem, FlowState, MethodVariant,
    OscillationStats, ProblemId, QuadraticLinear,
};
use pid_lagrangian::harness::{
    run_limit_step, run_scale_suite, run_spec, run_sweep, run_train, ExperimentSpec, GridOutcome,
};
use pid_lagrangian::trainer::{train, TrainConfig};

fn report(name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let within = elapsed <= limit;
    let verdict = if pass && within { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {name}: {detail} [{:.2} s, limit {} s]",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "{name} failed: {detail}");
    assert!(within, "{name} exceeded its time budget");
}

fn spec_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(name)
}

fn load(name: &str) -> ExperimentSpec {
    ExperimentSpec::load(&spec_path(name)).unwrap()
}

fn corridor() -> TabularCmdp {
    make_gridworld(&GridSpec::corridor_a()).unwrap()
}

#[test]
fn integral_controller_matches_projected_recursion() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let smoothing = SmoothingConfig::off();
    let (mut bitwise_checked, mut worst_rel) = (0usize, 0.0f64);
    let mut ok = true;
    for seq in 0..10_000 {
        // Power-of-two gains make K_I·(I + Δ) and λ + K_I·Δ round identically.
        let pow2 = seq % 2 == 0;
        let k_i = if pow2 {
            2f64.powi(-rng.random_range(0..12))
        } else {
            rng.random_range(1e-4..2.0)
        };
        let d = rng.random_range(0.0..10.0);
        let gains = PidGains::integral(k_i).unwrap();
        let mut state = reset(&gains, &smoothing);
        let mut reference = 0.0f64;
        let mut scale = 0.0f64;
        for _ in 0..rng.random_range(1..80) {
            let cost = rng.random_range(0.0..20.0);
            let (next, out) = pid_update(&state, &gains, &smoothing, cost, d).unwrap();
            reference = (reference + k_i * (cost - d)).max(0.0);
            scale = scale.max(reference).max(k_i * (cost - d).abs());
            ok &= out.lambda >= 0.0 && next.integral >= 0.0;
            ok &= (out.u - out.lambda / (1.0 + out.lambda)).abs() <= 1e-15;
            if pow2 {
                ok &= out.lambda.to_bits() == reference.to_bits();
                bitwise_checked += 1;
            } else {
                let rel = (out.lambda - reference).abs() / scale.max(f64::MIN_POSITIVE);
                worst_rel = worst_rel.max(rel);
            }
            state = next;
        }
    }
    ok &= worst_rel <= 1e-12;
    report(
        "integral controller vs projected recursion",
        ok,
        start.elapsed(),
        Duration::from_secs(1),
        format!("10000 sequences, {bitwise_checked} bitwise steps, worst relative error {worst_rel:.1e}"),
    );
}

fn max_residual(variant: &MethodVariant, dt: f64, t_end: f64) -> f64 {
    let p = QuadraticLinear::new(2).unwrap();
    let steps = (t_end / dt).round() as usize;
    let traj = integrate(&p, variant, &DVector::zeros(2), 0.0, dt, steps).unwrap();
    second_order_residual(&p, variant, &traj, dt)
        .unwrap()
        .into_iter()
        .fold(0.0, f64::max)
}

#[test]
fn oscillator_frequency_damping_and_residual_order() {
    let start = Instant::now();
    let p = QuadraticLinear::new(2).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();

    let alpha = 4.0;
    let basic = MethodVariant::Basic { alpha };
    let traj = integrate(&p, &basic, &DVector::zeros(2), 0.0, 1e-3, 20_000).unwrap();
    let stats = OscillationStats::of(&traj.times(), &traj.constraint(&p));
    let omega = 2.0 * std::f64::consts::PI / stats.period.unwrap_or(f64::INFINITY);
    let expected = (alpha - 0.25f64).sqrt();
    let freq_err = (omega / expected - 1.0).abs();
    ok &= freq_err <= 0.02;
    notes.push(format!("basic omega {omega:.4} vs {expected:.4} ({:.2}%)", 100.0 * freq_err));

    for beta in [3.0, 5.0] {
        assert!((1.0f64 + beta).powi(2) >= 4.0 * alpha);
        let pi = MethodVariant::PI { alpha, beta };
        let traj = integrate(&p, &pi, &DVector::zeros(2), 0.0, 1e-3, 20_000).unwrap();
        let s = OscillationStats::of(&traj.times(), &traj.constraint(&p));
        ok &= s.sign_changes_after_first == 0;
        notes.push(format!("pi beta={beta}: {} sign changes after first", s.sign_changes_after_first));
    }

    let variants = [
        basic,
        MethodVariant::PI { alpha, beta: 3.0 },
        MethodVariant::ID { alpha, gamma: 0.5 },
        MethodVariant::PID {
            alpha,
            beta: 1.0,
            gamma: 0.5,
        },
    ];
    for v in variants {
        let r: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&dt| max_residual(&v, dt, 10.0)).collect();
        let orders = [(r[0] / r[1]).log10(), (r[1] / r[2]).log10()];
        let good = orders.iter().all(|o| (1.8..=2.2).contains(o)) && r[1] <= 1e-4;
        ok &= good;
        notes.push(format!(
            "{}: residual {:.1e}/{:.1e}/{:.1e} orders {:.2},{:.2}",
            v.tag(),
            r[0],
            r[1],
            r[2],
            orders[0],
            orders[1]
        ));
    }
    report(
        "oscillator verification",
        ok,
        start.elapsed(),
        Duration::from_secs(30),
        notes.join("; "),
    );
}

#[test]
fn basic_multiplier_lags_constraint_by_quarter_period() {
    let start = Instant::now();
    let p = QuadraticLinear::new(2).unwrap();
    let dt = 1e-3;
    let traj = integrate(&p, &MethodVariant::Basic { alpha: 4.0 }, &DVector::zeros(2), 0.0, dt, 20_000).unwrap();
    let g = traj.constraint(&p);
    let period = OscillationStats::of(&traj.times(), &g).period.unwrap();
    let final_lambda = traj.last().lambda;
    let centred: Vec<f64> = traj.lambdas().iter().map(|l| l - final_lambda).collect();
    let lag = phase_lag(&g, &centred, dt, period);
    let ratio = lag / (period / 4.0);
    report(
        "phase signature",
        (ratio - 1.0).abs() <= 0.1,
        start.elapsed(),
        Duration::from_secs(10),
        format!("lag {lag:.4}, quarter period {:.4}, ratio {ratio:.3}", period / 4.0),
    );
}

/// Newton projection onto `g = 0` along `∇g`.
fn onto_constraint(p: &dyn ConstrainedProblem, mut x: DVector<f64>) -> DVector<f64> {
    for _ in 0..100 {
        let g = p.g(&x);
        if g.abs() < 1e-14 {
            break;
        }
        let grad = p.grad_g(&x);
        x -= grad.clone() * (g / grad.norm_squared());
    }
    x
}

#[test]
fn penalty_and_pi_damping_agree_on_constraint() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let problems = [ProblemId::QuadraticLinear, ProblemId::QuadraticSphere, ProblemId::RosenbrockLinear];
    let mut worst = 0.0f64;
    let mut worst_g = 0.0f64;
    for i in 0..100 {
        let p = problems[i % problems.len()].build();
        let x0 = DVector::from_fn(p.dim(), |_, _| rng.random_range(-2.0..2.0));
        let x = onto_constraint(p.as_ref(), x0);
        worst_g = worst_g.max(p.g(&x).abs());
        let state = FlowState::new(x, rng.random_range(-3.0..3.0), 0.0);
        let (alpha, beta) = (rng.random_range(0.5..8.0), rng.random_range(0.0..6.0));
        let a = damping_matrix(p.as_ref(), &MethodVariant::PI { alpha, beta }, &state);
        let b = damping_matrix(p.as_ref(), &MethodVariant::Penalty { alpha, c: beta }, &state);
        worst = worst.max((a - b).amax());
    }
    report(
        "penalty/PI damping agreement",
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(1),
        format!("100 points, max |g| {worst_g:.1e}, max entry difference {worst:.1e}"),
    );
}

fn random_cmdp(rng: &mut ChaCha8Rng) -> TabularCmdp {
    let ns = rng.random_range(2..=6);
    let na = rng.random_range(2..=4);
    let mut p = Vec::new();
    for _ in 0..ns * na {
        let row: Vec<f64> = (0..ns).map(|_| rng.random_range(0.0..1.0f64).powi(2)).collect();
        let z: f64 = row.iter().sum();
        p.extend(row.iter().map(|v| v / z));
    }
    let len = ns * na * ns;
    let r = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let c = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
    let mu: Vec<f64> = (0..ns).map(|_| rng.random_range(0.0..1.0)).collect();
    let z: f64 = mu.iter().sum();
    let mu = mu.iter().map(|v| v / z).collect();
    let gamma = rng.random_range(0.5..0.97);
    TabularCmdp::new(ns, na, p, r, c, gamma, 1.0, mu, 30).unwrap()
}

/// Richardson-extrapolated central difference, error O(h⁴).
fn fd_gradient(m: &TabularCmdp, policy: &SoftmaxPolicy, signal: Signal) -> Vec<f64> {
    let value = |theta: &[f64]| {
        let pol = SoftmaxPolicy::from_logits(m.n_states(), m.n_actions(), theta.to_vec()).unwrap();
        let v = exact_values(m, &pol).unwrap();
        match signal {
            Signal::Reward => v.j,
            Signal::Cost => v.j_c,
        }
    };
    let theta = policy.logits().to_vec();
    let central = |i: usize, h: f64| {
        let (mut a, mut b) = (theta.clone(), theta.clone());
        a[i] += h;
        b[i] -= h;
        (value(&a) - value(&b)) / (2.0 * h)
    };
    (0..theta.len())
        .map(|i| {
            let h = 1e-3;
            (4.0 * central(i, h / 2.0) - central(i, h)) / 3.0
        })
        .collect()
}

#[test]
fn exact_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = random_cmdp(&mut rng);
        let logits = (0..m.n_states() * m.n_actions()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let policy = SoftmaxPolicy::from_logits(m.n_states(), m.n_actions(), logits).unwrap();
        for signal in [Signal::Reward, Signal::Cost] {
            let exact = exact_policy_gradient(&m, &policy, signal).unwrap();
            let fd = fd_gradient(&m, &policy, signal);
            let scale = exact.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = exact.iter().zip(&fd).fold(0.0f64, |a, (e, f)| a.max((e - f).abs()));
            worst = worst.max(err / scale);
        }
    }
    report(
        "gradient oracle",
        worst <= 1e-5,
        start.elapsed(),
        Duration::from_secs(30),
        format!("20 CMDPs, worst relative error {worst:.1e}"),
    );
}

#[test]
fn corridor_training_is_feasible_and_near_optimal() {
    let start = Instant::now();
    let spec = load("train.toml");
    let out = tempfile::tempdir().unwrap();
    let outcome = run_train(&spec, out.path(), 0, Execution::default()).unwrap();
    let run = &outcome.runs[0].metrics;
    let m = corridor();
    let d = m.cost_limit();
    let oracle = lagrangian_search_oracle(
        &m,
        &default_lambda_grid(100.0, 80),
        50,
        ConstraintMeasure::Episodic,
        Execution::default(),
    )
    .unwrap();
    let ratio = run.final_j / oracle.j_star;
    let ok = outcome.report.success() && run.last_quartile_gap <= 0.1 * d && ratio >= 0.9;
    report(
        "training feasibility and optimality gap",
        ok,
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "last-quartile |D - d| {:.4} (band {:.2}), final J {:.4}, J* {:.4} ({}), ratio {ratio:.3}",
            run.last_quartile_gap,
            0.1 * d,
            run.final_j,
            oracle.j_star,
            oracle.witness
        ),
    );
}

fn summary_by_gains(outcome: &GridOutcome) -> BTreeMap<String, f64> {
    outcome
        .summary
        .rows
        .iter()
        .map(|r| (format!("kp{}_ki{}_kd{}", r.k_p, r.k_i, r.k_d), r.median_fom))
        .collect()
}

#[test]
fn proportional_term_lowers_cost_fom() {
    let start = Instant::now();
    let spec = load("sweep.toml");
    let out = tempfile::tempdir().unwrap();
    let outcome = run_sweep(&spec, out.path(), 0, Execution::default()).unwrap();
    let fom = summary_by_gains(&outcome);
    let mut ok = outcome.report.success();
    let mut notes = Vec::new();
    for k_i in [1e-4, 1e-3, 1e-2] {
        assert!(spec.grid.k_i.contains(&k_i));
        let i_only = fom[&format!("kp0_ki{k_i}_kd0")];
        let pi = fom[&format!("kp1_ki{k_i}_kd0")];
        ok &= pi < i_only;
        notes.push(format!("K_I={k_i}: PI {pi:.1} vs I {i_only:.1}"));
    }
    report(
        "PI beats I on cost FOM",
        ok,
        start.elapsed(),
        Duration::from_secs(900),
        notes.join("; "),
    );
}

#[test]
fn derivative_term_reduces_limit_step_overshoot() {
    let start = Instant::now();
    let spec = load("limit_step.toml");
    let out = tempfile::tempdir().unwrap();
    let outcome = run_limit_step(&spec, out.path(), 0, Execution::default()).unwrap();
    let by_kd: BTreeMap<String, f64> = outcome
        .summary
        .rows
        .iter()
        .map(|r| (r.k_d.to_string(), r.median_overshoot.unwrap_or(f64::NAN)))
        .collect();
    let (pi, pid) = (by_kd["0"], by_kd["3"]);
    report(
        "derivative overshoot reduction",
        outcome.report.success() && pid < pi,
        start.elapsed(),
        Duration::from_secs(600),
        format!("median overshoot K_D=3 {pid:.3} vs K_D=0 {pi:.3}"),
    );
}

#[test]
fn grad_norm_balancing_is_reward_scale_invariant() {
    let start = Instant::now();
    let spec = load("scale.toml");
    let out = tempfile::tempdir().unwrap();
    let outcome = run_scale_suite(&spec, out.path(), 0, Execution::default()).unwrap();
    let mut ok = outcome.report.success();
    let mut invariant = 0.0f64;
    let mut unbalanced = 0.0f64;
    let mut groups = 0;
    for d in &outcome.distances {
        let worst = d.theta.max(d.lambda).max(d.d);
        if d.group.contains("gradnorm") {
            invariant = invariant.max(worst);
            groups += 1;
        } else if d.group.contains("_none_") {
            unbalanced = unbalanced.max(d.lambda);
        }
    }
    ok &= groups == 2 && invariant <= 1e-6;
    report(
        "reward-scale invariance",
        ok,
        start.elapsed(),
        Duration::from_secs(120),
        format!(
            "grad_norm max relative distance {invariant:.1e} over rho in {:?}; without balancing lambda distance {unbalanced:.2}",
            spec.grid.rho
        ),
    );
}

#[test]
fn unconstrained_baseline_violates_the_limit() {
    let start = Instant::now();
    let m = corridor();
    let cfg = TrainConfig {
        iterations: 1000,
        eta: 3.0,
        controller_enabled: false,
        lambda0: 0.0,
        ..TrainConfig::default()
    };
    let h = train(&m, &cfg).unwrap();
    let last = h.final_record().unwrap();
    report(
        "unconstrained baseline violates",
        last.d > m.cost_limit() && last.lambda == 0.0,
        start.elapsed(),
        Duration::from_secs(60),
        format!("final D {:.3} vs d {}", last.d, m.cost_limit()),
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn reruns_produce_byte_identical_csv_trees() {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["flow.toml", "train.toml", "sweep.toml", "limit_step.toml", "scale.toml"] {
        let spec = load(name);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_spec(&spec, a.path(), 0, Execution::Parallel).unwrap();
        run_spec(&spec, b.path(), 0, Execution::Sequential).unwrap();
        let (ta, tb) = (tree(a.path()), tree(b.path()));
        let same = !ta.is_empty() && ta == tb;
        ok &= same;
        notes.push(format!("{name}: {} files {}", ta.len(), if same { "identical" } else { "DIFFER" }));
    }
    report(
        "determinism",
        ok,
        start.elapsed(),
        Duration::from_secs(300),
        notes.join("; "),
    );
}
