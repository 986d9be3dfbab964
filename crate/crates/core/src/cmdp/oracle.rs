//! Ground-truth constrained optima for small CMDPs.
//!
//! [`brute_force_oracle`] enumerates every deterministic stationary policy.
//! [`lagrangian_search_oracle`] handles instances too large to enumerate by
//! collecting the greedy policies of `R − λC` over a grid of λ. Both then
//! search per-state mixtures of pairs drawn from the Pareto frontier of the
//! candidates, so the reported optimum is a lower bound on the best
//! stochastic policy, exact over deterministic ones for the brute-force
//! oracle.

use std::collections::HashSet;
use std::fmt;

use super::{evaluate, PolicyTable, TabularCmdp, ValueEstimates};
use crate::error::{Error, Result};
use crate::exec::Execution;

pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Pairs tried on each side of the feasibility boundary.
const PAIR_WINDOW: usize = 8;
const BISECTION_STEPS: usize = 40;
const POLICY_ITERATION_LIMIT: usize = 200;
const LOCAL_SEARCH_ROUNDS: usize = 50;

/// Which cost quantity must not exceed `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintMeasure {
    /// Non-discounted episodic cost `D`.
    #[default]
    Episodic,
    /// Discounted cost `J_C`.
    Discounted,
}

impl ConstraintMeasure {
    pub fn of(self, v: &ValueEstimates) -> f64 {
        match self {
            ConstraintMeasure::Episodic => v.d,
            ConstraintMeasure::Discounted => v.j_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Witness {
    Deterministic(Vec<usize>),
    /// Per-state mixture `weight·first + (1 − weight)·second`.
    Mixture {
        first: Vec<usize>,
        second: Vec<usize>,
        weight: f64,
    },
}

impl Witness {
    pub fn policy(&self, n_actions: usize) -> PolicyTable {
        match self {
            Witness::Deterministic(a) => PolicyTable::deterministic(n_actions, a),
            Witness::Mixture { first, second, weight } => PolicyTable::mix(
                &PolicyTable::deterministic(n_actions, first),
                &PolicyTable::deterministic(n_actions, second),
                *weight,
            ),
        }
    }
}

fn fmt_actions(f: &mut fmt::Formatter<'_>, a: &[usize]) -> fmt::Result {
    for x in a {
        write!(f, "{x}")?;
    }
    Ok(())
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Witness::Deterministic(a) => {
                write!(f, "deterministic ")?;
                fmt_actions(f, a)
            }
            Witness::Mixture { first, second, weight } => {
                write!(f, "mixture {weight:.6} x ")?;
                fmt_actions(f, first)?;
                write!(f, " + {:.6} x ", 1.0 - weight)?;
                fmt_actions(f, second)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Best feasible return found; `-inf` when nothing is feasible.
    pub j_star: f64,
    pub feasible: bool,
    /// Best feasible policy, or the least-cost candidate when none is feasible.
    pub witness: Witness,
    pub witness_values: ValueEstimates,
    /// Best return over all candidates, ignoring the constraint.
    pub unconstrained_j: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone)]
struct Candidate {
    actions: Vec<usize>,
    values: ValueEstimates,
}

fn decode(mut index: usize, n_states: usize, n_actions: usize) -> Vec<usize> {
    let mut a = vec![0; n_states];
    for slot in a.iter_mut() {
        *slot = index % n_actions;
        index /= n_actions;
    }
    a
}

pub fn brute_force_oracle(
    cmdp: &TabularCmdp,
    mix_resolution: usize,
    measure: ConstraintMeasure,
    exec: Execution,
) -> Result<OracleResult> {
    let count = (cmdp.n_actions() as f64).powi(cmdp.n_states() as i32);
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::EnumerationGuard {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    let evaluated = exec.map_range(count as usize, |i| {
        let actions = decode(i, ns, na);
        evaluate(cmdp, &PolicyTable::deterministic(na, &actions)).map(|e| Candidate {
            actions,
            values: e.values,
        })
    });
    let candidates = evaluated.into_iter().collect::<Result<Vec<_>>>()?;
    search(cmdp, candidates, mix_resolution, measure, exec)
}

/// Greedy deterministic policy for the scalarized reward `R − λC`, by exact
/// policy iteration.
pub fn lagrangian_greedy_policy(cmdp: &TabularCmdp, lambda: f64) -> Result<Vec<usize>> {
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    let mut actions = vec![0; ns];
    for _ in 0..POLICY_ITERATION_LIMIT {
        let e = evaluate(cmdp, &PolicyTable::deterministic(na, &actions))?;
        let mut changed = false;
        for (s, action) in actions.iter_mut().enumerate() {
            let score = |a: usize| e.q[s * na + a] - lambda * e.q_c[s * na + a];
            let current = score(*action);
            let (best, value) = (0..na)
                .map(|a| (a, score(a)))
                .fold((*action, current), |acc, x| if x.1 > acc.1 { x } else { acc });
            if value > current + 1e-12 * (1.0 + current.abs()) {
                *action = best;
                changed = true;
            }
        }
        if !changed {
            return Ok(actions);
        }
    }
    Ok(actions)
}

pub fn lagrangian_search_oracle(
    cmdp: &TabularCmdp,
    lambdas: &[f64],
    mix_resolution: usize,
    measure: ConstraintMeasure,
    exec: Execution,
) -> Result<OracleResult> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::invalid("lambda grid must be nonempty, finite and nonnegative"));
    }
    let na = cmdp.n_actions();
    let found = exec.map(lambdas, |&l| {
        let actions = lagrangian_greedy_policy(cmdp, l)?;
        let values = evaluate(cmdp, &PolicyTable::deterministic(na, &actions))?.values;
        Ok(Candidate { actions, values })
    });
    let mut candidates = found.into_iter().collect::<Result<Vec<_>>>()?;
    candidates.sort_by(|a, b| a.actions.cmp(&b.actions));
    candidates.dedup_by(|a, b| a.actions == b.actions);
    refine_frontier(cmdp, &mut candidates, measure, exec)?;
    search(cmdp, candidates, mix_resolution, measure, exec)
}

/// Adds every single-state deviation of the current cost/return frontier
/// to the candidate set, until the frontier stops changing.
fn refine_frontier(
    cmdp: &TabularCmdp,
    candidates: &mut Vec<Candidate>,
    measure: ConstraintMeasure,
    exec: Execution,
) -> Result<()> {
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    let mut seen: HashSet<Vec<usize>> = candidates.iter().map(|c| c.actions.clone()).collect();
    let mut expanded: HashSet<Vec<usize>> = HashSet::new();
    for _ in 0..LOCAL_SEARCH_ROUNDS {
        let mut fresh = Vec::new();
        for i in frontier(candidates, measure) {
            if !expanded.insert(candidates[i].actions.clone()) {
                continue;
            }
            for s in 0..ns {
                for a in (0..na).filter(|&a| a != candidates[i].actions[s]) {
                    let mut next = candidates[i].actions.clone();
                    next[s] = a;
                    if seen.insert(next.clone()) {
                        fresh.push(next);
                    }
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        let evaluated = exec.map(&fresh, |actions| {
            evaluate(cmdp, &PolicyTable::deterministic(na, actions)).map(|e| Candidate {
                actions: actions.clone(),
                values: e.values,
            })
        });
        for c in evaluated {
            candidates.push(c?);
        }
    }
    Ok(())
}

/// Indices of the cost/return frontier: increasing cost, strictly
/// increasing return.
fn frontier(candidates: &[Candidate], measure: ConstraintMeasure) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (measure.of(&candidates[a].values), measure.of(&candidates[b].values));
        ca.total_cmp(&cb).then(candidates[b].values.j.total_cmp(&candidates[a].values.j))
    });
    let mut out = Vec::new();
    let mut best_j = f64::NEG_INFINITY;
    for i in order {
        if candidates[i].values.j > best_j {
            best_j = candidates[i].values.j;
            out.push(i);
        }
    }
    out
}

/// Log-spaced λ grid from 0 up to `max`, with `n` positive points.
pub fn default_lambda_grid(max: f64, n: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    let lo = max.log10() - 4.0;
    for i in 0..n {
        let t = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
        g.push(10f64.powf(lo + t * (max.log10() - lo)));
    }
    g
}

fn search(
    cmdp: &TabularCmdp,
    candidates: Vec<Candidate>,
    mix_resolution: usize,
    measure: ConstraintMeasure,
    exec: Execution,
) -> Result<OracleResult> {
    let d = cmdp.cost_limit();
    let unconstrained_j = candidates.iter().map(|c| c.values.j).fold(f64::NEG_INFINITY, f64::max);
    let n = candidates.len();

    let frontier = frontier(&candidates, measure);

    let split = frontier.partition_point(|&i| measure.of(&candidates[i].values) <= d);
    let (feasible, infeasible) = frontier.split_at(split);

    let mut best: Option<(f64, Witness, ValueEstimates)> = feasible.last().map(|&i| {
        let c = &candidates[i];
        (c.values.j, Witness::Deterministic(c.actions.clone()), c.values)
    });

    if mix_resolution >= 2 && !feasible.is_empty() && !infeasible.is_empty() {
        let hull = upper_hull(&candidates, &frontier, measure);
        let mut firsts: Vec<usize> = feasible.iter().rev().take(PAIR_WINDOW).copied().collect();
        let mut seconds: Vec<usize> = infeasible.iter().take(PAIR_WINDOW).copied().collect();
        firsts.extend(hull.iter().filter(|&&i| measure.of(&candidates[i].values) <= d));
        seconds.extend(hull.iter().filter(|&&i| measure.of(&candidates[i].values) > d));
        firsts.sort_unstable();
        firsts.dedup();
        seconds.sort_unstable();
        seconds.dedup();
        let pairs: Vec<(usize, usize)> = firsts
            .iter()
            .flat_map(|&f| seconds.iter().map(move |&i| (f, i)))
            .collect();
        let mixed = exec.map(&pairs, |&(f, i)| {
            best_mixture(cmdp, &candidates[f].actions, &candidates[i].actions, mix_resolution, measure)
        });
        for m in mixed {
            if let Some((j, w, v)) = m? {
                if best.as_ref().is_none_or(|b| j > b.0) {
                    best = Some((j, w, v));
                }
            }
        }
    }

    Ok(match best {
        Some((j, witness, values)) => OracleResult {
            j_star: j,
            feasible: true,
            witness,
            witness_values: values,
            unconstrained_j,
            candidates: n,
        },
        None => {
            let c = &candidates[frontier[0]];
            OracleResult {
                j_star: f64::NEG_INFINITY,
                feasible: false,
                witness: Witness::Deterministic(c.actions.clone()),
                witness_values: c.values,
                unconstrained_j,
                candidates: n,
            }
        }
    })
}

/// Vertices of the upper concave hull of the frontier in the (cost, return)
/// plane.
fn upper_hull(candidates: &[Candidate], frontier: &[usize], measure: ConstraintMeasure) -> Vec<usize> {
    let point = |i: usize| (measure.of(&candidates[i].values), candidates[i].values.j);
    let mut hull: Vec<usize> = Vec::new();
    for &i in frontier {
        let (x, y) = point(i);
        while hull.len() >= 2 {
            let (x1, y1) = point(hull[hull.len() - 2]);
            let (x2, y2) = point(hull[hull.len() - 1]);
            if (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// Scans `w ∈ {k / res}` for the mixture `w·infeasible + (1 − w)·feasible`,
/// then bisects between the last feasible and first infeasible weight.
fn best_mixture(
    cmdp: &TabularCmdp,
    feasible: &[usize],
    infeasible: &[usize],
    res: usize,
    measure: ConstraintMeasure,
) -> Result<Option<(f64, Witness, ValueEstimates)>> {
    let na = cmdp.n_actions();
    let pf = PolicyTable::deterministic(na, feasible);
    let pi = PolicyTable::deterministic(na, infeasible);
    let d = cmdp.cost_limit();
    let eval_w = |w: f64| evaluate(cmdp, &PolicyTable::mix(&pi, &pf, w)).map(|e| e.values);

    let mut best: Option<(f64, f64, ValueEstimates)> = None;
    let consider = |w: f64, v: ValueEstimates, best: &mut Option<(f64, f64, ValueEstimates)>| {
        if measure.of(&v) <= d && best.as_ref().is_none_or(|b| v.j > b.0) {
            *best = Some((v.j, w, v));
        }
    };
    let mut prev_feasible = 0.0;
    let mut boundary = None;
    for k in 1..res {
        let w = k as f64 / res as f64;
        let v = eval_w(w)?;
        if measure.of(&v) <= d {
            consider(w, v, &mut best);
            prev_feasible = w;
        } else if boundary.is_none() {
            boundary = Some((prev_feasible, w));
        }
    }
    let (mut lo, mut hi) = boundary.unwrap_or((prev_feasible, 1.0));
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let v = eval_w(mid)?;
        if measure.of(&v) <= d {
            consider(mid, v, &mut best);
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.map(|(j, w, v)| {
        (
            j,
            Witness::Mixture {
                first: infeasible.to_vec(),
                second: feasible.to_vec(),
                weight: w,
            },
            v,
        )
    }))
}
