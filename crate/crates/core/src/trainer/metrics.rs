//! Scalar summaries of an episodic-cost trace `D_0, D_1, …`.

/// `Σ_k (D_k − d)₊`
pub fn cost_fom(costs: &[f64], d: f64) -> f64 {
    costs.iter().map(|c| (c - d).max(0.0)).sum()
}

pub fn max_violation(costs: &[f64], d: f64) -> f64 {
    costs.iter().map(|c| (c - d).max(0.0)).fold(0.0, f64::max)
}

fn in_band(c: f64, d: f64, band: f64) -> bool {
    (c - d).abs() <= band * d
}

/// First `k` such that `|D_j − d| ≤ band·d` for every `j ≥ k`.
pub fn settling_iteration(costs: &[f64], d: f64, band: f64) -> Option<usize> {
    let outside = costs.iter().rposition(|&c| !in_band(c, d, band));
    match outside {
        None if costs.is_empty() => None,
        None => Some(0),
        Some(i) if i + 1 < costs.len() => Some(i + 1),
        Some(_) => None,
    }
}

fn last_quartile(costs: &[f64]) -> &[f64] {
    let start = costs.len() - costs.len().div_ceil(4);
    &costs[start..]
}

/// Every entry of the last quarter of the trace lies in the band.
pub fn settled_in_last_quartile(costs: &[f64], d: f64, band: f64) -> bool {
    !costs.is_empty() && last_quartile(costs).iter().all(|&c| in_band(c, d, band))
}

/// `|mean(D over the last quarter) − d|`
pub fn last_quartile_mean_abs_gap(costs: &[f64], d: f64) -> f64 {
    if costs.is_empty() {
        return f64::NAN;
    }
    let q = last_quartile(costs);
    (q.iter().sum::<f64>() / q.len() as f64 - d).abs()
}

/// `max_{k ≥ from} (D_k − d)₊`
pub fn overshoot_after(costs: &[f64], from: usize, d: f64) -> f64 {
    costs.get(from..).map_or(0.0, |tail| max_violation(tail, d))
}
