//! Analytic gradients against central finite differences.

use rand::seq::index::sample;
use serde::Serialize;

use super::model::{bag_loss, Aggregation, EncodedBag, SentenceInput};
use super::params::ModelParams;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Analytic gradients at or below this magnitude are structural zeros
/// carrying roundoff (e.g. key biases, which the attention softmax ignores).
pub const ZERO_GRAD: f64 = 1e-12;

/// Relative error with the degenerate-denominator rule: a zero analytic
/// gradient with `|numeric| < 1e-8` passes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 || (analytic.abs() <= ZERO_GRAD && numeric.abs() < 1e-8) {
        return 0.0;
    }
    (analytic - numeric).abs() / denom
}

/// Coordinates to probe, per tensor: embedding rows restricted to tokens in
/// the bag, position rows to the longest sentence; everything else uniform.
fn candidates(p: &ModelParams<f64>, bag: &EncodedBag<f64>) -> Vec<(usize, Vec<usize>)> {
    let d = p.w1.ncols();
    let mut used_tokens: Vec<usize> = Vec::new();
    let mut max_rows = 0;
    for s in &bag.sentences {
        if let SentenceInput::Tokens(ids) = &s.input {
            used_tokens.extend(ids.iter().map(|&i| i as usize));
            max_rows = max_rows.max(ids.len());
        }
    }
    used_tokens.sort_unstable();
    used_tokens.dedup();
    p.tensors()
        .iter()
        .enumerate()
        .map(|(ti, (name, t))| {
            let coords: Vec<usize> = match *name {
                "embed" => used_tokens.iter().flat_map(|&r| r * d..(r + 1) * d).collect(),
                "pos" => (0..max_rows * d).collect(),
                _ => (0..t.len()).collect(),
            };
            (ti, coords)
        })
        .filter(|(_, c)| !c.is_empty())
        .collect()
}

/// Compares analytic gradients of the bag loss with
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on at least `min_coords` sampled coordinates.
pub fn grad_check(
    params: &ModelParams<f64>,
    bag: &EncodedBag<f64>,
    mode: Aggregation,
    epsilon: f64,
    min_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let mut grads = params.zeros_like();
    bag_loss(params, bag, mode, Some(&mut grads))?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let names: Vec<&'static str> = params.tensors().iter().map(|(n, _)| *n).collect();

    let pools = candidates(params, bag);
    // Round-robin quotas: every tensor gets coordinates, small tensors are
    // exhausted before large ones take the remainder.
    let mut quota = vec![0usize; pools.len()];
    let available: usize = pools.iter().map(|(_, c)| c.len()).sum();
    let target = min_coords.min(available);
    let mut assigned = 0;
    while assigned < target {
        for (q, (_, coords)) in quota.iter_mut().zip(&pools) {
            if assigned < target && *q < coords.len() {
                *q += 1;
                assigned += 1;
            }
        }
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for ((ti, coords), take) in pools.into_iter().zip(quota) {
        for k in sample(rng, coords.len(), take).into_iter() {
            let idx = coords[k];
            let orig = params.tensors()[ti].1[idx];
            probe.tensors_mut()[ti].1[idx] = orig + epsilon;
            let up = bag_loss(&probe, bag, mode, None)?;
            probe.tensors_mut()[ti].1[idx] = orig - epsilon;
            let down = bag_loss(&probe, bag, mode, None)?;
            probe.tensors_mut()[ti].1[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[ti][idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((names[ti].to_string(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
