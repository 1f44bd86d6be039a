//! Lower bound on the entropy of a softmax row whose logits have norm at most
//! `σ̄`, the logit vector that attains it, and a search-based oracle.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_entropy, AttentionStats};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, random_unit_vector, Matrix};
use crate::rng::seeded;

/// Slack used when deciding whether a measured entropy respects the bound.
pub const CERTIFICATE_SLACK: f64 = 1e-9;

/// `exp(-σ̄ √(T/(T-1)))`, the weight ratio between a non-maximal and the
/// maximal entry of the minimizing softmax row.
pub fn bound_beta(sigma_bar: f64, t: usize) -> f64 {
    let tf = t as f64;
    (-sigma_bar * (tf / (tf - 1.0)).sqrt()).exp()
}

/// `log(1 + (T-1)β) + σ̄ √(T(T-1)) β / (1 + (T-1)β)`, clamped to `[0, log T]`.
pub fn entropy_lower_bound(sigma_bar: f64, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Domain(format!(
            "entropy bound needs T >= 2, got {t}"
        )));
    }
    if !(sigma_bar >= 0.0) {
        return Err(Error::Domain(format!(
            "sigma_bar must be non-negative, got {sigma_bar}"
        )));
    }
    let tf = t as f64;
    let exponent = -sigma_bar * (tf / (tf - 1.0)).sqrt();
    let beta = exponent.exp();
    let mass = (tf - 1.0) * beta;
    let first = mass.ln_1p();
    // second term in log-space so σ̄·β never forms 0·∞ or underflows early
    let second = if sigma_bar == 0.0 || !sigma_bar.is_finite() {
        0.0
    } else {
        (sigma_bar.ln() + 0.5 * (tf * (tf - 1.0)).ln() + exponent - mass.ln_1p()).exp()
    };
    Ok((first + second).clamp(0.0, tf.ln()))
}

/// The length-`t` logit vector with one entry `σ̄√(1 − 1/T)` (first) and
/// `T − 1` entries `−σ̄√(1/(T(T−1)))`. Its softmax entropy equals the bound.
pub fn tight_minimizer(sigma_bar: f64, t: usize) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(Error::Domain(format!(
            "tight minimizer needs T >= 2, got {t}"
        )));
    }
    let tf = t as f64;
    let high = sigma_bar * (1.0 - 1.0 / tf).sqrt();
    let low = -sigma_bar * (1.0 / (tf * (tf - 1.0))).sqrt();
    let mut u = vec![low; t];
    u[0] = high;
    Ok(u)
}

/// Gradient of `softmax_entropy` with respect to the logits:
/// `∂H/∂u_k = −p_k (log p_k + H)`.
fn entropy_gradient(u: &[f64]) -> (f64, Vec<f64>) {
    let max = u.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = u.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + z.ln();
    let h = softmax_entropy(u);
    let g = u
        .iter()
        .map(|&x| {
            let logp = x - lse;
            -logp.exp() * (logp + h)
        })
        .collect();
    (h, g)
}

fn project_to_sphere(u: &mut [f64], radius: f64) {
    let n = norm(u);
    if n > 0.0 {
        u.iter_mut().for_each(|x| *x *= radius / n);
    }
}

/// Minimizes the softmax entropy on the sphere `‖u‖ = σ̄` by gradient steps
/// projected onto the tangent space, with an adaptive step length.
fn refine_on_sphere(start: &[f64], sigma_bar: f64, steps: usize) -> f64 {
    let mut u = start.to_vec();
    let (mut h, _) = entropy_gradient(&u);
    let mut eta = 0.1 * sigma_bar;
    for _ in 0..steps {
        let (_, g) = entropy_gradient(&u);
        let radial = dot(&g, &u) / (sigma_bar * sigma_bar);
        let tangent: Vec<f64> = g.iter().zip(&u).map(|(gi, ui)| gi - radial * ui).collect();
        let tn = norm(&tangent);
        if tn < 1e-300 {
            break;
        }
        let mut accepted = false;
        while eta > 1e-14 * sigma_bar {
            let mut cand: Vec<f64> = u
                .iter()
                .zip(&tangent)
                .map(|(ui, ti)| ui - eta * ti / tn)
                .collect();
            project_to_sphere(&mut cand, sigma_bar);
            let hc = softmax_entropy(&cand);
            if hc < h {
                u = cand;
                h = hc;
                eta *= 1.5;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    h
}

pub const ORACLE_REFINE_STARTS: usize = 10;
pub const ORACLE_REFINE_STEPS: usize = 500;

/// Smallest softmax entropy found over `n_samples` random directions scaled to
/// norm `σ̄`, after refining the best ten by projected gradient descent.
pub fn entropy_min_oracle(sigma_bar: f64, t: usize, n_samples: usize, seed: u64) -> Result<f64> {
    if t < 2 {
        return Err(Error::Domain(format!("oracle needs T >= 2, got {t}")));
    }
    if !(sigma_bar >= 0.0) {
        return Err(Error::Domain(format!(
            "sigma_bar must be non-negative, got {sigma_bar}"
        )));
    }
    if sigma_bar == 0.0 {
        return Ok((t as f64).ln());
    }
    let mut rng = seeded(seed);
    let mut best: Vec<(f64, Vec<f64>)> = Vec::with_capacity(ORACLE_REFINE_STARTS + 1);
    for _ in 0..n_samples.max(1) {
        let mut u = random_unit_vector(t, &mut rng);
        u.iter_mut().for_each(|x| *x *= sigma_bar);
        let h = softmax_entropy(&u);
        if best.len() < ORACLE_REFINE_STARTS || h < best.last().map_or(f64::INFINITY, |b| b.0) {
            let pos = best.partition_point(|b| b.0 <= h);
            best.insert(pos, (h, u));
            best.truncate(ORACLE_REFINE_STARTS);
        }
    }
    let mut min = best.first().map_or(f64::INFINITY, |b| b.0);
    for (_, start) in &best {
        min = min.min(refine_on_sphere(start, sigma_bar, ORACLE_REFINE_STEPS));
    }
    Ok(min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBoundCertificate {
    /// `σ̄ = σ · σ_x` (times the logit scale outside the theory configuration).
    pub sigma_bar: f64,
    pub t: usize,
    pub beta: f64,
    pub bound_nats: f64,
    /// Minimum entropy over rows the bound applies to (all rows if none do).
    pub measured_min_row_entropy: f64,
    pub satisfied: bool,
    /// Rows whose logit norm exceeds `σ̄`; the bound says nothing about them.
    pub violating_rows: Vec<usize>,
}

/// Compares every softmax-input row of `logits` against the bound for
/// `σ̄ = stats.sigma_bar()`.
pub fn check_attention_bound(
    stats: &AttentionStats,
    logits: &Matrix,
) -> Result<EntropyBoundCertificate> {
    let t = logits.cols();
    let sigma_bar = stats.sigma_bar();
    let (beta, bound) = if t >= 2 {
        (bound_beta(sigma_bar, t), entropy_lower_bound(sigma_bar, t)?)
    } else {
        (1.0, 0.0)
    };
    let mut violating_rows = Vec::new();
    let mut applicable_min = f64::INFINITY;
    let mut overall_min = f64::INFINITY;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let h = softmax_entropy(row);
        overall_min = overall_min.min(h);
        if norm(row) > sigma_bar {
            violating_rows.push(i);
        } else {
            applicable_min = applicable_min.min(h);
        }
    }
    let measured = if applicable_min.is_finite() {
        applicable_min
    } else {
        overall_min
    };
    let satisfied = !applicable_min.is_finite() || applicable_min >= bound - CERTIFICATE_SLACK;
    Ok(EntropyBoundCertificate {
        sigma_bar,
        t,
        beta,
        bound_nats: bound,
        measured_min_row_entropy: measured,
        satisfied,
        violating_rows,
    })
}
