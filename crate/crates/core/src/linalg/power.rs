//! Power iteration for the top singular value.
//!
//! The update order is fixed: `u ← normalize(W v)`, `v ← normalize(Wᵀ u)`,
//! `σ ← uᵀ W v`. One call performs exactly one such refresh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Below this norm a power-iteration product is treated as zero.
pub const ZERO_GUARD: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct PowerStep {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

/// One step of power iteration on `w` starting from the current estimates.
///
/// When `W v` (or `Wᵀ u`) vanishes the previous vectors are kept and the
/// reported estimate is the bilinear form `uᵀ W v`, which is `0` for a zero matrix.
pub fn power_iteration_step(w: &Matrix, u: &[f64], v: &[f64]) -> Result<PowerStep> {
    if u.len() != w.rows() || v.len() != w.cols() {
        return Err(Error::shape(
            "power_iteration_step",
            format!(
                "u has {} entries, v has {}, matrix is {:?}",
                u.len(),
                v.len(),
                w.shape()
            ),
        ));
    }
    let mut next_u = w.matvec(v);
    let nu = norm(&next_u);
    if nu < ZERO_GUARD {
        return Ok(PowerStep {
            u: u.to_vec(),
            v: v.to_vec(),
            sigma: bilinear(u, w, v),
        });
    }
    next_u.iter_mut().for_each(|x| *x /= nu);

    let mut next_v = w.matvec_t(&next_u);
    let nv = norm(&next_v);
    if nv < ZERO_GUARD {
        return Ok(PowerStep {
            sigma: bilinear(&next_u, w, v),
            u: next_u,
            v: v.to_vec(),
        });
    }
    next_v.iter_mut().for_each(|x| *x /= nv);
    let sigma = bilinear(&next_u, w, &next_v);
    Ok(PowerStep {
        u: next_u,
        v: next_v,
        sigma,
    })
}

/// `uᵀ W v`.
pub fn bilinear(u: &[f64], w: &Matrix, v: &[f64]) -> f64 {
    dot(u, &w.matvec(v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNormEstimate {
    pub sigma: f64,
    pub steps: usize,
    /// `true` when the relative step-to-step change fell below the tolerance;
    /// `false` when `max_steps` ran out first.
    pub converged: bool,
}

/// Fixed seed for the start vector so the estimate is a pure function of `w`.
const START_SEED: u64 = 0x005e_ed0f_5eed;

/// Deterministic pseudo-random unit vector of length `n`.
pub fn start_vector(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED ^ n as u64);
    random_unit_vector(n, &mut rng)
}

pub fn random_unit_vector<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let nv = norm(&v);
        if nv > 1e-12 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// Runs power iteration until the relative change of the estimate is below
/// `tol` or `max_steps` is reached.
pub fn spectral_norm_converged(
    w: &Matrix,
    tol: f64,
    max_steps: usize,
) -> Result<SpectralNormEstimate> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if w.is_empty() {
        return Ok(SpectralNormEstimate {
            sigma: 0.0,
            steps: 0,
            converged: true,
        });
    }
    let mut v = start_vector(w.cols());
    let mut u = start_vector(w.rows());
    spectral_norm_from(w, &mut u, &mut v, tol, max_steps)
}

/// Like [`spectral_norm_converged`] but starting from, and updating, the
/// caller's vectors.
pub fn spectral_norm_from(
    w: &Matrix,
    u: &mut Vec<f64>,
    v: &mut Vec<f64>,
    tol: f64,
    max_steps: usize,
) -> Result<SpectralNormEstimate> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let mut prev: Option<f64> = None;
    for step in 1..=max_steps {
        let s = power_iteration_step(w, u, v)?;
        *u = s.u;
        *v = s.v;
        if let Some(p) = prev {
            let denom = s.sigma.abs().max(f64::MIN_POSITIVE);
            if (s.sigma - p).abs() / denom < tol || s.sigma == 0.0 {
                return Ok(SpectralNormEstimate {
                    sigma: s.sigma,
                    steps: step,
                    converged: true,
                });
            }
        }
        prev = Some(s.sigma);
    }
    Ok(SpectralNormEstimate {
        sigma: prev.unwrap_or(0.0),
        steps: max_steps,
        converged: false,
    })
}
