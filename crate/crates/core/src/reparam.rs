//! Spectrally reparameterized linear weights, `Ŵ = (γ / σ(W)) · W`.
//!
//! `σ(W)` is tracked with one power-iteration step per training forward
//! (`u ← normalize(W v)`, `v ← normalize(Wᵀ u)`, then `σ = uᵀ W v`). The
//! refresh of `u` and `v` is not differentiated; `σ` itself is the bilinear
//! form of the current weight, so gradients reach `W` through both the
//! numerator and `σ`, and reach `γ` through the numerator.
//!
//! Also hosts the plain, spectral-norm-only and weight-norm baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{
    bilinear, norm, power_iteration_step, random_unit_vector, sigma_svd, spectral_norm_from, Matrix,
};

/// Below this the weight is treated as degenerate.
pub const MIN_SIGMA: f64 = 1e-30;
pub const FREEZE_TOL: f64 = 1e-14;
pub const FREEZE_MAX_STEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReparamMode {
    Plain,
    SigmaReparam,
    /// `σReparam` with `γ` pinned to one and not trained.
    SpectralNormOnly,
    /// Per-output-column weight normalization with a learned gain.
    WeightNorm,
}

impl ReparamMode {
    pub fn is_spectral(self) -> bool {
        matches!(
            self,
            ReparamMode::SigmaReparam | ReparamMode::SpectralNormOnly
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaInit {
    #[default]
    One,
    /// `γ` starts at the largest singular value of the initial weight.
    Svd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    /// Left singular-vector estimate, length `w.rows()`.
    pub u: Vec<f64>,
    /// Right singular-vector estimate, length `w.cols()`.
    pub v: Vec<f64>,
    pub gamma: f64,
    pub sigma_cached: f64,
    frozen: Option<Matrix>,
}

impl SpectralState {
    /// Random unit `u`, `v` and `γ = 1`.
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self {
            u: random_unit_vector(rows, rng),
            v: random_unit_vector(cols, rng),
            gamma: 1.0,
            sigma_cached: 0.0,
            frozen: None,
        }
    }

    pub fn for_weight<R: Rng + ?Sized>(w: &Matrix, init: GammaInit, rng: &mut R) -> Result<Self> {
        let mut s = Self::new(w.rows(), w.cols(), rng);
        if init == GammaInit::Svd {
            s.gamma = sigma_svd(w)?;
        }
        Ok(s)
    }

    pub(crate) fn from_parts(
        u: Vec<f64>,
        v: Vec<f64>,
        gamma: f64,
        sigma_cached: f64,
        frozen: Option<Matrix>,
    ) -> Self {
        Self {
            u,
            v,
            gamma,
            sigma_cached,
            frozen,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn frozen_weight(&self) -> Option<&Matrix> {
        self.frozen.as_ref()
    }

    pub fn unfreeze(&mut self) {
        self.frozen = None;
    }

    fn check_shape(&self, w: &Matrix) -> Result<()> {
        if self.u.len() != w.rows() || self.v.len() != w.cols() {
            return Err(Error::shape(
                "reparam",
                format!(
                    "state for {}x{} used with weight {:?}",
                    self.u.len(),
                    self.v.len(),
                    w.shape()
                ),
            ));
        }
        Ok(())
    }

    /// One power-iteration step on `w`; returns `uᵀ W v` for the new vectors.
    pub fn refresh(&mut self, w: &Matrix) -> Result<f64> {
        self.check_shape(w)?;
        let step = power_iteration_step(w, &self.u, &self.v)?;
        self.u = step.u;
        self.v = step.v;
        Ok(step.sigma)
    }

    /// `uᵀ W v` for the current vectors.
    pub fn sigma(&self, w: &Matrix) -> Result<f64> {
        self.check_shape(w)?;
        Ok(bilinear(&self.u, w, &self.v))
    }
}

/// `Ŵ = (γ/σ)·W`. In training mode (and when not frozen) one power-iteration
/// step refreshes `u`, `v` first; in eval mode they are left untouched.
pub fn reparam_forward(w: &Matrix, state: &mut SpectralState, training: bool) -> Result<Matrix> {
    if let Some(frozen) = &state.frozen {
        return Ok(frozen.clone());
    }
    if training {
        state.refresh(w)?;
    }
    let sigma = state.sigma(w)?;
    if !(sigma.abs() >= MIN_SIGMA) {
        return Err(Error::Numerical(format!(
            "degenerate weight: sigma = {sigma:e}"
        )));
    }
    state.sigma_cached = sigma;
    Ok(w.scale(state.gamma / sigma))
}

/// Computes `Ŵ` with a converged spectral norm and caches it; later forwards
/// return the cached matrix unchanged.
pub fn freeze(state: &mut SpectralState, w: &Matrix) -> Result<Matrix> {
    state.check_shape(w)?;
    let est = spectral_norm_from(w, &mut state.u, &mut state.v, FREEZE_TOL, FREEZE_MAX_STEPS)?;
    if !(est.sigma >= MIN_SIGMA) {
        return Err(Error::Numerical(format!(
            "degenerate weight: sigma = {:e}",
            est.sigma
        )));
    }
    state.sigma_cached = est.sigma;
    let w_hat = w.scale(state.gamma / est.sigma);
    state.frozen = Some(w_hat.clone());
    Ok(w_hat)
}

/// How `σ` enters the differentiable graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaGradient {
    /// `σ = uᵀ W v` with only `u`, `v` detached.
    #[default]
    Bilinear,
    /// `σ` treated as a constant of the step.
    Detached,
}

/// Records `Ŵ = (γ/σ)·W` on the tape. `gamma` is `None` for the
/// spectral-norm-only baseline (`γ ≡ 1`).
pub fn reparam_on_tape(
    tape: &mut Tape,
    w: NodeId,
    gamma: Option<NodeId>,
    state: &mut SpectralState,
    training: bool,
    sigma_grad: SigmaGradient,
) -> Result<NodeId> {
    if let Some(frozen) = &state.frozen {
        return Ok(tape.constant(frozen.clone()));
    }
    let wv = tape.value(w).clone();
    if training {
        state.refresh(&wv)?;
    }
    let sigma = match sigma_grad {
        SigmaGradient::Bilinear => {
            let u = tape.constant(Matrix::row_vector(&state.u));
            let v = tape.constant(Matrix::column(&state.v));
            let uw = tape.matmul(u, w)?;
            tape.matmul(uw, v)?
        }
        SigmaGradient::Detached => tape.constant(Matrix::scalar(state.sigma(&wv)?)),
    };
    let sv = tape.value(sigma).data()[0];
    if !(sv.abs() >= MIN_SIGMA) {
        return Err(Error::Numerical(format!(
            "degenerate weight: sigma = {sv:e}"
        )));
    }
    state.sigma_cached = sv;
    if let Some(g) = gamma {
        state.gamma = tape.value(g).data()[0];
    }
    let scaled = match gamma {
        Some(g) => tape.mul_scalar(w, g)?,
        None => w,
    };
    tape.div_scalar(scaled, sigma)
}

/// Column `j` becomes `gain_j · w_j / ‖w_j‖`.
pub fn weight_norm_forward(w: &Matrix, gain: &[f64]) -> Result<Matrix> {
    if gain.len() != w.cols() {
        return Err(Error::shape(
            "weight_norm",
            format!("{} gains for {:?}", gain.len(), w.shape()),
        ));
    }
    let mut out = w.clone();
    for j in 0..w.cols() {
        let n = norm(&w.col(j));
        if n < MIN_SIGMA {
            return Err(Error::Numerical(format!(
                "weight_norm: column {j} has zero norm"
            )));
        }
        for i in 0..w.rows() {
            out[(i, j)] *= gain[j] / n;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveBound {
    /// `√w · √(1 − (1/w²) Σ n²/(μ²+n²))`.
    pub lower_bound: f64,
    /// `σ(Δ)` from the SVD.
    pub sigma_delta: f64,
    /// `‖Δ‖_F / √w`, the intermediate quantity of the bound.
    pub frobenius_bound: f64,
}

/// Spectral norm of the ideal adaptive update `Δ = μ / √(μ² + n²)` against its
/// dimension-dependent lower bound.
pub fn adaptive_update_bound(mu: &Matrix, n: &Matrix) -> Result<AdaptiveBound> {
    let w = mu.rows();
    if mu.cols() != w || n.shape() != mu.shape() || w == 0 {
        return Err(Error::shape(
            "adaptive_update_bound",
            format!(
                "mu {:?}, n {:?}; both must be the same square shape",
                mu.shape(),
                n.shape()
            ),
        ));
    }
    let mut delta = Matrix::zeros(w, w);
    let mut noise_ratio_sum = 0.0;
    for (k, (&m, &s)) in mu.data().iter().zip(n.data()).enumerate() {
        if s < 0.0 {
            return Err(Error::Domain(format!("noise scale entry {k} is negative")));
        }
        let second = m * m + s * s;
        if !(second > 0.0) {
            return Err(Error::Domain(format!("mu² + n² vanishes at entry {k}")));
        }
        delta.data_mut()[k] = m / second.sqrt();
        noise_ratio_sum += s * s / second;
    }
    let wf = w as f64;
    let inner = (1.0 - noise_ratio_sum / (wf * wf)).max(0.0);
    Ok(AdaptiveBound {
        lower_bound: wf.sqrt() * inner.sqrt(),
        sigma_delta: sigma_svd(&delta)?,
        frobenius_bound: delta.frobenius_norm() / wf.sqrt(),
    })
}
