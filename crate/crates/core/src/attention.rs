//! Dot-product self-attention with a global softmax temperature, and exact
//! attention-entropy bookkeeping.
//!
//! Logits follow the plain bilinear form `a = X W_K W_Qᵀ Xᵀ`, optionally
//! divided by `√head_dim`, then always divided by the temperature `τ`.
//! `attn = softmax(a)` row-wise and the layer output is `attn · X · W_V`.

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};
use crate::linalg::{norm, spectral_norm_converged, Matrix};

/// Power-iteration tolerance for the spectral norms in [`AttentionStats`].
pub const STATS_SIGMA_TOL: f64 = 1e-8;
pub const STATS_SIGMA_MAX_STEPS: usize = 200;

/// Rows whose sum is further than this from one are rejected.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub use_sqrt_d_scaling: bool,
    pub temperature: f64,
}

impl AttentionConfig {
    /// Multi-head layout with `head_dim = value_dim = d_model / n_heads`.
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        let head_dim = d_model.checked_div(n_heads).unwrap_or(0);
        Self {
            d_model,
            n_heads,
            head_dim,
            value_dim: head_dim,
            use_sqrt_d_scaling: true,
            temperature: 1.0,
        }
    }

    /// The unscaled, single-temperature layer used when checking the entropy bound.
    pub fn theory(d_model: usize, head_dim: usize, value_dim: usize) -> Self {
        Self {
            d_model,
            n_heads: 1,
            head_dim,
            value_dim,
            use_sqrt_d_scaling: false,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.value_dim == 0 {
            return Err(Error::Config(
                "attention dimensions must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Domain(format!(
                "attention temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Factor applied to `X W_K W_Qᵀ Xᵀ` before the softmax.
    pub fn logit_scale(&self) -> f64 {
        let s = if self.use_sqrt_d_scaling {
            1.0 / (self.head_dim as f64).sqrt()
        } else {
            1.0
        };
        s / self.temperature
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `T × (n_heads · value_dim)`.
    pub output: Matrix,
    /// Per head, the `T × T` softmax input (already scaled and divided by `τ`).
    /// Causal masking is applied inside the softmax, so these stay finite.
    pub logits: Vec<Matrix>,
    /// Per head, the row-stochastic attention matrix.
    pub attn: Vec<Matrix>,
}

fn check_weight(w: &Matrix, name: &str, d: usize, cols: usize) -> Result<()> {
    if w.shape() != (d, cols) {
        return Err(Error::shape(
            "attend",
            format!("{name} is {:?}, expected {:?}", w.shape(), (d, cols)),
        ));
    }
    Ok(())
}

pub fn attend(
    x: &Matrix,
    wk: &Matrix,
    wq: &Matrix,
    wv: &Matrix,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let d = x.cols();
    check_weight(wk, "W_K", d, cfg.n_heads * cfg.head_dim)?;
    check_weight(wq, "W_Q", d, cfg.n_heads * cfg.head_dim)?;
    check_weight(wv, "W_V", d, cfg.n_heads * cfg.value_dim)?;
    let keys = x.matmul(wk)?;
    let queries = x.matmul(wq)?;
    let values = x.matmul(wv)?;
    let scale = cfg.logit_scale();

    let t = x.rows();
    let mut logits = Vec::with_capacity(cfg.n_heads);
    let mut attn = Vec::with_capacity(cfg.n_heads);
    let mut output = Matrix::zeros(t, cfg.n_heads * cfg.value_dim);
    for h in 0..cfg.n_heads {
        let k = keys.slice_cols(h * cfg.head_dim, cfg.head_dim)?;
        let q = queries.slice_cols(h * cfg.head_dim, cfg.head_dim)?;
        let v = values.slice_cols(h * cfg.value_dim, cfg.value_dim)?;
        let a = k.matmul_nt(&q)?.scale(scale);
        let p = softmax_rows(&a, 1.0, causal)?;
        let o = p.matmul(&v)?;
        for i in 0..t {
            output.row_mut(i)[h * cfg.value_dim..(h + 1) * cfg.value_dim].copy_from_slice(o.row(i));
        }
        logits.push(a);
        attn.push(p);
    }
    Ok(AttentionOutput {
        output,
        logits,
        attn,
    })
}

/// Shannon entropy (nats) of a probability row, with `0 · log 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// Entropy of `softmax(u)` evaluated in log-space: `log Z - Σ p_j u_j` after
/// subtracting the row maximum.
pub fn softmax_entropy(u: &[f64]) -> f64 {
    let max = u.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &x in u {
        let s = x - max;
        let e = s.exp();
        z += e;
        weighted += e * s;
    }
    (z.ln() - weighted / z).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub per_row: Vec<f64>,
    pub mean: f64,
}

impl EntropyProfile {
    pub fn min(&self) -> f64 {
        self.per_row.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn attention_entropy(attn: &Matrix) -> Result<EntropyProfile> {
    if attn.rows() == 0 {
        return Err(Error::Contract("attention matrix has no rows".into()));
    }
    let mut per_row = Vec::with_capacity(attn.rows());
    for i in 0..attn.rows() {
        let row = attn.row(i);
        if row.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Contract(format!(
                "attention row {i} has a negative or NaN entry"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Contract(format!("attention row {i} sums to {sum}")));
        }
        per_row.push(row_entropy(row));
    }
    let mean = per_row.iter().sum::<f64>() / per_row.len() as f64;
    Ok(EntropyProfile { per_row, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Mean row entropy over query positions, heads and examples.
    pub mean_entropy: f64,
    pub min_row_entropy: f64,
    /// `max_i ‖a_i‖₂` over the softmax-input rows.
    pub max_logit_row_norm: f64,
    /// `‖W_K W_Qᵀ‖₂` (maximum over heads).
    pub sigma_kq: f64,
    /// `‖X Xᵀ‖₂` (maximum over examples).
    pub sigma_x: f64,
    /// Factor between `X W_K W_Qᵀ Xᵀ` and the softmax input.
    pub logit_scale: f64,
    /// Sequence length `T` (number of keys per row).
    pub seq_len: usize,
    /// Number of attention rows aggregated.
    pub n_rows: usize,
}

impl AttentionStats {
    /// Bound on every softmax-input row norm implied by the weights and inputs.
    pub fn sigma_bar(&self) -> f64 {
        self.sigma_kq * self.sigma_x * self.logit_scale
    }

    /// Pools stats from several heads or examples.
    pub fn merge(items: &[AttentionStats]) -> Option<AttentionStats> {
        let first = items.first()?;
        let rows: usize = items.iter().map(|s| s.n_rows).sum();
        let mean = items
            .iter()
            .map(|s| s.mean_entropy * s.n_rows as f64)
            .sum::<f64>()
            / rows.max(1) as f64;
        Some(AttentionStats {
            mean_entropy: mean,
            min_row_entropy: items
                .iter()
                .map(|s| s.min_row_entropy)
                .fold(f64::INFINITY, f64::min),
            max_logit_row_norm: items
                .iter()
                .map(|s| s.max_logit_row_norm)
                .fold(0.0, f64::max),
            sigma_kq: items.iter().map(|s| s.sigma_kq).fold(0.0, f64::max),
            sigma_x: items.iter().map(|s| s.sigma_x).fold(0.0, f64::max),
            logit_scale: first.logit_scale,
            seq_len: first.seq_len,
            n_rows: rows,
        })
    }
}

/// Spectral norm of `W_K^h W_Q^hᵀ` for each head.
pub fn head_sigma_kq(wk: &Matrix, wq: &Matrix, cfg: &AttentionConfig) -> Result<Vec<f64>> {
    (0..cfg.n_heads)
        .map(|h| {
            let k = wk.slice_cols(h * cfg.head_dim, cfg.head_dim)?;
            let q = wq.slice_cols(h * cfg.head_dim, cfg.head_dim)?;
            let kq = k.matmul_nt(&q)?;
            Ok(spectral_norm_converged(&kq, STATS_SIGMA_TOL, STATS_SIGMA_MAX_STEPS)?.sigma)
        })
        .collect()
}

/// `‖X Xᵀ‖₂`.
pub fn sigma_x(x: &Matrix) -> Result<f64> {
    let xxt = x.matmul_nt(x)?;
    Ok(spectral_norm_converged(&xxt, STATS_SIGMA_TOL, STATS_SIGMA_MAX_STEPS)?.sigma)
}

/// Statistics for one attention call on one example.
pub fn collect_stats(
    x: &Matrix,
    wk: &Matrix,
    wq: &Matrix,
    out: &AttentionOutput,
    cfg: &AttentionConfig,
) -> Result<AttentionStats> {
    let mut per_row = Vec::new();
    for a in &out.attn {
        per_row.extend(attention_entropy(a)?.per_row);
    }
    let max_logit_row_norm = out
        .logits
        .iter()
        .flat_map(|l| (0..l.rows()).map(move |i| norm(l.row(i))))
        .fold(0.0, f64::max);
    let sigma_kq = head_sigma_kq(wk, wq, cfg)?.into_iter().fold(0.0, f64::max);
    Ok(AttentionStats {
        mean_entropy: per_row.iter().sum::<f64>() / per_row.len().max(1) as f64,
        min_row_entropy: per_row.iter().copied().fold(f64::INFINITY, f64::min),
        max_logit_row_norm,
        sigma_kq,
        sigma_x: sigma_x(x)?,
        logit_scale: cfg.logit_scale(),
        seq_len: x.rows(),
        n_rows: per_row.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};

    #[test]
    fn zero_weights_give_uniform_attention() {
        let mut rng = seeded(1);
        let x = normal_matrix(&mut rng, 5, 4, 1.0);
        let cfg = AttentionConfig::theory(4, 3, 2);
        let z = Matrix::zeros(4, 3);
        let wv = normal_matrix(&mut rng, 4, 2, 1.0);
        let out = attend(&x, &z, &z, &wv, &cfg, false).unwrap();
        let ent = attention_entropy(&out.attn[0]).unwrap();
        for h in ent.per_row {
            assert!((h - 5f64.ln()).abs() < 1e-14);
        }
        let stats = collect_stats(&x, &z, &z, &out, &cfg).unwrap();
        assert_eq!(stats.sigma_kq, 0.0);
        assert!((stats.mean_entropy - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn single_token_has_zero_entropy() {
        let x = Matrix::from_rows(&[&[0.3, -0.7]]);
        let w = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let out = attend(&x, &w, &w, &w, &AttentionConfig::theory(2, 1, 1), false).unwrap();
        assert_eq!(out.attn[0].data(), &[1.0]);
        assert_eq!(attention_entropy(&out.attn[0]).unwrap().mean, 0.0);
    }

    #[test]
    fn entropy_closed_forms() {
        let r = attention_entropy(&Matrix::from_rows(&[&[0.5, 0.25, 0.25]])).unwrap();
        assert!((r.mean - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((r.mean - 1.0397).abs() < 1e-4);
        let onehot = attention_entropy(&Matrix::from_rows(&[&[0.0, 1.0, 0.0]])).unwrap();
        assert_eq!(onehot.mean, 0.0);
        assert!(attention_entropy(&Matrix::from_rows(&[&[0.5, 0.4]])).is_err());
    }

    #[test]
    fn saturated_logits_collapse() {
        let logits = Matrix::identity(6).scale(50.0);
        let p = softmax_rows(&logits, 1.0, false).unwrap();
        assert!(attention_entropy(&p).unwrap().min() < 1e-10);
    }

    #[test]
    fn log_space_entropy_matches_direct() {
        let u = [0.3, -2.0, 1.7, 0.0];
        let p = softmax_rows(&Matrix::row_vector(&u), 1.0, false).unwrap();
        assert!((softmax_entropy(&u) - row_entropy(p.data())).abs() < 1e-15);
    }

    #[test]
    fn bad_shapes_and_temperature() {
        let x = Matrix::zeros(3, 4);
        let w = Matrix::zeros(4, 2);
        let mut cfg = AttentionConfig::theory(4, 2, 2);
        assert!(attend(&x, &Matrix::zeros(3, 2), &w, &w, &cfg, false).is_err());
        cfg.temperature = 0.0;
        assert!(matches!(
            attend(&x, &w, &w, &w, &cfg, false),
            Err(Error::Domain(_))
        ));
    }
}
