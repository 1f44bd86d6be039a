//! Hessian sharpness: finite-difference Hessian-vector products, Lanczos for
//! the extreme eigenvalues, and the AdamW stability threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, random_unit_vector};
use crate::rng::seeded;

/// `Γ = (2 + 2β₁) / (1 − β₁) / η`.
pub fn adamw_stability_threshold(beta1: f64, lr: f64) -> Result<f64> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Domain(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&beta1) {
        return Err(Error::Domain(format!(
            "beta1 must lie in [0, 1), got {beta1}"
        )));
    }
    Ok((2.0 + 2.0 * beta1) / (1.0 - beta1) / lr)
}

/// Default HVP step: `1e-4 · ‖θ‖/√P`, or `1e-4` when `θ = 0`.
pub fn default_hvp_epsilon(theta: &[f64]) -> f64 {
    let scale = if theta.is_empty() {
        0.0
    } else {
        norm(theta) / (theta.len() as f64).sqrt()
    };
    if scale > 0.0 {
        1e-4 * scale
    } else {
        1e-4
    }
}

/// `H v ≈ (∇L(θ + εv) − ∇L(θ − εv)) / 2ε`.
///
/// `grad` maps parameters to the loss gradient.
pub fn hvp<G>(grad: &mut G, theta: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if theta.len() != v.len() {
        return Err(Error::shape(
            "hvp",
            format!("theta {} vs v {}", theta.len(), v.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!(
            "hvp epsilon must be positive, got {eps}"
        )));
    }
    let nv = norm(v);
    if (nv - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "hvp direction must be unit norm, got {nv}"
        )));
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::shape(
            "hvp",
            "gradient length differs from parameter count".to_string(),
        ));
    }
    if !gp.iter().chain(&gm).all(|x| x.is_finite()) {
        return Err(Error::Numerical("non-finite gradient inside hvp".into()));
    }
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessProbe {
    pub top_k: usize,
    /// Ritz values ordered by decreasing magnitude.
    pub eigenvalues: Vec<f64>,
    pub hvp_epsilon: Option<f64>,
    pub lanczos_iters: usize,
    pub n_params: usize,
    /// Optimizer stability threshold at the probe's learning rate, if defined.
    pub threshold: Option<f64>,
    /// The Krylov space became invariant before `lanczos_iters` steps.
    pub breakdown: bool,
}

impl SharpnessProbe {
    /// `|λ₁|`.
    pub fn sharpness(&self) -> f64 {
        self.eigenvalues.first().map_or(0.0, |l| l.abs())
    }
}

/// Lanczos with full reorthogonalization on a symmetric operator of size `dim`.
/// Returns the `k` Ritz values of largest magnitude.
pub fn lanczos_top_eigs<A>(
    op: &mut A,
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<SharpnessProbe>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if k == 0 || k > iters || iters > dim {
        return Err(Error::Domain(format!(
            "lanczos needs 0 < k <= iters <= dim, got k={k}, iters={iters}, dim={dim}"
        )));
    }
    let mut rng = seeded(seed);
    let mut basis: Vec<Vec<f64>> = vec![random_unit_vector(dim, &mut rng)];
    let mut alphas = Vec::with_capacity(iters);
    let mut betas: Vec<f64> = Vec::with_capacity(iters);
    let mut breakdown = false;

    for j in 0..iters {
        let q = &basis[j];
        let mut w = op(q)?;
        if w.len() != dim {
            return Err(Error::shape(
                "lanczos",
                format!("operator returned {} of {dim}", w.len()),
            ));
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(
                "operator returned non-finite values".into(),
            ));
        }
        let alpha = dot(q, &w);
        alphas.push(alpha);
        for (wi, qi) in w.iter_mut().zip(q) {
            *wi -= alpha * qi;
        }
        if j > 0 {
            let b = betas[j - 1];
            for (wi, pi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= b * pi;
            }
        }
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        if j + 1 == iters {
            break;
        }
        let beta = norm(&w);
        let scale = alphas
            .iter()
            .map(|a| a.abs())
            .fold(0.0, f64::max)
            .max(betas.iter().copied().fold(0.0, f64::max));
        if beta <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            breakdown = true;
            break;
        }
        betas.push(beta);
        basis.push(w.into_iter().map(|x| x / beta).collect());
    }

    let mut ritz = tridiagonal_eigenvalues(&alphas, &betas[..alphas.len() - 1])?;
    ritz.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    ritz.truncate(k);
    Ok(SharpnessProbe {
        top_k: k,
        eigenvalues: ritz,
        hvp_epsilon: None,
        lanczos_iters: alphas.len(),
        n_params: dim,
        threshold: None,
        breakdown,
    })
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off` (`off.len() == diag.len() - 1`) by implicit QL.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::shape(
            "tridiagonal_eigenvalues",
            format!("{} diag, {} off", n, off.len()),
        ));
    }
    let mut d = diag.to_vec();
    let mut e: Vec<f64> = off.to_vec();
    e.push(0.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Numerical("tridiagonal QL did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut early = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if early {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_values() {
        let g = adamw_stability_threshold(0.9, 1.0).unwrap();
        assert!((g - 38.0).abs() <= 4.0 * f64::EPSILON * 38.0);
        assert_eq!(adamw_stability_threshold(0.0, 1.0).unwrap(), 2.0);
        let g = adamw_stability_threshold(0.9, 1e-3).unwrap();
        assert!((g - 38_000.0).abs() <= 1e-9);
        assert!(matches!(
            adamw_stability_threshold(0.9, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(adamw_stability_threshold(1.0, 1.0).is_err());
    }

    #[test]
    fn quadratic_hvp_is_exact() {
        let mut grad = |t: &[f64]| Ok(vec![3.0 * t[0], t[1]]);
        let h = hvp(&mut grad, &[0.4, -1.0], &[1.0, 0.0], 1e-4).unwrap();
        assert!((h[0] - 3.0).abs() < 1e-6 && h[1].abs() < 1e-6);
    }

    #[test]
    fn quartic_hvp_closed_form() {
        // L = ¼‖θ‖⁴ ⇒ ∇L = ‖θ‖² θ, H = 2θθᵀ + ‖θ‖² I
        let mut grad = |t: &[f64]| {
            let n2 = dot(t, t);
            Ok(t.iter().map(|x| n2 * x).collect())
        };
        let h = hvp(&mut grad, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 1e-4).unwrap();
        assert!((h[0] - 3.0).abs() < 1e-5, "{h:?}");
    }

    #[test]
    fn hvp_rejects_bad_inputs() {
        let mut grad = |t: &[f64]| Ok(t.to_vec());
        assert!(hvp(&mut grad, &[0.0], &[2.0], 1e-4).is_err());
        assert!(hvp(&mut grad, &[0.0], &[1.0], 0.0).is_err());
        let mut nan = |_: &[f64]| Ok(vec![f64::NAN]);
        assert!(matches!(
            hvp(&mut nan, &[0.0], &[1.0], 1e-4),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn lanczos_on_diagonal_operator() {
        let diag: Vec<f64> = [5.0, -4.0, 1.0, 0.5, 0.25, -0.1, 0.05, 0.0].to_vec();
        let mut op = |x: &[f64]| Ok(x.iter().zip(&diag).map(|(a, b)| a * b).collect());
        let p = lanczos_top_eigs(&mut op, 8, 2, 8, 7).unwrap();
        assert!((p.eigenvalues[0] - 5.0).abs() < 1e-8);
        assert!((p.eigenvalues[1] + 4.0).abs() < 1e-8);
        assert!((p.sharpness() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn lanczos_breakdown_is_flagged() {
        // rank-one operator: the Krylov space is invariant after one step
        let mut op = |x: &[f64]| {
            let s: f64 = x.iter().sum();
            Ok(vec![s; x.len()])
        };
        let p = lanczos_top_eigs(&mut op, 6, 2, 6, 1).unwrap();
        assert!(p.breakdown);
        assert!((p.eigenvalues[0] - 6.0).abs() < 1e-10);
    }

    #[test]
    fn tridiagonal_known_spectrum() {
        // diag 2, off -1, n = 5: eigenvalues 2 - 2cos(kπ/6)
        let ev = {
            let mut v = tridiagonal_eigenvalues(&[2.0; 5], &[-1.0; 4]).unwrap();
            v.sort_by(f64::total_cmp);
            v
        };
        for (k, l) in ev.iter().enumerate() {
            let expected = 2.0 - 2.0 * ((k + 1) as f64 * std::f64::consts::PI / 6.0).cos();
            assert!((l - expected).abs() < 1e-13);
        }
    }
}
