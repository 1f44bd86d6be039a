use proptest::prelude::*;
use rand::Rng;

use sigmalab::attention::{
    attend, attention_entropy, collect_stats, softmax_entropy, AttentionConfig,
};
use sigmalab::diagnostics::{
    bound_beta, check_attention_bound, entropy_lower_bound, tight_minimizer,
};
use sigmalab::linalg::{norm, Matrix};
use sigmalab::rng::{normal_matrix, seeded};

/// Entropy straight from the definition, with explicit probabilities.
fn entropy_oracle(u: &[f64]) -> f64 {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter()
        .map(|x| x / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// The bound written out directly, valid where nothing under- or overflows.
fn bound_oracle(sigma_bar: f64, t: usize) -> f64 {
    let tf = t as f64;
    let beta = (-sigma_bar * (tf / (tf - 1.0)).sqrt()).exp();
    (1.0 + (tf - 1.0) * beta).ln()
        + sigma_bar * (tf * (tf - 1.0)).sqrt() * beta / (1.0 + (tf - 1.0) * beta)
}

#[test]
fn uniform_logits_have_entropy_log_t() {
    for t in [2, 3, 8, 64] {
        let h = softmax_entropy(&vec![0.3; t]);
        assert!((h - (t as f64).ln()).abs() < 1e-14);
        assert!((entropy_oracle(&vec![0.0; t]) - (t as f64).ln()).abs() < 1e-14);
    }
}

#[test]
fn softmax_entropy_matches_the_definition() {
    let mut rng = seeded(1);
    for _ in 0..500 {
        let t = rng.random_range(2..40);
        let scale = rng.random_range(0.0..20.0);
        let u: Vec<f64> = (0..t)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        assert!((softmax_entropy(&u) - entropy_oracle(&u)).abs() < 1e-12);
    }
}

#[test]
fn bound_matches_the_closed_form() {
    for &s in &[0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0] {
        for &t in &[2, 3, 4, 8, 64, 512] {
            let b = entropy_lower_bound(s, t).unwrap();
            let o = bound_oracle(s, t).clamp(0.0, (t as f64).ln());
            assert!((b - o).abs() < 1e-12, "s={s} t={t}: {b} vs {o}");
            let tf = t as f64;
            assert_eq!(bound_beta(s, t), (-s * (tf / (tf - 1.0)).sqrt()).exp());
        }
    }
}

#[test]
fn bound_decreases_in_sigma_and_stays_in_range() {
    for t in [2, 4, 8, 64] {
        let mut prev = (t as f64).ln();
        for i in 1..400 {
            let s = i as f64 * 0.1;
            let b = entropy_lower_bound(s, t).unwrap();
            assert!(b <= prev + 1e-15 && b >= 0.0, "t={t} s={s}");
            prev = b;
        }
    }
}

#[test]
fn minimizer_has_norm_sigma_and_zero_mean() {
    for t in [2, 4, 8, 64] {
        for s in [0.5, 2.0, 10.0] {
            let u = tight_minimizer(s, t).unwrap();
            assert!((norm(&u) - s).abs() < 1e-12);
            assert!(u.iter().sum::<f64>().abs() < 1e-12);
            let b = entropy_lower_bound(s, t).unwrap();
            assert!((entropy_oracle(&u) - b).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_layer_respects_the_bound() {
    let mut rng = seeded(4);
    for trial in 0..30 {
        let t = rng.random_range(2..12);
        let d = rng.random_range(2..10);
        let scale = 0.2 * (1 + trial % 5) as f64;
        let x = normal_matrix(&mut rng, t, d, scale);
        let wk = normal_matrix(&mut rng, d, 3, 1.0);
        let wq = normal_matrix(&mut rng, d, 3, 1.0);
        let wv = normal_matrix(&mut rng, d, 2, 1.0);
        let cfg = AttentionConfig::theory(d, 3, 2);
        let out = attend(&x, &wk, &wq, &wv, &cfg, false).unwrap();
        let stats = collect_stats(&x, &wk, &wq, &out, &cfg).unwrap();
        assert!(stats.max_logit_row_norm <= stats.sigma_bar() * (1.0 + 1e-9));
        let cert = check_attention_bound(&stats, &out.logits[0]).unwrap();
        assert!(cert.satisfied, "{cert:?}");
        assert!(cert.violating_rows.is_empty());
        let profile = attention_entropy(&out.attn[0]).unwrap();
        assert!((profile.min() - stats.min_row_entropy).abs() < 1e-12);
    }
}

#[test]
fn rows_outside_the_ball_are_reported() {
    let mut rng = seeded(5);
    let x = normal_matrix(&mut rng, 6, 4, 1.0);
    let wk = normal_matrix(&mut rng, 4, 4, 1.0);
    let wq = normal_matrix(&mut rng, 4, 4, 1.0);
    let wv = normal_matrix(&mut rng, 4, 4, 1.0);
    let cfg = AttentionConfig::theory(4, 4, 4);
    let out = attend(&x, &wk, &wq, &wv, &cfg, false).unwrap();
    let mut stats = collect_stats(&x, &wk, &wq, &out, &cfg).unwrap();
    stats.sigma_kq *= 1e-3;
    let cert = check_attention_bound(&stats, &out.logits[0]).unwrap();
    assert!(!cert.violating_rows.is_empty());
}

#[test]
fn malformed_attention_is_rejected() {
    assert!(attention_entropy(&Matrix::from_rows(&[&[0.5, 0.6]])).is_err());
    assert!(attention_entropy(&Matrix::from_rows(&[&[1.5, -0.5]])).is_err());
    assert!(attention_entropy(&Matrix::zeros(0, 3)).is_err());
}

#[test]
fn causal_attention_rows_only_see_the_past() {
    let mut rng = seeded(6);
    let x = normal_matrix(&mut rng, 5, 4, 1.0);
    let w = normal_matrix(&mut rng, 4, 4, 1.0);
    let out = attend(&x, &w, &w, &w, &AttentionConfig::new(4, 2), true).unwrap();
    for a in &out.attn {
        for i in 0..5 {
            assert!(a.row(i)[i + 1..].iter().all(|&p| p == 0.0));
        }
        assert_eq!(a.row(0)[0], 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn any_row_is_above_the_bound_for_its_norm(u in prop::collection::vec(-15.0f64..15.0, 2..40)) {
        let b = entropy_lower_bound(norm(&u), u.len()).unwrap();
        prop_assert!(entropy_oracle(&u) >= b - 1e-12);
    }
}
