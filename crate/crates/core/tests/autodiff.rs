use proptest::prelude::*;

use sigmalab::autodiff::{gelu, gelu_grad, softmax_rows, Tape};
use sigmalab::linalg::Matrix;
use sigmalab::rng::{normal_matrix, seeded};
use sigmalab::verify::{
    gradcheck_case, gradcheck_model, gradcheck_model_configs, op_cases, GRADCHECK_COORDS,
};

/// Five-point stencil, independent of the library's central difference.
fn five_point(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

#[test]
fn every_op_passes_its_gradient_check() {
    for seed in [1, 2] {
        for case in op_cases(seed) {
            let r = gradcheck_case(&case, GRADCHECK_COORDS, seed).unwrap();
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

#[test]
fn assembled_models_pass_their_gradient_checks() {
    for (name, cfg) in gradcheck_model_configs() {
        let r = gradcheck_model(name, &cfg, GRADCHECK_COORDS, 17).unwrap();
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}

#[test]
fn attention_head_gradient_matches_a_five_point_stencil() {
    let mut rng = seeded(8);
    let x = normal_matrix(&mut rng, 5, 4, 1.0);
    let wk = normal_matrix(&mut rng, 4, 3, 0.7);
    let wq = normal_matrix(&mut rng, 4, 3, 0.7);
    let wv = normal_matrix(&mut rng, 4, 3, 0.7);
    let head = |wk: &Matrix| -> f64 {
        let k = x.matmul(wk).unwrap();
        let q = x.matmul(&wq).unwrap();
        let a = softmax_rows(&k.matmul_nt(&q).unwrap().scale(0.5), 1.0, false).unwrap();
        let o = a.matmul(&x.matmul(&wv).unwrap()).unwrap();
        o.data().iter().map(|v| v.sin()).sum()
    };

    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let kn = tape.param(wk.clone());
    let qn = tape.constant(wq.clone());
    let vn = tape.constant(wv.clone());
    let k = tape.matmul(xn, kn).unwrap();
    let q = tape.matmul(xn, qn).unwrap();
    let qt = tape.transpose(q).unwrap();
    let logits = tape.matmul(k, qt).unwrap();
    let scaled = tape.scale(logits, 0.5).unwrap();
    let a = tape.softmax_rows(scaled, 1.0).unwrap();
    let v = tape.matmul(xn, vn).unwrap();
    let o = tape.matmul(a, v).unwrap();
    // The gradient of Σ sin(o) in o is cos(o), and so is that of tr(o · cos(o)ᵀ)
    // with cos(o) held constant.
    let cos = tape.value(o).map(f64::cos);
    let weights = tape.constant(cos.transpose());
    let prod = tape.matmul(o, weights).unwrap();
    let n = tape.value(prod).rows();
    let mut diag_sum = tape.constant(Matrix::scalar(0.0));
    for i in 0..n {
        let row = tape.slice_rows(prod, i, 1).unwrap();
        let cell = tape.slice_cols(row, i, 1).unwrap();
        diag_sum = tape.add(diag_sum, cell).unwrap();
    }
    tape.backward(diag_sum).unwrap();
    let grad = tape.grad(kn).unwrap().clone();

    for idx in 0..wk.len() {
        let f = |t: f64| {
            let mut w = wk.clone();
            w.data_mut()[idx] = t;
            head(&w)
        };
        let numeric = five_point(&f, wk.data()[idx], 1e-3);
        let analytic = grad.data()[idx];
        assert!(
            (analytic - numeric).abs() <= 1e-8 + 1e-6 * numeric.abs(),
            "entry {idx}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn gelu_derivative_matches_a_five_point_stencil() {
    for i in -40..=40 {
        let x = i as f64 * 0.15;
        let numeric = five_point(&gelu, x, 1e-3);
        assert!((gelu_grad(x) - numeric).abs() < 1e-10, "x={x}");
    }
}

#[test]
fn gradients_accumulate_over_shared_nodes() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let s = tape.add(a, a).unwrap();
    let m = tape.mean(s).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    tape.zero_grads();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::zeros(2, 2));
    assert!(tape.backward(a).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        tau in 0.05f64..5.0,
        causal in any::<bool>(),
    ) {
        let m = Matrix::from_vec(3, 4, data).unwrap();
        let m = if causal { m.slice_cols(0, 3).unwrap() } else { m };
        let p = softmax_rows(&m, tau, causal).unwrap();
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if causal {
                prop_assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(data in prop::collection::vec(-20.0f64..20.0, 6), c in -100.0f64..100.0) {
        let m = Matrix::from_vec(1, 6, data).unwrap();
        let p = softmax_rows(&m, 1.0, false).unwrap();
        let q = softmax_rows(&m.map(|x| x + c), 1.0, false).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
