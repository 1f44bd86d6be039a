use proptest::prelude::*;
use rand::Rng;

use sigmalab::linalg::{
    read_matrix, sigma_svd, spectral_norm_converged, svd, symmetric_eigen, write_matrix, Matrix,
};
use sigmalab::rng::{normal_matrix, seeded};

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn products_match_the_triple_loop() {
    let mut rng = seeded(1);
    for _ in 0..20 {
        let (m, k, n) = (
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let a = normal_matrix(&mut rng, m, k, 1.0);
        let b = normal_matrix(&mut rng, k, n, 1.0);
        let c = normal_matrix(&mut rng, n, k, 1.0);
        let d = normal_matrix(&mut rng, m, n, 1.0);
        assert!(max_diff(&a.matmul(&b).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
        assert!(max_diff(&a.matmul_nt(&c).unwrap(), &naive_matmul(&a, &c.transpose())) < 1e-12);
        assert!(max_diff(&a.matmul_tn(&d).unwrap(), &naive_matmul(&a.transpose(), &d)) < 1e-12);
        let x: Vec<f64> = (0..k).map(|i| i as f64 - 1.5).collect();
        let y = a.matvec(&x);
        let want = naive_matmul(&a, &Matrix::column(&x));
        for i in 0..m {
            assert!((y[i] - want[(i, 0)]).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Matrix::zeros(2, 3);
    assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
    assert!(a.add(&Matrix::zeros(3, 2)).is_err());
    assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
}

#[test]
fn singular_values_match_eigenvalues_of_the_gram_matrix() {
    let mut rng = seeded(2);
    for &(m, n) in &[(5, 3), (3, 7), (8, 8), (1, 6), (12, 4)] {
        let w = normal_matrix(&mut rng, m, n, 1.0);
        let s = svd(&w).unwrap();
        let gram = w.matmul_tn(&w).unwrap();
        let eig = symmetric_eigen(&gram).unwrap().eigenvalues;
        for (i, sv) in s.singular_values.iter().enumerate() {
            assert!(
                (sv * sv - eig[i]).abs() < 1e-10 * eig[0],
                "{m}x{n}: {} vs {}",
                sv * sv,
                eig[i]
            );
        }
        assert!(max_diff(&s.reconstruct(), &w) < 1e-12);
        let ut_u = s.left_vectors.matmul_tn(&s.left_vectors).unwrap();
        assert!(max_diff(&ut_u, &Matrix::identity(ut_u.rows())) < 1e-12);
    }
}

#[test]
fn eigenvectors_satisfy_the_eigen_equation() {
    let mut rng = seeded(3);
    let b = normal_matrix(&mut rng, 9, 9, 1.0);
    let a = b.add(&b.transpose()).unwrap();
    let e = symmetric_eigen(&a).unwrap();
    for k in 0..9 {
        let v = e.eigenvectors.col(k);
        let av = a.matvec(&v);
        for i in 0..9 {
            assert!((av[i] - e.eigenvalues[k] * v[i]).abs() < 1e-10);
        }
    }
    assert!(e.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn rank_deficient_input_converges() {
    let w = Matrix::outer(&[1.0, 2.0, -1.0], &[0.5, 0.0, 3.0, 1.0]);
    let s = svd(&w).unwrap();
    let expected = (6.0f64).sqrt() * (0.25f64 + 9.0 + 1.0).sqrt();
    assert!((s.singular_values[0] - expected).abs() < 1e-12);
    assert!(s.singular_values[1..].iter().all(|&x| x < 1e-12));
}

#[test]
fn power_iteration_agrees_with_svd() {
    let mut rng = seeded(4);
    for _ in 0..10 {
        let (m, n) = (rng.random_range(2..20), rng.random_range(2..20));
        let w = normal_matrix(&mut rng, m, n, 1.0);
        let est = spectral_norm_converged(&w, 1e-14, 50_000).unwrap();
        let exact = sigma_svd(&w).unwrap();
        assert!(
            (est.sigma - exact).abs() / exact < 1e-8,
            "{} vs {exact}",
            est.sigma
        );
    }
}

#[test]
fn matrix_blocks_round_trip() {
    let mut rng = seeded(5);
    let m = normal_matrix(&mut rng, 4, 7, 1.0);
    let mut buf = Vec::new();
    write_matrix(&mut buf, &m).unwrap();
    assert_eq!(&buf[..4], b"ECLM");
    let back = read_matrix(&mut buf.as_slice()).unwrap();
    assert_eq!(back, m);
    buf[0] = b'X';
    assert!(read_matrix(&mut buf.as_slice()).is_err());
    assert!(read_matrix(&mut &buf[..10]).is_err());
}

fn small_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_is_an_involution(m in small_matrix()) {
        prop_assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn spectral_norm_is_between_max_entry_and_frobenius(m in small_matrix()) {
        let s = sigma_svd(&m).unwrap();
        prop_assert!(s <= m.frobenius_norm() * (1.0 + 1e-12) + 1e-12);
        prop_assert!(s + 1e-12 >= m.max_abs() * (1.0 - 1e-12));
    }

    #[test]
    fn spectral_norm_is_scale_equivariant(m in small_matrix(), k in -5.0f64..5.0) {
        let s = sigma_svd(&m).unwrap();
        let sk = sigma_svd(&m.scale(k)).unwrap();
        prop_assert!((sk - k.abs() * s).abs() <= 1e-10 * (1.0 + sk));
    }
}
