//! Dense kernels checked against nalgebra on random inputs.

use nalgebra::DMatrix;
use orthogeo::linalg::{cayley, matmul, solve, svd_jacobi, thin_qr, DenseMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn na_singular_values(m: &DenseMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn svd_values_match_nalgebra() {
    for (seed, (r, c)) in [(8, 8), (12, 5), (5, 12), (20, 20), (64, 8), (1, 7)].into_iter().enumerate() {
        let m = gaussian(r, c, seed as u64);
        let ours = svd_jacobi(&m).unwrap();
        let theirs = na_singular_values(&m);
        let scale = theirs[0];
        for (a, b) in ours.s.as_slice().iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-12 * scale, "{r}x{c}: {a} vs {b}");
        }
        assert!(ours.reconstruct().max_abs_diff(&m) < 1e-12 * scale);
        assert!(ours.u.orthonormality_residual() < 1e-12);
        assert!(ours.v.orthonormality_residual() < 1e-12);
    }
}

#[test]
fn svd_rank_of_low_rank_products() {
    for r in 1..=5 {
        let m = matmul(&gaussian(10, r, 100 + r as u64), &gaussian(r, 9, 200 + r as u64)).unwrap();
        assert_eq!(svd_jacobi(&m).unwrap().numerical_rank(1e-10), r);
        let na_rank = na_singular_values(&m).iter().filter(|s| **s > 1e-10 * na_singular_values(&m)[0]).count();
        assert_eq!(na_rank, r);
    }
}

#[test]
fn qr_matches_nalgebra_up_to_column_signs() {
    for (seed, (r, c)) in [(6, 3), (12, 4), (64, 8), (5, 5)].into_iter().enumerate() {
        let m = gaussian(r, c, 50 + seed as u64);
        let ours = thin_qr(&m).unwrap();
        let na = to_na(&m).qr();
        let (q, rr) = (na.q(), na.r());
        for j in 0..c {
            let sign = rr[(j, j)].signum();
            for i in 0..r {
                assert!((ours.q[(i, j)] - sign * q[(i, j)]).abs() < 1e-12);
            }
            for k in j..c {
                assert!((ours.r_mat[(j, k)] - sign * rr[(j, k)]).abs() < 1e-11);
            }
            assert!(ours.r_mat[(j, j)] > 0.0);
        }
    }
}

#[test]
fn solve_matches_nalgebra() {
    let a = gaussian(9, 9, 7);
    let b = gaussian(9, 3, 8);
    let ours = solve(&a, &b).unwrap();
    let theirs = to_na(&a).lu().solve(&to_na(&b)).unwrap();
    for i in 0..9 {
        for j in 0..3 {
            assert!((ours[(i, j)] - theirs[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn cayley_of_skew_is_orthogonal_with_unit_eigenvalue_modulus() {
    let g = gaussian(7, 7, 9);
    let x = g.sub(&g.transpose()).unwrap().scale(0.5);
    let q = cayley(&x).unwrap();
    assert!(q.orthonormality_residual() < 1e-12);
    let eig = to_na(&q).complex_eigenvalues();
    for z in eig.iter() {
        assert!((z.norm() - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_reconstructs_and_is_orthonormal(rows in 1usize..14, extra in 0usize..1, seed in any::<u64>()) {
        let cols = (rows / 2).max(1) + extra;
        let cols = cols.min(rows);
        let m = gaussian(rows, cols, seed);
        let qr = thin_qr(&m).unwrap();
        prop_assert!(qr.q.orthonormality_residual() < 1e-12);
        prop_assert!(matmul(&qr.q, &qr.r_mat).unwrap().max_abs_diff(&m) < 1e-12 * m.frobenius_norm().max(1.0));
        // Idempotence on an orthonormal input.
        let again = thin_qr(&qr.q).unwrap();
        prop_assert!(again.q.max_abs_diff(&qr.q) < 1e-13);
    }

    #[test]
    fn singular_values_match_nalgebra_on_random_shapes(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        let ours = svd_jacobi(&m).unwrap();
        let theirs = na_singular_values(&m);
        for (a, b) in ours.s.as_slice().iter().zip(&theirs) {
            prop_assert!((a - b).abs() <= 1e-11 * theirs[0].max(1.0));
        }
        prop_assert!(ours.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }
}
