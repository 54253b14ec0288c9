//! Linear algebra checked against a cyclic Jacobi eigensolver written here.

use descent_mean::numerics::{orthonormal_basis, psd_project, sym_eig, top_eigenvector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Cyclic Jacobi sweeps until the off-diagonal mass is negligible.
/// Returns eigenvalues ascending with matching eigenvector columns.
fn jacobi(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= 1e-30 * m.norm_squared().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| v.column(i).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

fn symmetric(n: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
    (&a + a.transpose()) * 0.5
}

fn sym_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=7).prop_flat_map(|n| {
        prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |e| symmetric(n, &e))
    })
}

#[test]
fn jacobi_oracle_diagonalizes_a_known_matrix() {
    let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let (values, _) = jacobi(&a);
    assert!((values[0] - 1.0).abs() < 1e-14);
    assert!((values[1] - 3.0).abs() < 1e-14);
}

proptest! {
    #[test]
    fn eigenvalues_match_jacobi(a in sym_strategy()) {
        let eig = sym_eig(&a).unwrap();
        let (values, _) = jacobi(&a);
        let scale = a.norm().max(1.0);
        for (x, y) in eig.eigenvalues.iter().zip(&values) {
            prop_assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal_and_reconstruct(a in sym_strategy()) {
        let eig = sym_eig(&a).unwrap();
        let n = a.nrows();
        let v = &eig.eigenvectors;
        prop_assert!((v.transpose() * v - DMatrix::identity(n, n)).amax() <= 1e-10);
        let back = eig.reconstruct_with(|l| l);
        prop_assert!((back - &a).amax() <= 1e-10 * a.norm().max(1.0));
    }

    #[test]
    fn psd_projection_matches_jacobi_clipping(a in sym_strategy()) {
        let (values, vectors) = jacobi(&a);
        let mut expected = DMatrix::zeros(a.nrows(), a.nrows());
        for (j, &l) in values.iter().enumerate() {
            if l > 0.0 {
                let c = vectors.column(j);
                expected += c * c.transpose() * l;
            }
        }
        let got = psd_project(&a).unwrap();
        prop_assert!((got - expected).amax() <= 1e-9 * a.norm().max(1.0));
    }

    #[test]
    fn projection_is_idempotent_and_psd(a in sym_strategy()) {
        let p = psd_project(&a).unwrap();
        let (values, _) = jacobi(&p);
        prop_assert!(values[0] >= -1e-9 * a.norm().max(1.0));
        let again = psd_project(&p).unwrap();
        prop_assert!((again - &p).amax() <= 1e-9 * a.norm().max(1.0));
    }

    #[test]
    fn power_iteration_finds_the_top_eigenvector(a in sym_strategy()) {
        let (values, vectors) = jacobi(&a);
        let n = values.len();
        // Shift to make the top eigenvalue dominant in magnitude, and require
        // a visible gap so the comparison is well posed.
        let shifted = &a - DMatrix::identity(n, n) * values[0];
        prop_assume!(n == 1 || values[n - 1] - values[n - 2] > 0.5);
        let u = top_eigenvector(&shifted, 1e-12, 100_000).unwrap();
        let top = vectors.column(n - 1);
        prop_assert!((u.dot(&top).abs() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn basis_spans_the_inputs(
        vecs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6)
    ) {
        let vs: Vec<DVector<f64>> = vecs.iter().map(|v| DVector::from_column_slice(v)).collect();
        let q = orthonormal_basis(&vs, 1e-10).unwrap();
        prop_assert!(q.ncols() <= vs.len().min(4));
        prop_assert!((q.transpose() * &q - DMatrix::identity(q.ncols(), q.ncols())).amax() <= 1e-10);
        for v in &vs {
            let residual = v - &q * (q.transpose() * v);
            prop_assert!(residual.norm() <= 1e-8 * v.norm().max(1.0));
        }
    }
}

#[test]
fn top_eigenvalue_bounds_every_rayleigh_quotient() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for case in 0..100 {
        let n = 1 + case % 50;
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose();
        let top = sym_eig(&a).unwrap().eigenvalues.max();
        for _ in 0..20 {
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let q = v.dot(&(&a * &v)) / v.norm_squared();
            assert!(q <= top * (1.0 + 1e-12) + 1e-12, "n = {n}: {q} > {top}");
        }
        // A near-degenerate top pair can stall the residual test; the
        // quotient of the best iterate must still reach the top.
        let u = match top_eigenvector(&a, 1e-10, 20_000) {
            Ok(u) => u,
            Err(descent_mean::Error::NoConvergence { best, .. }) => best,
            Err(e) => panic!("{e}"),
        };
        let q = u.dot(&(&a * &u));
        assert!(q >= top * (1.0 - 1e-6), "n = {n}: power iteration {q} vs {top}");
    }
}
