//! Dense small-matrix linear algebra: orthonormalization, symmetric
//! eigendecomposition, PSD projection and a dominant-eigenvector routine.
//!
//! Tolerances are absolute-relative hybrids, `tol * max(1, scale)`, since the
//! data scale varies by orders of magnitude across benchmark sweeps.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative asymmetry admitted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: DMatrix<f64>,
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let s = f(lambda);
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * v.transpose()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

pub fn ensure_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Largest absolute entry, at least 1.
fn entry_scale(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    ensure_finite(a, "symmetric matrix")?;
    let n = a.nrows();
    let mut asym = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * entry_scale(a) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Orthonormal basis for the span of `vectors` by column-pivoted modified
/// Gram-Schmidt with one reorthogonalization pass.
///
/// A vector is dropped once its residual against the current span is at most
/// `tol * max(1, max_i ‖vectors[i]‖)`; the number of retained columns is the
/// numerical rank. The result may have zero columns when every input is
/// numerically zero.
pub fn orthonormal_basis(vectors: &[DVector<f64>], tol: f64) -> Result<DMatrix<f64>> {
    if vectors.is_empty() {
        return Err(Error::EmptyBasis);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("basis tolerance must be positive, got {tol}")));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension("basis vectors differ in length".into()));
    }
    if vectors.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("basis vectors"));
    }

    let scale = vectors.iter().map(|v| v.norm()).fold(1.0_f64, f64::max);
    let threshold = tol * scale;
    let mut residuals: Vec<DVector<f64>> = vectors.to_vec();
    let mut columns: Vec<DVector<f64>> = Vec::new();

    while columns.len() < d {
        let (pivot, norm) = residuals
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.norm()))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot == usize::MAX || norm <= threshold {
            break;
        }
        let mut q = residuals[pivot].clone();
        for c in &columns {
            let proj = c.dot(&q);
            q.axpy(-proj, c, 1.0);
        }
        let qn = q.norm();
        if qn <= threshold {
            residuals[pivot].fill(0.0);
            continue;
        }
        q /= qn;
        for r in residuals.iter_mut() {
            let proj = q.dot(r);
            r.axpy(-proj, &q, 1.0);
        }
        residuals[pivot].fill(0.0);
        columns.push(q);
    }

    Ok(if columns.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&columns)
    })
}

/// Symmetric eigendecomposition (Householder tridiagonalization followed by
/// implicit QR), eigenvalues sorted ascending.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymEig> {
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    Ok(sym_eig_unchecked(sym))
}

pub(crate) fn sym_eig_unchecked(a: DMatrix<f64>) -> SymEig {
    let eig = a.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let eigenvectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    SymEig {
        eigenvalues,
        eigenvectors,
    }
}

/// Frobenius-nearest PSD matrix: `V diag(max(λ, 0)) Vᵀ`.
pub fn psd_project(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    Ok(psd_project_unchecked(sym))
}

/// PSD projection for matrices already known to be exactly symmetric.
/// Sums only over whichever eigenvalue sign class is smaller.
pub(crate) fn psd_project_unchecked(a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let positives = eig.eigenvalues.iter().filter(|&&l| l > 0.0).count();
    let mut out;
    let keep_positive = positives <= n - positives;
    if keep_positive {
        out = DMatrix::zeros(n, n);
    } else {
        out = a;
    }
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let take = if keep_positive { lambda > 0.0 } else { lambda < 0.0 };
        if !take {
            continue;
        }
        let v = eig.eigenvectors.column(j);
        let sign = if keep_positive { lambda } else { -lambda };
        out.ger(sign, &v, &v, 1.0);
    }
    // ger accumulates in column order; restore exact symmetry.
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = m;
            out[(j, i)] = m;
        }
    }
    out
}

/// Dominant eigenvector of a symmetric PSD matrix by power iteration from a
/// fixed pseudo-random start.
///
/// Stops once `‖Au − ρu‖ ≤ tol · max(1, ρ)` where `ρ = uᵀAu`. The sign of the
/// result is unspecified. On exhaustion returns [`Error::NoConvergence`]
/// carrying the last iterate.
pub fn top_eigenvector(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    check_symmetric(a)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("eigenvector tolerance must be positive, got {tol}")));
    }
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7095_eed5 ^ n as u64);
    let mut u = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    u /= u.norm();

    let mut au = a * &u;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let rho = u.dot(&au);
        let mut r = au.clone();
        r.axpy(-rho, &u, 1.0);
        residual = r.norm();
        if residual <= tol * rho.abs().max(1.0) {
            return Ok(u);
        }
        let norm = au.norm();
        if norm == 0.0 {
            // Zero matrix: every unit vector is dominant.
            return Ok(u);
        }
        u = au / norm;
        au = a * &u;
    }
    Err(Error::NoConvergence {
        best: u,
        residual,
        iterations: max_iter,
    })
}

pub fn rayleigh_quotient(a: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    u.dot(&(a * u)) / u.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&b + b.transpose()) * 0.5
    }

    #[test]
    fn basis_of_axis_vectors() {
        let v = vec![DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::from_vec(vec![0.0, 2.0, 0.0])];
        let b = orthonormal_basis(&v, 1e-10).unwrap();
        assert_eq!(b.ncols(), 2);
        assert_relative_eq!(b.row(2).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn basis_of_collinear_vectors() {
        let v = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![2.0, 0.0])];
        let b = orthonormal_basis(&v, 1e-8).unwrap();
        assert_eq!(b.ncols(), 1);
        assert_relative_eq!(b[(0, 0)].abs(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(b[(1, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn basis_residuals_within_tol() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<_> = (0..5)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let b = orthonormal_basis(&v, 1e-10).unwrap();
        assert_eq!(b.ncols(), 3);
        for x in &v {
            let proj = &b * (b.transpose() * x);
            assert!((x - proj).norm() <= 1e-10);
        }
        assert!((b.transpose() * &b - DMatrix::identity(3, 3)).norm() <= 1e-8);
    }

    #[test]
    fn basis_rejects_empty() {
        assert!(matches!(orthonormal_basis(&[], 1e-8), Err(Error::EmptyBasis)));
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 1.0, 1.0]);
        let e = sym_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, -2.0]))).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[-2.0, 5.0]);
        assert_relative_eq!(e.eigenvectors[(1, 0)].abs(), 1.0);
        assert_relative_eq!(e.eigenvectors[(0, 1)].abs(), 1.0);
    }

    #[test]
    fn eig_reconstructs_random() {
        let a = random_symmetric(10, 11);
        let e = sym_eig(&a).unwrap();
        let rec = e.reconstruct_with(|l| l);
        assert!((rec - &a).norm() <= 1e-9 * a.norm().max(1.0));
        let v = &e.eigenvectors;
        assert!((v.transpose() * v - DMatrix::identity(10, 10)).norm() <= 1e-9);
        assert!(e.eigenvalues.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = 0.5;
        assert!(matches!(sym_eig(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn eig_rejects_nan() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 0)] = f64::NAN;
        assert!(matches!(sym_eig(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn psd_projection_clips() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 3.0]));
        let p = psd_project(&a).unwrap();
        assert_relative_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 3.0])), epsilon = 1e-12);
        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_relative_eq!(psd_project(&psd).unwrap(), psd, epsilon = 1e-9);
    }

    #[test]
    fn psd_projection_is_nearest_among_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_symmetric(6, 17);
        let p = psd_project(&a).unwrap();
        let dist = (&p - &a).norm();
        for _ in 0..100 {
            let b = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let q = &b * b.transpose();
            assert!(dist <= (&q - &a).norm() + 1e-12);
        }
    }

    #[test]
    fn top_eigenvector_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let u = top_eigenvector(&a, 1e-10, 10_000).unwrap();
        assert_relative_eq!(u[0].abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn top_eigenvector_of_rank_one() {
        let w = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        let a = &w * w.transpose();
        let u = top_eigenvector(&a, 1e-10, 1000).unwrap();
        assert_relative_eq!(u.dot(&w).abs(), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn top_eigenvector_reports_best_iterate() {
        // Equal-magnitude eigenvalues of opposite sign never converge.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        match top_eigenvector(&a, 1e-12, 50) {
            Err(Error::NoConvergence { best, .. }) => assert_relative_eq!(best.norm(), 1.0, epsilon = 1e-12),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
