//! Reference estimators: empirical mean, coordinate-wise median, geometric
//! median (Weiszfeld) and median-of-means.

use nalgebra::{DMatrix, DVector};

use crate::data::{bucketize, Dataset};
use crate::error::Result;

pub const GEOMETRIC_MEDIAN_TOL: f64 = 1e-7;
pub const GEOMETRIC_MEDIAN_MAX_ITER: usize = 10_000;

pub fn empirical_mean(data: &Dataset) -> DVector<f64> {
    data.samples().row_mean().transpose()
}

/// Lower median of a slice (element `⌈n/2⌉ − 1` in sorted order).
pub fn lower_median(values: &mut [f64]) -> f64 {
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Per-coordinate lower median of the rows of `points`.
pub fn coordinate_median_of(points: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(points.ncols(), |j, _| {
        let mut col: Vec<f64> = points.column(j).iter().copied().collect();
        lower_median(&mut col)
    })
}

pub fn coordinate_median(data: &Dataset) -> DVector<f64> {
    coordinate_median_of(data.samples())
}

#[derive(Debug, Clone)]
pub struct GeometricMedian {
    pub point: DVector<f64>,
    /// `Σ ‖point − z_i‖`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Sum of distances from `y` to the rows of `points`.
pub fn distance_sum(points: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    points.row_iter().map(|r| (r.transpose() - y).norm()).sum()
}

/// Weiszfeld iteration with the Vardi-Zhang correction at data points,
/// started from the coordinate-wise median.
///
/// Converges when the minimum-norm subgradient of `Σ ‖y − z_i‖` is at most
/// `tol · k`, or when a step moves less than `tol · max(1, spread)`, with the
/// spread measured from the start so that the rule commutes with
/// translations. A data
/// point whose pull from the others is at most its own multiplicity is
/// optimal and returned as is. The best iterate seen is returned.
pub fn geometric_median(points: &DMatrix<f64>, tol: f64, max_iter: usize) -> GeometricMedian {
    let k = points.nrows();
    let magnitude = points.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    // Rounding resolution of the coordinates.
    let coincide = 1e-12 * magnitude;

    let mut y = coordinate_median_of(points);
    let spread = points
        .row_iter()
        .map(|r| (r.transpose() - &y).amax())
        .fold(1.0_f64, f64::max);
    let mut best = (distance_sum(points, &y), y.clone());

    for it in 0..max_iter {
        let mut pull = DVector::zeros(y.len());
        let mut weighted = DVector::zeros(y.len());
        let mut weight_sum = 0.0;
        let mut multiplicity = 0.0;
        for row in points.row_iter() {
            let diff = row.transpose() - &y;
            let dist = diff.norm();
            if dist <= coincide {
                multiplicity += 1.0;
                continue;
            }
            pull += &diff / dist;
            weighted += row.transpose() / dist;
            weight_sum += 1.0 / dist;
        }
        let pull_norm = pull.norm();
        let subgradient = (pull_norm - multiplicity).max(0.0);
        if subgradient <= tol * k as f64 || weight_sum == 0.0 {
            return finish(points, y, best, it, true);
        }
        let target = weighted / weight_sum;
        let next = if multiplicity > 0.0 {
            let shrink = (multiplicity / pull_norm).min(1.0);
            target * (1.0 - shrink) + &y * shrink
        } else {
            target
        };
        let step = (&next - &y).norm();
        y = next;
        let obj = distance_sum(points, &y);
        if obj < best.0 {
            best = (obj, y.clone());
        }
        if step <= tol * spread {
            return finish(points, y, best, it + 1, true);
        }
    }
    finish(points, y, best, max_iter, false)
}

fn finish(
    points: &DMatrix<f64>,
    y: DVector<f64>,
    best: (f64, DVector<f64>),
    iterations: usize,
    converged: bool,
) -> GeometricMedian {
    let obj = distance_sum(points, &y);
    let (objective, point) = if obj <= best.0 { (obj, y) } else { best };
    GeometricMedian {
        point,
        objective,
        iterations,
        converged,
    }
}

/// Geometric median of the `k` contiguous bucket means.
pub fn median_of_means(data: &Dataset, k: usize) -> Result<DVector<f64>> {
    let buckets = bucketize(data, k)?;
    Ok(geometric_median(&buckets.means, GEOMETRIC_MEDIAN_TOL, GEOMETRIC_MEDIAN_MAX_ITER).point)
}
