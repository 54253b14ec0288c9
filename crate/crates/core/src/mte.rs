//! Exact solver for the polynomial test
//!
//! ```text
//!   max Σ b_i  s.t.  b_i ⟨v, Z_i − x⟩ ≥ b_i² r,  b_i² = b_i,  ‖v‖ = 1
//! ```
//!
//! in frames of dimension at most 3. For a fixed `v` the best `b_i` is the
//! indicator of `⟨v, Z_i − x⟩ ≥ r`, so the program reduces to maximizing a
//! count over unit directions, done here by a direction grid followed by
//! nested local refinement.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::data::{BucketMeans, Frame};
use crate::error::{Error, Result};
use crate::mt::SearchConfig;

pub const MAX_DIMENSION: usize = 3;
pub const CIRCLE_RESOLUTION: usize = 4096;
pub const SPHERE_RESOLUTION: usize = 20_000;
/// Refinement stops once the angular width of the searched cell is below this.
pub const ANGULAR_WIDTH: f64 = 1e-6;
/// Subdivisions per refinement pass, per angular coordinate.
const REFINE_POINTS: usize = 16;
/// Relative slack when testing `⟨v, Z_i − x⟩ ≥ r`.
const ACTIVE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct MteSolution {
    pub value: usize,
    /// Unit vector in the ambient space.
    pub direction: DVector<f64>,
    /// Indices of the active buckets, ascending.
    pub active_set: Vec<usize>,
}

pub fn default_resolution(dim: usize) -> usize {
    match dim {
        0 | 1 => 2,
        2 => CIRCLE_RESOLUTION,
        _ => SPHERE_RESOLUTION,
    }
}

fn checked_frame(z: &BucketMeans, x: &DVector<f64>) -> Result<Frame> {
    let frame = z.frame_at(x);
    if frame.dim() > MAX_DIMENSION {
        return Err(Error::OracleDimension(frame.dim()));
    }
    Ok(frame)
}

fn slack(frame: &Frame) -> f64 {
    ACTIVE_SLACK * frame.max_offset_norm().max(1.0)
}

fn project(frame: &Frame, v: &[f64], out: &mut [f64]) {
    let w = &frame.offsets;
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..v.len()).map(|j| w[(i, j)] * v[j]).sum();
    }
}

/// Exact value of the test at radius `r`, using the default resolution for the
/// frame's dimension.
pub fn mte_solve_default(z: &BucketMeans, x: &DVector<f64>, r: f64) -> Result<MteSolution> {
    let frame = checked_frame(z, x)?;
    mte_solve(z, x, r, default_resolution(frame.dim()).max(8))
}

pub fn mte_solve(z: &BucketMeans, x: &DVector<f64>, r: f64, resolution: usize) -> Result<MteSolution> {
    if !(r >= 0.0) || resolution < 8 {
        return Err(Error::InvalidConfig(format!(
            "need r >= 0 and resolution >= 8, got r = {r}, resolution = {resolution}"
        )));
    }
    let frame = checked_frame(z, x)?;
    let eps = slack(&frame);
    let mut proj = vec![0.0; frame.offsets.nrows()];
    let scale = frame.max_offset_norm().max(f64::MIN_POSITIVE);
    // Count plus a fraction in [0, 1) that grows as the nearest inactive
    // bucket approaches activation, so refinement has a slope to follow.
    let count = |v: &[f64], proj: &mut [f64]| {
        project(&frame, v, proj);
        let mut active = 0usize;
        let mut gap = f64::INFINITY;
        for &p in proj.iter() {
            if p >= r - eps {
                active += 1;
            } else {
                gap = gap.min(r - eps - p);
            }
        }
        active as f64 + 1.0 / (2.0 + gap / scale)
    };
    let (v, _) = maximize_over_directions(frame.dim(), resolution, |v| count(v, &mut proj));
    Ok(solution_at(&frame, &v, r, eps))
}

fn solution_at(frame: &Frame, v: &[f64], r: f64, eps: f64) -> MteSolution {
    let mut proj = vec![0.0; frame.offsets.nrows()];
    project(frame, v, &mut proj);
    let active_set: Vec<usize> = (0..proj.len()).filter(|&i| proj[i] >= r - eps).collect();
    let direction = frame.lift(&DVector::from_column_slice(v));
    let norm = direction.norm();
    MteSolution {
        value: active_set.len(),
        direction: direction / norm,
        active_set,
    }
}

/// `⌈fraction · k⌉`, the count a radius must certify.
pub fn required_count(k: usize, fraction: f64) -> usize {
    (crate::data::ceil_tolerant(fraction * k as f64) as usize).clamp(1, k)
}

/// Largest radius certified by at least `⌈0.9k⌉` buckets, with the direction
/// that certifies it.
///
/// For a direction `v` the largest such radius is the `⌈0.9k⌉`-th largest of
/// the `⟨v, Z_i − x⟩`, so the search maximizes that order statistic over the
/// sphere directly. Returns 0 when no direction certifies a positive radius.
pub fn mte_distance_and_direction(
    z: &BucketMeans,
    x: &DVector<f64>,
    cfg: &SearchConfig,
) -> Result<(f64, DVector<f64>)> {
    cfg.validate()?;
    let frame = checked_frame(z, x)?;
    let k = frame.offsets.nrows();
    let need = required_count(k, cfg.majority_fraction);
    let mut proj = vec![0.0; k];
    let quantile = |v: &[f64], proj: &mut [f64]| {
        project(&frame, v, proj);
        let (_, q, _) = proj.select_nth_unstable_by(need - 1, |a, b| b.total_cmp(a));
        *q
    };
    let (v, best) = maximize_over_directions(
        frame.dim(),
        default_resolution(frame.dim()),
        |v| quantile(v, &mut proj),
    );
    let direction = frame.lift(&DVector::from_column_slice(&v));
    let norm = direction.norm();
    Ok((best.max(0.0), direction / norm))
}

pub fn mte_distance(z: &BucketMeans, x: &DVector<f64>, cfg: &SearchConfig) -> Result<f64> {
    Ok(mte_distance_and_direction(z, x, cfg)?.0)
}

pub fn mte_gradient(z: &BucketMeans, x: &DVector<f64>, cfg: &SearchConfig) -> Result<DVector<f64>> {
    Ok(mte_distance_and_direction(z, x, cfg)?.1)
}

/// Maximizes `f` over unit vectors of `R^dim`. Ties keep the earliest grid
/// point.
fn maximize_over_directions(
    dim: usize,
    resolution: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    match dim {
        0 | 1 => {
            let (up, down) = (f(&[1.0]), f(&[-1.0]));
            if down > up {
                (vec![-1.0], down)
            } else {
                (vec![1.0], up)
            }
        }
        2 => maximize_on_circle(resolution, f),
        _ => maximize_on_sphere(resolution, f),
    }
}

fn circle(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn maximize_on_circle(resolution: usize, mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let step = 2.0 * PI / resolution as f64;
    let mut best_theta = 0.0;
    let mut best = f64::NEG_INFINITY;
    for j in 0..resolution {
        let theta = step * j as f64;
        let val = f(&circle(theta));
        if val > best {
            best = val;
            best_theta = theta;
        }
    }
    let mut half = step;
    while half > ANGULAR_WIDTH {
        let center = best_theta;
        let sub = 2.0 * half / REFINE_POINTS as f64;
        for j in 0..=REFINE_POINTS {
            let theta = center - half + sub * j as f64;
            let val = f(&circle(theta));
            if val > best {
                best = val;
                best_theta = theta;
            }
        }
        half = sub;
    }
    (circle(best_theta).to_vec(), best)
}

fn fibonacci_point(j: usize, n: usize) -> [f64; 3] {
    let golden = PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - (2.0 * j as f64 + 1.0) / n as f64;
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let phi = golden * j as f64;
    [rho * phi.cos(), rho * phi.sin(), z]
}

/// Orthonormal tangent vectors at the unit vector `p`.
fn tangent_frame(p: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if p[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let dot = a[0] * p[0] + a[1] * p[1] + a[2] * p[2];
    let mut t1 = [a[0] - dot * p[0], a[1] - dot * p[1], a[2] - dot * p[2]];
    let n1 = (t1[0] * t1[0] + t1[1] * t1[1] + t1[2] * t1[2]).sqrt();
    t1.iter_mut().for_each(|c| *c /= n1);
    let t2 = [
        p[1] * t1[2] - p[2] * t1[1],
        p[2] * t1[0] - p[0] * t1[2],
        p[0] * t1[1] - p[1] * t1[0],
    ];
    (t1, t2)
}

fn maximize_on_sphere(resolution: usize, mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut best_p = fibonacci_point(0, resolution);
    let mut best = f64::NEG_INFINITY;
    for j in 0..resolution {
        let p = fibonacci_point(j, resolution);
        let val = f(&p);
        if val > best {
            best = val;
            best_p = p;
        }
    }
    // Grid spacing is about sqrt(4π / n); search a cell twice that wide.
    let mut half = 2.0 * (4.0 * PI / resolution as f64).sqrt();
    while half > ANGULAR_WIDTH {
        let center = best_p;
        let (t1, t2) = tangent_frame(&center);
        let sub = 2.0 * half / REFINE_POINTS as f64;
        for a in 0..=REFINE_POINTS {
            for b in 0..=REFINE_POINTS {
                let (s, t) = (-half + sub * a as f64, -half + sub * b as f64);
                let mut q = [0.0; 3];
                for c in 0..3 {
                    q[c] = center[c] + s * t1[c] + t * t2[c];
                }
                let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                q.iter_mut().for_each(|c| *c /= n);
                let val = f(&q);
                if val > best {
                    best = val;
                    best_p = q;
                }
            }
        }
        half = sub;
    }
    (best_p.to_vec(), best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BucketMeans;
    use nalgebra::DMatrix;

    fn means(rows: &[&[f64]]) -> BucketMeans {
        let d = rows[0].len();
        BucketMeans::from_means(DMatrix::from_row_slice(rows.len(), d, &rows.concat())).unwrap()
    }

    #[test]
    fn one_dimensional_count() {
        let z = means(&[&[-1.0], &[0.0], &[5.0], &[6.0], &[7.0]]);
        let s = mte_solve(&z, &DVector::from_element(1, 0.0), 4.0, 8).unwrap();
        assert_eq!(s.value, 3);
        assert_eq!(s.active_set, vec![2, 3, 4]);
        assert!((s.direction[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_means_give_the_distance() {
        let mu = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let rows: Vec<f64> = (0..10).flat_map(|_| mu.iter().copied()).collect();
        let z = BucketMeans::from_means(DMatrix::from_row_slice(10, 3, &rows)).unwrap();
        let x = &mu - DVector::from_vec(vec![3.0, 0.0, 0.0]);
        let s = mte_solve_default(&z, &x, 3.0).unwrap();
        assert_eq!(s.value, 10);
        assert!((s.direction[0] - 1.0).abs() < 1e-9);
        let (d, g) = mte_distance_and_direction(&z, &x, &SearchConfig::default()).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_high_dimension() {
        let z = means(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        let err = mte_solve_default(&z, &DVector::zeros(4), 0.5).unwrap_err();
        assert!(err.to_string().contains("oracle restricted to low dimension"));
    }

    #[test]
    fn interior_point_has_zero_distance() {
        let z = means(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        assert_eq!(mte_distance(&z, &DVector::zeros(2), &SearchConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn line_spread_quantile() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let flat: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let z = means(&flat);
        let d = mte_distance(&z, &DVector::from_element(1, -10.0), &SearchConfig::default()).unwrap();
        assert!((9.0..=11.0).contains(&d));
    }
}
