//! The outer descent loop: start from zero or the median of means, and move
//! `x` by `γ · d_t · g_t` where `d_t` and `g_t` come from either the
//! semidefinite relaxation or the exact low-dimensional oracle.

use nalgebra::DVector;
use serde::Serialize;

use crate::baselines::{geometric_median, GEOMETRIC_MEDIAN_MAX_ITER, GEOMETRIC_MEDIAN_TOL};
use crate::data::{bucketize, ceil_tolerant, rng_for, BucketMeans, Dataset, EstimatorConfig, Init, OraclePath, Profile};
use crate::error::{Error, Result};
use crate::mt::{distance_estimate_warm, gradient_from_solution, DistanceEstimate, MtSolver, MtWarm, SearchConfig};
use crate::mte::mte_distance_and_direction;

/// Supplies the distance estimate at `x` and, after that, a unit direction
/// from `x` toward the mean.
pub trait DescentOracle {
    fn distance(&mut self, x: &DVector<f64>) -> Result<f64>;
    /// Direction at the point of the last `distance` call.
    fn direction(&mut self) -> Result<DVector<f64>>;
    /// Number of relaxation solves that stopped short of their tolerances.
    fn degraded_solves(&self) -> usize {
        0
    }
}

pub struct SdpOracle<'a> {
    z: &'a BucketMeans,
    search: SearchConfig,
    solver: MtSolver,
    warm: MtWarm,
    last: Option<DistanceEstimate>,
    degraded: usize,
    pub solves: usize,
}

impl<'a> SdpOracle<'a> {
    pub fn new(z: &'a BucketMeans, search: &SearchConfig, solver: &MtSolver) -> Self {
        Self {
            z,
            search: search.clone(),
            solver: solver.clone(),
            warm: MtWarm::default(),
            last: None,
            degraded: 0,
            solves: 0,
        }
    }

    pub fn last_estimate(&self) -> Option<&DistanceEstimate> {
        self.last.as_ref()
    }
}

impl DescentOracle for SdpOracle<'_> {
    fn distance(&mut self, x: &DVector<f64>) -> Result<f64> {
        let est = distance_estimate_warm(self.z, x, &self.search, &self.solver, &mut self.warm)?;
        self.solves += est.solves;
        if est.degraded {
            self.degraded += 1;
        }
        let d = est.distance;
        self.last = Some(est);
        Ok(d)
    }

    fn direction(&mut self) -> Result<DVector<f64>> {
        let est = self
            .last
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("direction requested before distance".into()))?;
        gradient_from_solution(&est.frame, &est.solution, self.search.majority_fraction)
    }

    fn degraded_solves(&self) -> usize {
        self.degraded
    }
}

pub struct ExactOracle<'a> {
    z: &'a BucketMeans,
    search: SearchConfig,
    last: Option<DVector<f64>>,
}

impl<'a> ExactOracle<'a> {
    pub fn new(z: &'a BucketMeans, search: &SearchConfig) -> Self {
        Self {
            z,
            search: search.clone(),
            last: None,
        }
    }
}

impl DescentOracle for ExactOracle<'_> {
    fn distance(&mut self, x: &DVector<f64>) -> Result<f64> {
        let (d, g) = mte_distance_and_direction(self.z, x, &self.search)?;
        self.last = Some(g);
        Ok(d)
    }

    fn direction(&mut self) -> Result<DVector<f64>> {
        self.last
            .clone()
            .ok_or_else(|| Error::InvalidConfig("direction requested before distance".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergedBy {
    DistanceZero,
    MaxIters,
    Degenerate,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryPoint {
    pub iterate: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimate: Vec<f64>,
    pub best_distance: f64,
    /// Number of steps taken; the trajectory holds one more point.
    pub iterations_run: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    pub converged_by: ConvergedBy,
    pub profile: Profile,
    pub path: OraclePath,
    pub k: usize,
    pub gamma: f64,
    pub max_iters: usize,
    pub degraded_solves: usize,
}

impl EstimateReport {
    pub fn estimate_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.estimate)
    }
}

/// `max(1, ⌈c_T · ln max(2, scale)⌉)`.
pub fn iteration_budget(c_t: f64, scale: f64) -> usize {
    let raw = ceil_tolerant(c_t * scale.max(2.0).ln());
    if raw.is_finite() {
        (raw as usize).max(1)
    } else {
        usize::MAX
    }
}

/// `T = ⌈c_T ln max(2, d)⌉` from a median-of-means start, and
/// `⌈c_T ln max(2, max_i ‖Z_i‖ / ε)⌉` from zero.
pub fn default_iterations(cfg: &EstimatorConfig, z: &BucketMeans) -> usize {
    match cfg.init {
        Init::MedianOfMeans => iteration_budget(cfg.iteration_constant, z.d() as f64),
        Init::Zero => {
            let proxy = z.means.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
            iteration_budget(cfg.iteration_constant, proxy / cfg.epsilon)
        }
    }
}

pub fn initial_point(cfg: &EstimatorConfig, z: &BucketMeans) -> DVector<f64> {
    match cfg.init {
        Init::Zero => DVector::zeros(z.d()),
        Init::MedianOfMeans => geometric_median(&z.means, GEOMETRIC_MEDIAN_TOL, GEOMETRIC_MEDIAN_MAX_ITER).point,
    }
}

/// Bucketizes `data` (after an optional seeded shuffle) and runs the descent.
pub fn estimate_mean(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let k = cfg.bucket_count(data.n());
    if k < 2 || data.n() < 2 * k {
        return Err(Error::InsufficientSamples { n: data.n(), k });
    }
    let z = if cfg.shuffle_before_bucketing {
        let mut rng = rng_for(cfg.shuffle_seed, 0);
        bucketize(&data.shuffled(&mut rng), k)?
    } else {
        bucketize(data, k)?
    };
    estimate_from_buckets(&z, cfg)
}

pub fn estimate_from_buckets(z: &BucketMeans, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let x0 = initial_point(cfg, z);
    match cfg.path {
        OraclePath::Sdp => {
            let mut oracle = SdpOracle::new(z, &cfg.search, &cfg.mt_solver());
            run_descent(z, x0, cfg, &mut oracle)
        }
        OraclePath::Exact => {
            let mut oracle = ExactOracle::new(z, &cfg.search);
            run_descent(z, x0, cfg, &mut oracle)
        }
    }
}

/// The loop proper, from `x0` with any oracle. Visits `t = 0..=T`; the
/// returned estimate is the earliest iterate with the smallest distance.
pub fn run_descent(
    z: &BucketMeans,
    x0: DVector<f64>,
    cfg: &EstimatorConfig,
    oracle: &mut dyn DescentOracle,
) -> Result<EstimateReport> {
    let max_iters = cfg.max_iters.unwrap_or_else(|| default_iterations(cfg, z));
    let mut x = x0;
    let mut best = (f64::INFINITY, x.clone());
    let mut trajectory = Vec::new();
    let mut converged_by = ConvergedBy::MaxIters;
    let mut t = 0;
    loop {
        let d = oracle.distance(&x)?;
        trajectory.push(TrajectoryPoint {
            iterate: x.iter().copied().collect(),
            distance: d,
        });
        if d < best.0 {
            best = (d, x.clone());
        }
        if d <= cfg.epsilon {
            converged_by = ConvergedBy::DistanceZero;
            break;
        }
        if t == max_iters {
            break;
        }
        let g = match oracle.direction() {
            Ok(g) => g,
            Err(Error::DegenerateRelaxation) => {
                converged_by = ConvergedBy::Degenerate;
                break;
            }
            Err(e) => return Err(e),
        };
        x += g * (cfg.gamma * d);
        t += 1;
    }
    Ok(EstimateReport {
        estimate: best.1.iter().copied().collect(),
        best_distance: best.0,
        iterations_run: t,
        trajectory,
        converged_by,
        profile: cfg.profile,
        path: cfg.path,
        k: z.k(),
        gamma: cfg.gamma,
        max_iters,
        degraded_solves: oracle.degraded_solves(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn budget_arithmetic() {
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert_eq!(iteration_budget(1000.0, e2), 2000);
        assert_eq!(iteration_budget(50.0, 20.0), 150);
        assert_eq!(iteration_budget(1.0, 0.5), 1);
    }

    #[test]
    fn zero_init_budget_uses_the_largest_bucket_mean() {
        let z = BucketMeans::from_means(DMatrix::from_row_slice(2, 1, &[3.0, -4.0])).unwrap();
        let cfg = EstimatorConfig {
            init: Init::Zero,
            epsilon: 1e-3,
            iteration_constant: 50.0,
            ..EstimatorConfig::desk()
        };
        assert_eq!(default_iterations(&cfg, &z), iteration_budget(50.0, 4000.0));
    }

    #[test]
    fn identical_samples_are_recovered() {
        let v = vec![2.0, -1.0, 0.5];
        let data = Dataset::from_rows(&vec![v.clone(); 40]).unwrap();
        let cfg = EstimatorConfig {
            k_override: Some(10),
            ..EstimatorConfig::desk()
        };
        let report = estimate_mean(&data, &cfg).unwrap();
        assert!(report.iterations_run <= 1);
        assert_eq!(report.converged_by, ConvergedBy::DistanceZero);
        for (a, b) in report.estimate.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_samples_per_bucket() {
        let data = Dataset::from_rows(&vec![vec![0.0]; 10]).unwrap();
        let cfg = EstimatorConfig {
            k_override: Some(6),
            ..EstimatorConfig::desk()
        };
        let err = estimate_mean(&data, &cfg).unwrap_err();
        assert!(err.to_string().contains("insufficient samples per bucket"));
    }

    #[test]
    fn large_epsilon_returns_the_start() {
        let data = Dataset::from_rows(&(0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect::<Vec<_>>()).unwrap();
        let cfg = EstimatorConfig {
            k_override: Some(10),
            epsilon: 1e6,
            ..EstimatorConfig::desk()
        };
        let report = estimate_mean(&data, &cfg).unwrap();
        let z = bucketize(&data, 10).unwrap();
        let x0 = initial_point(&cfg, &z);
        assert_eq!(report.iterations_run, 0);
        assert_eq!(report.estimate, x0.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn trajectory_has_one_point_per_visit() {
        let data = Dataset::from_rows(&(0..60).map(|i| vec![(i % 5) as f64, (i % 3) as f64]).collect::<Vec<_>>()).unwrap();
        let cfg = EstimatorConfig {
            k_override: Some(10),
            max_iters: Some(4),
            init: Init::Zero,
            ..EstimatorConfig::desk()
        };
        let report = estimate_mean(&data, &cfg).unwrap();
        assert_eq!(report.trajectory.len(), report.iterations_run + 1);
        let min = report.trajectory.iter().map(|p| p.distance).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_distance, min);
    }
}
