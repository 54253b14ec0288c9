//! Experiment plumbing: seeded benchmark runs over a list of estimators, the
//! concentration experiment for the relaxation's mass at the true mean, and
//! a property suite over the relaxation and the descent loop.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    coordinate_median, empirical_mean, geometric_median, median_of_means, GEOMETRIC_MEDIAN_MAX_ITER,
    GEOMETRIC_MEDIAN_TOL,
};
use crate::data::{rng_for, unit_sphere, BucketMeans, Dataset, EstimatorConfig, GeneratorSpec, OraclePath};
use crate::descent::{estimate_mean, DescentOracle, SdpOracle};
use crate::error::{Error, Result};
use crate::mt::{distance_estimate, mt_value, MtSolver, SearchConfig};
use crate::mte::mte_solve_default;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    EmpiricalMean,
    CoordinateMedian,
    GeometricMedian,
    MedianOfMeans,
    /// Descent on the semidefinite path.
    Descent,
    /// Descent with the exact low-dimensional oracle.
    DescentExact,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::EmpiricalMean,
        Estimator::CoordinateMedian,
        Estimator::GeometricMedian,
        Estimator::MedianOfMeans,
        Estimator::Descent,
        Estimator::DescentExact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::EmpiricalMean => "empirical_mean",
            Estimator::CoordinateMedian => "coordinate_median",
            Estimator::GeometricMedian => "geometric_median",
            Estimator::MedianOfMeans => "median_of_means",
            Estimator::Descent => "descent",
            Estimator::DescentExact => "descent_exact",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::UnknownEstimator {
                name: name.to_string(),
                available: Self::ALL.iter().map(|e| e.name()).collect(),
            })
    }

    /// The estimate and the number of iterations spent on it.
    pub fn run(self, data: &Dataset, cfg: &EstimatorConfig) -> Result<(DVector<f64>, usize)> {
        match self {
            Estimator::EmpiricalMean => Ok((empirical_mean(data), 0)),
            Estimator::CoordinateMedian => Ok((coordinate_median(data), 0)),
            Estimator::GeometricMedian => {
                let gm = geometric_median(data.samples(), GEOMETRIC_MEDIAN_TOL, GEOMETRIC_MEDIAN_MAX_ITER);
                Ok((gm.point, gm.iterations))
            }
            Estimator::MedianOfMeans => Ok((median_of_means(data, cfg.bucket_count(data.n()))?, 0)),
            Estimator::Descent | Estimator::DescentExact => {
                let path = if self == Estimator::Descent {
                    OraclePath::Sdp
                } else {
                    OraclePath::Exact
                };
                let cfg = EstimatorConfig { path, ..cfg.clone() };
                let report = estimate_mean(data, &cfg)?;
                Ok((report.estimate_vector(), report.iterations_run))
            }
        }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_delta() -> f64 {
    0.01
}

/// A benchmark: `trials` datasets of `n` samples in `R^d`, each handed to
/// every listed estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub generator: GeneratorSpec,
    pub n: usize,
    pub d: usize,
    pub estimators: Vec<String>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Confidence parameter; also overrides `estimator_cfg.delta`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub estimator_cfg: EstimatorConfig,
    /// Where the per-trial CSV goes; the CLI's `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Measure per-trial wall-clock time. Off by default so that outputs
    /// are reproducible bit for bit.
    #[serde(default)]
    pub timing: bool,
    /// Shuffle each trial's samples before any estimator sees them, so that
    /// bucketing does not depend on sample order.
    #[serde(default = "yes")]
    pub shuffle: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<Vec<Estimator>> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("n and d must be positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("no estimators listed".into()));
        }
        self.estimator_config().validate()?;
        self.generator.ground_truth(self.d)?;
        self.estimators.iter().map(|s| Estimator::parse(s)).collect()
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            delta: self.delta,
            ..self.estimator_cfg.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One estimator on one trial. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub estimator: String,
    /// `‖estimate − μ‖`.
    pub error: f64,
    pub iterations: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub trials: usize,
    pub mean_error: f64,
    pub median_error: f64,
    /// Nearest-rank `(1 − δ)`-quantile of the error.
    pub quantile_error: f64,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub delta: f64,
    pub quantile_level: f64,
    /// `√(Tr Σ / n) + √(‖Σ‖ ln(1/δ) / n)`.
    pub subgaussian_yardstick: f64,
    /// `√(Tr Σ / (n δ))`.
    pub chebyshev_yardstick: f64,
    pub estimators: Vec<EstimatorSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    /// Sorted by trial, then by the order of `spec.estimators`.
    pub records: Vec<TrialRecord>,
    pub summary: ExperimentSummary,
}

/// Nearest-rank quantile: the `⌈q N⌉`-th smallest value (the smallest for
/// `q = 0`).
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    let estimators = spec.validate()?;
    let cfg = spec.estimator_config();
    let per_trial: Vec<Vec<TrialRecord>> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| run_trial(spec, &estimators, &cfg, trial))
        .collect::<Result<_>>()?;
    let records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();

    let truth = spec.generator.ground_truth(spec.d)?;
    let n = spec.n as f64;
    let summary = ExperimentSummary {
        n: spec.n,
        d: spec.d,
        k: cfg.bucket_count(spec.n),
        delta: spec.delta,
        quantile_level: 1.0 - spec.delta,
        subgaussian_yardstick: (truth.trace_cov / n).sqrt()
            + (truth.op_norm_cov * (1.0 / spec.delta).ln() / n).sqrt(),
        chebyshev_yardstick: (truth.trace_cov / (n * spec.delta)).sqrt(),
        estimators: estimators
            .iter()
            .map(|e| summarize(e.name(), &records, 1.0 - spec.delta))
            .collect(),
    };
    Ok(ExperimentOutput { records, summary })
}

/// Keeps the shuffling streams apart from the generators'.
const SHUFFLE_STREAM: u64 = 1 << 63;

fn run_trial(
    spec: &ExperimentSpec,
    estimators: &[Estimator],
    cfg: &EstimatorConfig,
    trial: usize,
) -> Result<Vec<TrialRecord>> {
    let mut data = spec.generator.generate_stream(spec.n, spec.d, spec.seed, trial as u64)?;
    if spec.shuffle {
        data = data.shuffled(&mut rng_for(spec.seed, SHUFFLE_STREAM | trial as u64));
    }
    let mu = spec.generator.ground_truth(spec.d)?.mean_vector();
    estimators
        .iter()
        .map(|&e| {
            let start = Instant::now();
            let (estimate, iterations) = e.run(&data, cfg)?;
            let wall_ms = if spec.timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            Ok(TrialRecord {
                trial,
                estimator: e.name().to_string(),
                error: (estimate - &mu).norm(),
                iterations,
                wall_ms,
            })
        })
        .collect()
}

fn summarize(name: &str, records: &[TrialRecord], level: f64) -> EstimatorSummary {
    let mine: Vec<&TrialRecord> = records.iter().filter(|r| r.estimator == name).collect();
    let errors: Vec<f64> = mine.iter().map(|r| r.error).collect();
    let count = errors.len() as f64;
    EstimatorSummary {
        estimator: name.to_string(),
        trials: errors.len(),
        mean_error: errors.iter().sum::<f64>() / count,
        median_error: nearest_rank_quantile(&errors, 0.5),
        quantile_error: nearest_rank_quantile(&errors, level),
        mean_iterations: mine.iter().map(|r| r.iterations as f64).sum::<f64>() / count,
    }
}

pub fn write_records_csv(records: &[TrialRecord], out: impl Write) -> Result<()> {
    write_csv(records, out)
}

fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, mut out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub c: f64,
    pub radius: f64,
    pub trials: usize,
    pub exceed_fraction: f64,
    pub mean_mass: f64,
    pub max_mass: f64,
    /// Solves that stopped at the iteration limit.
    pub degraded: usize,
}

/// Mass of the relaxation at the true mean for Gaussian bucket means
/// `Z_i ~ N(0, I_d)`, at radii `r = c (√(d/k) + 1)`. For each `c`, reports
/// the fraction of trials whose value exceeds `k/20`.
pub fn run_concentration(
    k: usize,
    d: usize,
    trials: usize,
    c_grid: &[f64],
    seed: u64,
    solver: &MtSolver,
) -> Result<Vec<ConcentrationRow>> {
    if k < 2 || d == 0 || trials == 0 {
        return Err(Error::InvalidConfig("need k >= 2, d >= 1 and trials >= 1".into()));
    }
    if c_grid.is_empty() || c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidConfig("radius multipliers must be positive and finite".into()));
    }
    let base = (d as f64 / k as f64).sqrt() + 1.0;
    let x = DVector::zeros(d);
    let masses: Vec<Vec<(f64, bool)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, t as u64);
            let z = BucketMeans::from_means(gaussian_matrix(k, d, &mut rng))?;
            c_grid
                .iter()
                .map(|&c| mt_value(&z, &x, c * base, solver).map(|v| (v.value, v.degraded)))
                .collect()
        })
        .collect::<Result<_>>()?;

    let bound = k as f64 / 20.0;
    Ok(c_grid
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let col: Vec<(f64, bool)> = masses.iter().map(|row| row[j]).collect();
            ConcentrationRow {
                c,
                radius: c * base,
                trials,
                exceed_fraction: col.iter().filter(|(m, _)| *m > bound).count() as f64 / trials as f64,
                mean_mass: col.iter().map(|(m, _)| m).sum::<f64>() / trials as f64,
                max_mass: col.iter().map(|(m, _)| *m).fold(f64::NEG_INFINITY, f64::max),
                degraded: col.iter().filter(|(_, deg)| *deg).count(),
            }
        })
        .collect())
}

pub fn write_concentration_csv(rows: &[ConcentrationRow], out: impl Write) -> Result<()> {
    write_csv(rows, out)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let s: f64 = StandardNormal.sample(rng);
        s
    })
}

/// Outcome of one family of property checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation statistic seen; the check passes when every case
    /// stays at or below `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    /// Solves that stopped at the iteration limit.
    pub degraded: usize,
}

impl PropertyCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// `cases` holds `(statistic, degraded)` pairs.
    fn from_cases(name: &str, tolerance: f64, cases: &[(f64, bool)]) -> Self {
        Self {
            name: name.to_string(),
            cases: cases.len(),
            failures: cases.iter().filter(|(stat, _)| !(*stat <= tolerance)).count(),
            worst: cases.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max),
            tolerance,
            degraded: cases.iter().filter(|c| c.1).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(PropertyCheck::passed)
    }
}

#[derive(Serialize)]
struct PropertyRow<'a> {
    check: &'a str,
    cases: usize,
    failures: usize,
    worst: f64,
    tolerance: f64,
    degraded: usize,
    passed: bool,
}

pub fn write_properties_csv(report: &PropertyReport, out: impl Write) -> Result<()> {
    let rows: Vec<PropertyRow> = report
        .checks
        .iter()
        .map(|c| PropertyRow {
            check: &c.name,
            cases: c.cases,
            failures: c.failures,
            worst: c.worst,
            tolerance: c.tolerance,
            degraded: c.degraded,
            passed: c.passed(),
        })
        .collect();
    write_csv(&rows, out)
}

/// Runs every property family with instances drawn from `seed`.
pub fn run_property_suite(seed: u64, solver: &MtSolver) -> Result<PropertyReport> {
    let search = SearchConfig::default();
    let checks = vec![
        check_dominance(seed, 50, solver)?,
        check_monotonicity(seed, 20, 8, solver)?,
        check_bounded_difference(seed, 50, solver)?,
        check_equivariance(seed, 20, solver, &search)?,
        check_contraction(seed, 20, solver, &search)?,
    ];
    Ok(PropertyReport { seed, checks })
}

/// Stream offsets that keep the families' instances independent.
const DOMINANCE_STREAM: u64 = 1 << 32;
const MONOTONICITY_STREAM: u64 = 2 << 32;
const BOUNDED_STREAM: u64 = 3 << 32;
const EQUIVARIANCE_STREAM: u64 = 4 << 32;
const CONTRACTION_STREAM: u64 = 5 << 32;

/// Slack per bucket allowed for solver error in the value comparisons.
pub const VALUE_SLACK: f64 = 1e-4;
/// Slack per bucket in the bounded-difference check.
pub const BOUNDED_DIFFERENCE_SLACK: f64 = 5e-3;
/// Relative tolerance for distance estimates under similarity transforms.
pub const DISTANCE_EQUIVARIANCE_TOL: f64 = 1e-2;

/// A random relaxation instance: bucket means, a query point and a radius.
#[derive(Debug, Clone)]
pub struct Instance {
    pub z: BucketMeans,
    pub x: DVector<f64>,
    pub r: f64,
}

/// `k ∈ [5, 20]` means in `R^d`: a unit Gaussian cloud around a random
/// centre, with a few far-off outliers mixed in. `x` lies within a few units
/// of the centre and `r ∈ [0, 3]`.
pub fn random_instance(d: usize, rng: &mut impl Rng) -> Result<Instance> {
    let k = rng.random_range(5..=20);
    let centre = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    let outliers = rng.random_range(0..=k / 4);
    let mut means = DMatrix::zeros(k, d);
    for i in 0..k {
        let spread = if i < outliers { rng.random_range(5.0..20.0) } else { 1.0 };
        let noise = DVector::from_fn(d, |_, _| {
            let s: f64 = StandardNormal.sample(rng);
            s
        });
        means.set_row(i, &(&centre + noise * spread).transpose());
    }
    let x = &centre + unit_sphere(d, rng) * rng.random_range(0.0..3.0);
    let r = rng.random_range(0.0..3.0);
    Ok(Instance {
        z: BucketMeans::from_means(means)?,
        x,
        r,
    })
}

/// The relaxation's value is at least the exact program's, up to solver
/// slack. Effective dimension at most 2 so the exact program is solvable.
pub fn check_dominance(seed: u64, cases: usize, solver: &MtSolver) -> Result<PropertyCheck> {
    let results: Vec<(f64, bool)> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, DOMINANCE_STREAM + c as u64);
            let d = rng.random_range(1..=2);
            let inst = random_instance(d, &mut rng)?;
            let relaxed = mt_value(&inst.z, &inst.x, inst.r, solver)?;
            let exact = mte_solve_default(&inst.z, &inst.x, inst.r)?;
            let k = inst.z.k() as f64;
            Ok(((exact.value as f64 - relaxed.value) / k, relaxed.degraded))
        })
        .collect::<Result<_>>()?;
    Ok(PropertyCheck::from_cases("dominance", VALUE_SLACK, &results))
}

/// Along an increasing radius grid the value never rises by more than the
/// slack.
pub fn check_monotonicity(seed: u64, cases: usize, radii: usize, solver: &MtSolver) -> Result<PropertyCheck> {
    let results: Vec<(f64, bool)> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, MONOTONICITY_STREAM + c as u64);
            let d = rng.random_range(1..=4);
            let inst = random_instance(d, &mut rng)?;
            let top = rng.random_range(1.0..6.0);
            let mut worst = f64::NEG_INFINITY;
            let mut degraded = false;
            let mut prev: Option<f64> = None;
            for j in 1..=radii {
                let v = mt_value(&inst.z, &inst.x, top * j as f64 / radii as f64, solver)?;
                degraded |= v.degraded;
                if let Some(p) = prev {
                    worst = worst.max(v.value - p);
                }
                prev = Some(v.value);
            }
            let k = inst.z.k() as f64;
            Ok((worst / k, degraded))
        })
        .collect::<Result<_>>()?;
    Ok(PropertyCheck::from_cases("monotonicity", VALUE_SLACK, &results))
}

/// Replacing one bucket mean by a far-away point moves the value by at most
/// one, plus slack.
pub fn check_bounded_difference(seed: u64, cases: usize, solver: &MtSolver) -> Result<PropertyCheck> {
    let results: Vec<(f64, bool)> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, BOUNDED_STREAM + c as u64);
            let d = rng.random_range(1..=4);
            let inst = random_instance(d, &mut rng)?;
            let victim = rng.random_range(0..inst.z.k());
            let far = &inst.x + unit_sphere(d, &mut rng) * (1e3 * (1.0 + inst.z.frame_at(&inst.x).max_offset_norm()));
            let mut means = inst.z.means.clone();
            means.set_row(victim, &far.transpose());
            let swapped = BucketMeans::from_means(means)?;
            let before = mt_value(&inst.z, &inst.x, inst.r, solver)?;
            let after = mt_value(&swapped, &inst.x, inst.r, solver)?;
            let k = inst.z.k() as f64;
            // Excess over the allowed change of one, per bucket.
            Ok((((before.value - after.value).abs() - 1.0) / k, before.degraded || after.degraded))
        })
        .collect::<Result<_>>()?;
    Ok(PropertyCheck::from_cases("bounded_difference", BOUNDED_DIFFERENCE_SLACK, &results))
}

/// Rotating, translating and scaling the instance (and the radius with it)
/// leaves the value unchanged, and moves the distance estimate accordingly.
pub fn check_equivariance(
    seed: u64,
    cases: usize,
    solver: &MtSolver,
    search: &SearchConfig,
) -> Result<PropertyCheck> {
    let results: Vec<(f64, bool)> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, EQUIVARIANCE_STREAM + c as u64);
            let d = rng.random_range(1..=3);
            let inst = random_instance(d, &mut rng)?;
            let q = random_orthogonal(d, &mut rng);
            let shift = DVector::from_fn(d, |_, _| rng.random_range(-50.0..50.0));
            let scale = rng.random_range(0.2..5.0);
            let map = |p: &DVector<f64>| (&q * p) * scale + &shift;
            let moved_means = DMatrix::from_fn(inst.z.k(), d, |i, j| map(&inst.z.mean(i))[j]);
            let moved = BucketMeans::from_means(moved_means)?;
            let mx = map(&inst.x);

            let v0 = mt_value(&inst.z, &inst.x, inst.r, solver)?;
            let v1 = mt_value(&moved, &mx, inst.r * scale, solver)?;
            let d0 = distance_estimate(&inst.z, &inst.x, search, solver)?;
            let d1 = distance_estimate(&moved, &mx, search, solver)?;
            let k = inst.z.k() as f64;
            let value_gap = (v0.value - v1.value).abs() / k / VALUE_SLACK;
            let dist_gap = (d1.distance - scale * d0.distance).abs()
                / (scale * d0.distance).max(1e-12)
                / DISTANCE_EQUIVARIANCE_TOL;
            let degraded = v0.degraded || v1.degraded || d0.degraded || d1.degraded;
            // Both gaps are normalized by their tolerances.
            Ok((value_gap.max(dist_gap), degraded))
        })
        .collect::<Result<_>>()?;
    Ok(PropertyCheck::from_cases("equivariance", 1.0, &results))
}

/// Gaussian bucket means with a known centre. Returns the means, the centre
/// and the directional-quantile radius: the largest, over a set of tested
/// directions, 95th percentile of `|⟨Z_i − μ, v⟩|`.
pub fn gaussian_regime(k: usize, d: usize, sigma: f64, rng: &mut impl Rng) -> Result<(BucketMeans, DVector<f64>, f64)> {
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
    let noise = gaussian_matrix(k, d, rng) * sigma;
    let means = DMatrix::from_fn(k, d, |i, j| mu[j] + noise[(i, j)]);
    let mut directions: Vec<DVector<f64>> = (0..d)
        .map(|j| {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            e
        })
        .collect();
    directions.extend((0..QUANTILE_DIRECTIONS).map(|_| unit_sphere(d, rng)));
    let radius = directions
        .iter()
        .map(|v| {
            let proj: Vec<f64> = noise.row_iter().map(|row| (row * v)[0].abs()).collect();
            nearest_rank_quantile(&proj, 0.95)
        })
        .fold(0.0, f64::max);
    Ok((BucketMeans::from_means(means)?, mu, radius))
}

const QUANTILE_DIRECTIONS: usize = 2000;
/// Contraction regime: start this many radii away, stop checking within
/// `CONTRACTION_STOP` radii.
pub const CONTRACTION_START: f64 = 100.0;
pub const CONTRACTION_STOP: f64 = 10.0;
const CONTRACTION_MAX_STEPS: usize = 400;

/// Descent from far away: the true distance to the mean falls at every step
/// until it is within a few quantile radii.
pub fn check_contraction(
    seed: u64,
    cases: usize,
    solver: &MtSolver,
    search: &SearchConfig,
) -> Result<PropertyCheck> {
    let gamma = EstimatorConfig::desk().gamma;
    let results: Vec<(f64, bool)> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, CONTRACTION_STREAM + c as u64);
            let (z, mu, radius) = gaussian_regime(30, 5, 1.0, &mut rng)?;
            let x0 = &mu + unit_sphere(5, &mut rng) * (CONTRACTION_START * radius);
            let trace = contraction_trace(&z, &mu, x0, radius, gamma, search, solver)?;
            Ok((trace.worst_ratio, trace.degraded))
        })
        .collect::<Result<_>>()?;
    // Ratios must stay strictly below one.
    Ok(PropertyCheck::from_cases("contraction", 1.0 - f64::EPSILON, &results))
}

/// True distances `‖x_t − μ‖` along a descent run, stopped once within
/// `CONTRACTION_STOP` radii.
#[derive(Debug, Clone)]
pub struct ContractionTrace {
    pub distances: Vec<f64>,
    /// Largest `‖x_{t+1} − μ‖ / ‖x_t − μ‖`; infinite if the run never got
    /// within the stopping radius.
    pub worst_ratio: f64,
    pub degraded: bool,
}

pub fn contraction_trace(
    z: &BucketMeans,
    mu: &DVector<f64>,
    x0: DVector<f64>,
    radius: f64,
    gamma: f64,
    search: &SearchConfig,
    solver: &MtSolver,
) -> Result<ContractionTrace> {
    let mut oracle = SdpOracle::new(z, search, solver);
    let mut x = x0;
    let mut distances = vec![(&x - mu).norm()];
    let mut worst_ratio = f64::NEG_INFINITY;
    while *distances.last().unwrap() > CONTRACTION_STOP * radius {
        if distances.len() > CONTRACTION_MAX_STEPS {
            worst_ratio = f64::INFINITY;
            break;
        }
        let d = oracle.distance(&x)?;
        let g = oracle.direction()?;
        x += g * (gamma * d);
        let prev = *distances.last().unwrap();
        let now = (&x - mu).norm();
        worst_ratio = worst_ratio.max(now / prev);
        distances.push(now);
    }
    Ok(ContractionTrace {
        distances,
        worst_ratio,
        degraded: oracle.degraded_solves() > 0,
    })
}

/// Haar-ish random orthogonal matrix from the QR factorization of a Gaussian
/// matrix.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    gaussian_matrix(d, d, rng).qr().q()
}
