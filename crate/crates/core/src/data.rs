//! Datasets, bucket means, estimator configuration and synthetic generators
//! with analytic ground truth.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mt::{MtBackend, MtSolver, SearchConfig};
use crate::numerics::{ensure_finite, orthonormal_basis};
use crate::sdp::SdpConfig;

/// Relative tolerance used to build the reduced basis of the bucket means.
pub const BASIS_TOL: f64 = 1e-10;

/// Seedable generator used for every random draw in the crate.
///
/// ChaCha with 8 rounds; a `(seed, stream)` pair selects an independent
/// keystream, which is how parallel trials split a single experiment seed.
pub type Rng64 = ChaCha8Rng;

pub fn rng_for(seed: u64, stream: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mean: Vec<f64>,
    /// Tr Σ.
    pub trace_cov: f64,
    /// ‖Σ‖ (operator norm).
    pub op_norm_cov: f64,
}

impl GroundTruth {
    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }
}

/// Samples as rows of an `n × d` matrix, optionally with the generating
/// distribution's ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: DMatrix<f64>,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "dataset must have n >= 1 and d >= 1, got {}x{}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        ensure_finite(&samples, "dataset")?;
        Ok(Self { samples, truth: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("rows differ in length".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), d, &flat))
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn d(&self) -> usize {
        self.samples.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.samples.row(i).transpose()
    }

    /// Adds `c` to every sample (and to the ground-truth mean).
    pub fn translated(&self, c: &DVector<f64>) -> Self {
        let mut samples = self.samples.clone();
        for mut row in samples.row_iter_mut() {
            row += c.transpose();
        }
        let truth = self.truth.clone().map(|mut t| {
            for (m, ci) in t.mean.iter_mut().zip(c.iter()) {
                *m += ci;
            }
            t
        });
        Self { samples, truth }
    }

    /// Rows reordered by a permutation drawn from `rng`.
    pub fn shuffled(&self, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.shuffle(rng);
        let samples = self.samples.select_rows(order.iter());
        Self {
            samples,
            truth: self.truth.clone(),
        }
    }

    /// Reads CSV, one sample per row. A first row with no numeric field is
    /// taken as a header and skipped.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            if line == 0 && record.iter().all(|f| f.parse::<f64>().is_err()) {
                continue;
            }
            let row = record
                .iter()
                .map(|field| {
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: `{field}`: {e}", line + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Bucket means `Z` together with an orthonormal basis of the affine frame
/// they span.
#[derive(Debug, Clone)]
pub struct BucketMeans {
    /// `k × d`, one bucket mean per row.
    pub means: DMatrix<f64>,
    /// `d × m`, orthonormal columns spanning `{Z_i − Z̄} ∪ {Z̄}`.
    pub reduced_basis: DMatrix<f64>,
    /// `k × m`, coordinates of each `Z_i` in `reduced_basis`.
    pub reduced_means: DMatrix<f64>,
}

/// Coordinates of `Z_i − x` in an orthonormal frame containing every
/// `Z_i − x`.
#[derive(Debug, Clone)]
pub struct Frame {
    /// `d × m'`.
    pub basis: DMatrix<f64>,
    /// `k × m'`.
    pub offsets: DMatrix<f64>,
}

impl Frame {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Maps frame coordinates back to the ambient space.
    pub fn lift(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.basis * coords
    }

    /// Largest `‖Z_i − x‖`.
    pub fn max_offset_norm(&self) -> f64 {
        self.offsets.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }
}

impl BucketMeans {
    pub fn from_means(means: DMatrix<f64>) -> Result<Self> {
        let k = means.nrows();
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 buckets, got {k}")));
        }
        ensure_finite(&means, "bucket means")?;
        let grand = means.row_mean().transpose();
        let mut spanning: Vec<DVector<f64>> = means
            .row_iter()
            .map(|r| r.transpose() - &grand)
            .collect();
        spanning.push(grand);
        let reduced_basis = orthonormal_basis(&spanning, BASIS_TOL)?;
        let reduced_means = &means * &reduced_basis;
        Ok(Self {
            means,
            reduced_basis,
            reduced_means,
        })
    }

    pub fn k(&self) -> usize {
        self.means.nrows()
    }

    pub fn d(&self) -> usize {
        self.means.ncols()
    }

    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.means.row(i).transpose()
    }

    /// Frame centred at `x`. The reduced basis is extended by the component
    /// of `x` orthogonal to it, if any, and never has zero columns.
    pub fn frame_at(&self, x: &DVector<f64>) -> Frame {
        let d = self.d();
        let scale = self
            .means
            .row_iter()
            .map(|r| r.norm())
            .fold(x.norm(), f64::max)
            .max(1.0);
        let coords = self.reduced_basis.transpose() * x;
        let perp = x - &self.reduced_basis * &coords;
        let perp_norm = perp.norm();

        let mut basis = self.reduced_basis.clone();
        let mut offsets = &self.reduced_means - DMatrix::from_fn(self.k(), coords.len(), |_, j| coords[j]);
        if perp_norm > BASIS_TOL * scale {
            let dir = -perp / perp_norm;
            let m = basis.ncols();
            basis = basis.insert_column(m, 0.0);
            basis.set_column(m, &dir);
            offsets = offsets.insert_column(m, perp_norm);
        }
        if basis.ncols() == 0 {
            basis = DMatrix::zeros(d, 1);
            basis[(0, 0)] = 1.0;
            offsets = DMatrix::zeros(self.k(), 1);
        }
        Frame { basis, offsets }
    }
}

/// Splits `data` into `k` contiguous buckets of `⌊n/k⌋` samples, discarding
/// the trailing `n mod k` samples, and averages each bucket.
pub fn bucketize(data: &Dataset, k: usize) -> Result<BucketMeans> {
    let n = data.n();
    if k > n {
        return Err(Error::MoreBucketsThanSamples { k, n });
    }
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 buckets, got {k}")));
    }
    let size = n / k;
    let x = data.samples();
    let means = DMatrix::from_fn(k, data.d(), |i, j| {
        let start = i * size;
        x.view((start, j), (size, 1)).sum() / size as f64
    });
    BucketMeans::from_means(means)
}

/// `⌈x⌉` that ignores round-off just above an integer.
pub(crate) fn ceil_tolerant(x: f64) -> f64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil()
}

/// `min(max(2, ⌈3200 ln(1/δ)⌉), ⌊n/2⌋)`.
pub fn default_k(delta: f64, n: usize) -> usize {
    let raw = ceil_tolerant(3200.0 * (-delta.ln()));
    let k = if raw.is_finite() { (raw as usize).max(2) } else { usize::MAX };
    k.min(n / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    #[default]
    #[serde(alias = "mom")]
    MedianOfMeans,
}

/// Which solver answers the distance/direction queries of the descent loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OraclePath {
    /// Semidefinite relaxation, any dimension.
    #[default]
    Sdp,
    /// Exact direction search, effective dimension at most 3.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Constants sized for desk-scale experiments (`c_T = 50`).
    #[default]
    Desk,
    /// Constants of record (`k = 3200 ln 1/δ`, `c_T = 1000`).
    Reference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub delta: f64,
    pub k_override: Option<usize>,
    /// Step size γ.
    pub gamma: f64,
    /// Iteration budget T; `None` uses [`crate::descent::default_iterations`].
    pub max_iters: Option<usize>,
    /// Multiplier `c_T` of the default iteration rule.
    pub iteration_constant: f64,
    /// Exit threshold on the distance estimate.
    pub epsilon: f64,
    pub init: Init,
    pub path: OraclePath,
    pub profile: Profile,
    pub shuffle_before_bucketing: bool,
    pub shuffle_seed: u64,
    /// How the relaxation is solved on the semidefinite path.
    pub backend: MtBackend,
    pub sdp: SdpConfig,
    /// Binary-search settings, including the majority fraction (0.9).
    pub search: SearchConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EstimatorConfig {
    pub fn desk() -> Self {
        Self {
            delta: 0.01,
            k_override: None,
            gamma: 1.0 / 20.0,
            max_iters: None,
            iteration_constant: 50.0,
            epsilon: 1e-9,
            init: Init::MedianOfMeans,
            path: OraclePath::Sdp,
            profile: Profile::Desk,
            shuffle_before_bucketing: false,
            shuffle_seed: 0,
            backend: MtBackend::Factored,
            sdp: SdpConfig::descent(),
            search: SearchConfig::default(),
        }
    }

    pub fn reference() -> Self {
        Self {
            iteration_constant: 1000.0,
            profile: Profile::Reference,
            sdp: SdpConfig::default(),
            ..Self::desk()
        }
    }

    /// Exact-oracle path with the warm-up step size γ = 1/4.
    pub fn exact_oracle() -> Self {
        Self {
            gamma: 0.25,
            path: OraclePath::Exact,
            ..Self::desk()
        }
    }

    pub fn mt_solver(&self) -> MtSolver {
        MtSolver::new(self.backend, self.sdp.clone())
    }

    pub fn majority_fraction(&self) -> f64 {
        self.search.majority_fraction
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.iteration_constant > 0.0) {
            return bad(format!("iteration constant must be positive, got {}", self.iteration_constant));
        }
        if matches!(self.k_override, Some(k) if k < 2) {
            return bad("k must be at least 2".into());
        }
        self.search.validate()?;
        self.sdp.validate()
    }

    /// Bucket count for `n` samples.
    pub fn bucket_count(&self, n: usize) -> usize {
        self.k_override.unwrap_or_else(|| default_k(self.delta, n))
    }
}

/// Synthetic distribution with analytically known mean and covariance.
///
/// Every `mean` field defaults to the zero vector when omitted. Outliers and
/// the radial Pareto law use directions uniform on the unit sphere, so the
/// mean is unaffected by the heavy component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// `N(mean, diag(variances))`; `variances` defaults to `sigma² I`.
    Gaussian {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        variances: Option<Vec<f64>>,
    },
    /// Independent Student-t coordinates with `nu` degrees of freedom.
    StudentT {
        nu: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
    },
    /// `mean + R U` with `R ~ Pareto(scale, alpha)` and `U` uniform on the sphere.
    ParetoRadial {
        alpha: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
    },
    /// `mean` with probability `1 − prob`, else `mean + radius U`.
    PointMassContaminated {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        radius: f64,
        prob: f64,
    },
    /// `N(mean, sigma² I)` with probability `1 − prob`, else `mean + radius U`.
    ContaminatedGaussian {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default = "one")]
        sigma: f64,
        radius: f64,
        prob: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub fn standard_gaussian() -> Self {
        GeneratorSpec::Gaussian {
            mean: None,
            sigma: 1.0,
            variances: None,
        }
    }

    fn mean_field(&self) -> Option<&Vec<f64>> {
        match self {
            GeneratorSpec::Gaussian { mean, .. }
            | GeneratorSpec::StudentT { mean, .. }
            | GeneratorSpec::ParetoRadial { mean, .. }
            | GeneratorSpec::PointMassContaminated { mean, .. }
            | GeneratorSpec::ContaminatedGaussian { mean, .. } => mean.as_ref(),
        }
    }

    fn mean_for(&self, d: usize) -> Result<DVector<f64>> {
        match self.mean_field() {
            None => Ok(DVector::zeros(d)),
            Some(m) if m.len() == d => Ok(DVector::from_column_slice(m)),
            Some(m) => Err(Error::Dimension(format!("generator mean has length {}, expected {d}", m.len()))),
        }
    }

    /// Mean, trace and operator norm of the covariance in dimension `d`.
    pub fn ground_truth(&self, d: usize) -> Result<GroundTruth> {
        let mean = self.mean_for(d)?.as_slice().to_vec();
        let dim = d as f64;
        let check_prob = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("probability must lie in [0, 1], got {p}")))
            }
        };
        let (trace_cov, op_norm_cov) = match self {
            GeneratorSpec::Gaussian { sigma, variances, .. } => match variances {
                Some(v) => {
                    if v.len() != d {
                        return Err(Error::Dimension(format!("variances has length {}, expected {d}", v.len())));
                    }
                    if v.iter().any(|&s| !(s >= 0.0)) {
                        return Err(Error::InvalidConfig("variances must be non-negative".into()));
                    }
                    (v.iter().sum(), v.iter().copied().fold(0.0, f64::max))
                }
                None => (dim * sigma * sigma, sigma * sigma),
            },
            GeneratorSpec::StudentT { nu, scale, .. } => {
                if !(*nu > 2.0) {
                    return Err(Error::CovarianceDoesNotExist(format!("Student-t needs nu > 2, got {nu}")));
                }
                let var = scale * scale * nu / (nu - 2.0);
                (dim * var, var)
            }
            GeneratorSpec::ParetoRadial { alpha, scale, .. } => {
                if !(*alpha > 2.0) {
                    return Err(Error::CovarianceDoesNotExist(format!("Pareto radius needs alpha > 2, got {alpha}")));
                }
                let second_moment = scale * scale * alpha / (alpha - 2.0);
                (second_moment, second_moment / dim)
            }
            GeneratorSpec::PointMassContaminated { radius, prob, .. } => {
                check_prob(*prob)?;
                let tr = prob * radius * radius;
                (tr, tr / dim)
            }
            GeneratorSpec::ContaminatedGaussian { sigma, radius, prob, .. } => {
                check_prob(*prob)?;
                let inlier = (1.0 - prob) * sigma * sigma;
                let outlier = prob * radius * radius;
                (dim * inlier + outlier, inlier + outlier / dim)
            }
        };
        Ok(GroundTruth {
            mean,
            trace_cov,
            op_norm_cov,
        })
    }

    /// Draws `n` samples in `R^d`; bit-identical for equal `(self, n, d, seed, stream)`.
    pub fn generate(&self, n: usize, d: usize, seed: u64) -> Result<Dataset> {
        self.generate_stream(n, d, seed, 0)
    }

    pub fn generate_stream(&self, n: usize, d: usize, seed: u64, stream: u64) -> Result<Dataset> {
        let mut rng = rng_for(seed, stream);
        self.generate_with(n, d, &mut rng)
    }

    pub fn generate_with(&self, n: usize, d: usize, rng: &mut impl Rng) -> Result<Dataset> {
        if n == 0 || d == 0 {
            return Err(Error::Dimension("generator needs n >= 1 and d >= 1".into()));
        }
        let truth = self.ground_truth(d)?;
        let mu = truth.mean_vector();
        let mut samples = DMatrix::zeros(n, d);
        for i in 0..n {
            let noise: DVector<f64> = match self {
                GeneratorSpec::Gaussian { sigma, variances, .. } => DVector::from_fn(d, |j, _| {
                    let sd = variances.as_ref().map_or(*sigma, |v| v[j].sqrt());
                    sd * { let s: f64 = StandardNormal.sample(rng); s }
                }),
                GeneratorSpec::StudentT { nu, scale, .. } => {
                    let t = StudentT::new(*nu).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                    DVector::from_fn(d, |_, _| scale * t.sample(rng))
                }
                GeneratorSpec::ParetoRadial { alpha, scale, .. } => {
                    let p = Pareto::new(*scale, *alpha).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                    let r: f64 = p.sample(rng);
                    unit_sphere(d, rng) * r
                }
                GeneratorSpec::PointMassContaminated { radius, prob, .. } => {
                    if rng.random::<f64>() < *prob {
                        unit_sphere(d, rng) * *radius
                    } else {
                        DVector::zeros(d)
                    }
                }
                GeneratorSpec::ContaminatedGaussian { sigma, radius, prob, .. } => {
                    if rng.random::<f64>() < *prob {
                        unit_sphere(d, rng) * *radius
                    } else {
                        DVector::from_fn(d, |_, _| sigma * { let s: f64 = StandardNormal.sample(rng); s })
                    }
                }
            };
            samples.row_mut(i).copy_from(&(&mu + noise).transpose());
        }
        Ok(Dataset::new(samples)?.with_truth(truth))
    }
}

/// Uniform direction on the unit sphere in `R^d`.
pub fn unit_sphere(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(d, |_, _| { let s: f64 = StandardNormal.sample(rng); s });
        let n = g.norm();
        if n > 1e-300 {
            return g / n;
        }
    }
}
