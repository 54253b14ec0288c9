//! The semidefinite relaxation of the "is `x` far from the mean?" test, the
//! distance estimate built on it, and the descent direction read off its
//! solution.
//!
//! The PSD variable is indexed by `1, b_1..b_k, v_1..v_m` where `m` is the
//! dimension of the frame spanned by the `Z_i − x`:
//!
//! ```text
//!   maximize   Σ_i X[1, b_i]
//!   subject to X[1, b_i] = X[b_i, b_i]                    i = 1..k
//!              X[1, 1] = 1
//!              Σ_j X[v_j, v_j] = 1
//!              Σ_j X[b_i, v_j] (Z_i − x)_j ≥ r X[b_i, b_i]  i = 1..k
//!              X ⪰ 0
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{BucketMeans, Frame};
use crate::error::{Error, Result};
use crate::factored::{self, Factor, Outcome, Tolerances};
use crate::numerics::{sym_eig_unchecked, top_eigenvector};
use crate::sdp::{self, ConicProblem, LinearConstraint, SdpConfig, SdpStatus, SymSparse, WarmStart};

/// Tolerance of the power iteration on the v-block.
pub const DIRECTION_TOL: f64 = 1e-7;
const DIRECTION_MAX_ITER: usize = 20_000;
/// Frobenius norm below which the v-block counts as zero.
const DEGENERATE_VBLOCK: f64 = 1e-8;
/// Fraction of the threshold below which the analytic value bound places the
/// upper end of the search bracket.
const UPPER_BOUND_SLACK: f64 = 0.98;
/// Weight of the fixed random component mixed into warm starts.
const WARM_PERTURBATION: f64 = 0.05;
/// Iterations a warm start gets before the solve restarts from scratch.
const WARM_ITERATION_CAP: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Stop once the bracket's width is at most `rel_tol` times its upper end.
    pub rel_tol: f64,
    pub max_rounds: usize,
    /// Subtracted from the threshold, as a fraction of `k`.
    pub threshold_margin: f64,
    /// Fraction of buckets that must certify a radius (0.9).
    pub majority_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-3,
            max_rounds: 60,
            threshold_margin: 0.005,
            majority_fraction: 0.9,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.max_rounds > 0
            && self.threshold_margin >= 0.0
            && self.majority_fraction > 0.5
            && self.majority_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid search settings: {self:?}")))
        }
    }

    /// Value the relaxation must reach for a radius to pass.
    pub fn threshold(&self, k: usize) -> f64 {
        (self.majority_fraction - self.threshold_margin) * k as f64
    }
}

/// Row/column positions of the named variables in the PSD matrix.
#[derive(Debug, Clone, Copy)]
pub struct MtLayout {
    pub k: usize,
    pub m: usize,
}

impl MtLayout {
    pub const ONE: usize = 0;

    pub fn b(&self, i: usize) -> usize {
        1 + i
    }

    pub fn v(&self, j: usize) -> usize {
        1 + self.k + j
    }

    pub fn dim(&self) -> usize {
        1 + self.k + self.m
    }
}

/// Relaxation for `(Z, x, r)`, posed in the frame of the `Z_i − x`.
pub fn build_mt(z: &BucketMeans, x: &DVector<f64>, r: f64) -> ConicProblem {
    build_mt_in_frame(&z.frame_at(x), r)
}

pub fn build_mt_in_frame(frame: &Frame, r: f64) -> ConicProblem {
    let w = &frame.offsets;
    let layout = MtLayout {
        k: w.nrows(),
        m: w.ncols(),
    };
    let one = MtLayout::ONE;

    let mut objective = SymSparse::new();
    let mut eq_constraints = Vec::with_capacity(layout.k + 2);
    let mut ineq_constraints = Vec::with_capacity(layout.k);
    for i in 0..layout.k {
        let b = layout.b(i);
        objective.add(one, b, 1.0);
        eq_constraints.push(LinearConstraint {
            coeffs: SymSparse::new().with(one, b, 1.0).with(b, b, -1.0),
            rhs: 0.0,
        });
        let mut g = SymSparse::new();
        for j in 0..layout.m {
            if w[(i, j)] != 0.0 {
                g.add(b, layout.v(j), w[(i, j)]);
            }
        }
        if r != 0.0 {
            g.add(b, b, -r);
        }
        ineq_constraints.push(LinearConstraint { coeffs: g, rhs: 0.0 });
    }
    eq_constraints.push(LinearConstraint {
        coeffs: SymSparse::new().with(one, one, 1.0),
        rhs: 1.0,
    });
    let mut trace_v = SymSparse::new();
    for j in 0..layout.m {
        trace_v.add(layout.v(j), layout.v(j), 1.0);
    }
    eq_constraints.push(LinearConstraint { coeffs: trace_v, rhs: 1.0 });

    ConicProblem {
        dim: layout.dim(),
        objective,
        eq_constraints,
        ineq_constraints,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtBackend {
    /// L-BFGS on the reduced form (see [`crate::factored`]).
    #[default]
    Factored,
    /// The general conic ADMM solver on the full matrix.
    Admm,
}

/// How the relaxation is solved. `sdp` tolerances apply to both backends; for
/// the factored one they bound the certified gap on the value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MtSolver {
    pub backend: MtBackend,
    pub sdp: SdpConfig,
}

impl MtSolver {
    pub fn new(backend: MtBackend, sdp: SdpConfig) -> Self {
        Self { backend, sdp }
    }

    pub fn admm(sdp: SdpConfig) -> Self {
        Self::new(MtBackend::Admm, sdp)
    }

    fn tolerances(&self) -> Tolerances {
        Tolerances {
            abs_tol: self.sdp.abs_tol,
            rel_tol: self.sdp.rel_tol,
            max_iter: self.sdp.max_iter,
        }
    }
}

/// A solved relaxation.
#[derive(Debug, Clone)]
pub struct MtSolution {
    /// Optimal value `m = Σ X[1, b_i]`.
    pub value: f64,
    /// Certified upper bound on the optimal value, when the backend has one.
    pub upper_bound: Option<f64>,
    pub radius: f64,
    pub x: DMatrix<f64>,
    /// `X[b_i, b_i]`.
    pub bucket_masses: DVector<f64>,
    /// `m × m` block over the v indices.
    pub xv: DMatrix<f64>,
    /// `k × m`, row `i` is `v_{b_i} = (X[b_i, v_1], …)`.
    pub vb: DMatrix<f64>,
    pub status: SdpStatus,
    pub primal_residual: f64,
    pub iterations: usize,
}

impl MtSolution {
    fn from_matrix(
        x: DMatrix<f64>,
        layout: MtLayout,
        radius: f64,
        value: f64,
        status: SdpStatus,
        primal_residual: f64,
        iterations: usize,
    ) -> Self {
        let bucket_masses = DVector::from_fn(layout.k, |i, _| x[(layout.b(i), layout.b(i))]);
        let xv = x.view((layout.v(0), layout.v(0)), (layout.m, layout.m)).into_owned();
        let vb = x.view((layout.b(0), layout.v(0)), (layout.k, layout.m)).into_owned();
        Self {
            value,
            upper_bound: None,
            radius,
            x,
            bucket_masses,
            xv,
            vb,
            status,
            primal_residual,
            iterations,
        }
    }

    /// The solver stopped before meeting its tolerances.
    pub fn degraded(&self) -> bool {
        self.status != SdpStatus::Optimal
    }

    pub fn total_mass(&self) -> f64 {
        self.bucket_masses.sum()
    }

    /// Diagnostic dump: value, bucket masses and the v-block.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let xv: Vec<Vec<f64>> = self.xv.row_iter().map(|r| r.iter().copied().collect()).collect();
        json!({
            "value": self.value,
            "upper_bound": self.upper_bound,
            "radius": self.radius,
            "status": self.status,
            "primal_residual": self.primal_residual,
            "iterations": self.iterations,
            "bucket_masses": self.bucket_masses.as_slice(),
            "xv": xv,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MtValue {
    pub value: f64,
    /// The solver hit its iteration limit; the value is its best iterate.
    pub degraded: bool,
}

/// Solver state carried between queries.
#[derive(Debug, Clone, Default)]
pub struct MtWarm {
    admm: Option<WarmStart>,
    factor: Option<Factor>,
}

/// Answer to "is the value at radius `r` at least `target`?".
#[derive(Debug, Clone)]
struct Decision {
    passes: bool,
    /// Best available estimate of the value (a bound on the decided side).
    value: f64,
    degraded: bool,
    factor: Option<Factor>,
    solution: Option<MtSolution>,
}

/// Solves the relaxation at a fixed `x` for a sequence of radii, reusing
/// solver state between them.
pub struct MtSession {
    frame: Frame,
    layout: MtLayout,
    solver: MtSolver,
    warm: MtWarm,
    pub solves: usize,
}

impl MtSession {
    pub fn new(z: &BucketMeans, x: &DVector<f64>, solver: &MtSolver) -> Self {
        Self::in_frame(z.frame_at(x), solver, MtWarm::default())
    }

    pub fn in_frame(frame: Frame, solver: &MtSolver, warm: MtWarm) -> Self {
        let layout = MtLayout {
            k: frame.offsets.nrows(),
            m: frame.offsets.ncols(),
        };
        Self {
            frame,
            layout,
            solver: solver.clone(),
            warm,
            solves: 0,
        }
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn into_warm(self) -> MtWarm {
        self.warm
    }

    fn warm_factor(&self, preferred: Option<Factor>) -> Option<Factor> {
        preferred
            .or_else(|| self.warm.factor.clone())
            .filter(|f| f.dim() == self.layout.m)
    }

    /// Factored solve from a perturbed warm start, falling back to a fresh
    /// start when the warm one stalls.
    fn run_factored(&mut self, r: f64, preferred: Option<Factor>, target: Option<f64>) -> factored::FactoredResult {
        let tol = self.solver.tolerances();
        let w = &self.frame.offsets;
        if let Some(start) = self.warm_factor(preferred) {
            let capped = Tolerances {
                max_iter: tol.max_iter.min(WARM_ITERATION_CAP),
                ..tol
            };
            let res = factored::maximize(w, r, start.perturbed(WARM_PERTURBATION), capped, target);
            if res.outcome != Outcome::IterationLimit {
                return res;
            }
        }
        factored::maximize(w, r, Factor::random(self.layout.m), tol, target)
    }

    pub fn solve(&mut self, r: f64) -> Result<MtSolution> {
        self.solve_from(r, None)
    }

    fn solve_from(&mut self, r: f64, start: Option<Factor>) -> Result<MtSolution> {
        self.solves += 1;
        match self.solver.backend {
            MtBackend::Admm => {
                let problem = build_mt_in_frame(&self.frame, r);
                let result = sdp::solve_warm(&problem, &self.solver.sdp, self.warm.admm.as_ref())?;
                let solution = MtSolution::from_matrix(
                    result.x,
                    self.layout,
                    r,
                    result.value,
                    result.status,
                    result.primal_residual,
                    result.iterations,
                );
                self.warm.admm = Some(result.warm);
                Ok(solution)
            }
            MtBackend::Factored => {
                let res = self.run_factored(r, start, None);
                let x = factored::reconstruct(&self.frame.offsets, r, &res.factor);
                let residual = build_mt_in_frame(&self.frame, r).max_violation(&x);
                let status = if matches!(res.outcome, Outcome::Converged | Outcome::Stationary) {
                    SdpStatus::Optimal
                } else {
                    SdpStatus::MaxIter
                };
                let mut solution =
                    MtSolution::from_matrix(x, self.layout, r, res.value, status, residual, res.iterations);
                solution.upper_bound = Some(res.upper);
                self.warm.factor = Some(res.factor);
                Ok(solution)
            }
        }
    }

    fn decide(&mut self, r: f64, target: f64) -> Result<Decision> {
        match self.solver.backend {
            MtBackend::Admm => {
                let s = self.solve(r)?;
                Ok(Decision {
                    passes: s.value >= target,
                    value: s.value,
                    degraded: s.degraded(),
                    factor: None,
                    solution: Some(s),
                })
            }
            MtBackend::Factored => {
                self.solves += 1;
                let res = self.run_factored(r, None, Some(target));
                let (passes, value) = match res.outcome {
                    Outcome::Below => (false, res.upper),
                    _ => (res.value >= target, res.value),
                };
                self.warm.factor = Some(res.factor.clone());
                Ok(Decision {
                    passes,
                    value,
                    degraded: res.outcome == Outcome::IterationLimit,
                    factor: Some(res.factor),
                    solution: None,
                })
            }
        }
    }
}

pub fn solve_mt(z: &BucketMeans, x: &DVector<f64>, r: f64, solver: &MtSolver) -> Result<MtSolution> {
    MtSession::new(z, x, solver).solve(r)
}

pub fn mt_value(z: &BucketMeans, x: &DVector<f64>, r: f64, solver: &MtSolver) -> Result<MtValue> {
    let s = solve_mt(z, x, r, solver)?;
    Ok(MtValue {
        value: s.value,
        degraded: s.degraded(),
    })
}

#[derive(Debug, Clone)]
pub struct DistanceEstimate {
    pub distance: f64,
    /// Solution at `r = distance`, reused for the direction.
    pub solution: MtSolution,
    pub frame: Frame,
    pub rounds: usize,
    pub solves: usize,
    /// Some solve along the way hit its iteration limit.
    pub degraded: bool,
}

/// Largest radius whose relaxation value clears `(0.9 − margin) k`.
pub fn distance_estimate(
    z: &BucketMeans,
    x: &DVector<f64>,
    search: &SearchConfig,
    solver: &MtSolver,
) -> Result<DistanceEstimate> {
    distance_estimate_warm(z, x, search, solver, &mut MtWarm::default())
}

/// [`distance_estimate`] seeded with, and updating, solver state from earlier
/// queries.
///
/// The search bracket is certified at both ends without solving: below by
/// the best rank-one witness over a few candidate directions (the relaxation
/// value is at least the number of `Z_i` it certifies), above by
/// `Σ_i min(1, ‖Z_i − x‖² / r²)` and `λ_max(WᵀW) / r²`, which bound the value
/// through the 2×2 minors of `X`. Inside the bracket a safeguarded
/// false-position search keeps the lower end certified by a solve, so the
/// result errs low. The returned solution is solved to full tolerance at the
/// final radius.
pub fn distance_estimate_warm(
    z: &BucketMeans,
    x: &DVector<f64>,
    search: &SearchConfig,
    solver: &MtSolver,
    warm: &mut MtWarm,
) -> Result<DistanceEstimate> {
    search.validate()?;
    let frame = z.frame_at(x);
    let k = frame.offsets.nrows();
    let tau = search.threshold(k);

    let (witness_r, witness_count) = witness_radius(&frame.offsets, tau);
    let (upper_r, upper_bound) = upper_radius(&frame.offsets, UPPER_BOUND_SLACK * tau);

    let mut session = MtSession::in_frame(frame, solver, std::mem::take(warm));
    let mut lo = witness_r.min(upper_r);
    let mut hi = upper_r;
    let mut f_lo = witness_count - tau;
    let mut f_hi = upper_bound - tau;
    let mut lo_state: Option<Decision> = None;
    let mut degraded = false;
    let mut rounds = 0;
    let mut widths = [f64::INFINITY; 2];
    let mut bisect_next = false;

    while hi - lo > search.rel_tol * hi && rounds < search.max_rounds {
        rounds += 1;
        let width = hi - lo;
        let guard = (0.5 * search.rel_tol * hi).min(0.5 * width);
        let trial = if bisect_next || !(f_lo > f_hi) {
            lo + 0.5 * width
        } else {
            lo + width * f_lo / (f_lo - f_hi)
        };
        let r = trial.clamp(lo + guard, hi - guard);
        let decision = session.decide(r, tau)?;
        degraded |= decision.degraded;
        let f = decision.value - tau;
        if decision.passes {
            lo = r;
            f_lo = f.max(0.0);
            lo_state = Some(decision);
        } else {
            hi = r;
            f_hi = f.min(0.0);
        }
        let new_width = hi - lo;
        bisect_next = new_width > 0.5 * widths[0];
        widths = [widths[1], new_width];
    }

    let solution = match lo_state {
        Some(Decision {
            solution: Some(s), ..
        }) => s,
        Some(Decision { factor, .. }) => session.solve_from(lo, factor)?,
        None => session.solve(lo)?,
    };
    degraded |= solution.degraded();
    let solves = session.solves;
    let frame = session.frame.clone();
    *warm = session.into_warm();
    Ok(DistanceEstimate {
        distance: lo,
        solution,
        frame,
        rounds,
        solves,
        degraded,
    })
}

/// Best radius certified by a rank-one feasible point `y = (1, b, v)` over a
/// handful of directions, together with the count it certifies.
fn witness_radius(w: &DMatrix<f64>, tau: f64) -> (f64, f64) {
    let k = w.nrows();
    let need = (tau.ceil() as usize).clamp(1, k);
    let mut candidates: Vec<DVector<f64>> = Vec::with_capacity(k + 2);
    let centroid = w.row_mean().transpose();
    candidates.push(centroid);
    for row in w.row_iter() {
        candidates.push(row.transpose());
    }
    if w.ncols() > 1 {
        let eig = sym_eig_unchecked(w.transpose() * w);
        candidates.push(eig.eigenvectors.column(w.ncols() - 1).into_owned());
    }

    let mut best = 0.0_f64;
    let mut projections = vec![0.0; k];
    for v in candidates {
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        for sign in [1.0, -1.0] {
            let dir = &v * (sign / norm);
            for (p, row) in projections.iter_mut().zip(w.row_iter()) {
                *p = row.dot(&dir.transpose());
            }
            projections.sort_by(|a, b| b.total_cmp(a));
            best = best.max(projections[need - 1]);
        }
    }
    (best, need as f64)
}

/// Radius past which the analytic bound on the relaxation value drops below
/// `target`, together with the bound there.
fn upper_radius(w: &DMatrix<f64>, target: f64) -> (f64, f64) {
    let sq_norms: Vec<f64> = w.row_iter().map(|r| r.norm_squared()).collect();
    let lambda_max = sym_eig_unchecked(w.transpose() * w).max_eigenvalue().max(0.0);
    let bound = |r: f64| -> f64 {
        if r <= 0.0 {
            return w.nrows() as f64;
        }
        let r2 = r * r;
        let per_bucket: f64 = sq_norms.iter().map(|s| (s / r2).min(1.0)).sum();
        per_bucket.min(lambda_max / r2)
    };
    let max_sq = sq_norms.iter().copied().fold(0.0, f64::max);
    if max_sq == 0.0 {
        return (0.0, 0.0);
    }
    // bound(hi) ≤ k max‖w‖² / hi² ≤ target.
    let mut hi = (w.nrows() as f64 * max_sq / target).sqrt();
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if bound(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    (hi, bound(hi))
}

/// Unit descent direction read off a solved relaxation: the dominant
/// eigenvector of the v-block, lifted to the ambient space and oriented so
/// that at least a `majority_fraction` of the `Z_i − x` have a nonnegative
/// component along it (else the opposite orientation).
pub fn gradient_from_solution(
    frame: &Frame,
    solution: &MtSolution,
    majority_fraction: f64,
) -> Result<DVector<f64>> {
    if solution.xv.norm() <= DEGENERATE_VBLOCK {
        return Err(Error::DegenerateRelaxation);
    }
    let xv = (&solution.xv + solution.xv.transpose()) * 0.5;
    let top = match top_eigenvector(&xv, DIRECTION_TOL, DIRECTION_MAX_ITER) {
        Ok(u) => u,
        Err(Error::NoConvergence { best, .. }) => best,
        Err(e) => return Err(e),
    };
    let k = frame.offsets.nrows();
    let nonneg = frame
        .offsets
        .row_iter()
        .filter(|row| row.dot(&top.transpose()) >= 0.0)
        .count();
    let oriented = if nonneg as f64 >= majority_fraction * k as f64 {
        top
    } else {
        -top
    };
    let g = frame.lift(&oriented);
    let norm = g.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateRelaxation);
    }
    Ok(g / norm)
}

/// Distance estimate followed by the direction at the final radius.
pub fn gradient_estimate(
    z: &BucketMeans,
    x: &DVector<f64>,
    search: &SearchConfig,
    solver: &MtSolver,
) -> Result<DVector<f64>> {
    let est = distance_estimate(z, x, search, solver)?;
    gradient_from_solution(&est.frame, &est.solution, search.majority_fraction)
}
