//! First-order solver for small SDPs with linear equality and inequality
//! constraints:
//!
//! ```text
//!   maximize   ⟨C, X⟩
//!   subject to ⟨A_i, X⟩ = b_i,  ⟨G_j, X⟩ ≥ h_j,  X ⪰ 0
//! ```
//!
//! The solver is ADMM on the splitting `(X, s) ∈ affine set`, `(Y, t) ∈ PSD
//! cone × nonnegative orthant`. The affine step is an exact Euclidean
//! projection whose Gram matrix is factorized once per problem; the cone step
//! is an eigenvalue clip. The projection does not depend on the penalty ρ, so
//! residual balancing never forces a refactorization.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::psd_project_unchecked;

/// Symmetric matrix held as upper-triangle entries `(i, j, c)` with `i ≤ j`,
/// defined so that `⟨A, X⟩ = Σ c · X_ij`. An off-diagonal entry therefore
/// stands for `A_ij = A_ji = c / 2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SymSparse {
    entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `coef · X_ij` to the linear form; repeated positions accumulate.
    pub fn add(&mut self, i: usize, j: usize, coef: f64) -> &mut Self {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        match self.entries.iter_mut().find(|e| e.0 == i && e.1 == j) {
            Some(e) => e.2 += coef,
            None => self.entries.push((i, j, coef)),
        }
        self
    }

    pub fn with(mut self, i: usize, j: usize, coef: f64) -> Self {
        self.add(i, j, coef);
        self
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn inner(&self, x: &DMatrix<f64>) -> f64 {
        self.entries.iter().map(|&(i, j, c)| c * x[(i, j)]).sum()
    }

    /// `x += scale · A`.
    pub fn add_scaled_to(&self, x: &mut DMatrix<f64>, scale: f64) {
        for &(i, j, c) in &self.entries {
            if i == j {
                x[(i, i)] += scale * c;
            } else {
                let h = 0.5 * scale * c;
                x[(i, j)] += h;
                x[(j, i)] += h;
            }
        }
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        self.add_scaled_to(&mut m, 1.0);
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, c)| if i == j { c * c } else { 0.5 * c * c })
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius inner product of the two symmetric matrices.
    pub fn frobenius_dot(&self, other: &SymSparse) -> f64 {
        let mut acc = 0.0;
        for &(i, j, c) in &self.entries {
            for &(k, l, d) in &other.entries {
                if i == k && j == l {
                    acc += if i == j { c * d } else { 0.5 * c * d };
                }
            }
        }
        acc
    }

    fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.1).max()
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|&(i, j, c)| (i, j, c * s)).collect(),
        }
    }
}

/// `⟨coeffs, X⟩ (= | ≥) rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub coeffs: SymSparse,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProblem {
    /// Side length of the PSD variable.
    pub dim: usize,
    /// Maximized.
    pub objective: SymSparse,
    pub eq_constraints: Vec<LinearConstraint>,
    /// Each means `⟨G_j, X⟩ ≥ h_j`.
    pub ineq_constraints: Vec<LinearConstraint>,
}

impl ConicProblem {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Dimension("SDP variable must have dimension >= 1".into()));
        }
        let all = std::iter::once(&self.objective).chain(
            self.eq_constraints
                .iter()
                .chain(&self.ineq_constraints)
                .map(|c| &c.coeffs),
        );
        for m in all {
            if m.max_index().is_some_and(|i| i >= self.dim) {
                return Err(Error::Dimension(format!("coefficient index out of range for dimension {}", self.dim)));
            }
            if m.entries.iter().any(|e| !e.2.is_finite()) {
                return Err(Error::NonFinite("SDP coefficients"));
            }
        }
        let rhs_ok = self
            .eq_constraints
            .iter()
            .chain(&self.ineq_constraints)
            .all(|c| c.rhs.is_finite());
        if !rhs_ok {
            return Err(Error::NonFinite("SDP right-hand side"));
        }
        Ok(())
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &DMatrix<f64>) -> f64 {
        let eq = self
            .eq_constraints
            .iter()
            .map(|c| (c.coeffs.inner(x) - c.rhs).abs());
        let ineq = self
            .ineq_constraints
            .iter()
            .map(|c| (c.rhs - c.coeffs.inner(x)).max(0.0));
        eq.chain(ineq).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SdpConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Initial ADMM penalty; adapted by residual balancing.
    pub step_rho: f64,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    /// Record `(iteration, objective, residuals)` at every check.
    pub log: bool,
}

impl Default for SdpConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_iter: 20_000,
            step_rho: 1.0,
            relaxation: 1.6,
            check_interval: 25,
            log: false,
        }
    }
}

impl SdpConfig {
    /// Settings used inside the descent loop, where each solve only has to
    /// decide a threshold comparison with a margin of `0.005 k`.
    pub fn descent() -> Self {
        Self {
            abs_tol: 1e-5,
            rel_tol: 1e-5,
            check_interval: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.abs_tol > 0.0
            && self.rel_tol > 0.0
            && self.max_iter > 0
            && self.step_rho > 0.0
            && self.relaxation > 0.0
            && self.relaxation < 2.0
            && self.check_interval > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid SDP settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    MaxIter,
    InfeasibleHeuristic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub rho: f64,
}

/// ADMM state that can seed a later solve of a problem with the same shape.
#[derive(Debug, Clone)]
pub struct WarmStart {
    y: DMatrix<f64>,
    dual: DMatrix<f64>,
    slack: DVector<f64>,
    slack_dual: DVector<f64>,
    rho: f64,
}

impl WarmStart {
    fn fits(&self, dim: usize, n_ineq: usize) -> bool {
        self.y.nrows() == dim && self.slack.len() == n_ineq
    }
}

#[derive(Debug, Clone)]
pub struct SdpResult {
    /// PSD iterate.
    pub x: DMatrix<f64>,
    /// `⟨C, X⟩`.
    pub value: f64,
    /// Largest constraint violation at `x`, in the problem's own units.
    pub primal_residual: f64,
    /// `ρ‖Y_k − Y_{k−1}‖` at the final check.
    pub dual_residual: f64,
    pub status: SdpStatus,
    pub iterations: usize,
    pub log: Vec<IterationLog>,
    pub warm: WarmStart,
}

pub fn write_log_csv(log: &[IterationLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "objective", "primal_residual", "dual_residual", "rho"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for entry in log {
        w.write_record([
            entry.iteration.to_string(),
            entry.objective.to_string(),
            entry.primal_residual.to_string(),
            entry.dual_residual.to_string(),
            entry.rho.to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Row of the affine system `[A 0; G −I] (X, s) = (b, h)`.
struct AffineRow {
    coeffs: SymSparse,
    rhs: f64,
}

/// Euclidean projection onto `{(X, s) : A(X) = b, G(X) − s = h}`.
struct AffineProjector {
    rows: Vec<AffineRow>,
    n_eq: usize,
    gram: Cholesky<f64, Dyn>,
}

impl AffineProjector {
    fn new(problem: &ConicProblem) -> Self {
        let n_eq = problem.eq_constraints.len();
        let mut rows: Vec<AffineRow> = problem
            .eq_constraints
            .iter()
            .map(|c| AffineRow {
                coeffs: c.coeffs.clone(),
                rhs: c.rhs,
            })
            .collect();
        // Inequality rows are normalized so that every slack is measured in
        // comparable units.
        for c in &problem.ineq_constraints {
            let norm = c.coeffs.frobenius_norm();
            let s = if norm > 0.0 { 1.0 / norm } else { 1.0 };
            rows.push(AffineRow {
                coeffs: c.coeffs.scaled(s),
                rhs: c.rhs * s,
            });
        }
        let m = rows.len();
        let mut gram = DMatrix::from_fn(m, m, |a, b| {
            if a <= b {
                rows[a].coeffs.frobenius_dot(&rows[b].coeffs)
            } else {
                0.0
            }
        });
        for a in 0..m {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
            if a >= n_eq {
                gram[(a, a)] += 1.0;
            }
        }
        let gram = factorize(gram);
        Self { rows, n_eq, gram }
    }

    /// Projects `(p, q)` in place.
    fn project(&self, p: &mut DMatrix<f64>, q: &mut DVector<f64>) {
        let m = self.rows.len();
        if m == 0 {
            return;
        }
        let mut r = DVector::from_fn(m, |a, _| {
            let row = &self.rows[a];
            let lhs = row.coeffs.inner(p);
            if a < self.n_eq {
                lhs - row.rhs
            } else {
                lhs - q[a - self.n_eq] - row.rhs
            }
        });
        self.gram.solve_mut(&mut r);
        for (a, row) in self.rows.iter().enumerate() {
            row.coeffs.add_scaled_to(p, -r[a]);
            if a >= self.n_eq {
                q[a - self.n_eq] += r[a];
            }
        }
    }
}

fn factorize(gram: DMatrix<f64>) -> Cholesky<f64, Dyn> {
    let m = gram.nrows();
    let diag_scale = (0..m).map(|i| gram[(i, i)].abs()).fold(1.0_f64, f64::max);
    let mut ridge = 0.0;
    loop {
        let mut g = gram.clone();
        for i in 0..m {
            g[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(g) {
            return ch;
        }
        // Linearly dependent constraints; a tiny ridge selects the
        // least-squares projection.
        ridge = if ridge == 0.0 { 1e-12 * diag_scale } else { ridge * 100.0 };
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

pub fn solve(problem: &ConicProblem, cfg: &SdpConfig) -> Result<SdpResult> {
    solve_warm(problem, cfg, None)
}

/// As [`solve`], seeded from a previous solve's state when the shapes agree.
pub fn solve_warm(problem: &ConicProblem, cfg: &SdpConfig, warm: Option<&WarmStart>) -> Result<SdpResult> {
    problem.validate()?;
    cfg.validate()?;
    let n = problem.dim;
    let n_ineq = problem.ineq_constraints.len();
    let projector = AffineProjector::new(problem);
    let c = problem.objective.to_dense(n);
    let alpha = cfg.relaxation;

    let (mut y, mut dual, mut t, mut u, mut rho) = match warm.filter(|w| w.fits(n, n_ineq)) {
        Some(w) => (w.y.clone(), w.dual.clone(), w.slack.clone(), w.slack_dual.clone(), w.rho),
        None => (
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            DVector::zeros(n_ineq),
            DVector::zeros(n_ineq),
            cfg.step_rho,
        ),
    };

    let mut log = Vec::new();
    let mut primal_history: Vec<f64> = Vec::new();
    let mut status = SdpStatus::MaxIter;
    let mut dual_residual = f64::INFINITY;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        let mut x = &y - &dual + &c * (1.0 / rho);
        let mut s = &t - &u;
        projector.project(&mut x, &mut s);

        let x_hat = &x * alpha + &y * (1.0 - alpha);
        let s_hat = &s * alpha + &t * (1.0 - alpha);
        let y_prev = std::mem::replace(&mut y, psd_project_unchecked(&x_hat + &dual));
        let t_prev = std::mem::replace(&mut t, (&s_hat + &u).map(|v| v.max(0.0)));
        dual += &x_hat - &y;
        u += &s_hat - &t;

        if it % cfg.check_interval != 0 && it != cfg.max_iter {
            continue;
        }

        let primal = ((&x - &y).norm_squared() + (&s - &t).norm_squared()).sqrt();
        dual_residual = rho * ((&y - &y_prev).norm_squared() + (&t - &t_prev).norm_squared()).sqrt();
        let violation = problem.max_violation(&y);
        let eps_primal = cfg.abs_tol + cfg.rel_tol * x.norm().max(y.norm()).max(1.0);
        let eps_dual = cfg.abs_tol + cfg.rel_tol * (rho * (dual.norm_squared() + u.norm_squared()).sqrt()).max(1.0);

        if cfg.log {
            log.push(IterationLog {
                iteration: it,
                objective: problem.objective.inner(&y),
                primal_residual: primal,
                dual_residual,
                rho,
            });
        }

        if primal <= eps_primal && violation <= eps_primal && dual_residual <= eps_dual {
            status = SdpStatus::Optimal;
            break;
        }

        primal_history.push(primal);
        if looks_infeasible(&primal_history, eps_primal, dual_residual <= 10.0 * eps_dual) {
            status = SdpStatus::InfeasibleHeuristic;
            break;
        }

        // Residual balancing.
        let scale = if primal > 10.0 * dual_residual && rho < RHO_MAX {
            2.0
        } else if dual_residual > 10.0 * primal && rho > RHO_MIN {
            0.5
        } else {
            1.0
        };
        if scale != 1.0 {
            rho *= scale;
            dual /= scale;
            u /= scale;
        }
    }

    let value = problem.objective.inner(&y);
    let primal_residual = problem.max_violation(&y);
    Ok(SdpResult {
        value,
        primal_residual,
        dual_residual,
        status,
        iterations,
        log,
        warm: WarmStart {
            y: y.clone(),
            dual,
            slack: t,
            slack_dual: u,
            rho,
        },
        x: y,
    })
}

/// Infeasible problems drive ADMM to a fixed nonzero gap `X − Y` while the
/// iterates themselves stop moving.
fn looks_infeasible(history: &[f64], eps_primal: f64, settled: bool) -> bool {
    const WINDOW: usize = 40;
    if !settled || history.len() < 2 * WINDOW {
        return false;
    }
    let last = history[history.len() - 1];
    let earlier = history[history.len() - 1 - WINDOW];
    last > 1e3 * eps_primal && (last - earlier).abs() <= 0.01 * earlier
}
