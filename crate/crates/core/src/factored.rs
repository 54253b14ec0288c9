//! Direct solver for the relaxation in its reduced form.
//!
//! Bucket `i` touches the PSD variable only through the 3×3 pattern
//! `{1, b_i, v}`, so the entries `X[b_i, b_j]` are free and, by chordal
//! completion, only the blocks over `{1, v, b_i}` need to be PSD. With
//! `h = X[1, v]` and `M = X[v, v]`, the best `X[b_i, b_i]` in each block has
//! the closed form
//!
//! ```text
//!   φ_i = 1                        if α_i ≥ r
//!   φ_i = q_i / (q_i + (r − α_i)²) otherwise,
//!   α_i = ⟨w_i, h⟩,  q_i = w_iᵀ M w_i − α_i²,
//! ```
//!
//! and the relaxation value is the maximum of the concave `Σ φ_i` over
//! `{[1 hᵀ; h M] ⪰ 0, tr M = 1}`. That set is parametrized as `L Lᵀ` with a
//! unit first row and a unit-Frobenius remainder, and the maximum is found by
//! L-BFGS. Every iterate yields an exactly feasible `X` (a lower bound), and
//! linearizing the concave objective gives an upper bound, so the solve can
//! stop as soon as the answer to "is the value at least τ?" is certain.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::sym_eig_unchecked;

const MEMORY: usize = 8;
const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_STEPS: usize = 60;
const BOUND_INTERVAL: usize = 5;
const INIT_SEED: u64 = 0x5eed_f4c7;

/// Factor `L = [u; P]` of `[1 hᵀ; h M]`: `u` has `p` entries, `P` is `m × p`
/// row-major, and `h = P u`, `M = P Pᵀ` after normalization.
#[derive(Debug, Clone)]
pub struct Factor {
    m: usize,
    p: usize,
    z: Vec<f64>,
}

impl Factor {
    /// Seeded random start in general position.
    pub fn random(m: usize) -> Self {
        let p = m + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(INIT_SEED ^ m as u64);
        let z = (0..p * (m + 1))
            .map(|_| {
                let s: f64 = StandardNormal.sample(&mut rng);
                s
            })
            .collect();
        Self { m, p, z }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// This factor, normalized, with a small fixed random component mixed in
    /// so that a low-rank warm start regains full rank.
    pub fn perturbed(&self, weight: f64) -> Self {
        let mut out = self.clone();
        out.renormalize();
        let mut noise = Self::random(self.m);
        noise.renormalize();
        for (z, n) in out.z.iter_mut().zip(&noise.z) {
            *z += weight * n;
        }
        out
    }

    /// Normalized `(u, P)`.
    fn parts(&self) -> (DVector<f64>, DMatrix<f64>) {
        let u = DVector::from_column_slice(&self.z[..self.p]);
        let pm = DMatrix::from_row_slice(self.m, self.p, &self.z[self.p..]);
        let (nu, np) = (u.norm(), pm.norm());
        (u / nu, pm / np)
    }

    pub fn h_and_m(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (u, pm) = self.parts();
        (&pm * &u, &pm * pm.transpose())
    }

    /// The raw blocks have drifted far from unit norm.
    fn drifted(&self) -> bool {
        let nu = norm(&self.z[..self.p]);
        let np = norm(&self.z[self.p..]);
        !(0.5..=2.0).contains(&nu) || !(0.5..=2.0).contains(&np)
    }

    fn renormalize(&mut self) {
        let (u, pm) = self.parts();
        self.z[..self.p].copy_from_slice(u.as_slice());
        for (j, row) in pm.row_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                self.z[self.p + j * self.p + c] = *v;
            }
        }
    }
}

/// Objective pieces at one point.
struct Eval {
    value: f64,
    /// Gradient of `−value` with respect to the raw parameters.
    grad: Vec<f64>,
    /// `∂/∂h` and `∂/∂M` of the value, for the upper bound.
    g_h: DVector<f64>,
    g_m: DMatrix<f64>,
}

fn evaluate(w: &DMatrix<f64>, r: f64, f: &Factor, with_y_gradient: bool) -> Eval {
    let (m, p) = (f.m, f.p);
    let u_raw = DVector::from_column_slice(&f.z[..p]);
    let p_raw = DMatrix::from_row_slice(m, p, &f.z[p..]);
    let (nu, np) = (u_raw.norm(), p_raw.norm());
    let u = &u_raw / nu;
    let pm = &p_raw / np;

    let a = w * &pm; // k × p, row i is (Pᵀ w_i)ᵀ
    let alpha = &a * &u;
    let k = w.nrows();
    let mut value = 0.0;
    let mut coef_u = DVector::zeros(k);
    let mut dq = DVector::zeros(k);
    for i in 0..k {
        let c = r - alpha[i];
        if c <= 0.0 {
            value += 1.0;
            continue;
        }
        let q = (a.row(i).norm_squared() - alpha[i] * alpha[i]).max(0.0);
        let den = q + c * c;
        value += q / den;
        let d2 = den * den;
        dq[i] = c * c / d2;
        coef_u[i] = 2.0 * c * q / d2 - 2.0 * dq[i] * alpha[i];
    }

    let gu = a.transpose() * &coef_u;
    let mut ga = a.clone();
    for i in 0..k {
        let s = 2.0 * dq[i];
        for c in 0..p {
            ga[(i, c)] = ga[(i, c)] * s + coef_u[i] * u[c];
        }
    }
    let gp = w.transpose() * ga;
    let gu_t = (&gu - &u * u.dot(&gu)) / nu;
    let gp_t = (&gp - &pm * pm.dot(&gp)) / np;

    let mut grad = Vec::with_capacity(f.z.len());
    grad.extend(gu_t.iter().map(|g| -g));
    for row in gp_t.row_iter() {
        grad.extend(row.iter().map(|g| -g));
    }

    let (g_h, g_m) = if with_y_gradient {
        let g_h = w.transpose() * &coef_u;
        let mut wd = w.clone();
        for i in 0..k {
            wd.row_mut(i).scale_mut(dq[i]);
        }
        (g_h, w.transpose() * wd)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    };
    Eval {
        value,
        grad,
        g_h,
        g_m,
    }
}

/// `max ⟨G, Y⟩` over `{[1 hᵀ; h M] ⪰ 0, tr M = 1}` for
/// `G = [0 g_h/2ᵀ; g_h/2 G_M]`, through its dual
/// `min_{b > λ_max(G_M)} b + ¼ g_hᵀ (b I − G_M)⁻¹ g_h`.
fn linear_max(g_h: &DVector<f64>, g_m: &DMatrix<f64>) -> f64 {
    let eig = sym_eig_unchecked((g_m + g_m.transpose()) * 0.5);
    let lambdas = &eig.eigenvalues;
    let proj = eig.eigenvectors.transpose() * (g_h * 0.5);
    let weights: Vec<f64> = proj.iter().map(|c| c * c).collect();
    let top = lambdas.max();
    let scale = top.abs().max(1.0);
    let psi = |b: f64| -> f64 {
        b + lambdas
            .iter()
            .zip(&weights)
            .map(|(l, c)| if *c == 0.0 { 0.0 } else { c / (b - l) })
            .sum::<f64>()
    };
    let slope = |b: f64| -> f64 {
        1.0 - lambdas
            .iter()
            .zip(&weights)
            .map(|(l, c)| c / ((b - l) * (b - l)))
            .sum::<f64>()
    };
    let floor = top + 1e-12 * scale;
    let mut lo = floor;
    let mut hi = top + weights.iter().sum::<f64>().sqrt() + 1e-12 * scale;
    if slope(lo) >= 0.0 {
        return psi(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * scale {
            break;
        }
    }
    psi(hi).min(psi(lo))
}

/// Upper bound on the relaxation value from the linearization at the
/// current point.
fn upper_bound(f: &Factor, e: &Eval) -> f64 {
    let (h, m) = f.h_and_m();
    let current = e.g_h.dot(&h) + e.g_m.dot(&m);
    e.value - current + linear_max(&e.g_h, &e.g_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Bound gap within tolerance.
    Converged,
    /// Gradient below tolerance with the bound still open.
    Stationary,
    /// The value is certainly at least the target.
    Above,
    /// The value is certainly below the target.
    Below,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct FactoredResult {
    pub factor: Factor,
    pub value: f64,
    pub upper: f64,
    pub outcome: Outcome,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

/// Maximizes `Σ φ_i` from `start`. With a `target`, stops as soon as the
/// value is certified on one side of it.
///
/// Convergence is declared when the certified gap is within tolerance, or
/// when the gradient norm falls below `abs_tol · 1e-2`: the linearization
/// bound can stay loose where the objective is sharply curved even though
/// the value itself has converged.
pub fn maximize(
    w: &DMatrix<f64>,
    r: f64,
    start: Factor,
    tol: Tolerances,
    target: Option<f64>,
) -> FactoredResult {
    let mut f = start;
    f.renormalize();
    let mut e = evaluate(w, r, &f, true);
    let mut upper = upper_bound(&f, &e);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut outcome = Outcome::IterationLimit;
    let mut iterations = 0;
    let gap_tol = |value: f64| tol.abs_tol + tol.rel_tol * value.abs().max(1.0);
    let grad_tol = 1e-2 * tol.abs_tol;

    loop {
        if upper - e.value <= gap_tol(e.value) {
            outcome = Outcome::Converged;
            break;
        }
        if let Some(t) = target {
            if e.value >= t {
                outcome = Outcome::Above;
                break;
            }
            if upper < t {
                outcome = Outcome::Below;
                break;
            }
        }
        if norm(&e.grad) <= grad_tol {
            outcome = Outcome::Stationary;
            break;
        }
        if iterations >= tol.max_iter {
            break;
        }
        iterations += 1;

        let mut d = two_loop(&e.grad, &history);
        if history.is_empty() || dot(&d, &e.grad) >= 0.0 {
            history.clear();
            let scale = 1.0 / norm(&e.grad);
            d = e.grad.iter().map(|g| -g * scale).collect();
        }
        let Some((next, ne)) = wolfe_step(w, r, &f, &e, &d) else {
            if history.is_empty() {
                outcome = Outcome::Stationary;
                break;
            }
            history.clear();
            continue;
        };
        let s: Vec<f64> = next.z.iter().zip(&f.z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = ne.grad.iter().zip(&e.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        f = next;
        e = ne;
        if f.drifted() {
            f.renormalize();
            e = evaluate(w, r, &f, true);
            history.clear();
        }
        if iterations % BOUND_INTERVAL == 0 || target.is_some_and(|t| e.value >= t) {
            upper = upper.min(upper_bound(&f, &e));
        }
    }
    // The bound is only refreshed periodically; decide again with a fresh one.
    let upper = upper.min(upper_bound(&f, &e)).max(e.value);
    if outcome == Outcome::IterationLimit || outcome == Outcome::Stationary {
        if upper - e.value <= gap_tol(e.value) {
            outcome = Outcome::Converged;
        } else if let Some(t) = target {
            if e.value >= t {
                outcome = Outcome::Above;
            } else if upper < t {
                outcome = Outcome::Below;
            }
        }
    }
    FactoredResult {
        value: e.value,
        upper,
        factor: f,
        outcome,
        iterations,
    }
}

/// Strong-Wolfe line search on `−Σ φ_i` along `d` (Nocedal & Wright,
/// Algorithms 3.5 and 3.6, with bisection in the zoom phase).
fn wolfe_step(w: &DMatrix<f64>, r: f64, f: &Factor, e: &Eval, d: &[f64]) -> Option<(Factor, Eval)> {
    let f0 = -e.value;
    let g0 = dot(d, &e.grad);
    if g0 >= 0.0 {
        return None;
    }
    let at = |step: f64| {
        let mut trial = f.clone();
        for (z, di) in trial.z.iter_mut().zip(d) {
            *z += step * di;
        }
        let te = evaluate(w, r, &trial, true);
        let (fv, gv) = (-te.value, dot(d, &te.grad));
        (trial, te, fv, gv)
    };
    // `lo` is always the best point seen that satisfies sufficient decrease;
    // `hi`, once set, brackets a step satisfying the curvature condition.
    let (mut lo, mut f_lo) = (0.0, f0);
    let mut hi: Option<f64> = None;
    let mut step = 1.0;
    for _ in 0..MAX_LINE_STEPS {
        let (trial, te, fv, gv) = at(step);
        if fv > f0 + WOLFE_C1 * step * g0 || fv >= f_lo {
            hi = Some(step);
        } else {
            if gv.abs() <= -WOLFE_C2 * g0 {
                return Some((trial, te));
            }
            let flip = match hi {
                None => gv >= 0.0,
                Some(h) => gv * (h - lo) >= 0.0,
            };
            if flip {
                hi = Some(lo);
            }
            lo = step;
            f_lo = fv;
        }
        match hi {
            None => step *= 2.0,
            Some(h) => {
                if (h - lo).abs() <= 1e-14 * h.abs().max(lo.abs()) {
                    break;
                }
                step = 0.5 * (lo + h);
            }
        }
    }
    // Fall back to the best sufficient-decrease point found.
    if lo > 0.0 {
        let (trial, te, _, _) = at(lo);
        return Some((trial, te));
    }
    None
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Full PSD matrix, indexed `1, b_1..b_k, v_1..v_m`, realizing the value of
/// `f`: the Gram matrix of `u`, the optimal bucket vectors and the rows of `P`.
pub fn reconstruct(w: &DMatrix<f64>, r: f64, f: &Factor) -> DMatrix<f64> {
    let (u, pm) = f.parts();
    let (k, m, p) = (w.nrows(), f.m, f.p);
    let mut g = DMatrix::zeros(p, 1 + k + m);
    g.set_column(0, &u);
    for i in 0..k {
        let a = pm.transpose() * w.row(i).transpose();
        let alpha = a.dot(&u);
        let ui = if r - alpha <= 0.0 {
            u.clone()
        } else {
            let perp = &a - &u * alpha;
            let beta = perp.norm();
            let c = r - alpha;
            let den = beta * beta + c * c;
            if beta == 0.0 || den == 0.0 {
                DVector::zeros(p)
            } else {
                let t = beta * beta / den;
                let s = beta * c / den;
                &u * t + perp * (s / beta)
            }
        };
        g.set_column(1 + i, &ui);
    }
    for j in 0..m {
        g.set_column(1 + k + j, &pm.row(j).transpose());
    }
    g.transpose() * g
}
