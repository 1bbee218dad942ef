//! Boolean least-squares subproblems and their concave-penalty relaxation.
//!
//! `q(u) = ‖Qu − q1‖² + τ‖u − q2‖²` over `u ∈ {0,1}ⁿ`, relaxed to the box with
//! the penalty `t(eᵀu − uᵀu)`. With `S = QᵀQ + τI` and `s = Qᵀq1 + τq2` the
//! gradient is `2(Su − s)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{dot, DenseMatrix};

/// Largest `n` accepted by the exhaustive routines.
pub const MAX_BRUTE_FORCE_VARS: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DcError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("u[{index}] = {value} is outside the allowed domain")]
    DomainViolation { index: usize, value: f64 },
    #[error("{n} variables is too many to enumerate (limit {MAX_BRUTE_FORCE_VARS})")]
    TooLarge { n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BooleanQuadratic {
    pub q: DenseMatrix,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub tau: f64,
}

impl BooleanQuadratic {
    pub fn new(q: DenseMatrix, q1: Vec<f64>, q2: Vec<f64>, tau: f64) -> Result<Self, DcError> {
        if q1.len() != q.rows() || q2.len() != q.cols() {
            return Err(DcError::ShapeMismatch(format!(
                "Q is {}x{}, q1 has {}, q2 has {}",
                q.rows(),
                q.cols(),
                q1.len(),
                q2.len()
            )));
        }
        if !(tau >= 0.0) || !tau.is_finite() || !q1.iter().chain(&q2).all(|v| v.is_finite()) {
            return Err(DcError::ShapeMismatch("tau and vectors must be finite, tau >= 0".into()));
        }
        Ok(BooleanQuadratic { q, q1, q2, tau })
    }

    pub fn n(&self) -> usize {
        self.q.cols()
    }

    pub fn s_matrix(&self) -> DenseMatrix {
        let mut s = self.q.gram();
        s.add_diagonal(self.tau);
        s
    }

    pub fn s_vector(&self) -> Vec<f64> {
        let qt = self.q.transpose();
        qt.iter_rows().zip(&self.q2).map(|(col, &b)| dot(col, &self.q1) + self.tau * b).collect()
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let su = self.s_matrix().matvec(u).expect("dimension checked by caller");
        su.iter().zip(self.s_vector()).map(|(a, b)| 2.0 * (a - b)).collect()
    }

    fn check_len(&self, len: usize) -> Result<(), DcError> {
        if len != self.n() {
            return Err(DcError::ShapeMismatch(format!("u has {len} entries, expected {}", self.n())));
        }
        Ok(())
    }

    fn value_real(&self, u: &[f64]) -> f64 {
        let fit: f64 = self.q.iter_rows().zip(&self.q1).map(|(r, &c)| (dot(r, u) - c).powi(2)).sum();
        let prox: f64 = u.iter().zip(&self.q2).map(|(a, b)| (a - b).powi(2)).sum();
        fit + self.tau * prox
    }
}

fn to_real(u: &[bool]) -> Vec<f64> {
    u.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

pub fn objective_p(prob: &BooleanQuadratic, u: &[bool]) -> Result<f64, DcError> {
    prob.check_len(u.len())?;
    Ok(prob.value_real(&to_real(u)))
}

pub fn objective_pt(prob: &BooleanQuadratic, u: &[f64], t: f64) -> Result<f64, DcError> {
    prob.check_len(u.len())?;
    if let Some((i, &v)) = u.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(DcError::DomainViolation { index: i, value: v });
    }
    let penalty: f64 = u.iter().map(|v| v - v * v).sum();
    Ok(prob.value_real(u) + t * penalty)
}

/// Where the concave penalty is linearized for a relaxed value `u`. At exactly
/// one half the linearization has zero slope and the iteration can never leave,
/// so values within `HALF_TIE` of it are treated as lying just below.
pub fn linearization_point(u: f64) -> f64 {
    if (u - 0.5).abs() < HALF_TIE {
        0.5 - HALF_TIE
    } else {
        u
    }
}

pub const HALF_TIE: f64 = 1e-9;

/// Largest diagonal entry of `QᵀQ + τI`; zero for an empty problem.
pub fn exact_penalty_threshold(prob: &BooleanQuadratic) -> f64 {
    let mut best = 0.0f64;
    for c in 0..prob.n() {
        let col: f64 = (0..prob.q.rows()).map(|r| prob.q.get(r, c).powi(2)).sum();
        best = best.max(col + prob.tau);
    }
    best
}

fn lex_less(a: &[bool], b: &[bool]) -> bool {
    a < b
}

/// Global minimizer of `q` over all vertices, ties to the lexicographically
/// smallest `u` (false before true, first coordinate most significant).
pub fn brute_force_min(prob: &BooleanQuadratic) -> Result<(Vec<bool>, f64), DcError> {
    let n = prob.n();
    if n > MAX_BRUTE_FORCE_VARS {
        return Err(DcError::TooLarge { n });
    }
    let s = prob.s_matrix();
    let sv = prob.s_vector();
    // Gray-code walk, tracking Su so each flip costs O(n)
    let mut u = vec![false; n];
    let mut su = vec![0.0; n];
    let base = prob.value_real(&vec![0.0; n]);
    let mut val = base;
    let mut best_u = u.clone();
    let mut best = base;
    for k in 1u64..(1u64 << n) {
        let i = k.trailing_zeros() as usize;
        let delta = if u[i] { -1.0 } else { 1.0 };
        val += 2.0 * delta * su[i] + s.get(i, i) - 2.0 * delta * sv[i];
        u[i] = !u[i];
        for (j, acc) in su.iter_mut().enumerate() {
            *acc += delta * s.get(j, i);
        }
        let tol = 1e-9 * (1.0 + best.abs());
        if val < best - tol {
            best = prob.value_real(&to_real(&u));
            best_u.clone_from(&u);
        } else if val <= best + tol {
            let exact = prob.value_real(&to_real(&u));
            if exact < best || (exact == best && lex_less(&u, &best_u)) {
                best = exact;
                best_u.clone_from(&u);
            }
        }
    }
    let value = prob.value_real(&to_real(&best_u));
    Ok((best_u, value))
}

/// Minimizes the penalized objective over the vertices of the box. For
/// `t > δ_max` every coordinate slice is strictly concave, so this is also the
/// minimum over the whole box. Ties go to the lexicographically smallest vertex.
pub fn vertex_minimizer_pt(prob: &BooleanQuadratic, t: f64) -> Result<(Vec<bool>, f64), DcError> {
    let n = prob.n();
    if n > MAX_BRUTE_FORCE_VARS {
        return Err(DcError::TooLarge { n });
    }
    let mut best: Option<(Vec<bool>, f64)> = None;
    let mut x = vec![0.0; n];
    // counting order is lexicographic order, so strict < keeps the smallest
    for k in 0u64..(1u64 << n) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = ((k >> (n - 1 - j)) & 1) as f64;
        }
        let val = objective_pt(prob, &x, t)?;
        if best.as_ref().map_or(true, |(_, b)| val < *b) {
            best = Some((x.iter().map(|&v| v == 1.0).collect(), val));
        }
    }
    Ok(best.expect("at least one vertex"))
}

/// Exact cyclic coordinate minimization of the penalized objective over the
/// box, started at `u`. Each one-dimensional slice is a quadratic, minimized in
/// closed form; stops when a full sweep changes nothing.
pub fn coordinate_descent_pt(prob: &BooleanQuadratic, t: f64, mut u: Vec<f64>, max_sweeps: usize) -> Vec<f64> {
    let s = prob.s_matrix();
    let sv = prob.s_vector();
    for _ in 0..max_sweeps {
        let mut moved = false;
        for i in 0..u.len() {
            // φ(x) = a x² + c x + const along coordinate i
            let a = s.get(i, i) - t;
            let rest = dot(s.row(i), &u) - s.get(i, i) * u[i];
            let c = 2.0 * rest - 2.0 * sv[i] + t;
            let phi = |x: f64| a * x * x + c * x;
            let x = if a > 0.0 {
                (-c / (2.0 * a)).clamp(0.0, 1.0)
            } else if phi(1.0) < phi(0.0) {
                1.0
            } else {
                0.0
            };
            if phi(x) < phi(u[i]) - 1e-15 {
                u[i] = x;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    u
}

/// True iff `[∇q(u)]_i (1 − 2u_i) + t ≥ −tol` for every coordinate.
pub fn stationarity_check(prob: &BooleanQuadratic, t: f64, u: &[bool], tol: f64) -> bool {
    if u.len() != prob.n() {
        return false;
    }
    let g = prob.gradient(&to_real(u));
    g.iter().zip(u).all(|(gi, &ui)| gi * if ui { -1.0 } else { 1.0 } + t >= -tol)
}

/// The diagonal form: `[∇q(u)]_i (1 − 2u_i) + S_ii ≥ −tol`, which every global
/// minimizer of `q` satisfies (no single flip improves it).
pub fn diagonal_condition(prob: &BooleanQuadratic, u: &[bool], tol: f64) -> bool {
    if u.len() != prob.n() {
        return false;
    }
    let s = prob.s_matrix();
    let g = prob.gradient(&to_real(u));
    g.iter().zip(u).enumerate().all(|(i, (gi, &ui))| gi * if ui { -1.0 } else { 1.0 } + s.get(i, i) >= -tol)
}

/// `max_i min(|x_i|, |1 − x_i|)`; zero exactly when every entry is 0 or 1.
pub fn booleanness_violation(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, &v| m.max(v.abs().min((1.0 - v).abs())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub t: f64,
    pub step: f64,
    pub eps: f64,
    pub cap: f64,
}

impl AnnealSchedule {
    /// Starts at zero, steps by `step_fraction·δ`, caps at `cap_factor·δ`.
    pub fn scaled(delta_max: f64, step_fraction: f64, eps: f64, cap_factor: f64) -> Self {
        AnnealSchedule { t: 0.0, step: step_fraction * delta_max, eps, cap: cap_factor * delta_max }
    }
}

/// Adds one step while the violation exceeds the tolerance.
pub fn anneal(s: AnnealSchedule, violation: f64) -> AnnealSchedule {
    let mut next = s;
    if violation > s.eps {
        next.t = (s.t + s.step).min(s.cap).max(s.t);
    }
    next
}

/// Count of instances that passed a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub passed: usize,
    pub total: usize,
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.passed, self.total)
    }
}

/// Seeded instance `k` of the random suite: `n ≤ 10` variables, `n + 2`
/// rows, `τ` alternating between 0.1 and 1.
pub fn random_instance(seed: u64, k: u64) -> BooleanQuadratic {
    let mut rng = crate::numkit::RngState::substream(seed, k);
    let n = 1 + rng.below(10);
    let q = crate::numkit::uniform_matrix(&mut rng, n + 2, n, -1.0, 1.0);
    let q1 = (0..n + 2).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
    let q2 = (0..n).map(|_| rng.uniform()).collect();
    let tau = if k % 2 == 0 { 0.1 } else { 1.0 };
    BooleanQuadratic::new(q, q1, q2, tau).expect("finite by construction")
}

/// Vertex minimizer of the penalized problem at `t = δ_max + 0.1` against the
/// brute-force Boolean minimizer, exact match required.
pub fn prop1_suite(seed: u64, instances: usize) -> SuiteReport {
    let passed = (0..instances as u64)
        .filter(|&k| {
            let p = random_instance(seed, k);
            let t = exact_penalty_threshold(&p) + 0.1;
            match (vertex_minimizer_pt(&p, t), brute_force_min(&p)) {
                (Ok((a, _)), Ok((b, _))) => a == b,
                _ => false,
            }
        })
        .count();
    SuiteReport { passed, total: instances }
}
