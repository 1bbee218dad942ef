//! Proximal-point learning of the relaxed constraint matrix.
//!
//! Each row `w` of `W` minimizes
//! `‖Dw − b e‖² + λ‖w − w⁰‖² + t1(e − 2wᵏ)ᵀw + (1/γ)‖w − wᵏ‖²`
//! (the concave penalty `t1(eᵀw − wᵀw)` linearized at the current iterate) and
//! is then clamped to the box. All rows share one factorization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    binarize_matrix, estimate_bounds, BiasMode, CardinalityConstraint, ConstraintError, RelaxedSystem,
};
use crate::dcopt::{booleanness_violation, linearization_point, AnnealSchedule, BooleanQuadratic};
use crate::numkit::{box_coordinate_descent, dot, par_rows_mut, uniform_matrix, Cholesky, DenseMatrix, NumError, RngState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(#[from] NumError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("invalid setting: {0}")]
    InvalidConfig(String),
}

/// Additive annealing settings, relative to the current subproblem's `δ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    pub step_fraction: f64,
    pub eps: f64,
    pub cap_factor: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig { step_fraction: 3e-4, eps: 1e-3, cap_factor: 10.0 }
    }
}

impl AnnealConfig {
    /// Refreshes step and cap for `delta_max`, then applies one annealing step.
    pub fn advance(&self, s: AnnealSchedule, delta_max: f64, violation: f64) -> AnnealSchedule {
        let fresh = AnnealSchedule {
            t: s.t,
            step: self.step_fraction * delta_max,
            eps: self.eps,
            cap: (self.cap_factor * delta_max).max(s.t),
        };
        crate::dcopt::anneal(fresh, violation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub rs: RelaxedSystem,
    pub gamma: f64,
    pub anneal: AnnealSchedule,
    pub iteration: u64,
}

impl LearnerState {
    /// `W = W⁰` drawn uniformly from `[0, 1)`, every bias set to `b`.
    pub fn init(
        rng: &mut RngState,
        m: usize,
        d: usize,
        b: f64,
        b_mode: BiasMode,
        lambda: f64,
        gamma: f64,
        eps: f64,
    ) -> Result<Self, LearnError> {
        if !(gamma > 0.0) {
            return Err(LearnError::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        if !(lambda >= 0.0) {
            return Err(LearnError::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
        }
        let w0 = uniform_matrix(rng, m, d, 0.0, 1.0);
        Ok(LearnerState {
            rs: RelaxedSystem { w: w0.clone(), b: vec![b; m], w0, lambda, t1: 0.0, b_mode },
            gamma,
            anneal: AnnealSchedule { t: 0.0, step: 0.0, eps, cap: 0.0 },
            iteration: 0,
        })
    }

    pub fn set_t1(&mut self, s: AnnealSchedule) {
        self.anneal = s;
        self.rs.t1 = s.t;
    }

    /// The Boolean least-squares problem behind row `i` for batch `d`.
    pub fn row_problem(&self, d: &DenseMatrix, i: usize) -> Result<BooleanQuadratic, LearnError> {
        BooleanQuadratic::new(d.clone(), vec![self.rs.b[i]; d.rows()], self.rs.w0.row(i).to_vec(), self.rs.lambda)
            .map_err(|e| LearnError::ShapeMismatch(e.to_string()))
    }
}

/// `max_i diag(DᵀD + λI)`, the threshold that scales the `t1` schedule.
pub fn delta_max(d: &DenseMatrix, lambda: f64) -> f64 {
    let mut best = 0.0f64;
    let mut cols = vec![0.0; d.cols()];
    for r in d.iter_rows() {
        for (c, v) in cols.iter_mut().zip(r) {
            *c += v * v;
        }
    }
    for c in cols {
        best = best.max(c + lambda);
    }
    best
}

pub fn booleanness(w: &DenseMatrix) -> f64 {
    booleanness_violation(w.as_slice())
}

/// Sufficient statistics of a batch for evaluating row objectives cheaply.
struct BatchStats {
    m: DenseMatrix,
    de: Vec<f64>,
    n: f64,
}

impl BatchStats {
    fn new(d: &DenseMatrix) -> Self {
        BatchStats { m: d.gram(), de: d.column_sums(), n: d.rows() as f64 }
    }

    /// `‖Dw − b e‖²`
    fn fit(&self, w: &[f64], b: f64) -> f64 {
        let mw = self.m.matvec(w).expect("matching dimension");
        (dot(w, &mw) - 2.0 * b * dot(w, &self.de) + self.n * b * b).max(0.0)
    }
}

fn row_objective(stats: &BatchStats, w: &[f64], w0: &[f64], b: f64, lambda: f64, t1: f64) -> f64 {
    let trust: f64 = w.iter().zip(w0).map(|(a, c)| (a - c).powi(2)).sum();
    let pen: f64 = w.iter().map(|v| v - v * v).sum();
    stats.fit(w, b) + lambda * trust + t1 * pen
}

/// The relaxed training objective: fit, trust region and concave penalty,
/// summed over rows.
pub fn objective(rs: &RelaxedSystem, d: &DenseMatrix) -> f64 {
    let stats = BatchStats::new(d);
    (0..rs.w.rows())
        .map(|i| row_objective(&stats, rs.w.row(i), rs.w0.row(i), rs.b[i], rs.lambda, rs.t1))
        .sum()
}

/// Convex surrogate `G` whose minimizer defines the step from `wk`.
fn surrogate(stats: &BatchStats, w: &[f64], wk: &[f64], w0: &[f64], b: f64, lambda: f64, t1: f64, gamma: f64) -> f64 {
    let trust: f64 = w.iter().zip(w0).map(|(a, c)| (a - c).powi(2)).sum();
    let lin: f64 = w.iter().zip(wk).map(|(a, &k)| (1.0 - 2.0 * linearization_point(k)) * a).sum();
    let prox: f64 = w.iter().zip(wk).map(|(a, k)| (a - k).powi(2)).sum();
    stats.fit(w, b) + lambda * trust + t1 * lin + prox / gamma
}

/// One proximal-point update of every row on batch `d`.
pub fn ppa_step(state: &LearnerState, d: &DenseMatrix) -> Result<LearnerState, LearnError> {
    let rs = &state.rs;
    let (m, dim) = (rs.w.rows(), rs.w.cols());
    if d.cols() != dim {
        return Err(LearnError::ShapeMismatch(format!("batch has {} columns, W has {dim}", d.cols())));
    }
    if d.rows() == 0 {
        return Err(LearnError::ShapeMismatch("empty batch".into()));
    }
    if rs.b.len() != m || rs.w0.rows() != m || rs.w0.cols() != dim {
        return Err(LearnError::ShapeMismatch("W, W⁰ and b disagree".into()));
    }
    let (lambda, t1, gamma) = (rs.lambda, rs.t1, state.gamma);
    let stats = BatchStats::new(d);
    let mut h = stats.m.clone();
    h.add_diagonal(lambda + 1.0 / gamma);
    let chol = Cholesky::factor(&h)?;

    let rhs_of = |i: usize| -> Vec<f64> {
        let (wk, w0, b) = (rs.w.row(i), rs.w0.row(i), rs.b[i]);
        (0..dim).map(|j| stats.de[j] * b + lambda * w0[j] + wk[j] / gamma + t1 * (linearization_point(wk[j]) - 0.5)).collect()
    };
    let mut next = DenseMatrix::zeros(m, dim);
    par_rows_mut(&mut next, |i, out| {
        let rhs = rhs_of(i);
        out.copy_from_slice(&rhs);
        chol.solve_in_place(out);
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let (wk, w0, b) = (rs.w.row(i), rs.w0.row(i), rs.b[i]);
        let g_new = surrogate(&stats, out, wk, w0, b, lambda, t1, gamma);
        let g_old = surrogate(&stats, wk, wk, w0, b, lambda, t1, gamma);
        if g_new > g_old {
            // the clamp broke descent; minimize the same surrogate over the box instead
            out.copy_from_slice(&box_coordinate_descent(&h, &rhs, wk, 500, 1e-13));
        }
    });

    let mut b = rs.b.clone();
    if rs.b_mode == BiasMode::Learned {
        for (i, bi) in b.iter_mut().enumerate() {
            let mean = dot(rs.w.row(i), &stats.de) / stats.n;
            *bi = (mean + *bi / gamma) / (1.0 + 1.0 / gamma);
        }
    }
    Ok(LearnerState {
        rs: RelaxedSystem { w: next, b, w0: rs.w0.clone(), lambda, t1, b_mode: rs.b_mode },
        gamma,
        anneal: state.anneal,
        iteration: state.iteration + 1,
    })
}

/// Rows of a Boolean `W` that hit `b` exactly on at least a fraction `k` of
/// `samples`, with bounds estimated at coverage `k`. Duplicates are dropped.
pub fn candidates_from_rows(
    w: &DenseMatrix,
    b: u32,
    samples: &[Vec<bool>],
    k: f64,
    eps: f64,
) -> Result<Vec<Candidate>, LearnError> {
    let rows = binarize_matrix(w, eps)?;
    Ok(candidates_from_boolean_rows(&rows, b, samples, k))
}

pub fn candidates_from_boolean_rows(rows: &[Vec<bool>], b: u32, samples: &[Vec<bool>], k: f64) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    if samples.is_empty() {
        return out;
    }
    let need = ((k * samples.len() as f64) - 1e-9).ceil() as usize;
    for row in rows {
        let vars: Vec<usize> = row.iter().enumerate().filter(|&(_, &v)| v).map(|(i, _)| i).collect();
        if vars.is_empty() || out.iter().any(|c| c.vars == vars) {
            continue;
        }
        let hits = samples.iter().filter(|s| vars.iter().filter(|&&i| s[i]).count() as u32 == b).count();
        if hits < need {
            continue;
        }
        let (lo, hi) = estimate_bounds(&vars, samples, k);
        out.push(Candidate { vars, b, lo, hi });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub vars: Vec<usize>,
    /// The sweep value that produced this row.
    pub b: u32,
    pub lo: u32,
    pub hi: u32,
}

impl Candidate {
    pub fn constraint(&self) -> CardinalityConstraint {
        CardinalityConstraint::new(self.vars.clone(), self.lo, self.hi)
    }
}

/// Supplies batches to the sweep and owns any grounding state.
pub trait ConstraintData {
    fn batch(&mut self, state: &LearnerState) -> Result<DenseMatrix, LearnError>;
    /// Runs after each update; returns the grounding's booleanness violation.
    fn after_update(&mut self, _state: &LearnerState) -> Result<f64, LearnError> {
        Ok(0.0)
    }
    /// Boolean assignments used to accept candidates and estimate bounds.
    fn boolean_samples(&mut self, state: &LearnerState) -> Result<Vec<Vec<bool>>, LearnError>;
}

/// A fixed batch that is already Boolean.
pub struct FixedData {
    pub d: DenseMatrix,
}

impl ConstraintData for FixedData {
    fn batch(&mut self, _: &LearnerState) -> Result<DenseMatrix, LearnError> {
        Ok(self.d.clone())
    }

    fn boolean_samples(&mut self, _: &LearnerState) -> Result<Vec<Vec<bool>>, LearnError> {
        Ok(binarize_matrix(&self.d, 0.5)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub m: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub t1: AnnealConfig,
    pub max_epochs: usize,
    pub coverage: f64,
}

/// Result of one fixed-`b` run.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub b: u32,
    pub state: LearnerState,
    pub epochs: usize,
    pub candidates: Vec<Candidate>,
}

/// Runs constraint learning to a Boolean `W` for `b` (rows whose relative
/// objective change stays below 1e-6 for five epochs once everything is Boolean).
pub fn learn_fixed_b<D: ConstraintData>(
    cfg: &SweepConfig,
    rng: &mut RngState,
    data: &mut D,
    b: u32,
    d: usize,
) -> Result<SweepRun, LearnError> {
    let mut state = LearnerState::init(rng, cfg.m, d, b as f64, BiasMode::Fixed, cfg.lambda, cfg.gamma, cfg.t1.eps)?;
    let mut stable = 0;
    let mut last_obj = f64::NAN;
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        let batch = data.batch(&state)?;
        state = ppa_step(&state, &batch)?;
        let gv = data.after_update(&state)?;
        let wv = booleanness(&state.rs.w);
        let obj = objective(&state.rs, &batch);
        let next = cfg.t1.advance(state.anneal, delta_max(&batch, cfg.lambda), wv);
        state.set_t1(next);
        epochs += 1;
        let rel = (obj - last_obj).abs() / last_obj.abs().max(1e-12);
        last_obj = obj;
        if wv <= cfg.t1.eps && gv <= cfg.t1.eps && rel < 1e-6 {
            stable += 1;
            if stable >= 5 {
                break;
            }
        } else {
            stable = 0;
        }
    }
    let samples = data.boolean_samples(&state)?;
    let candidates = candidates_from_rows(&state.rs.w, b, &samples, cfg.coverage, cfg.t1.eps)?;
    Ok(SweepRun { b, state, epochs, candidates })
}

/// For each `b`, learns a fresh system with every bias fixed to `b` and keeps
/// its accepted rows. Candidates carry the `b` that found them; rows found by
/// several runs are kept once (first `b` wins).
pub fn b_sweep<D, F>(cfg: &SweepConfig, rng: &mut RngState, d: usize, mut make_data: F, b_values: &[u32]) -> Result<Vec<Candidate>, LearnError>
where
    D: ConstraintData,
    F: FnMut(u32, &mut RngState) -> Result<D, LearnError>,
{
    let mut all: Vec<Candidate> = Vec::new();
    for &b in b_values {
        if b == 0 || b as usize >= d {
            return Err(LearnError::InvalidConfig(format!("sweep value {b} outside [1, {}]", d.saturating_sub(1))));
        }
        let mut data = make_data(b, rng)?;
        let run = learn_fixed_b(cfg, rng, &mut data, b, d)?;
        for c in run.candidates {
            if !all.iter().any(|o| o.vars == c.vars && o.lo == c.lo && o.hi == c.hi) {
                all.push(c);
            }
        }
    }
    Ok(all)
}

/// Outcome of [`prop2_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StationarityReport {
    /// Instances whose learned Boolean rows all pass the stationarity check at the final `t1`.
    pub stationary: crate::dcopt::SuiteReport,
    /// Instances whose brute-force optimum passes the diagonal form.
    pub diagonal: crate::dcopt::SuiteReport,
}

/// Toy problems: a random 0/1 batch of 6 samples over 3 to 8 variables,
/// `b = 1`, four rows learned to Booleanness with the default schedule.
pub fn prop2_suite(seed: u64, instances: usize, tol: f64) -> Result<StationarityReport, LearnError> {
    use crate::dcopt::{brute_force_min, diagonal_condition, stationarity_check, SuiteReport};
    let (mut stationary, mut diagonal) = (0, 0);
    for k in 0..instances as u64 {
        let mut rng = RngState::substream(seed, k);
        let n = 3 + rng.below(6);
        let data: Vec<f64> = (0..6 * n).map(|_| rng.below(2) as f64).collect();
        let d = DenseMatrix::from_vec(6, n, data)?;
        let cfg = SweepConfig {
            m: 4,
            lambda: 0.1,
            gamma: 0.001,
            t1: AnnealConfig::default(),
            max_epochs: 200_000,
            coverage: 1.0,
        };
        let run = learn_fixed_b(&cfg, &mut rng, &mut FixedData { d: d.clone() }, 1, n)?;
        let t = run.state.rs.t1;
        let mut ok_s = booleanness(&run.state.rs.w) <= cfg.t1.eps;
        let mut ok_d = true;
        for i in 0..cfg.m {
            let prob = run.state.row_problem(&d, i)?;
            let u: Vec<bool> = run.state.rs.w.row(i).iter().map(|&v| v >= 0.5).collect();
            ok_s &= stationarity_check(&prob, t, &u, tol);
            let (best, _) = brute_force_min(&prob).map_err(|e| LearnError::InvalidConfig(e.to_string()))?;
            ok_d &= diagonal_condition(&prob, &best, tol);
        }
        stationary += ok_s as usize;
        diagonal += ok_d as usize;
    }
    Ok(StationarityReport {
        stationary: SuiteReport { passed: stationary, total: instances },
        diagonal: SuiteReport { passed: diagonal, total: instances },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_from(w: DenseMatrix, w0: DenseMatrix, b: Vec<f64>, lambda: f64, t1: f64, gamma: f64) -> LearnerState {
        LearnerState {
            rs: RelaxedSystem { w, b, w0, lambda, t1, b_mode: BiasMode::Fixed },
            gamma,
            anneal: AnnealSchedule { t: t1, step: 0.0, eps: 1e-3, cap: 1e9 },
            iteration: 0,
        }
    }

    fn d3x2() -> DenseMatrix {
        DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 1.0], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn least_squares_solution_is_fixed_point() {
        // with t1 = λ = 0 the pure least-squares minimizer does not move
        let d = d3x2();
        let a = d.gram();
        let rhs = DenseMatrix::from_vec(2, 1, d.column_sums().iter().map(|v| 0.5 * v).collect()).unwrap();
        let x = crate::numkit::spd_solve(&a, &rhs).unwrap();
        let w = DenseMatrix::from_vec(1, 2, vec![x.get(0, 0), x.get(1, 0)]).unwrap();
        assert!(w.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let s = state_from(w.clone(), DenseMatrix::zeros(1, 2), vec![0.5], 0.0, 0.0, 0.001);
        let next = ppa_step(&s, &d).unwrap();
        assert!(next.rs.w.sub(&w).unwrap().max_abs() < 1e-10);
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn huge_trust_weight_pins_to_centers() {
        let w0 = DenseMatrix::from_rows(&[vec![0.2, 0.7]]).unwrap();
        let s = state_from(DenseMatrix::from_rows(&[vec![0.9, 0.1]]).unwrap(), w0.clone(), vec![1.0], 1e6, 0.0, 1e3);
        let next = ppa_step(&s, &d3x2()).unwrap();
        assert!(next.rs.w.sub(&w0).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let d = d3x2();
        let (lambda, t1, gamma, b) = (0.1, 0.3, 0.5, 1.0);
        let wk = [0.4, 0.6];
        let w0 = [0.1, 0.9];
        let s = state_from(
            DenseMatrix::from_rows(&[wk.to_vec()]).unwrap(),
            DenseMatrix::from_rows(&[w0.to_vec()]).unwrap(),
            vec![b],
            lambda,
            t1,
            gamma,
        );
        let got = ppa_step(&s, &d).unwrap();
        // plain gradient descent on the surrogate
        let mut w = [0.5, 0.5];
        for _ in 0..100_000 {
            let mut g = [0.0; 2];
            for r in d.iter_rows() {
                let res = r[0] * w[0] + r[1] * w[1] - b;
                g[0] += 2.0 * res * r[0];
                g[1] += 2.0 * res * r[1];
            }
            for j in 0..2 {
                g[j] += 2.0 * lambda * (w[j] - w0[j]) + t1 * (1.0 - 2.0 * wk[j]) + 2.0 / gamma * (w[j] - wk[j]);
                w[j] -= 0.01 * g[j];
            }
        }
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        for j in 0..2 {
            assert!((got.rs.w.get(0, j) - w[j]).abs() < 1e-6, "{j}: {} vs {}", got.rs.w.get(0, j), w[j]);
        }
    }

    #[test]
    fn learned_bias_moves_toward_mean() {
        let d = d3x2();
        let mut s = state_from(DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), DenseMatrix::zeros(1, 2), vec![0.0], 0.1, 0.0, 1.0);
        s.rs.b_mode = BiasMode::Learned;
        let next = ppa_step(&s, &d).unwrap();
        let mean = (1.0 + 1.3 + 1.0) / 3.0;
        assert!((next.rs.b[0] - mean / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let s = state_from(DenseMatrix::zeros(1, 3), DenseMatrix::zeros(1, 3), vec![1.0], 0.1, 0.0, 0.001);
        assert!(matches!(ppa_step(&s, &d3x2()), Err(LearnError::ShapeMismatch(_))));
    }

    #[test]
    fn booleanness_examples() {
        assert_eq!(booleanness(&DenseMatrix::identity(3)), 0.0);
        assert_eq!(booleanness(&DenseMatrix::from_rows(&[vec![0.5, 1.0]]).unwrap()), 0.5);
        assert!((booleanness(&DenseMatrix::from_rows(&[vec![0.999, 0.0]]).unwrap()) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn candidate_filter_requires_exact_hits() {
        let rows = vec![vec![true, true, false], vec![true, false, false], vec![false, false, false]];
        let samples = vec![vec![true, false, true], vec![false, true, false], vec![false, true, true]];
        let c = candidates_from_boolean_rows(&rows, 1, &samples, 1.0);
        assert_eq!(c, vec![Candidate { vars: vec![0, 1], b: 1, lo: 1, hi: 1 }]);
    }

    #[test]
    fn empty_sweep_is_empty() {
        let cfg = SweepConfig { m: 2, lambda: 0.1, gamma: 0.001, t1: AnnealConfig::default(), max_epochs: 10, coverage: 1.0 };
        let mut rng = RngState::new(0);
        let out = b_sweep(&cfg, &mut rng, 3, |_, _| Ok(FixedData { d: d3x2() }), &[]).unwrap();
        assert!(out.is_empty());
    }
}
