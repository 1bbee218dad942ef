//! Symbol grounding: per-sample correction of predicted symbols toward the
//! learned constraints.
//!
//! For each sample the free coordinates `s_F` minimize
//! `‖Ws − b‖² + α‖s_F − a_F‖² + t2(e − 2sᵏ_F)ᵀs_F`
//! with the clamped coordinates held at their anchor values, then are clamped
//! to the box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{binarize_matrix, ConstraintError, VariableSpace};
use crate::dcopt::{booleanness_violation, linearization_point, AnnealSchedule};
use crate::numkit::{box_coordinate_descent, dot, par_rows_mut, Cholesky, DenseMatrix, NumError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grounding system is singular: {0}")]
    SingularSystem(NumError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingBatch {
    pub s: DenseMatrix,
    pub anchor: DenseMatrix,
    pub free: Vec<bool>,
    pub alpha: f64,
    pub anneal: AnnealSchedule,
}

impl GroundingBatch {
    /// Starts with `S̄` equal to the anchor and `t2 = 0`.
    pub fn new(anchor: DenseMatrix, free: Vec<bool>, alpha: f64, eps: f64) -> Result<Self, GroundError> {
        if free.len() != anchor.cols() {
            return Err(GroundError::ShapeMismatch(format!("mask has {} entries, anchor has {} columns", free.len(), anchor.cols())));
        }
        Ok(GroundingBatch {
            s: anchor.clone(),
            anchor,
            free,
            alpha,
            anneal: AnnealSchedule { t: 0.0, step: 0.0, eps, cap: 0.0 },
        })
    }

    pub fn violation(&self) -> f64 {
        let d = self.s.cols();
        let mut worst = 0.0f64;
        for r in self.s.iter_rows() {
            for j in (0..d).filter(|&j| self.free[j]) {
                worst = worst.max(booleanness_violation(&[r[j]]));
            }
        }
        worst
    }

    /// Replaces the anchor; clamped coordinates of `S̄` follow it.
    pub fn set_anchor(&mut self, anchor: DenseMatrix) -> Result<(), GroundError> {
        if anchor.rows() != self.s.rows() || anchor.cols() != self.s.cols() {
            return Err(GroundError::ShapeMismatch("anchor shape changed".into()));
        }
        let d = anchor.cols();
        for i in 0..anchor.rows() {
            for j in (0..d).filter(|&j| !self.free[j]) {
                self.s.set(i, j, anchor.get(i, j));
            }
        }
        self.anchor = anchor;
        Ok(())
    }
}

/// `max_j diag(WᵀW + αI)` over the free coordinates; scales the `t2` schedule.
pub fn delta_max(w: &DenseMatrix, free: &[bool], alpha: f64) -> f64 {
    let mut cols = vec![0.0; w.cols()];
    for r in w.iter_rows() {
        for (c, v) in cols.iter_mut().zip(r) {
            *c += v * v;
        }
    }
    cols.iter().zip(free).filter(|(_, &f)| f).fold(0.0, |m, (c, _)| m.max(c + alpha))
}

/// Per-row objective with the concave penalty on free coordinates.
pub fn row_objective(s: &[f64], anchor: &[f64], free: &[bool], w: &DenseMatrix, b: &[f64], alpha: f64, t2: f64) -> f64 {
    let fit: f64 = w.iter_rows().zip(b).map(|(r, &bi)| (dot(r, s) - bi).powi(2)).sum();
    let mut rest = 0.0;
    for j in 0..s.len() {
        if free[j] {
            rest += alpha * (s[j] - anchor[j]).powi(2) + t2 * (s[j] - s[j] * s[j]);
        }
    }
    fit + rest
}

/// Sum of [`row_objective`] over the batch at its current `t2`.
pub fn objective(gb: &GroundingBatch, w: &DenseMatrix, b: &[f64]) -> f64 {
    (0..gb.s.rows()).map(|i| row_objective(gb.s.row(i), gb.anchor.row(i), &gb.free, w, b, gb.alpha, gb.anneal.t)).sum()
}

pub fn ground_step(gb: &GroundingBatch, w: &DenseMatrix, b: &[f64]) -> Result<GroundingBatch, GroundError> {
    let (n, d) = (gb.s.rows(), gb.s.cols());
    if w.cols() != d || b.len() != w.rows() || gb.anchor.rows() != n || gb.anchor.cols() != d || gb.free.len() != d {
        return Err(GroundError::ShapeMismatch(format!(
            "S̄ {n}x{d}, anchor {}x{}, W {}x{}, b {}",
            gb.anchor.rows(),
            gb.anchor.cols(),
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    let free: Vec<usize> = (0..d).filter(|&j| gb.free[j]).collect();
    let clamped: Vec<usize> = (0..d).filter(|&j| !gb.free[j]).collect();
    let mut next = gb.clone();
    for i in 0..n {
        for &j in &clamped {
            next.s.set(i, j, gb.anchor.get(i, j));
        }
    }
    if free.is_empty() {
        return Ok(next);
    }
    let (alpha, t2) = (gb.alpha, gb.anneal.t);
    let wtw = w.gram();
    let wtb = w.transpose().matvec(b).expect("b matches W rows");
    let k = free.len();
    let mut h = DenseMatrix::zeros(k, k);
    for (a, &fa) in free.iter().enumerate() {
        for (c, &fc) in free.iter().enumerate() {
            h.set(a, c, wtw.get(fa, fc));
        }
    }
    h.add_diagonal(alpha);
    let chol = Cholesky::factor(&h).map_err(GroundError::SingularSystem)?;

    // surrogate restricted to the free block: sᵀHs − 2 rhsᵀs + const
    let surrogate = |x: &[f64], rhs: &[f64]| -> f64 {
        let hx = h.matvec(x).expect("square");
        dot(x, &hx) - 2.0 * dot(x, rhs)
    };
    let mut block = DenseMatrix::zeros(n, k);
    par_rows_mut(&mut block, |i, out| {
        let (prev, anchor) = (gb.s.row(i), gb.anchor.row(i));
        let rhs: Vec<f64> = free
            .iter()
            .map(|&fj| {
                let coupled: f64 = clamped.iter().map(|&cj| wtw.get(fj, cj) * anchor[cj]).sum();
                wtb[fj] - coupled + alpha * anchor[fj] + t2 * (linearization_point(prev[fj]) - 0.5)
            })
            .collect();
        out.copy_from_slice(&rhs);
        chol.solve_in_place(out);
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let start: Vec<f64> = free.iter().map(|&fj| prev[fj]).collect();
        if surrogate(out, &rhs) > surrogate(&start, &rhs) {
            out.copy_from_slice(&box_coordinate_descent(&h, &rhs, &start, 500, 1e-13));
        }
    });
    for i in 0..n {
        for (a, &fj) in free.iter().enumerate() {
            next.s.set(i, fj, block.get(i, a));
        }
    }
    Ok(next)
}

pub fn binarize_grounding(gb: &GroundingBatch, eps: f64) -> Result<Vec<Vec<bool>>, GroundError> {
    Ok(binarize_matrix(&gb.s, eps)?)
}

/// The latent slice of every grounded row.
pub fn make_targets(gb: &GroundingBatch, space: &VariableSpace) -> DenseMatrix {
    let r = space.latent_range();
    let mut out = DenseMatrix::zeros(gb.s.rows(), r.len());
    for i in 0..gb.s.rows() {
        out.row_mut(i).copy_from_slice(&gb.s.row(i)[r.clone()]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{uniform_matrix, RngState};

    #[test]
    fn zero_constraints_return_anchor() {
        let anchor = DenseMatrix::from_rows(&[vec![0.2, 0.9, 0.4]]).unwrap();
        let gb = GroundingBatch::new(anchor.clone(), vec![true; 3], 0.5, 1e-3).unwrap();
        let next = ground_step(&gb, &DenseMatrix::zeros(2, 3), &[0.0, 0.0]).unwrap();
        assert!(next.s.sub(&anchor).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn huge_alpha_stays_at_anchor() {
        let mut rng = RngState::new(2);
        let anchor = uniform_matrix(&mut rng, 4, 5, 0.0, 1.0);
        let w = uniform_matrix(&mut rng, 3, 5, 0.0, 1.0);
        let gb = GroundingBatch::new(anchor.clone(), vec![true; 5], 1e6, 1e-3).unwrap();
        let next = ground_step(&gb, &w, &[1.0, 2.0, 1.0]).unwrap();
        assert!(next.s.sub(&anchor).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let b = [1.0, 1.0];
        let anchor = DenseMatrix::from_rows(&[vec![0.3, 0.5, 0.6]]).unwrap();
        let mut gb = GroundingBatch::new(anchor.clone(), vec![true; 3], 0.5, 1e-3).unwrap();
        gb.s = DenseMatrix::from_rows(&[vec![0.4, 0.4, 0.5]]).unwrap();
        gb.anneal.t = 0.2;
        let got = ground_step(&gb, &w, &b).unwrap();
        let sk = gb.s.row(0).to_vec();
        let a = anchor.row(0);
        let mut s = [0.5; 3];
        for _ in 0..100_000 {
            let mut g = [0.0; 3];
            for (r, &bi) in w.iter_rows().zip(&b) {
                let res = dot(r, &s) - bi;
                for j in 0..3 {
                    g[j] += 2.0 * res * r[j];
                }
            }
            for j in 0..3 {
                g[j] += 2.0 * 0.5 * (s[j] - a[j]) + 0.2 * (1.0 - 2.0 * sk[j]);
                s[j] -= 0.01 * g[j];
            }
        }
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        for j in 0..3 {
            assert!((got.s.get(0, j) - s[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn clamped_coordinates_follow_anchor() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let anchor = DenseMatrix::from_rows(&[vec![1.0, 0.2]]).unwrap();
        let gb = GroundingBatch::new(anchor, vec![false, true], 0.5, 1e-3).unwrap();
        let next = ground_step(&gb, &w, &[1.0]).unwrap();
        assert_eq!(next.s.get(0, 0), 1.0);
        // (1 + s − 1)² + 0.5(s − 0.2)² is minimized at s = 0.1/1.5
        assert!((next.s.get(0, 1) - 0.1 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn singular_without_alpha() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let gb = GroundingBatch::new(DenseMatrix::zeros(1, 2), vec![true; 2], 0.0, 1e-3).unwrap();
        assert!(matches!(ground_step(&gb, &w, &[1.0]), Err(GroundError::SingularSystem(_))));
    }

    #[test]
    fn binarize_and_targets() {
        let s = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.9999]]).unwrap();
        let gb = GroundingBatch::new(s, vec![true; 3], 0.5, 1e-3).unwrap();
        assert_eq!(binarize_grounding(&gb, 1e-3).unwrap(), vec![vec![true, false, true]]);
        let mut half = gb.clone();
        half.s.set(0, 1, 0.5);
        assert!(binarize_grounding(&half, 1e-3).is_err());
        let space = VariableSpace { observed_input_bits: 1, latent_bits: 1, output_bits: 1, ..VariableSpace::flat(0) };
        assert_eq!(make_targets(&gb, &space).as_slice(), &[0.0]);
        assert_eq!(make_targets(&gb, &VariableSpace::flat(3)).as_slice(), gb.s.as_slice());
        let none = VariableSpace { observed_input_bits: 3, latent_bits: 0, ..VariableSpace::flat(0) };
        assert_eq!(make_targets(&gb, &none).cols(), 0);
    }
}
