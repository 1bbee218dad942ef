//! Variable spaces, cardinality constraints and their text formats.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{DenseMatrix, RngState};
use crate::reasoner::{self, InferenceProblem, Limits, Status};

pub const SYSTEM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("invalid variable space: {0}")]
    InvalidSpace(String),
    #[error("constraint {index}: {reason}")]
    InvalidConstraint { index: usize, reason: String },
    #[error("constraint {0} duplicates an earlier one")]
    DuplicateConstraint(usize),
    #[error("entry ({row}, {col}) = {value} is not within tolerance of 0 or 1")]
    NotBoolean { row: usize, col: usize, value: f64 },
    #[error("assignment has {got} variables, space has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("systems are defined over different variable spaces")]
    SpaceMismatch,
    #[error("unsupported constraint file version {0}")]
    VersionMismatch(u32),
    #[error("malformed constraint document: {0}")]
    Json(String),
}

/// Layout of the Boolean variables: observed inputs, then latent bits (the last
/// `auxiliary_bits` of which are existential helpers), then outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpace {
    pub observed_input_bits: usize,
    pub latent_bits: usize,
    pub output_bits: usize,
    #[serde(default)]
    pub auxiliary_bits: usize,
    /// Disjoint one-hot groups.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl VariableSpace {
    /// Space with only latent bits and no structure.
    pub fn flat(d: usize) -> Self {
        VariableSpace {
            observed_input_bits: 0,
            latent_bits: d,
            output_bits: 0,
            auxiliary_bits: 0,
            groups: Vec::new(),
            names: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.observed_input_bits + self.latent_bits + self.output_bits
    }

    pub fn latent_range(&self) -> std::ops::Range<usize> {
        self.observed_input_bits..self.observed_input_bits + self.latent_bits
    }

    pub fn output_range(&self) -> std::ops::Range<usize> {
        let s = self.observed_input_bits + self.latent_bits;
        s..s + self.output_bits
    }

    pub fn auxiliary_range(&self) -> std::ops::Range<usize> {
        let end = self.observed_input_bits + self.latent_bits;
        end - self.auxiliary_bits..end
    }

    pub fn is_auxiliary(&self, i: usize) -> bool {
        self.auxiliary_range().contains(&i)
    }

    /// Indices of all non-auxiliary variables, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.is_auxiliary(i)).collect()
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        let d = self.dim();
        if self.auxiliary_bits > self.latent_bits {
            return Err(ConstraintError::InvalidSpace(format!(
                "{} auxiliary bits but only {} latent bits",
                self.auxiliary_bits, self.latent_bits
            )));
        }
        let logical = d - self.auxiliary_bits;
        if self.auxiliary_bits > logical {
            return Err(ConstraintError::InvalidSpace(format!(
                "{} auxiliary bits exceed the {logical} logical variables",
                self.auxiliary_bits
            )));
        }
        let mut seen = vec![false; d];
        for (g, group) in self.groups.iter().enumerate() {
            if group.is_empty() {
                return Err(ConstraintError::InvalidSpace(format!("group {g} is empty")));
            }
            for &i in group {
                if i >= d {
                    return Err(ConstraintError::InvalidSpace(format!("group {g} references variable {i} >= {d}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(ConstraintError::InvalidSpace(format!("variable {i} is in two groups")));
                }
            }
        }
        if let Some(names) = &self.names {
            if names.len() != d {
                return Err(ConstraintError::InvalidSpace(format!("{} names for {d} variables", names.len())));
            }
        }
        Ok(())
    }
}

/// `lo <= Σ_{i in vars} s_i <= hi`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CardinalityConstraint {
    #[serde(rename = "w")]
    pub vars: Vec<usize>,
    pub lo: u32,
    pub hi: u32,
}

impl CardinalityConstraint {
    /// Sorts and dedups `vars`.
    pub fn new(mut vars: Vec<usize>, lo: u32, hi: u32) -> Self {
        vars.sort_unstable();
        vars.dedup();
        CardinalityConstraint { vars, lo, hi }
    }

    pub fn size(&self) -> u32 {
        self.vars.len() as u32
    }

    pub fn weights(&self, d: usize) -> Vec<bool> {
        let mut w = vec![false; d];
        for &i in &self.vars {
            w[i] = true;
        }
        w
    }

    pub fn sum(&self, s: &[bool]) -> u32 {
        self.vars.iter().filter(|&&i| s[i]).count() as u32
    }

    pub fn is_vacuous(&self) -> bool {
        self.lo == 0 && self.hi >= self.size()
    }

    fn check(&self, index: usize, d: usize) -> Result<(), ConstraintError> {
        let bad = |reason: String| Err(ConstraintError::InvalidConstraint { index, reason });
        if self.vars.is_empty() {
            return bad("all weights are zero".into());
        }
        if self.vars.windows(2).any(|p| p[0] >= p[1]) {
            return bad("variable list is not strictly increasing".into());
        }
        if let Some(&v) = self.vars.iter().find(|&&v| v >= d) {
            return bad(format!("variable {v} outside dimension {d}"));
        }
        if self.lo > self.hi || self.hi > self.size() {
            return bad(format!("bounds [{}, {}] invalid for {} variables", self.lo, self.hi, self.size()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardinalitySystem {
    pub space: VariableSpace,
    pub constraints: Vec<CardinalityConstraint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDocument {
    version: u32,
    space: VariableSpace,
    constraints: Vec<CardinalityConstraint>,
}

impl CardinalitySystem {
    pub fn new(space: VariableSpace, constraints: Vec<CardinalityConstraint>) -> Result<Self, ConstraintError> {
        let sys = CardinalitySystem { space, constraints };
        sys.validate()?;
        Ok(sys)
    }

    pub fn empty(space: VariableSpace) -> Self {
        CardinalitySystem { space, constraints: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        self.space.validate()?;
        let d = self.dim();
        let mut seen = HashSet::new();
        for (i, c) in self.constraints.iter().enumerate() {
            c.check(i, d)?;
            if !seen.insert(c) {
                return Err(ConstraintError::DuplicateConstraint(i));
            }
        }
        Ok(())
    }

    /// 0/1 weight matrix, one row per constraint.
    pub fn weight_matrix(&self) -> DenseMatrix {
        let d = self.dim();
        let mut m = DenseMatrix::zeros(self.len(), d);
        for (r, c) in self.constraints.iter().enumerate() {
            for &i in &c.vars {
                m.set(r, i, 1.0);
            }
        }
        m
    }

    /// Constraints sorted by (vars, lo, hi); used to compare systems as sets.
    pub fn canonical(&self) -> CardinalitySystem {
        let mut constraints = self.constraints.clone();
        constraints.sort_by(|a, b| (&a.vars, a.lo, a.hi).cmp(&(&b.vars, b.lo, b.hi)));
        CardinalitySystem { space: self.space.clone(), constraints }
    }

    pub fn to_json(&self) -> String {
        let doc = SystemDocument {
            version: SYSTEM_FORMAT_VERSION,
            space: self.space.clone(),
            constraints: self.constraints.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("constraint document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ConstraintError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| ConstraintError::Json(e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).ok_or_else(|| ConstraintError::Json("missing version".into()))?;
        if version != SYSTEM_FORMAT_VERSION as u64 {
            return Err(ConstraintError::VersionMismatch(version as u32));
        }
        let doc: SystemDocument = serde_json::from_value(v).map_err(|e| ConstraintError::Json(e.to_string()))?;
        CardinalitySystem::new(doc.space, doc.constraints)
    }
}

/// Training-time relaxation of a constraint matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSystem {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub w0: DenseMatrix,
    pub lambda: f64,
    pub t1: f64,
    pub b_mode: BiasMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    Fixed,
    Learned,
}

/// Rounded rows of a Boolean `W`, with `b` kept as a provisional center.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedRows {
    pub rows: Vec<Vec<usize>>,
    pub provisional_b: Vec<f64>,
}

pub fn binarize_system(rs: &RelaxedSystem, eps: f64) -> Result<BinarizedRows, ConstraintError> {
    let rows = binarize_matrix(&rs.w, eps)?
        .into_iter()
        .map(|r| r.iter().enumerate().filter(|&(_, &v)| v).map(|(i, _)| i).collect())
        .collect();
    Ok(BinarizedRows { rows, provisional_b: rs.b.clone() })
}

/// Rounds every entry to 0/1, failing on the first entry farther than `eps`.
pub fn binarize_matrix(m: &DenseMatrix, eps: f64) -> Result<Vec<Vec<bool>>, ConstraintError> {
    let mut out = Vec::with_capacity(m.rows());
    for (r, row) in m.iter_rows().enumerate() {
        let mut bits = Vec::with_capacity(row.len());
        for (c, &v) in row.iter().enumerate() {
            if v.abs() <= eps {
                bits.push(false);
            } else if (1.0 - v).abs() <= eps {
                bits.push(true);
            } else {
                return Err(ConstraintError::NotBoolean { row: r, col: c, value: v });
            }
        }
        out.push(bits);
    }
    Ok(out)
}

/// Drops exact duplicates (first kept), empty rows and vacuous bounds.
pub fn deduplicate(sys: &CardinalitySystem) -> CardinalitySystem {
    let mut seen = HashSet::new();
    let constraints = sys
        .constraints
        .iter()
        .filter(|c| !c.vars.is_empty() && !c.is_vacuous())
        .filter(|c| seen.insert((*c).clone()))
        .cloned()
        .collect();
    CardinalitySystem { space: sys.space.clone(), constraints }
}

/// Narrowest integer interval holding at least a fraction `k` of `sums`;
/// ties go to the smaller lower end. `sums` must be nonempty.
pub fn estimate_bounds_from_sums(sums: &[u32], k: f64) -> (u32, u32) {
    assert!(!sums.is_empty(), "bound estimation needs samples");
    let mut s = sums.to_vec();
    s.sort_unstable();
    let n = s.len();
    let need = ((k * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut best = (s[0], s[n - 1]);
    for i in 0..=n - need {
        let (lo, hi) = (s[i], s[i + need - 1]);
        if hi - lo < best.1 - best.0 || (hi - lo == best.1 - best.0 && lo < best.0) {
            best = (lo, hi);
        }
    }
    best
}

pub fn estimate_bounds(vars: &[usize], samples: &[Vec<bool>], k: f64) -> (u32, u32) {
    let sums: Vec<u32> = samples.iter().map(|s| vars.iter().filter(|&&i| s[i]).count() as u32).collect();
    estimate_bounds_from_sums(&sums, k)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    pub satisfied: bool,
    pub sums: Vec<u32>,
}

pub fn evaluate(sys: &CardinalitySystem, s: &[bool]) -> Result<Evaluation, ConstraintError> {
    if s.len() != sys.dim() {
        return Err(ConstraintError::DimensionMismatch { expected: sys.dim(), got: s.len() });
    }
    let sums: Vec<u32> = sys.constraints.iter().map(|c| c.sum(s)).collect();
    let satisfied = sys.constraints.iter().zip(&sums).all(|(c, &v)| c.lo <= v && v <= c.hi);
    Ok(Evaluation { satisfied, sums })
}

/// Anything that decides membership of assignments to the visible
/// (non-auxiliary) variables of a space.
pub trait Acceptor {
    fn space(&self) -> &VariableSpace;
    /// `visible` lists values of [`VariableSpace::visible_indices`] in order.
    fn accepts(&self, visible: &[bool]) -> bool;
}

impl Acceptor for CardinalitySystem {
    fn space(&self) -> &VariableSpace {
        &self.space
    }

    /// Auxiliary variables are existential: accepted if some completion works.
    fn accepts(&self, visible: &[bool]) -> bool {
        let idx = self.space.visible_indices();
        if self.space.auxiliary_bits == 0 {
            let mut s = vec![false; self.dim()];
            for (&i, &v) in idx.iter().zip(visible) {
                s[i] = v;
            }
            return evaluate(self, &s).map(|e| e.satisfied).unwrap_or(false);
        }
        let mut fixed = vec![None; self.dim()];
        for (&i, &v) in idx.iter().zip(visible) {
            fixed[i] = Some(v);
        }
        let problem = InferenceProblem::feasibility(self.clone(), fixed, Limits::default());
        match reasoner::solve(&problem) {
            Ok(sol) => matches!(sol.status, Status::Optimal | Status::Feasible),
            Err(_) => false,
        }
    }
}

/// Membership given by a closure over the visible variables.
pub struct Predicate<F> {
    pub space: VariableSpace,
    pub f: F,
}

impl<F: Fn(&[bool]) -> bool> Acceptor for Predicate<F> {
    fn space(&self) -> &VariableSpace {
        &self.space
    }

    fn accepts(&self, visible: &[bool]) -> bool {
        (self.f)(visible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equivalence {
    pub equivalent: bool,
    /// False when the verdict rests on sampling.
    pub exhaustive: bool,
    pub checked: u64,
    pub counterexample: Option<Vec<bool>>,
}

/// Number of uniform samples when the visible space is too large to enumerate.
pub const EQUIVALENCE_SAMPLES: u64 = 100_000;

/// Compares two acceptors over all visible assignments when there are at most
/// `max_vars` visible variables, otherwise over uniform samples drawn from `seed`.
/// Stops at the first disagreement.
pub fn semantic_equivalence<A: Acceptor + ?Sized, B: Acceptor + ?Sized>(
    a: &A,
    b: &B,
    max_vars: usize,
    seed: u64,
) -> Result<Equivalence, ConstraintError> {
    let (sa, sb) = (a.space(), b.space());
    if sa.dim() != sb.dim() || sa.auxiliary_range() != sb.auxiliary_range() {
        return Err(ConstraintError::SpaceMismatch);
    }
    let n = sa.visible_indices().len();
    let exhaustive = n <= max_vars;
    let total = if exhaustive { 1u64 << n } else { EQUIVALENCE_SAMPLES };
    let mut rng = RngState::new(seed);
    let mut v = vec![false; n];
    for k in 0..total {
        if exhaustive {
            for (j, bit) in v.iter_mut().enumerate() {
                *bit = (k >> (n - 1 - j)) & 1 == 1;
            }
        } else {
            for bit in v.iter_mut() {
                *bit = rng.next_u64() & 1 == 1;
            }
        }
        if a.accepts(&v) != b.accepts(&v) {
            return Ok(Equivalence { equivalent: false, exhaustive, checked: k + 1, counterexample: Some(v) });
        }
    }
    Ok(Equivalence { equivalent: true, exhaustive, checked: total, counterexample: None })
}

fn opb_terms(vars: &[usize], sign: &str) -> String {
    vars.iter().map(|&i| format!("{sign}1 x{}", i + 1)).collect::<Vec<_>>().join(" ")
}

/// OPB text: a lower-bound line per constraint plus a negated upper-bound line
/// when the upper bound is binding.
pub fn export_opb(sys: &CardinalitySystem) -> String {
    let mut lines = Vec::new();
    for c in &sys.constraints {
        lines.push(format!("{} >= {} ;", opb_terms(&c.vars, "+"), c.lo));
        if c.hi < c.size() {
            lines.push(format!("{} >= -{} ;", opb_terms(&c.vars, "-"), c.hi));
        }
    }
    let mut out = format!("* #variable= {} #constraint= {}\n", sys.dim(), lines.len());
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn export_smt2(sys: &CardinalitySystem) -> String {
    let mut out = String::from("(set-logic QF_LIA)\n");
    for i in 1..=sys.dim() {
        let _ = writeln!(out, "(declare-fun x{i} () Int)");
        let _ = writeln!(out, "(assert (and (>= x{i} 0) (<= x{i} 1)))");
    }
    for c in &sys.constraints {
        let sum = if c.vars.len() == 1 {
            format!("x{}", c.vars[0] + 1)
        } else {
            let terms: Vec<String> = c.vars.iter().map(|&i| format!("x{}", i + 1)).collect();
            format!("(+ {})", terms.join(" "))
        };
        let _ = writeln!(out, "(assert (<= {} {sum} {}))", c.lo, c.hi);
    }
    out.push_str("(check-sat)\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sys(d: usize, cs: &[(&[usize], u32, u32)]) -> CardinalitySystem {
        let constraints = cs.iter().map(|(v, lo, hi)| CardinalityConstraint::new(v.to_vec(), *lo, *hi)).collect();
        CardinalitySystem::new(VariableSpace::flat(d), constraints).unwrap()
    }

    fn relaxed(rows: &[Vec<f64>]) -> RelaxedSystem {
        let w = DenseMatrix::from_rows(rows).unwrap();
        RelaxedSystem { w0: w.clone(), b: vec![1.0; rows.len()], w, lambda: 0.1, t1: 0.0, b_mode: BiasMode::Fixed }
    }

    #[test]
    fn binarize_rounds_within_tolerance() {
        let b = binarize_system(&relaxed(&[vec![0.9996, 0.0004]]), 1e-3).unwrap();
        assert_eq!(b.rows, vec![vec![0]]);
        assert_eq!(b.provisional_b, vec![1.0]);
        let e = binarize_system(&relaxed(&[vec![1.0, 0.4]]), 1e-3).unwrap_err();
        assert_eq!(e, ConstraintError::NotBoolean { row: 0, col: 1, value: 0.4 });
    }

    #[test]
    fn binarize_is_identity_on_boolean() {
        let b = binarize_system(&relaxed(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]), 1e-3).unwrap();
        assert_eq!(b.rows, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn dedup_rules() {
        let s = CardinalitySystem {
            space: VariableSpace::flat(4),
            constraints: vec![
                CardinalityConstraint::new(vec![0, 1], 1, 1),
                CardinalityConstraint::new(vec![0, 1], 1, 1),
                CardinalityConstraint::new(vec![], 0, 0),
                CardinalityConstraint::new(vec![0, 1, 2, 3], 0, 4),
                CardinalityConstraint::new(vec![2], 1, 1),
            ],
        };
        let d = deduplicate(&s);
        assert_eq!(d.constraints, vec![CardinalityConstraint::new(vec![0, 1], 1, 1), CardinalityConstraint::new(vec![2], 1, 1)]);
        assert_eq!(deduplicate(&d), d);
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(estimate_bounds_from_sums(&[2, 2, 2], 1.0), (2, 2));
        assert_eq!(estimate_bounds_from_sums(&[1, 2, 3, 4, 100], 0.8), (1, 4));
        assert_eq!(estimate_bounds_from_sums(&[5, 1, 9], 1.0), (1, 9));
        // two width-0 windows: smaller lo wins
        assert_eq!(estimate_bounds_from_sums(&[3, 7], 0.5), (3, 3));
        let samples = vec![vec![true, false, true], vec![false, false, true]];
        assert_eq!(estimate_bounds(&[0, 2], &samples, 1.0), (1, 2));
    }

    #[test]
    fn evaluate_examples() {
        let e = evaluate(&CardinalitySystem::empty(VariableSpace::flat(2)), &[true, false]).unwrap();
        assert!(e.satisfied && e.sums.is_empty());
        let s = sys(2, &[(&[0, 1], 2, 2)]);
        assert_eq!(evaluate(&s, &[true, true]).unwrap(), Evaluation { satisfied: true, sums: vec![2] });
        assert!(!evaluate(&s, &[true, false]).unwrap().satisfied);
        assert!(matches!(evaluate(&s, &[true]), Err(ConstraintError::DimensionMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn validation_catches_bad_input() {
        let space = VariableSpace::flat(2);
        let bad = CardinalitySystem::new(space.clone(), vec![CardinalityConstraint::new(vec![0], 0, 2)]);
        assert!(matches!(bad, Err(ConstraintError::InvalidConstraint { index: 0, .. })));
        let dup = CardinalitySystem::new(space, vec![CardinalityConstraint::new(vec![0], 1, 1); 2]);
        assert_eq!(dup.unwrap_err(), ConstraintError::DuplicateConstraint(1));
        let mut aux = VariableSpace::flat(3);
        aux.auxiliary_bits = 2;
        assert!(aux.validate().is_err());
        let mut grp = VariableSpace::flat(3);
        grp.groups = vec![vec![0, 1], vec![1, 2]];
        assert!(grp.validate().is_err());
    }

    #[test]
    fn equivalence_examples() {
        let a = sys(1, &[(&[0], 1, 1)]);
        let b = sys(1, &[(&[0], 0, 0)]);
        assert!(semantic_equivalence(&a, &a, 24, 0).unwrap().equivalent);
        let e = semantic_equivalence(&a, &b, 24, 0).unwrap();
        assert!(!e.equivalent && e.exhaustive);
        assert!(matches!(semantic_equivalence(&a, &sys(2, &[]), 24, 0), Err(ConstraintError::SpaceMismatch)));
    }

    #[test]
    fn auxiliary_bits_are_existential() {
        // a + y = 1 can always be met by picking the helper a
        let space = VariableSpace { observed_input_bits: 2, latent_bits: 1, output_bits: 1, auxiliary_bits: 1, groups: vec![], names: None };
        let s = CardinalitySystem::new(space.clone(), vec![CardinalityConstraint::new(vec![2, 3], 1, 1)]).unwrap();
        let any = Predicate { space, f: |_: &[bool]| true };
        assert!(semantic_equivalence(&s, &any, 24, 0).unwrap().equivalent);
    }

    #[test]
    fn opb_and_smt_text() {
        let s = sys(2, &[(&[0, 1], 1, 1)]);
        assert_eq!(export_opb(&s), "* #variable= 2 #constraint= 2\n+1 x1 +1 x2 >= 1 ;\n-1 x1 -1 x2 >= -1 ;\n");
        let full = sys(2, &[(&[0, 1], 1, 2)]);
        assert_eq!(export_opb(&full), "* #variable= 2 #constraint= 1\n+1 x1 +1 x2 >= 1 ;\n");
        assert_eq!(export_opb(&CardinalitySystem::empty(VariableSpace::flat(3))), "* #variable= 3 #constraint= 0\n");
        let smt = export_smt2(&s);
        assert!(smt.contains("(assert (<= 1 (+ x1 x2) 1))"));
        assert!(smt.ends_with("(check-sat)\n"));
        assert_eq!(smt, export_smt2(&s));
    }

    #[test]
    fn json_round_trip_and_version() {
        let s = sys(3, &[(&[2, 0], 1, 2), (&[1], 0, 0)]);
        let text = s.to_json();
        assert!(text.contains("\"w\": [\n        0,\n        2\n      ]") || text.contains("\"w\":[0,2]"));
        assert_eq!(CardinalitySystem::from_json(&text).unwrap(), s);
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert_eq!(CardinalitySystem::from_json(&bumped).unwrap_err(), ConstraintError::VersionMismatch(2));
    }
}
