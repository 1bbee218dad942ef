//! Exact inference: hard cardinality constraints, soft per-variable
//! preferences, depth-first branch and bound with interval propagation.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{CardinalityConstraint, CardinalitySystem, VariableSpace};

/// Largest number of free variables [`brute_force_solve`] enumerates.
pub const MAX_BRUTE_FORCE_FREE: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReasonError {
    #[error("fixed assignment violates constraint {0}")]
    InconsistentFixed(usize),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("{0} free variables is too many to enumerate")]
    TooLarge(usize),
    #[error("OPB syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub value: bool,
    pub weight: f64,
}

impl Preference {
    pub const NONE: Preference = Preference { value: false, weight: 0.0 };

    /// Preferred value `round(p)` with weight `|2p − 1|`.
    pub fn from_probability(p: f64) -> Self {
        Preference { value: p >= 0.5, weight: (2.0 * p - 1.0).abs() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub max_nodes: u64,
    pub max_time: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_nodes: 10_000_000, max_time: Duration::from_secs(60) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceProblem {
    pub system: CardinalitySystem,
    pub preferences: Vec<Preference>,
    pub fixed: Vec<Option<bool>>,
    pub limits: Limits,
}

impl InferenceProblem {
    pub fn new(
        system: CardinalitySystem,
        preferences: Vec<Preference>,
        fixed: Vec<Option<bool>>,
        limits: Limits,
    ) -> Result<Self, ReasonError> {
        let p = InferenceProblem { system, preferences, fixed, limits };
        p.validate()?;
        Ok(p)
    }

    /// No preferences: any feasible completion of `fixed` is optimal.
    pub fn feasibility(system: CardinalitySystem, fixed: Vec<Option<bool>>, limits: Limits) -> Self {
        let preferences = vec![Preference::NONE; system.dim()];
        InferenceProblem { system, preferences, fixed, limits }
    }

    pub fn validate(&self) -> Result<(), ReasonError> {
        let d = self.system.dim();
        if self.preferences.len() != d || self.fixed.len() != d {
            return Err(ReasonError::InvalidProblem(format!(
                "{} preferences and {} fixed entries for {d} variables",
                self.preferences.len(),
                self.fixed.len()
            )));
        }
        if let Some(i) = self.preferences.iter().position(|p| !(p.weight >= 0.0) || !p.weight.is_finite()) {
            return Err(ReasonError::InvalidProblem(format!("preference {i} has an invalid weight")));
        }
        self.system.validate().map_err(|e| ReasonError::InvalidProblem(e.to_string()))
    }

    fn cost_of(&self, s: &[bool]) -> f64 {
        self.preferences.iter().zip(s).filter(|(p, &v)| p.value != v).map(|(p, _)| p.weight).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Feasible,
    Infeasible,
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub assignment: Vec<bool>,
    pub cost: f64,
    pub status: Status,
}

#[derive(Serialize, Deserialize)]
struct SolutionDocument {
    status: Status,
    cost: f64,
    assignment: Vec<u8>,
}

impl Solution {
    pub fn to_json(&self) -> String {
        let doc = SolutionDocument {
            status: self.status,
            cost: self.cost,
            assignment: self.assignment.iter().map(|&b| b as u8).collect(),
        };
        serde_json::to_string(&doc).expect("solution serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let doc: SolutionDocument = serde_json::from_str(text)?;
        Ok(Solution { assignment: doc.assignment.iter().map(|&b| b != 0).collect(), cost: doc.cost, status: doc.status })
    }
}

const UNSET: i8 = -1;

struct Search<'a> {
    p: &'a InferenceProblem,
    cons: &'a [CardinalityConstraint],
    occ: Vec<Vec<usize>>,
    order: Vec<usize>,
    val: Vec<i8>,
    sum: Vec<u32>,
    free: Vec<u32>,
    trail: Vec<usize>,
    cost: f64,
    best: Option<(Vec<bool>, f64)>,
    nodes: u64,
    start: Instant,
    out_of_budget: bool,
}

impl<'a> Search<'a> {
    fn new(p: &'a InferenceProblem) -> Self {
        let d = p.system.dim();
        let cons = &p.system.constraints;
        let mut occ = vec![Vec::new(); d];
        for (c, con) in cons.iter().enumerate() {
            for &v in &con.vars {
                occ[v].push(c);
            }
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| p.preferences[b].weight.total_cmp(&p.preferences[a].weight).then(a.cmp(&b)));
        Search {
            p,
            cons,
            occ,
            order,
            val: vec![UNSET; d],
            sum: vec![0; cons.len()],
            free: cons.iter().map(|c| c.size()).collect(),
            trail: Vec::new(),
            cost: 0.0,
            best: None,
            nodes: 0,
            start: Instant::now(),
            out_of_budget: false,
        }
    }

    fn assign(&mut self, v: usize, value: bool) {
        self.val[v] = value as i8;
        self.trail.push(v);
        for &c in &self.occ[v] {
            self.free[c] -= 1;
            if value {
                self.sum[c] += 1;
            }
        }
        let pref = self.p.preferences[v];
        if pref.value != value {
            self.cost += pref.weight;
        }
    }

    fn undo_to(&mut self, len: usize, cost: f64) {
        while self.trail.len() > len {
            let v = self.trail.pop().expect("trail nonempty");
            let value = self.val[v] == 1;
            for &c in &self.occ[v] {
                self.free[c] += 1;
                if value {
                    self.sum[c] -= 1;
                }
            }
            self.val[v] = UNSET;
        }
        self.cost = cost;
    }

    fn violated(&self, c: usize) -> bool {
        let con = &self.cons[c];
        self.sum[c] > con.hi || self.sum[c] + self.free[c] < con.lo
    }

    /// Forces variables to fixpoint starting from the constraints in `queue`.
    /// Returns false on conflict.
    fn propagate(&mut self, mut queue: Vec<usize>) -> bool {
        let mut queued = vec![false; self.cons.len()];
        for &c in &queue {
            queued[c] = true;
        }
        while let Some(c) = queue.pop() {
            queued[c] = false;
            if self.violated(c) {
                return false;
            }
            if self.free[c] == 0 {
                continue;
            }
            let con = &self.cons[c];
            let force = if self.sum[c] == con.hi {
                false
            } else if self.sum[c] + self.free[c] == con.lo {
                true
            } else {
                continue;
            };
            let targets: Vec<usize> = con.vars.iter().copied().filter(|&v| self.val[v] == UNSET).collect();
            for v in targets {
                self.assign(v, force);
                for &o in &self.occ[v] {
                    if !queued[o] {
                        queued[o] = true;
                        queue.push(o);
                    }
                }
            }
        }
        true
    }

    fn budget_hit(&mut self) -> bool {
        if self.out_of_budget {
            return true;
        }
        if self.nodes >= self.p.limits.max_nodes
            || (self.nodes % 1024 == 0 && self.start.elapsed() >= self.p.limits.max_time)
        {
            self.out_of_budget = true;
        }
        self.out_of_budget
    }

    fn dfs(&mut self) {
        if let Some((_, b)) = &self.best {
            if self.cost >= *b {
                return;
            }
        }
        let Some(&v) = self.order.iter().find(|&&v| self.val[v] == UNSET) else {
            let s: Vec<bool> = self.val.iter().map(|&x| x == 1).collect();
            self.best = Some((s, self.cost));
            return;
        };
        let pref = self.p.preferences[v].value;
        for value in [pref, !pref] {
            if self.budget_hit() {
                return;
            }
            self.nodes += 1;
            let (len, cost) = (self.trail.len(), self.cost);
            self.assign(v, value);
            let touched = self.occ[v].clone();
            if self.propagate(touched) {
                self.dfs();
            }
            self.undo_to(len, cost);
        }
    }
}

fn preferred_completion(p: &InferenceProblem) -> Vec<bool> {
    p.fixed.iter().zip(&p.preferences).map(|(f, pr)| f.unwrap_or(pr.value)).collect()
}

/// Fixed values alone must not break any constraint.
fn check_fixed(p: &InferenceProblem) -> Result<(), ReasonError> {
    for (c, con) in p.system.constraints.iter().enumerate() {
        let ones = con.vars.iter().filter(|&&v| p.fixed[v] == Some(true)).count() as u32;
        let open = con.vars.iter().filter(|&&v| p.fixed[v].is_none()).count() as u32;
        if ones > con.hi || ones + open < con.lo {
            return Err(ReasonError::InconsistentFixed(c));
        }
    }
    Ok(())
}

pub fn solve(p: &InferenceProblem) -> Result<Solution, ReasonError> {
    p.validate()?;
    check_fixed(p)?;
    let mut s = Search::new(p);
    for (v, f) in p.fixed.iter().enumerate() {
        if let Some(value) = *f {
            s.assign(v, value);
        }
    }
    let all: Vec<usize> = (0..p.system.len()).collect();
    if s.propagate(all) {
        s.dfs();
    }
    let exhausted = !s.out_of_budget;
    Ok(match s.best {
        Some((assignment, _)) => {
            let status = if exhausted { Status::Optimal } else { Status::Feasible };
            Solution { cost: p.cost_of(&assignment), assignment, status }
        }
        None => {
            let assignment = preferred_completion(p);
            let status = if exhausted { Status::Infeasible } else { Status::BudgetExceeded };
            Solution { cost: p.cost_of(&assignment), assignment, status }
        }
    })
}

/// Exhaustive optimum over the free variables, ties to the lexicographically
/// smallest assignment.
pub fn brute_force_solve(p: &InferenceProblem) -> Result<Solution, ReasonError> {
    p.validate()?;
    check_fixed(p)?;
    let free: Vec<usize> = (0..p.system.dim()).filter(|&v| p.fixed[v].is_none()).collect();
    if free.len() > MAX_BRUTE_FORCE_FREE {
        return Err(ReasonError::TooLarge(free.len()));
    }
    let mut s: Vec<bool> = p.fixed.iter().map(|f| f.unwrap_or(false)).collect();
    let mut best: Option<(Vec<bool>, f64)> = None;
    let k = free.len();
    for mask in 0u64..(1u64 << k) {
        for (j, &v) in free.iter().enumerate() {
            s[v] = (mask >> (k - 1 - j)) & 1 == 1;
        }
        let ok = p.system.constraints.iter().all(|c| {
            let t = c.sum(&s);
            c.lo <= t && t <= c.hi
        });
        if !ok {
            continue;
        }
        let cost = p.cost_of(&s);
        if best.as_ref().map_or(true, |(_, b)| cost < *b) {
            best = Some((s.clone(), cost));
        }
    }
    Ok(match best {
        Some((assignment, cost)) => Solution { assignment, cost, status: Status::Optimal },
        None => {
            let assignment = preferred_completion(p);
            Solution { cost: p.cost_of(&assignment), assignment, status: Status::Infeasible }
        }
    })
}

/// Reads unit-coefficient OPB as written by the exporter. Lines with `+1`
/// terms give lower bounds, lines with `-1` terms give upper bounds. An upper
/// bound directly after a lower bound on the same variables joins it; exact
/// repeats are dropped.
pub fn parse_opb(text: &str) -> Result<CardinalitySystem, ReasonError> {
    parse_opb_inner(text, None)
}

/// As [`parse_opb`] but attaches a known variable space.
pub fn parse_opb_with_space(text: &str, space: VariableSpace) -> Result<CardinalitySystem, ReasonError> {
    parse_opb_inner(text, Some(space))
}

fn parse_opb_inner(text: &str, space: Option<VariableSpace>) -> Result<CardinalitySystem, ReasonError> {
    let mut declared: Option<usize> = None;
    let mut rows: Vec<(Vec<usize>, Option<u32>, Option<u32>, usize)> = Vec::new();
    let mut max_var = 0usize;
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let err = |message: String| ReasonError::Syntax { line: line_no, message };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('*') {
            let toks: Vec<&str> = comment.split_whitespace().collect();
            if let Some(p) = toks.iter().position(|&t| t == "#variable=") {
                let n = toks.get(p + 1).and_then(|t| t.parse().ok()).ok_or_else(|| err("bad #variable= header".into()))?;
                declared = Some(n);
            }
            continue;
        }
        let body = line.strip_suffix(';').ok_or_else(|| err("missing ';'".into()))?;
        let toks: Vec<&str> = body.split_whitespace().collect();
        let ge = toks.iter().position(|&t| t == ">=").ok_or_else(|| err("expected '>='".into()))?;
        if ge + 2 != toks.len() {
            return Err(err("expected exactly one value after '>='".into()));
        }
        let rhs: i64 = toks[ge + 1].parse().map_err(|_| err(format!("bad right-hand side '{}'", toks[ge + 1])))?;
        let terms = &toks[..ge];
        if terms.is_empty() || terms.len() % 2 != 0 {
            return Err(err("terms must be coefficient/variable pairs".into()));
        }
        let mut sign = 0i64;
        let mut vars = Vec::new();
        for pair in terms.chunks(2) {
            let coef: i64 = match pair[0] {
                "+1" | "1" => 1,
                "-1" => -1,
                t => return Err(err(format!("unsupported coefficient '{t}'"))),
            };
            if sign != 0 && coef != sign {
                return Err(err("mixed coefficient signs".into()));
            }
            sign = coef;
            let idx: usize = pair[1]
                .strip_prefix('x')
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .ok_or_else(|| err(format!("bad variable '{}'", pair[1])))?;
            max_var = max_var.max(idx);
            vars.push(idx - 1);
        }
        let size = vars.len();
        vars.sort_unstable();
        vars.dedup();
        if vars.len() != size {
            return Err(err("repeated variable".into()));
        }
        if sign > 0 {
            if rhs < 0 || rhs > size as i64 {
                return Err(err(format!("lower bound {rhs} outside [0, {size}]")));
            }
            rows.push((vars, Some(rhs as u32), None, line_no));
        } else {
            if rhs > 0 || -rhs > size as i64 {
                return Err(err(format!("upper bound {} outside [0, {size}]", -rhs)));
            }
            let hi = Some((-rhs) as u32);
            // an upper bound closes the lower bound written just before it
            match rows.last_mut() {
                Some(last) if last.0 == vars && last.1.is_some() && last.2.is_none() => last.2 = hi,
                _ => rows.push((vars, None, hi, line_no)),
            }
        }
    }
    let d = declared.unwrap_or(max_var);
    if max_var > d {
        return Err(ReasonError::Syntax { line: 1, message: format!("variable x{max_var} exceeds declared {d}") });
    }
    let mut constraints = Vec::with_capacity(rows.len());
    for (vars, lo, hi, line) in rows {
        let size = vars.len() as u32;
        let (lo, hi) = (lo.unwrap_or(0), hi.unwrap_or(size));
        if lo > hi {
            return Err(ReasonError::Syntax { line, message: format!("empty range [{lo}, {hi}]") });
        }
        let c = CardinalityConstraint { vars, lo, hi };
        if !constraints.contains(&c) {
            constraints.push(c);
        }
    }
    let space = match space {
        Some(s) if s.dim() == d => s,
        Some(s) => return Err(ReasonError::InvalidProblem(format!("space has {} variables, file declares {d}", s.dim()))),
        None => VariableSpace::flat(d),
    };
    CardinalitySystem::new(space, constraints).map_err(|e| ReasonError::InvalidProblem(e.to_string()))
}
