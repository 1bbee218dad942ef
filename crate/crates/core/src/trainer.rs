//! The joint training loop and test-time evaluation.
//!
//! Every epoch runs, in order: network prediction, one constraint update,
//! one grounding update, one pass of SGD on the grounded targets, and the
//! annealing step for both penalty weights. With a `b` sweep the loop is run
//! once per sweep value with a fresh `W` and grounding; the network carries
//! over between runs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    binarize_matrix, deduplicate, BiasMode, CardinalityConstraint, CardinalitySystem, ConstraintError, VariableSpace,
};
use crate::grounding::{self, ground_step, GroundError, GroundingBatch};
use crate::learner::{self, candidates_from_boolean_rows, ppa_step, AnnealConfig, Candidate, LearnError, LearnerState};
use crate::numkit::{rank, thread_budget, DenseMatrix, RngSnapshot, RngState};
use crate::perception::{sgd_step, Gradients, Head, MlpModel, PerceptionError};
use crate::reasoner::{self, InferenceProblem, Limits, Preference, ReasonError, Status};
use crate::tasks::{line_clue, Dataset, DatasetHeader, GlyphMode, TaskDescriptor, TaskSample};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Tolerance for the rank of binarized matrices.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset does not fit: {0}")]
    DatasetMismatch(String),
    #[error(
        "relaxed values still fractional after {epochs} epochs (b = {b}): W violation {w_violation:.3e}, grounding violation {s_violation:.3e}"
    )]
    NonBooleanAtTermination { b: u32, epochs: usize, w_violation: f64, s_violation: f64 },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Reason(#[from] ReasonError),
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// No trust region: `λ = 0`.
    Ntr,
    /// No penalty: `t1 = t2 = 0`, hard rounding at the end.
    Ndc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Epoch budget per sweep run.
    pub epochs: usize,
    /// Rows of `W`; task default when absent.
    pub m: Option<usize>,
    pub alpha: f64,
    /// Added to `alpha` after every epoch of a run; 0 keeps it fixed.
    pub alpha_step: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    /// SGD minibatch size, in cells.
    pub batch_size: usize,
    /// Samples per constraint update; full batch when absent.
    pub ppa_batch: Option<usize>,
    pub t1: AnnealConfig,
    pub t2: AnnealConfig,
    /// Fixed-`b` sweep values; task default when absent.
    pub b_values: Option<Vec<u32>>,
    /// Learn `b` per row instead of sweeping.
    pub learn_b: bool,
    /// Bound coverage; 0.99 with perception, 1.0 without, when absent.
    pub coverage: Option<f64>,
    pub perception: bool,
    pub hidden: Vec<usize>,
    pub ablation: Ablation,
    /// Feed rounded rather than raw predictions into the constraint update.
    pub round_predictions: bool,
    /// Stop a run early once everything is Boolean and the objective is flat.
    pub early_stop: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 5000,
            m: None,
            alpha: 0.5,
            alpha_step: 0.0,
            lambda: 0.1,
            gamma: 0.001,
            eta: 0.1,
            batch_size: 256,
            ppa_batch: None,
            t1: AnnealConfig::default(),
            t2: AnnealConfig::default(),
            b_values: None,
            learn_b: false,
            coverage: None,
            perception: true,
            hidden: vec![64],
            ablation: Ablation::None,
            round_predictions: false,
            early_stop: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.alpha_step.is_finite() {
            return bad(format!("alpha_step must be finite, got {}", self.alpha_step));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, a) in [("t1", &self.t1), ("t2", &self.t2)] {
            if !(a.step_fraction >= 0.0 && a.eps > 0.0 && a.eps < 0.5 && a.cap_factor >= 0.0) {
                return bad(format!("{name} schedule {a:?} is invalid"));
            }
        }
        if self.batch_size == 0 || self.m == Some(0) || self.ppa_batch == Some(0) {
            return bad("batch_size, m and ppa_batch must be positive".into());
        }
        if let Some(k) = self.coverage {
            if !(k > 0.0 && k <= 1.0) {
                return bad(format!("coverage {k} outside (0, 1]"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.learn_b && self.b_values.is_some() {
            return bad("learn_b and b_values are exclusive".into());
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.ablation == Ablation::Ntr {
            0.0
        } else {
            self.lambda
        }
    }
}

// ---------------------------------------------------------------- task binding

#[derive(Debug, Clone, PartialEq)]
struct Cells {
    count: usize,
    classes: usize,
    inputs: usize,
    /// First latent coordinate of cell 0.
    offset: usize,
    softmax: bool,
}

impl Cells {
    fn coords(&self, c: usize) -> std::ops::Range<usize> {
        self.offset + c * self.classes..self.offset + (c + 1) * self.classes
    }

    fn round(&self, p: &[f64]) -> Vec<f64> {
        if self.softmax {
            let k = argmax(p);
            (0..p.len()).map(|j| (j == k) as u8 as f64).collect()
        } else {
            p.iter().map(|&v| (v >= 0.5) as u8 as f64).collect()
        }
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

/// Per-task view of a dataset: what is observed, what is perceived, what is free.
#[derive(Debug, Clone)]
struct Binding {
    space: VariableSpace,
    cells: Option<Cells>,
    free: Vec<bool>,
    /// Known coordinates of each sample, with their values.
    base: DenseMatrix,
    known: Vec<Vec<bool>>,
    /// Cells read by the network, per sample.
    perceived: Vec<Vec<usize>>,
}

fn perception_layout(header: &DatasetHeader) -> Option<Cells> {
    let offset = header.space.latent_range().start;
    match &header.task {
        TaskDescriptor::Sudoku { size, glyphs, cell_pixels, .. } if *glyphs != GlyphMode::Symbolic => {
            Some(Cells { count: size * size, classes: *size, inputs: *cell_pixels, offset, softmax: true })
        }
        TaskDescriptor::Gridpath { height, width, .. } => {
            Some(Cells { count: height * width, classes: 1, inputs: 1, offset, softmax: false })
        }
        _ => None,
    }
}

impl Binding {
    fn new(data: &Dataset, perception: bool) -> Result<Self, TrainError> {
        let header = &data.header;
        let space = header.space.clone();
        let d = space.dim();
        let cells = if perception { perception_layout(header) } else { None };
        let n = data.len();
        let mut base = DenseMatrix::zeros(n, d);
        let mut known = vec![vec![false; d]; n];
        let mut perceived = vec![Vec::new(); n];
        for (i, s) in data.samples.iter().enumerate() {
            let row = base.row_mut(i);
            let kn = &mut known[i];
            let mut put = |j: usize, v: f64| {
                row[j] = v;
                kn[j] = true;
            };
            match &header.task {
                TaskDescriptor::Xor { length } => {
                    let x = s.x.as_ref().ok_or_else(|| TrainError::DatasetMismatch("xor sample without x".into()))?;
                    for j in 0..*length {
                        put(j, x[j]);
                    }
                    put(d - 1, s.y[0] as f64);
                }
                TaskDescriptor::Nonogram { clues, .. } => {
                    let x = s.x.as_ref().ok_or_else(|| TrainError::DatasetMismatch("nonogram sample without x".into()))?;
                    for j in 0..clues.len() {
                        put(j, x[j]);
                    }
                    let out = space.output_range();
                    for (k, j) in out.enumerate() {
                        put(j, s.y[k] as f64);
                    }
                }
                TaskDescriptor::Sudoku { size, .. } => {
                    let z = s.z.as_ref().ok_or_else(|| TrainError::DatasetMismatch("sudoku sample without z".into()))?;
                    for c in 0..size * size {
                        let bits = c * size..(c + 1) * size;
                        if s.mask[c] == 1 {
                            if cells.is_some() {
                                perceived[i].push(c);
                            } else {
                                bits.for_each(|j| put(j, z[j] as f64));
                            }
                        } else {
                            bits.for_each(|j| put(j, s.y[j] as f64));
                        }
                    }
                }
                TaskDescriptor::Gridpath { height, width, .. } => {
                    let z = s.z.as_ref().ok_or_else(|| TrainError::DatasetMismatch("gridpath sample without z".into()))?;
                    let hw = height * width;
                    for c in 0..hw {
                        if cells.is_some() {
                            perceived[i].push(c);
                        } else {
                            put(c, z[c] as f64);
                        }
                        put(hw + c, s.y[c] as f64);
                    }
                }
            }
        }
        let observed = 0..space.observed_input_bits;
        let free = (0..d).map(|j| space.is_auxiliary(j) || (cells.is_some() && !observed.contains(&j))).collect();
        Ok(Binding { space, cells, free, base, known, perceived })
    }

    fn cell_input<'a>(&self, s: &'a TaskSample, c: usize) -> &'a [f64] {
        let cells = self.cells.as_ref().expect("perception layout");
        let x = s.x.as_deref().expect("perception tasks carry x");
        &x[c * cells.inputs..(c + 1) * cells.inputs]
    }

    /// Known values, network outputs on perceived cells, and `fill` elsewhere.
    /// Also returns cell-level perception accuracy against hidden `z`.
    fn anchor(
        &self,
        data: &Dataset,
        model: Option<&MlpModel>,
        fill: &DenseMatrix,
        round: bool,
    ) -> Result<(DenseMatrix, Option<f64>), TrainError> {
        let n = data.len();
        let mut a = self.base.clone();
        for i in 0..n {
            let row = a.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                if !self.known[i][j] {
                    *v = fill.get(i, j);
                }
            }
        }
        let (Some(cells), Some(model)) = (&self.cells, model) else { return Ok((a, None)) };
        let (mut hits, mut total) = (0usize, 0usize);
        for (i, s) in data.samples.iter().enumerate() {
            let z = s.z.as_deref();
            for &c in &self.perceived[i] {
                let p = model.forward(self.cell_input(s, c))?;
                let coords = cells.coords(c);
                if let Some(z) = z {
                    let truth: Vec<f64> = coords.clone().map(|j| z[j - cells.offset] as f64).collect();
                    hits += (cells.round(&p) == truth) as usize;
                    total += 1;
                }
                let p = if round { cells.round(&p) } else { p };
                a.row_mut(i)[coords].copy_from_slice(&p);
            }
        }
        Ok((a, (total > 0).then(|| hits as f64 / total as f64)))
    }
}

fn default_m(header: &DatasetHeader) -> usize {
    match &header.task {
        TaskDescriptor::Sudoku { size: 4, .. } => 512,
        TaskDescriptor::Sudoku { .. } => 2000,
        _ => 2 * header.space.dim(),
    }
}

fn default_b_values(header: &DatasetHeader) -> Vec<u32> {
    match &header.task {
        TaskDescriptor::Sudoku { .. } => vec![1],
        _ => (1..header.space.dim() as u32).collect(),
    }
}

// ---------------------------------------------------------------- metrics, trace, state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prediction,
    ConstraintLearning,
    SymbolGrounding,
    NetworkTraining,
    EnforcingDcPenalty,
}

impl Phase {
    pub const ORDER: [Phase; 5] =
        [Phase::Prediction, Phase::ConstraintLearning, Phase::SymbolGrounding, Phase::NetworkTraining, Phase::EnforcingDcPenalty];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Sweep value of the active run; absent when `b` is learned.
    pub b: Option<u32>,
    pub perception_acc: Option<f64>,
    pub w_violation: f64,
    pub s_violation: f64,
    pub rank: usize,
    pub distinct: usize,
    pub grounding_change: f64,
    pub objective: f64,
    pub dw_sq: f64,
    pub dtheta_sq: f64,
    pub t1: f64,
    pub t2: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,b,perception_acc,w_violation,s_violation,rank,distinct,grounding_change,objective,dw_sq,dtheta_sq,t1,t2";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, |x| x.to_string())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            opt(&r.b),
            opt(&r.perception_acc),
            r.w_violation,
            r.s_violation,
            r.rank,
            r.distinct,
            r.grounding_change,
            r.objective,
            r.dw_sq,
            r.dtheta_sq,
            r.t1,
            r.t2
        ));
    }
    out
}

pub fn metrics_jsonl(rows: &[MetricsRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("metrics serialize") + "\n").collect()
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub sweep_index: usize,
    pub run_epoch: usize,
    pub learner: Option<LearnerState>,
    pub grounding: Option<GroundingBatch>,
    pub model: Option<MlpModel>,
    pub rng: RngSnapshot,
    pub candidates: Vec<Candidate>,
    pub stable: usize,
    pub last_objective: Option<f64>,
    pub metrics: Vec<MetricsRow>,
    pub done: bool,
}

pub fn checkpoint_json(state: &TrainState) -> String {
    let mut s = serde_json::to_string(state).expect("state serializes");
    s.push('\n');
    s
}

pub fn parse_checkpoint(text: &str) -> Result<TrainState, TrainError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| TrainError::CorruptFile(e.to_string()))?;
    let found = v.get("version").and_then(|x| x.as_u64()).ok_or_else(|| TrainError::CorruptFile("no version field".into()))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(TrainError::VersionMismatch { found: found as u32, expected: CHECKPOINT_VERSION });
    }
    serde_json::from_value(v).map_err(|e| TrainError::CorruptFile(e.to_string()))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), TrainError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    write_atomic(path, &checkpoint_json(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------- trainer

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub system: CardinalitySystem,
    pub model: Option<MlpModel>,
    pub metrics: Vec<MetricsRow>,
    pub state: TrainState,
    /// Rank of the final system's weight matrix.
    pub rank: usize,
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    binding: Binding,
    b_values: Vec<u32>,
    m: usize,
    coverage: f64,
    rng: RngState,
    pub state: TrainState,
    trace: Vec<Phase>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        let binding = Binding::new(data, config.perception)?;
        let mut rng = RngState::new(config.seed);
        let model = match &binding.cells {
            Some(cells) => {
                let mut sizes = vec![cells.inputs];
                sizes.extend(&config.hidden);
                sizes.push(cells.classes);
                let head = if cells.softmax { Head::Softmax { groups: vec![(0..cells.classes).collect()] } } else { Head::Logistic };
                Some(MlpModel::new(&sizes, head, true, &mut rng)?)
            }
            None => None,
        };
        let state = TrainState {
            version: CHECKPOINT_VERSION,
            config,
            epoch: 0,
            sweep_index: 0,
            run_epoch: 0,
            learner: None,
            grounding: None,
            model,
            rng: rng.snapshot(),
            candidates: Vec::new(),
            stable: 0,
            last_objective: None,
            metrics: Vec::new(),
            done: false,
        };
        Self::resume(state, data)
    }

    pub fn resume(state: TrainState, data: &'a Dataset) -> Result<Self, TrainError> {
        if state.version != CHECKPOINT_VERSION {
            return Err(TrainError::VersionMismatch { found: state.version, expected: CHECKPOINT_VERSION });
        }
        let cfg = &state.config;
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::DatasetMismatch("empty training set".into()));
        }
        let binding = Binding::new(data, cfg.perception)?;
        let d = binding.space.dim();
        let b_values = if cfg.learn_b { vec![0] } else { cfg.b_values.clone().unwrap_or_else(|| default_b_values(&data.header)) };
        if let Some(&b) = b_values.iter().find(|&&b| !cfg.learn_b && (b == 0 || b as usize >= d)) {
            return Err(TrainError::InvalidConfig(format!("sweep value {b} outside [1, {}]", d - 1)));
        }
        if let Some(gb) = &state.grounding {
            if gb.s.rows() != data.len() || gb.s.cols() != d {
                return Err(TrainError::DatasetMismatch("checkpoint grounding does not match the dataset".into()));
            }
        }
        let m = cfg.m.unwrap_or_else(|| default_m(&data.header));
        let coverage = cfg.coverage.unwrap_or(if binding.cells.is_some() { 0.99 } else { 1.0 });
        let rng = RngState::restore(&state.rng);
        Ok(Trainer { data, binding, b_values, m, coverage, rng, state, trace: Vec::new() })
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    /// Phases run by the most recent epoch.
    pub fn last_trace(&self) -> &[Phase] {
        &self.trace
    }

    fn sync_rng(&mut self) {
        self.state.rng = self.rng.snapshot();
    }

    /// Advances by one epoch, starting or closing sweep runs as needed.
    pub fn step(&mut self) -> Result<(), TrainError> {
        while !self.state.done {
            if self.state.learner.is_none() {
                if self.state.sweep_index >= self.b_values.len() {
                    self.state.done = true;
                    break;
                }
                self.start_run()?;
            }
            if self.run_finished() {
                self.finish_run()?;
                continue;
            }
            self.epoch()?;
            break;
        }
        self.sync_rng();
        Ok(())
    }

    pub fn run_to_end(mut self) -> Result<TrainOutput, TrainError> {
        while !self.state.done {
            self.step()?;
        }
        self.output()
    }

    fn run_finished(&self) -> bool {
        let cfg = &self.state.config;
        self.state.run_epoch >= cfg.epochs || (cfg.early_stop && self.state.stable >= 5)
    }

    fn start_run(&mut self) -> Result<(), TrainError> {
        let cfg = self.state.config.clone();
        let d = self.binding.space.dim();
        let (b, mode) = if cfg.learn_b { (1.0, BiasMode::Learned) } else { (self.b_values[self.state.sweep_index] as f64, BiasMode::Fixed) };
        let learner = LearnerState::init(&mut self.rng, self.m, d, b, mode, cfg.effective_lambda(), cfg.gamma, cfg.t1.eps)?;
        let mut fill = DenseMatrix::zeros(self.data.len(), d);
        for v in fill.as_mut_slice() {
            *v = self.rng.uniform();
        }
        let (anchor, _) = self.binding.anchor(self.data, self.state.model.as_ref(), &fill, cfg.round_predictions)?;
        self.state.grounding = Some(GroundingBatch::new(anchor, self.binding.free.clone(), cfg.alpha, cfg.t2.eps)?);
        self.state.learner = Some(learner);
        self.state.run_epoch = 0;
        self.state.stable = 0;
        self.state.last_objective = None;
        Ok(())
    }

    fn epoch(&mut self) -> Result<(), TrainError> {
        let cfg = self.state.config.clone();
        let learner = self.state.learner.take().expect("active run");
        let gb = self.state.grounding.take().expect("active run");
        self.trace.clear();

        self.trace.push(Phase::Prediction);
        let (anchor, perception_acc) = self.binding.anchor(self.data, self.state.model.as_ref(), &gb.s, cfg.round_predictions)?;

        self.trace.push(Phase::ConstraintLearning);
        let batch = match cfg.ppa_batch {
            Some(k) if k < anchor.rows() => {
                let mut idx: Vec<usize> = (0..anchor.rows()).collect();
                self.rng.shuffle(&mut idx);
                let rows: Vec<Vec<f64>> = idx[..k].iter().map(|&i| anchor.row(i).to_vec()).collect();
                DenseMatrix::from_rows(&rows).expect("finite rows")
            }
            _ => anchor.clone(),
        };
        let mut next = ppa_step(&learner, &batch)?;
        let dw_sq = next.rs.w.sub(&learner.rs.w).expect("same shape").squared_norm();
        let objective = learner::objective(&next.rs, &batch);

        self.trace.push(Phase::SymbolGrounding);
        let mut anchored = gb;
        anchored.set_anchor(anchor)?;
        let next_gb = ground_step(&anchored, &next.rs.w, &next.rs.b)?;
        let grounding_change = {
            let diff = next_gb.s.sub(&anchored.s).expect("same shape");
            diff.as_slice().iter().map(|v| v.abs()).sum::<f64>() / diff.as_slice().len().max(1) as f64
        };
        let mut next_gb = next_gb;

        self.trace.push(Phase::NetworkTraining);
        let dtheta_sq = self.train_network(&cfg, &next_gb)?;

        self.trace.push(Phase::EnforcingDcPenalty);
        let w_violation = learner::booleanness(&next.rs.w);
        let s_violation = next_gb.violation();
        if cfg.ablation != Ablation::Ndc {
            let s1 = cfg.t1.advance(next.anneal, learner::delta_max(&batch, next.rs.lambda), w_violation);
            next.set_t1(s1);
            let dm2 = grounding::delta_max(&next.rs.w, &next_gb.free, next_gb.alpha);
            next_gb.anneal = cfg.t2.advance(next_gb.anneal, dm2, s_violation);
        }
        if cfg.alpha_step != 0.0 {
            next_gb.alpha = (next_gb.alpha + cfg.alpha_step).max(f64::MIN_POSITIVE);
        }
        assert_eq!(self.trace, Phase::ORDER, "epoch phases out of order");

        let rounded: Vec<Vec<f64>> =
            next.rs.w.iter_rows().map(|r| r.iter().map(|v| v.round()).collect()).collect();
        let rounded = DenseMatrix::from_rows(&rounded).expect("finite");
        let mut distinct: Vec<&[f64]> = rounded.iter_rows().filter(|r| r.iter().any(|&v| v != 0.0)).collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        distinct.dedup();

        let rel = self.state.last_objective.map_or(f64::INFINITY, |prev| (objective - prev).abs() / prev.abs().max(1e-12));
        let boolean = cfg.ablation == Ablation::Ndc || (w_violation <= cfg.t1.eps && s_violation <= cfg.t2.eps);
        self.state.stable = if boolean && rel < 1e-6 { self.state.stable + 1 } else { 0 };
        self.state.last_objective = Some(objective);

        self.state.metrics.push(MetricsRow {
            epoch: self.state.epoch,
            b: (!cfg.learn_b).then(|| self.b_values[self.state.sweep_index]),
            perception_acc,
            w_violation,
            s_violation,
            rank: rank(&rounded, RANK_TOL),
            distinct: distinct.len(),
            grounding_change,
            objective,
            dw_sq,
            dtheta_sq,
            t1: next.rs.t1,
            t2: next_gb.anneal.t,
        });
        self.state.learner = Some(next);
        self.state.grounding = Some(next_gb);
        self.state.epoch += 1;
        self.state.run_epoch += 1;
        Ok(())
    }

    /// One shuffled pass over every perceived cell; returns `‖Δθ‖²`.
    fn train_network(&mut self, cfg: &TrainConfig, gb: &GroundingBatch) -> Result<f64, TrainError> {
        let (Some(cells), Some(model)) = (&self.binding.cells, self.state.model.as_ref()) else { return Ok(0.0) };
        let mut pairs: Vec<(usize, usize)> =
            self.binding.perceived.iter().enumerate().flat_map(|(i, cs)| cs.iter().map(move |&c| (i, c))).collect();
        self.rng.shuffle(&mut pairs);
        let before = model.parameters();
        let mut model = model.clone();
        for chunk in pairs.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&model);
            let scale = 1.0 / chunk.len() as f64;
            for &(i, c) in chunk {
                let target = &gb.s.row(i)[cells.coords(c)];
                let g = model.backward_mse(self.binding.cell_input(&self.data.samples[i], c), target)?;
                acc.add_scaled(&g, scale);
            }
            model = sgd_step(&model, &acc, cfg.eta);
        }
        let dtheta = model.parameters().iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum();
        self.state.model = Some(model);
        Ok(dtheta)
    }

    /// Boolean assignments for bound estimation: rounded network output on
    /// perceived cells, rounded groundings elsewhere.
    fn boolean_samples(&self, gb: &GroundingBatch) -> Result<Vec<Vec<bool>>, TrainError> {
        let (a, _) = self.binding.anchor(self.data, self.state.model.as_ref(), &gb.s, true)?;
        Ok(a.iter_rows().map(|r| r.iter().map(|&v| v >= 0.5).collect()).collect())
    }

    fn finish_run(&mut self) -> Result<(), TrainError> {
        let cfg = self.state.config.clone();
        let learner = self.state.learner.take().expect("active run");
        let gb = self.state.grounding.take().expect("active run");
        let sweep_b = self.b_values[self.state.sweep_index];
        let w = &learner.rs.w;
        let hard = cfg.ablation == Ablation::Ndc || self.state.run_epoch == 0;
        let mut found: Vec<Candidate> = Vec::new();
        if hard {
            // direct rounding of (W, b), no hit filter and no bound estimation
            for (i, row) in binarize_matrix(w, 0.5)?.into_iter().enumerate() {
                let vars: Vec<usize> = (0..row.len()).filter(|&j| row[j]).collect();
                let b = learner.rs.b[i].round().max(0.0) as u32;
                if !vars.is_empty() {
                    found.push(Candidate { vars, b, lo: b, hi: b });
                }
            }
        } else {
            let wv = learner::booleanness(w);
            let sv = gb.violation();
            if wv > cfg.t1.eps || sv > cfg.t2.eps {
                return Err(TrainError::NonBooleanAtTermination {
                    b: sweep_b,
                    epochs: self.state.run_epoch,
                    w_violation: wv,
                    s_violation: sv,
                });
            }
            let rows = binarize_matrix(w, cfg.t1.eps)?;
            let samples = self.boolean_samples(&gb)?;
            if cfg.learn_b {
                let mut groups: Vec<(u32, Vec<Vec<bool>>)> = Vec::new();
                for (row, &b) in rows.into_iter().zip(&learner.rs.b) {
                    let b = b.round().max(0.0) as u32;
                    match groups.iter_mut().find(|(gb, _)| *gb == b) {
                        Some((_, g)) => g.push(row),
                        None => groups.push((b, vec![row])),
                    }
                }
                for (b, g) in groups {
                    found.extend(candidates_from_boolean_rows(&g, b, &samples, self.coverage));
                }
            } else {
                found = candidates_from_boolean_rows(&rows, sweep_b, &samples, self.coverage);
            }
        }
        for c in found {
            if !self.state.candidates.iter().any(|o| o.vars == c.vars && o.lo == c.lo && o.hi == c.hi) {
                self.state.candidates.push(c);
            }
        }
        self.state.sweep_index += 1;
        Ok(())
    }

    pub fn output(&self) -> Result<TrainOutput, TrainError> {
        let constraints: Vec<CardinalityConstraint> = self.state.candidates.iter().map(Candidate::constraint).collect();
        let raw = CardinalitySystem { space: self.binding.space.clone(), constraints };
        let system = deduplicate(&raw);
        system.validate()?;
        let r = rank(&system.weight_matrix(), RANK_TOL);
        Ok(TrainOutput {
            system,
            model: self.state.model.clone(),
            metrics: self.state.metrics.clone(),
            state: self.state.clone(),
            rank: r,
        })
    }
}

pub fn run(config: TrainConfig, data: &Dataset) -> Result<TrainOutput, TrainError> {
    Trainer::new(config, data)?.run_to_end()
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub perception_acc: f64,
    pub solving_acc: f64,
    pub total_acc: f64,
    pub perception_cell_acc: f64,
    pub solving_cell_acc: f64,
    pub infeasible: usize,
    pub budget_exceeded: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleScore {
    perception_ok: bool,
    solving_ok: bool,
    perception_cells: (usize, usize),
    solving_cells: (usize, usize),
    infeasible: bool,
    budget: bool,
}

/// Fixed values and preferences for one sample, plus the perception part of its score.
fn problem_for(
    header: &DatasetHeader,
    system: &CardinalitySystem,
    model: Option<&MlpModel>,
    cells: Option<&Cells>,
    s: &TaskSample,
    limits: Limits,
) -> Result<(InferenceProblem, SampleScore), TrainError> {
    let sp = &header.space;
    let d = sp.dim();
    let mut fixed = vec![None; d];
    let mut prefs = vec![Preference::NONE; d];
    let mut score = SampleScore { perception_ok: true, ..Default::default() };
    match &header.task {
        TaskDescriptor::Xor { length } => {
            let x = s.x.as_deref().unwrap_or_default();
            for j in 0..*length {
                fixed[j] = Some(x[j] >= 0.5);
            }
        }
        TaskDescriptor::Nonogram { clues, .. } => {
            let x = s.x.as_deref().unwrap_or_default();
            for j in 0..clues.len() {
                fixed[j] = Some(x[j] >= 0.5);
            }
        }
        TaskDescriptor::Sudoku { .. } | TaskDescriptor::Gridpath { .. } => {
            let z = s.z.as_deref().unwrap_or_default();
            let perceived: Vec<usize> = match &header.task {
                TaskDescriptor::Sudoku { size, .. } => (0..size * size).filter(|&c| s.mask[c] == 1).collect(),
                _ => (0..sp.latent_bits).collect(),
            };
            for c in perceived {
                match (cells, model) {
                    (Some(cells), Some(model)) => {
                        let x = s.x.as_deref().unwrap_or_default();
                        let p = model.forward(&x[c * cells.inputs..(c + 1) * cells.inputs])?;
                        let coords = cells.coords(c);
                        let truth: Vec<f64> = coords.clone().map(|j| z[j - cells.offset] as f64).collect();
                        let ok = cells.round(&p) == truth;
                        score.perception_ok &= ok;
                        score.perception_cells.0 += ok as usize;
                        score.perception_cells.1 += 1;
                        for (j, &pj) in coords.zip(&p) {
                            prefs[j] = Preference::from_probability(pj);
                        }
                    }
                    _ => {
                        let classes = match &header.task {
                            TaskDescriptor::Sudoku { size, .. } => *size,
                            _ => 1,
                        };
                        for j in c * classes..(c + 1) * classes {
                            fixed[sp.latent_range().start + j] = Some(z[j] == 1);
                        }
                        score.perception_cells.0 += 1;
                        score.perception_cells.1 += 1;
                    }
                }
            }
        }
    }
    Ok((InferenceProblem::new(system.clone(), prefs, fixed, limits)?, score))
}

/// The inference problem evaluation builds for `sample`: observed inputs and
/// symbolic givens are fixed, perceived cells become soft preferences.
pub fn sample_problem(
    system: &CardinalitySystem,
    model: Option<&MlpModel>,
    header: &DatasetHeader,
    sample: &TaskSample,
    limits: Limits,
) -> Result<InferenceProblem, TrainError> {
    let cells = if model.is_some() { perception_layout(header) } else { None };
    Ok(problem_for(header, system, model, cells.as_ref(), sample, limits)?.0)
}

fn score_sample(
    header: &DatasetHeader,
    system: &CardinalitySystem,
    model: Option<&MlpModel>,
    cells: Option<&Cells>,
    s: &TaskSample,
    limits: Limits,
) -> Result<SampleScore, TrainError> {
    let sp = &header.space;
    let d = sp.dim();
    let (problem, mut score) = problem_for(header, system, model, cells, s, limits)?;
    let sol = match reasoner::solve(&problem) {
        Ok(sol) => Some(sol),
        Err(ReasonError::InconsistentFixed(_)) => None,
        Err(e) => return Err(e.into()),
    };
    score.budget = sol.as_ref().is_some_and(|s| s.status == Status::BudgetExceeded);
    let sol = sol.filter(|s| matches!(s.status, Status::Optimal | Status::Feasible));
    score.infeasible = sol.is_none() && !score.budget;
    let a = sol.as_ref().map(|s| s.assignment.as_slice());
    match &header.task {
        TaskDescriptor::Xor { .. } => {
            score.solving_ok = a.is_some_and(|a| a[d - 1] == (s.y[0] == 1));
            score.solving_cells = (score.solving_ok as usize, 1);
        }
        TaskDescriptor::Nonogram { clues, .. } => {
            let k = s.x.as_deref().unwrap_or_default().iter().position(|&v| v >= 0.5).unwrap_or(0);
            score.solving_ok = a.is_some_and(|a| line_clue(&a[sp.output_range()]) == clues[k]);
            score.solving_cells = (score.solving_ok as usize, 1);
        }
        TaskDescriptor::Sudoku { size, .. } => {
            let mut all = true;
            for c in (0..size * size).filter(|&c| s.mask[c] == 0) {
                let ok = a.is_some_and(|a| (c * size..(c + 1) * size).all(|j| a[j] == (s.y[j] == 1)));
                all &= ok;
                score.solving_cells.0 += ok as usize;
                score.solving_cells.1 += 1;
            }
            score.solving_ok = all;
        }
        TaskDescriptor::Gridpath { .. } => {
            let out = sp.output_range();
            let mut all = true;
            for (k, j) in out.enumerate() {
                let ok = a.is_some_and(|a| a[j] == (s.y[k] == 1));
                all &= ok;
                score.solving_cells.0 += ok as usize;
                score.solving_cells.1 += 1;
            }
            score.solving_ok = all;
        }
    }
    Ok(score)
}

/// Board-level perception, solving and total accuracy, plus per-cell rates.
/// Samples are scored independently, split across [`thread_budget`] threads.
pub fn evaluate(system: &CardinalitySystem, model: Option<&MlpModel>, data: &Dataset, limits: Limits) -> Result<EvalReport, TrainError> {
    if system.space != data.header.space {
        return Err(TrainError::DatasetMismatch("system and dataset use different variable spaces".into()));
    }
    let cells = if model.is_some() { perception_layout(&data.header) } else { None };
    if let (Some(c), Some(m)) = (&cells, model) {
        if m.input_dim() != c.inputs || m.output_dim() != c.classes {
            return Err(TrainError::DatasetMismatch("model does not fit the dataset's cells".into()));
        }
    }
    let n = data.len();
    let threads = thread_budget().min(n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    let results: Vec<Result<Vec<SampleScore>, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .samples
            .chunks(chunk)
            .map(|part| {
                let cells = cells.as_ref();
                scope.spawn(move || {
                    part.iter().map(|s| score_sample(&data.header, system, model, cells, s, limits)).collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut scores = Vec::with_capacity(n);
    for r in results {
        scores.extend(r?);
    }
    let frac = |k: usize, t: usize| if t == 0 { 1.0 } else { k as f64 / t as f64 };
    let count = |f: &dyn Fn(&SampleScore) -> bool| scores.iter().filter(|s| f(s)).count();
    let sum = |f: &dyn Fn(&SampleScore) -> (usize, usize)| scores.iter().fold((0, 0), |a, s| (a.0 + f(s).0, a.1 + f(s).1));
    let pc = sum(&|s| s.perception_cells);
    let sc = sum(&|s| s.solving_cells);
    Ok(EvalReport {
        samples: n,
        perception_acc: frac(count(&|s| s.perception_ok), n),
        solving_acc: frac(count(&|s| s.solving_ok), n),
        total_acc: frac(count(&|s| s.perception_ok && s.solving_ok), n),
        perception_cell_acc: frac(pc.0, pc.1),
        solving_cell_acc: frac(sc.0, sc.1),
        infeasible: count(&|s| s.infeasible),
        budget_exceeded: count(&|s| s.budget),
    })
}
