//! `nesy`: dataset generation, training, export, inference and checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use nesy_core::constraints::{export_opb, export_smt2, CardinalitySystem};
use nesy_core::dcopt::prop1_suite;
use nesy_core::learner::prop2_suite;
use nesy_core::perception::{gradient_check_suite, load_idx_dataset, MlpModel};
use nesy_core::reasoner::{parse_opb, solve, InferenceProblem, Limits, Preference};
use nesy_core::tasks::{self, Dataset, GlyphMode, SudokuParams, TaskError, TEST_STREAM, TRAIN_STREAM};
use nesy_core::trainer::{
    self, evaluate, load_checkpoint, metrics_csv, metrics_jsonl, save_checkpoint, write_atomic, TrainConfig, TrainError,
    Trainer,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::DatasetMismatch(_) | TrainError::VersionMismatch { .. } => {
                CliError::Invalid(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "nesy", version, about = "Learn cardinality constraints jointly with a perception network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset as JSONL.
    Gen(GenArgs),
    /// Train constraints (and a network when the task has raw inputs).
    #[command(after_long_help = config_help())]
    Train(TrainArgs),
    /// Write a constraint system as OPB and SMT-LIB2.
    Export(ExportArgs),
    /// Solve one sample and print the solution as JSON.
    Solve(SolveArgs),
    /// Report perception, solving and total board accuracy.
    Eval(EvalArgs),
    /// Run the exact-penalty and stationarity property suites.
    CheckProps(CheckArgs),
    /// Compare analytic and finite-difference gradients on random nets.
    GradCheck(GradArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TaskKind {
    Xor,
    Sudoku,
    Nonogram,
    Gridpath,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Glyphs {
    Symbolic,
    Synthetic,
    Idx,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: TaskKind,
    /// Sequence length (xor).
    #[arg(long = "L", default_value_t = 20)]
    l: usize,
    /// Number of samples.
    #[arg(long = "N", default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    /// Board side (sudoku: 4 or 9) or line length (nonogram).
    #[arg(long)]
    size: Option<usize>,
    /// Fewest givens per puzzle (sudoku).
    #[arg(long)]
    givens_min: Option<usize>,
    /// Most givens per puzzle (sudoku).
    #[arg(long)]
    givens_max: Option<usize>,
    #[arg(long, value_enum, default_value = "symbolic")]
    glyphs: Glyphs,
    /// Pixel flip rate for synthetic glyphs.
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long)]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    height: usize,
    #[arg(long, default_value_t = 10)]
    width: usize,
    #[arg(long, default_value_t = 20)]
    obstacles: usize,
    /// Output directory; receives `<split>.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set t1.step_fraction=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint (its config is used as is).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs and write a checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    constraints: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// constraints.json, or an .opb file.
    #[arg(long)]
    constraints: PathBuf,
    /// Dataset holding the sample.
    #[arg(long, conflicts_with = "assign")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Checkpoint whose network supplies preferences.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fixed values as a string over `0`, `1` and `x` (free).
    #[arg(long)]
    assign: Option<String>,
    #[arg(long, default_value_t = 10_000_000)]
    max_nodes: u64,
    #[arg(long, default_value_t = 60.0)]
    max_seconds: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    constraints: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000_000)]
    max_nodes: u64,
    #[arg(long, default_value_t = 60.0)]
    max_seconds: f64,
    /// Directory for eval.json and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    nets: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Every config key with its default, one per line.
fn config_help() -> String {
    let mut lines = Vec::new();
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    flatten("", &defaults, &mut lines);
    let mut out = String::from("Config keys (defaults; null means chosen from the task):\n");
    for (k, v) in lines {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.to_string())),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut probe = &defaults;
    for part in key.split('.') {
        probe = probe.get(part).ok_or_else(|| CliError::Invalid(format!("unknown config key `{key}`")))?;
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        let map = slot.as_object_mut().ok_or_else(|| CliError::Invalid(format!("`{key}` does not name a nested key")))?;
        slot = map.entry(part).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let mut v = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Invalid(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut v, patch);
    }
    for o in overrides {
        let (k, val) = o.split_once('=').ok_or_else(|| CliError::Invalid(format!("override `{o}` is not KEY=VALUE")))?;
        set_path(&mut v, k.trim(), val.trim())?;
    }
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| CliError::Invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_atomic(path, &s)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_system(path: &Path) -> Result<CardinalitySystem, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "opb") {
        parse_opb(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    } else {
        CardinalitySystem::from_json(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }
}

fn load_model(path: Option<&Path>) -> Result<Option<MlpModel>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            let state = load_checkpoint(p)?;
            state.model.map(Some).ok_or_else(|| CliError::Invalid(format!("{} holds no network", p.display())))
        }
    }
}

fn limits(max_nodes: u64, max_seconds: f64) -> Result<Limits, CliError> {
    if !(max_seconds > 0.0 && max_seconds.is_finite()) {
        return Err(CliError::Invalid("--max-seconds must be positive".into()));
    }
    Ok(Limits { max_nodes, max_time: std::time::Duration::from_secs_f64(max_seconds) })
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let stream = match a.split {
        Split::Train => TRAIN_STREAM,
        Split::Test => TEST_STREAM,
    };
    let data = match a.task {
        TaskKind::Xor => tasks::gen_xor(a.l, a.n, a.seed, stream)?,
        TaskKind::Nonogram => tasks::gen_nonogram(a.size.unwrap_or(7), a.n, a.seed, stream)?,
        TaskKind::Gridpath => tasks::gen_gridpath(a.height, a.width, a.obstacles, a.n, a.seed, stream)?,
        TaskKind::Sudoku => {
            let size = a.size.unwrap_or(4);
            let (lo, hi) = if size == 9 { (17, 34) } else { (4, 8) };
            let glyphs = match a.glyphs {
                Glyphs::Symbolic => GlyphMode::Symbolic,
                Glyphs::Synthetic => GlyphMode::Synthetic,
                Glyphs::Idx => GlyphMode::Idx,
            };
            let idx = match (glyphs, &a.idx_images, &a.idx_labels) {
                (GlyphMode::Idx, Some(i), Some(l)) => {
                    Some(load_idx_dataset(i, l).map_err(|e| CliError::Invalid(e.to_string()))?)
                }
                _ => None,
            };
            let p = SudokuParams {
                size,
                n: a.n,
                givens: (a.givens_min.unwrap_or(lo), a.givens_max.unwrap_or(hi)),
                glyphs,
                sigma: a.sigma,
                seed: a.seed,
                stream,
            };
            let (data, truth) = tasks::gen_sudoku(&p, idx.as_ref())?;
            ensure_dir(&a.out)?;
            write_atomic(&a.out.join("ground_truth.json"), &truth.to_json())?;
            data
        }
    };
    ensure_dir(&a.out)?;
    let name = match a.split {
        Split::Train => "train.jsonl",
        Split::Test => "test.jsonl",
    };
    data.save(&a.out.join(name))?;
    write_json(&a.out.join("config.resolved.json"), a)?;
    println!("wrote {} samples to {}", data.len(), a.out.join(name).display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let data = Dataset::load(&a.data)?;
    ensure_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            if a.config.is_some() || !a.overrides.is_empty() {
                return Err(CliError::Invalid("--resume takes its config from the checkpoint".into()));
            }
            Trainer::resume(load_checkpoint(p)?, &data)?
        }
        None => Trainer::new(resolve_config(a.config.as_deref(), &a.overrides)?, &data)?,
    };
    write_json(&a.out.join("config.resolved.json"), &trainer.state.config)?;
    let ckpt = a.out.join("model.ckpt.json");
    let every = trainer.state.config.checkpoint_every;
    let mut steps = 0;
    let mut failure = None;
    while !trainer.is_done() {
        if a.stop_after.is_some_and(|k| steps >= k) {
            break;
        }
        if let Err(e) = trainer.step() {
            failure = Some(e);
            break;
        }
        steps += 1;
        if every > 0 && trainer.state.epoch % every == 0 {
            save_checkpoint(&trainer.state, &ckpt)?;
        }
    }
    // metrics and the last state are kept even when the run fails
    save_checkpoint(&trainer.state, &ckpt)?;
    write_atomic(&a.out.join("metrics.csv"), &metrics_csv(&trainer.state.metrics))?;
    write_atomic(&a.out.join("metrics.jsonl"), &metrics_jsonl(&trainer.state.metrics))?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    if !trainer.is_done() {
        println!("stopped at epoch {}; resume with --resume {}", trainer.state.epoch, ckpt.display());
        return Ok(());
    }
    let out = trainer.output()?;
    write_atomic(&a.out.join("constraints.json"), &out.system.to_json())?;
    println!("epochs: {}, constraints: {}, rank: {}", out.state.epoch, out.system.len(), out.rank);
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let sys = load_system(&a.constraints)?;
    ensure_dir(&a.out)?;
    write_atomic(&a.out.join("export.opb"), &export_opb(&sys))?;
    write_atomic(&a.out.join("export.smt2"), &export_smt2(&sys))?;
    write_json(&a.out.join("config.resolved.json"), &serde_json::json!({ "constraints": a.constraints }))?;
    println!("exported {} constraints", sys.len());
    Ok(())
}

fn cmd_solve(a: &SolveArgs) -> Result<(), CliError> {
    let sys = load_system(&a.constraints)?;
    let lim = limits(a.max_nodes, a.max_seconds)?;
    let problem = match (&a.data, &a.assign) {
        (Some(path), _) => {
            let data = Dataset::load(path)?;
            let sample = data
                .samples
                .get(a.index)
                .ok_or_else(|| CliError::Invalid(format!("index {} out of range ({} samples)", a.index, data.len())))?;
            let model = load_model(a.model.as_deref())?;
            trainer::sample_problem(&sys, model.as_ref(), &data.header, sample, lim)?
        }
        (None, Some(s)) => {
            let fixed = s
                .chars()
                .map(|c| match c {
                    '0' => Ok(Some(false)),
                    '1' => Ok(Some(true)),
                    'x' | 'X' | '.' => Ok(None),
                    _ => Err(CliError::Invalid(format!("unexpected `{c}` in --assign"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let d = sys.dim();
            InferenceProblem::new(sys, vec![Preference::NONE; d], fixed, lim)
                .map_err(|e| CliError::Invalid(e.to_string()))?
        }
        (None, None) => return Err(CliError::Invalid("give --data (with --index) or --assign".into())),
    };
    let sol = solve(&problem).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{}", sol.to_json());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let sys = load_system(&a.constraints)?;
    let data = Dataset::load(&a.data)?;
    let model = load_model(a.model.as_deref())?;
    let report = evaluate(&sys, model.as_ref(), &data, limits(a.max_nodes, a.max_seconds)?)?;
    println!(
        "perception: {:.1}%  solving: {:.1}%  total: {:.1}%",
        100.0 * report.perception_acc,
        100.0 * report.solving_acc,
        100.0 * report.total_acc
    );
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        write_json(&dir.join("eval.json"), &report)?;
        write_json(
            &dir.join("config.resolved.json"),
            &serde_json::json!({
                "constraints": a.constraints, "data": a.data, "model": a.model,
                "max_nodes": a.max_nodes, "max_seconds": a.max_seconds,
            }),
        )?;
    }
    Ok(())
}

fn cmd_check(a: &CheckArgs) -> Result<(), CliError> {
    let p1 = prop1_suite(a.seed, a.instances);
    let p2 = prop2_suite(a.seed, a.instances, 1e-8).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("prop1: {p1}, prop2: {}", p2.stationary);
    println!("diagonal form at the brute-force optimum: {}", p2.diagonal);
    if p1.passed < p1.total || p2.stationary.passed < p2.stationary.total || p2.diagonal.passed < p2.diagonal.total {
        return Err(CliError::Runtime("property check failed".into()));
    }
    Ok(())
}

fn cmd_grad(a: &GradArgs) -> Result<(), CliError> {
    let errs = gradient_check_suite(a.seed, a.nets).map_err(|e| CliError::Runtime(e.to_string()))?;
    let ok = errs.iter().filter(|&&e| e < a.tol).count();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    println!("grad-check: {ok}/{} within {:e} (worst {worst:.3e})", errs.len(), a.tol);
    if ok < errs.len() {
        return Err(CliError::Runtime("gradient check failed".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Export(a) => cmd_export(a),
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::CheckProps(a) => cmd_check(a),
        Cmd::GradCheck(a) => cmd_grad(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
