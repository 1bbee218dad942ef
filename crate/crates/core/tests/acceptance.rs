//! End-to-end acceptance checks. Each test prints one PASS/FAIL line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` gives a summary.

use std::sync::OnceLock;

use nesy_core::constraints::{semantic_equivalence, CardinalityConstraint, CardinalitySystem, VariableSpace};
use nesy_core::dcopt::{random_instance, vertex_minimizer_pt, BooleanQuadratic};
use nesy_core::learner::prop2_suite;
use nesy_core::numkit::RngState;
use nesy_core::perception::{Head, MlpModel};
use nesy_core::reasoner::{solve, InferenceProblem, Limits, Preference, Status};
use nesy_core::tasks::{
    gen_nonogram, gen_sudoku, gen_xor, parity_predicate, sudoku_ground_truth, Dataset, GlyphMode, SudokuParams, TEST_STREAM,
    TRAIN_STREAM,
};
use nesy_core::trainer::{evaluate, metrics_csv, run, Ablation, EvalReport, TrainConfig, TrainError, TrainOutput, Trainer};

fn report(n: u32, what: &str, ok: bool, detail: String) {
    println!("criterion {n} {what}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn eval(out: &TrainOutput, test: &Dataset) -> EvalReport {
    evaluate(&out.system, out.model.as_ref(), test, Limits::default()).expect("evaluation runs")
}

// ---------------------------------------------------------------- 1

/// `‖Qu − q1‖² + τ‖u − q2‖²` at a Boolean point.
fn boolean_objective(p: &BooleanQuadratic, u: &[bool]) -> f64 {
    let x: Vec<f64> = u.iter().map(|&b| b as u8 as f64).collect();
    let fit: f64 = (0..p.q.rows()).map(|r| (p.q.row(r).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() - p.q1[r]).powi(2)).sum();
    let prox: f64 = x.iter().zip(&p.q2).map(|(a, b)| (a - b).powi(2)).sum();
    fit + p.tau * prox
}

fn enumerate_min(p: &BooleanQuadratic) -> Vec<bool> {
    let n = p.n();
    (0..1u32 << n)
        .map(|k| (0..n).map(|j| (k >> j) & 1 == 1).collect::<Vec<bool>>())
        .min_by(|a, b| boolean_objective(p, a).total_cmp(&boolean_objective(p, b)))
        .expect("n >= 1")
}

#[test]
fn c1_relaxation_is_exact_above_threshold() {
    let mut passed = 0;
    for k in 0..50 {
        let p = random_instance(11, k);
        assert!(p.n() <= 10 && (p.tau == 0.1 || p.tau == 1.0));
        let s = p.q.transpose().matmul(&p.q).unwrap();
        let dmax = (0..p.n()).map(|i| s.get(i, i) + p.tau).fold(f64::MIN, f64::max);
        let (u, _) = vertex_minimizer_pt(&p, dmax + 0.1).unwrap();
        passed += (u == enumerate_min(&p)) as usize;
    }
    report(1, "relaxed vertex minimizer equals Boolean optimum", passed == 50, format!("{passed}/50"));
}

// ---------------------------------------------------------------- 2

#[test]
fn c2_learned_points_are_stationary() {
    let r = prop2_suite(12, 20, 1e-8).unwrap();
    let ok = r.stationary.passed == 20 && r.diagonal.passed == 20;
    report(2, "stationarity of learned Boolean rows", ok, format!("stationary {}, diagonal form {}", r.stationary, r.diagonal));
}

// ---------------------------------------------------------------- 3

fn symbolic_config() -> TrainConfig {
    TrainConfig { perception: false, ..TrainConfig::default() }
}

fn xor_check(length: usize, n: usize, test_n: usize) -> (bool, String) {
    let train = gen_xor(length, n, 1, TRAIN_STREAM).unwrap();
    let test = gen_xor(length, test_n, 1, TEST_STREAM).unwrap();
    let out = match run(symbolic_config(), &train) {
        Ok(out) => out,
        Err(e) => return (false, format!("L={length}: training failed: {e}")),
    };
    let eq = semantic_equivalence(&out.system, &parity_predicate(length), 20, 5).unwrap();
    let acc = eval(&out, &test).solving_acc;
    let ok = eq.equivalent && acc == 1.0;
    let mode = if eq.exhaustive { "exhaustive" } else { "sampled" };
    (ok, format!("L={length}: {} constraints, {mode} equivalence {} after {} points, test accuracy {}", out.system.len(), eq.equivalent, eq.checked, pct(acc)))
}

#[test]
fn c3_chained_xor_small() {
    let (ok, detail) = xor_check(4, 500, 200);
    report(3, "chained XOR equals parity (L=4)", ok, detail);
}

#[test]
#[ignore = "several hours on one core"]
fn c3_chained_xor_full_scale() {
    let (ok20, d20) = xor_check(20, 9000, 1000);
    let (ok40, d40) = xor_check(40, 9000, 1000);
    report(3, "chained XOR equals parity (L=20, L=40)", ok20 && ok40, format!("{d20}; {d40}"));
}

// ---------------------------------------------------------------- 4

#[test]
fn c4_nonogram_lines() {
    let train = gen_nonogram(7, 1000, 1, TRAIN_STREAM).unwrap();
    let test = gen_nonogram(7, 500, 1, TEST_STREAM).unwrap();
    let (ok, detail) = match run(symbolic_config(), &train) {
        Ok(out) => {
            let r = eval(&out, &test);
            (r.solving_acc == 1.0, format!("{} constraints, line accuracy {}", out.system.len(), pct(r.solving_acc)))
        }
        Err(e) => (false, format!("training failed: {e}")),
    };
    report(4, "7x7 nonogram line solving", ok, detail);
}

// ---------------------------------------------------------------- 5, 9

/// Rank of an integer matrix modulo a prime, by Gaussian elimination.
fn rank_mod(rows: &[Vec<u64>], p: u64) -> usize {
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % p as u128) as u64;
    let inv = |a: u64| {
        let (mut r, mut base, mut e) = (1u64, a, p - 2);
        while e > 0 {
            if e & 1 == 1 {
                r = mul(r, base);
            }
            base = mul(base, base);
            e >>= 1;
        }
        r
    };
    let mut a: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v % p).collect()).collect();
    let cols = a.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..a.len()).find(|&r| a[r][c] != 0) else { continue };
        a.swap(rank, piv);
        let f = inv(a[rank][c]);
        for r in rank + 1..a.len() {
            if a[r][c] == 0 {
                continue;
            }
            let k = mul(a[r][c], f);
            for j in c..cols {
                a[r][j] = (a[r][j] + p - mul(k, a[rank][j])) % p;
            }
        }
        rank += 1;
    }
    rank
}

/// Rank over the rationals: it equals the rank modulo a prime unless the prime
/// divides every maximal nonzero minor, so two large primes settle it.
fn exact_rank(rows: &[Vec<u64>]) -> usize {
    rank_mod(rows, 2_305_843_009_213_693_951).max(rank_mod(rows, 1_000_000_007))
}

fn system_rows(s: &CardinalitySystem) -> Vec<Vec<u64>> {
    s.constraints.iter().map(|c| c.weights(s.dim()).iter().map(|&b| b as u64).collect()).collect()
}

fn sudoku4(glyphs: GlyphMode, n: usize, stream: u64) -> Dataset {
    let p = SudokuParams { glyphs, sigma: if glyphs == GlyphMode::Symbolic { 0.0 } else { 0.05 }, stream, ..SudokuParams::symbolic4(n, 1) };
    gen_sudoku(&p, None).unwrap().0
}

struct SudokuRun {
    out: Result<TrainOutput, String>,
    eval: Option<EvalReport>,
}

fn sudoku_run(glyphs: GlyphMode) -> SudokuRun {
    let train = sudoku4(glyphs, 2000, TRAIN_STREAM);
    let test = sudoku4(glyphs, 500, TEST_STREAM);
    let cfg = TrainConfig { perception: glyphs != GlyphMode::Symbolic, ..TrainConfig::default() };
    let out = run(cfg, &train).map_err(|e| e.to_string());
    let eval = out.as_ref().ok().map(|o| eval(o, &test));
    SudokuRun { out, eval }
}

fn symbolic_run() -> &'static SudokuRun {
    static RUN: OnceLock<SudokuRun> = OnceLock::new();
    RUN.get_or_init(|| sudoku_run(GlyphMode::Symbolic))
}

fn glyph_run() -> &'static SudokuRun {
    static RUN: OnceLock<SudokuRun> = OnceLock::new();
    RUN.get_or_init(|| sudoku_run(GlyphMode::Synthetic))
}

#[test]
fn c5_sudoku_recovery_symbolic() {
    let gt = sudoku_ground_truth(4).unwrap();
    let gt_rank = exact_rank(&system_rows(&gt));
    let r = symbolic_run();
    let (ok, detail) = match (&r.out, &r.eval) {
        (Ok(out), Some(ev)) => {
            let same = out.system.canonical() == gt.canonical();
            let learned_rank = exact_rank(&system_rows(&out.system));
            let ok = same && learned_rank == gt_rank && out.rank == gt_rank && ev.total_acc == 1.0;
            let detail = format!(
                "{} learned vs {} true constraints, identical {same}, rank {learned_rank} vs {gt_rank}, board accuracy {}",
                out.system.len(),
                gt.len(),
                pct(ev.total_acc)
            );
            (ok, detail)
        }
        (Err(e), _) => (false, format!("training failed: {e}")),
        (Ok(_), None) => unreachable!("evaluated with the run"),
    };
    report(5, "4x4 Sudoku constraints recovered from symbols", ok, detail);
}

#[test]
fn c5_ground_truth_rank_9x9() {
    let gt = sudoku_ground_truth(9).unwrap();
    let r = exact_rank(&system_rows(&gt));
    report(5, "9x9 ground-truth system has rank 249", gt.len() == 324 && r == 249, format!("{} constraints, rank {r}", gt.len()));
}

#[test]
fn c5_sudoku_glyphs_track_symbolic() {
    let (sym, gly) = (symbolic_run(), glyph_run());
    let (ok, detail) = match (&sym.eval, &gly.eval, &gly.out) {
        (Some(s), Some(g), Ok(out)) => {
            let gap = 100.0 * (s.total_acc - g.total_acc);
            (
                gap <= 5.0,
                format!(
                    "glyph total {} (perception {}, solving {}) vs symbolic {}, {} constraints",
                    pct(g.total_acc),
                    pct(g.perception_acc),
                    pct(g.solving_acc),
                    pct(s.total_acc),
                    out.system.len()
                ),
            )
        }
        _ => (false, format!("a run failed: symbolic {:?}, glyph {:?}", sym.out.as_ref().err(), gly.out.as_ref().err())),
    };
    report(5, "4x4 glyph Sudoku within 5 points of symbolic", ok, detail);
}

#[test]
#[ignore = "hours on one core"]
fn c5_sudoku9_symbolic() {
    let p = SudokuParams { size: 9, givens: (17, 34), ..SudokuParams::symbolic4(10_000, 1) };
    let (train, gt) = gen_sudoku(&p, None).unwrap();
    let gt_rank = exact_rank(&system_rows(&gt));
    let (ok, detail) = match run(symbolic_config(), &train) {
        Ok(out) => (
            out.system.canonical() == gt.canonical() && out.rank == 249 && gt_rank == 249,
            format!("{} constraints, rank {} (ground truth {gt_rank})", out.system.len(), out.rank),
        ),
        Err(e) => (false, format!("training failed: {e}")),
    };
    report(5, "9x9 Sudoku constraints recovered from symbols", ok, detail);
}

#[test]
fn c9_update_norms_shrink() {
    let r = glyph_run();
    let (ok, detail) = match &r.out {
        Ok(out) => {
            let m = &out.metrics;
            let k = (m.len() / 10).max(1);
            let mean = |rows: &[nesy_core::trainer::MetricsRow], f: fn(&nesy_core::trainer::MetricsRow) -> f64| {
                rows.iter().map(f).sum::<f64>() / rows.len() as f64
            };
            let (w0, w1) = (mean(&m[..k], |r| r.dw_sq), mean(&m[m.len() - k..], |r| r.dw_sq));
            let (t0, t1) = (mean(&m[..k], |r| r.dtheta_sq), mean(&m[m.len() - k..], |r| r.dtheta_sq));
            (w1 <= w0 && t1 <= t0, format!("W {w0:.3e} -> {w1:.3e}, theta {t0:.3e} -> {t1:.3e} over {} epochs", m.len()))
        }
        Err(e) => (false, format!("training failed: {e}")),
    };
    report(9, "update norms over the last tenth below the first tenth", ok, detail);
}

// ---------------------------------------------------------------- 6

/// Rank of rounded `W` at the final epoch, the epoch count, and the learned
/// system when the run finished cleanly.
fn ablation_arm(cfg: TrainConfig, train: &Dataset) -> (usize, usize, Option<TrainOutput>) {
    let mut t = Trainer::new(cfg, train).unwrap();
    let mut failed = false;
    while !t.is_done() {
        match t.step() {
            Ok(()) => {}
            Err(TrainError::NonBooleanAtTermination { .. }) => {
                failed = true;
                break;
            }
            Err(e) => panic!("ablation run failed: {e}"),
        }
    }
    let last = t.state.metrics.last().map_or(0, |r| r.rank);
    let epochs = t.state.metrics.len();
    (last, epochs, (!failed).then(|| t.output().unwrap()))
}

#[test]
fn c6_ablations() {
    let (mut ntr_below, mut ndc_below) = (0, 0);
    for s in 0..20u64 {
        let gen = |n, stream| gen_sudoku(&SudokuParams { stream, ..SudokuParams::symbolic4(n, 100 + s) }, None).unwrap().0;
        let (train, test) = (gen(1000, TRAIN_STREAM), gen(100, TEST_STREAM));
        let base = TrainConfig { seed: s, ..symbolic_config() };
        let (full_rank, epochs, full) = ablation_arm(base.clone(), &train);
        let (ntr_rank, _, _) = ablation_arm(TrainConfig { ablation: Ablation::Ntr, epochs, ..base.clone() }, &train);
        let (_, _, ndc) = ablation_arm(TrainConfig { ablation: Ablation::Ndc, ..base }, &train);
        let full_acc = full.as_ref().map_or(0.0, |o| eval(o, &test).solving_acc);
        let ndc_acc = ndc.as_ref().map_or(0.0, |o| eval(o, &test).solving_acc);
        ntr_below += (ntr_rank < full_rank) as usize;
        ndc_below += (ndc_acc < full_acc) as usize;
        println!("  seed {s}: rank {full_rank}/{ntr_rank}, solving {}/{}", pct(full_acc), pct(ndc_acc));
    }
    let ok = ntr_below >= 16 && ndc_below == 20;
    report(6, "ablations degrade the method", ok, format!("NTR rank below full in {ntr_below}/20, NDC solving below full in {ndc_below}/20"));
}

// ---------------------------------------------------------------- 7

fn satisfies(sys: &CardinalitySystem, a: &[bool]) -> bool {
    sys.constraints.iter().all(|c| {
        let s = c.vars.iter().filter(|&&i| a[i]).count() as u32;
        c.lo <= s && s <= c.hi
    })
}

fn enumerate_solve(p: &InferenceProblem) -> Option<f64> {
    let d = p.system.dim();
    (0..1u32 << d)
        .map(|k| (0..d).map(|j| (k >> j) & 1 == 1).collect::<Vec<bool>>())
        .filter(|a| p.fixed.iter().zip(a).all(|(f, &v)| f.is_none_or(|f| f == v)) && satisfies(&p.system, a))
        .map(|a| p.preferences.iter().zip(&a).filter(|(q, &v)| q.value != v).map(|(q, _)| q.weight).sum::<f64>())
        .min_by(f64::total_cmp)
}

fn random_problem(seed: u64) -> InferenceProblem {
    let mut rng = RngState::substream(77, seed);
    let d = 2 + rng.below(15);
    let mut constraints: Vec<CardinalityConstraint> = Vec::new();
    for _ in 0..rng.below(9) {
        let c = {
            let mut vars: Vec<usize> = (0..d).filter(|_| rng.below(2) == 1).collect();
            if vars.is_empty() {
                vars.push(rng.below(d));
            }
            let k = vars.len() as u32;
            let lo = rng.below(k as usize + 1) as u32;
            let hi = lo + rng.below((k - lo) as usize + 1) as u32;
            CardinalityConstraint::new(vars, lo, hi)
        };
        if !constraints.contains(&c) {
            constraints.push(c);
        }
    }
    let system = CardinalitySystem::new(VariableSpace::flat(d), constraints).unwrap();
    let preferences =
        (0..d).map(|_| if rng.below(4) == 0 { Preference::NONE } else { Preference { value: rng.below(2) == 1, weight: rng.uniform() } }).collect();
    let fixed = (0..d).map(|_| (rng.below(6) == 0).then(|| rng.below(2) == 1)).collect();
    InferenceProblem::new(system, preferences, fixed, Limits::default()).unwrap()
}

#[test]
fn c7_reasoner_matches_enumeration() {
    let mut agree = 0;
    for k in 0..200 {
        let p = random_problem(k);
        let oracle = enumerate_solve(&p);
        let ok = match solve(&p) {
            Ok(sol) => match oracle {
                Some(best) => {
                    sol.status == Status::Optimal
                        && (sol.cost - best).abs() <= 1e-9
                        && satisfies(&p.system, &sol.assignment)
                        && p.fixed.iter().zip(&sol.assignment).all(|(f, &v)| f.is_none_or(|f| f == v))
                }
                None => sol.status == Status::Infeasible,
            },
            Err(_) => oracle.is_none(),
        };
        agree += ok as usize;
    }
    report(7, "reasoner cost equals exhaustive search", agree == 200, format!("{agree}/200"));
}

// ---------------------------------------------------------------- 8

fn squared_loss(m: &MlpModel, x: &[f64], t: &[f64]) -> f64 {
    m.forward(x).unwrap().iter().zip(t).map(|(p, t)| (p - t).powi(2)).sum()
}

#[test]
fn c8_gradients_match_central_differences() {
    let h = 1e-6;
    let mut worst_all = 0.0f64;
    let mut within = 0;
    for k in 0..20u64 {
        let mut rng = RngState::substream(88, k);
        let depth = 2 + rng.below(2);
        let sizes: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(6)).collect();
        let out = sizes[depth];
        let head = if k % 2 == 0 { Head::Softmax { groups: vec![(0..out).collect()] } } else { Head::Logistic };
        let mut model = MlpModel::new(&sizes, head, false, &mut rng).unwrap();
        for l in &mut model.layers {
            l.b.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let t: Vec<f64> = (0..out).map(|_| rng.uniform()).collect();
        let g = model.backward_mse(&x, &t).unwrap();
        let mut worst = 0.0f64;
        for l in 0..model.layers.len() {
            let nw = model.layers[l].w.as_slice().len();
            for j in 0..nw + model.layers[l].b.len() {
                let analytic = if j < nw { g.layers[l].w.as_slice()[j] } else { g.layers[l].b[j - nw] };
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    if j < nw {
                        m.layers[l].w.as_mut_slice()[j] += delta;
                    } else {
                        m.layers[l].b[j - nw] += delta;
                    }
                    squared_loss(&m, &x, &t)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-9 {
                    worst = worst.max((analytic - numeric).abs() / scale);
                }
            }
        }
        within += (worst < 1e-4) as usize;
        worst_all = worst_all.max(worst);
    }
    report(8, "analytic gradients match central differences", within == 20, format!("{within}/20, worst relative error {worst_all:.2e}"));
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_identical_runs_are_byte_identical() {
    let p = SudokuParams { glyphs: GlyphMode::Synthetic, sigma: 0.05, ..SudokuParams::symbolic4(60, 9) };
    let train = gen_sudoku(&p, None).unwrap().0;
    let cfg = TrainConfig { seed: 3, m: Some(64), hidden: vec![16], epochs: 300, ..TrainConfig::default() };
    let go = || {
        let mut t = Trainer::new(cfg.clone(), &train).unwrap();
        while !t.is_done() {
            if t.step().is_err() {
                break;
            }
        }
        let system = t.output().map(|o| o.system.to_json()).unwrap_or_default();
        (metrics_csv(&t.state.metrics), system, serde_json::to_string(&t.state.model).unwrap())
    };
    let (a, b) = (go(), go());
    let ok = a == b && !a.0.is_empty();
    report(10, "repeated runs are byte-identical", ok, format!("{} metrics bytes, {} constraint bytes", a.0.len(), a.1.len()));
}
