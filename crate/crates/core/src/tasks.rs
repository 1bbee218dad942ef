//! Dataset generators with known ground truth, and the JSONL dataset format.
//!
//! Bit layouts:
//! - xor: `L` observed input bits, `L − 1` auxiliary latent bits, one output bit.
//! - sudoku: the board as `n²·n` latent bits, bit `cell·n + digit`; given cells
//!   are carried in `z`, blank cells in `y` (both indexed like the board).
//! - nonogram: one-hot clue over every clue of the line length, `size − 1`
//!   auxiliary latent bits, `size` output bits for the line.
//! - gridpath: `H·W` latent obstacle bits, then `H·W` output path bits.

use std::collections::{BinaryHeap, VecDeque};
use std::cmp::Reverse;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{CardinalityConstraint, CardinalitySystem, Predicate, VariableSpace};
use crate::numkit::RngState;
use crate::perception::IdxDataset;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Stream ids that keep train and test draws disjoint for the same seed.
pub const TRAIN_STREAM: u64 = 0;
pub const TEST_STREAM: u64 = 1;

/// Glyph font draws come from this fixed seed so every split shares the font.
const FONT_SEED: u64 = 0x00f0_6e75;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task parameters: {0}")]
    InvalidParams(String),
    #[error("idx mode needs digit images; none were supplied")]
    IdxUnavailable,
    #[error("no path between the chosen endpoints")]
    NoPath,
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphMode {
    Symbolic,
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskDescriptor {
    Xor { length: usize },
    Sudoku { size: usize, glyphs: GlyphMode, sigma: f64, cell_pixels: usize },
    Nonogram { size: usize, clues: Vec<Vec<u32>> },
    Gridpath { height: usize, width: usize, obstacles: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: TaskDescriptor,
    pub space: VariableSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSample {
    pub x: Option<Vec<f64>>,
    pub y: Vec<u8>,
    pub z: Option<Vec<u8>>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn space(&self) -> &VariableSpace {
        &self.header.space
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), TaskError> {
        writeln!(out, "{}", serde_json::to_string(&self.header).expect("header serializes"))?;
        for s in &self.samples {
            writeln!(out, "{}", serde_json::to_string(s).expect("sample serializes"))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, TaskError> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(TaskError::Format { line: 1, message: "empty dataset".into() })?;
        let header: DatasetHeader =
            serde_json::from_str(&first?).map_err(|e| TaskError::Format { line: 1, message: e.to_string() })?;
        if header.version != DATASET_FORMAT_VERSION {
            return Err(TaskError::Format { line: 1, message: format!("unsupported version {}", header.version) });
        }
        header.space.validate().map_err(|e| TaskError::Format { line: 1, message: e.to_string() })?;
        let mut samples = Vec::new();
        for (i, line) in lines {
            let s: TaskSample =
                serde_json::from_str(&line?).map_err(|e| TaskError::Format { line: i + 1, message: e.to_string() })?;
            check_sample(&header, &s).map_err(|message| TaskError::Format { line: i + 1, message })?;
            samples.push(s);
        }
        Ok(Dataset { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn check_sample(h: &DatasetHeader, s: &TaskSample) -> Result<(), String> {
    let bits = |v: &[u8]| v.iter().all(|&b| b <= 1);
    if !bits(&s.y) || !s.z.as_deref().map_or(true, bits) || !bits(&s.mask) {
        return Err("y, z and mask must be 0/1".into());
    }
    let sp = &h.space;
    let (xlen, ylen, zlen, mlen): (Option<usize>, usize, Option<usize>, usize) = match &h.task {
        TaskDescriptor::Xor { length } => (Some(*length), 1, None, 0),
        TaskDescriptor::Sudoku { size, glyphs, cell_pixels, .. } => {
            let cells = size * size;
            let x = (*glyphs != GlyphMode::Symbolic).then_some(cells * cell_pixels);
            (x, sp.latent_bits, Some(sp.latent_bits), cells)
        }
        TaskDescriptor::Nonogram { size, clues } => (Some(clues.len()), *size, None, 0),
        TaskDescriptor::Gridpath { height, width, .. } => (Some(height * width), height * width, Some(height * width), 0),
    };
    if s.x.as_ref().map(Vec::len) != xlen {
        return Err(format!("x should have {xlen:?} entries"));
    }
    if s.y.len() != ylen || s.mask.len() != mlen {
        return Err(format!("y should have {ylen} entries and mask {mlen}"));
    }
    if s.z.as_ref().map(Vec::len) != zlen {
        return Err(format!("z should have {zlen:?} entries"));
    }
    if s.x.as_ref().map_or(false, |x| x.iter().any(|v| !v.is_finite())) {
        return Err("x must be finite".into());
    }
    Ok(())
}

fn bits_to_f64(b: &[bool]) -> Vec<f64> {
    b.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
}

fn bits_to_u8(b: &[bool]) -> Vec<u8> {
    b.iter().map(|&v| v as u8).collect()
}

// ---------------------------------------------------------------- xor

pub fn parity(bits: &[bool]) -> bool {
    bits.iter().filter(|&&b| b).count() % 2 == 1
}

pub fn xor_space(length: usize) -> VariableSpace {
    let aux = length.saturating_sub(1);
    VariableSpace {
        observed_input_bits: length,
        latent_bits: aux,
        output_bits: 1,
        auxiliary_bits: aux,
        groups: Vec::new(),
        names: None,
    }
}

pub fn gen_xor(length: usize, n: usize, seed: u64, stream: u64) -> Result<Dataset, TaskError> {
    if length == 0 || n == 0 {
        return Err(TaskError::InvalidParams("xor needs L >= 1 and N >= 1".into()));
    }
    let mut rng = RngState::substream(seed, stream);
    let samples = (0..n)
        .map(|_| {
            let x: Vec<bool> = (0..length).map(|_| rng.next_u64() & 1 == 1).collect();
            TaskSample { y: vec![parity(&x) as u8], x: Some(bits_to_f64(&x)), z: None, mask: Vec::new() }
        })
        .collect();
    Ok(Dataset {
        header: DatasetHeader { version: DATASET_FORMAT_VERSION, task: TaskDescriptor::Xor { length }, space: xor_space(length) },
        samples,
    })
}

/// Accepts visible assignments `(x, y)` with `y = parity(x)`.
pub fn parity_predicate(length: usize) -> Predicate<impl Fn(&[bool]) -> bool> {
    Predicate { space: xor_space(length), f: move |v: &[bool]| parity(&v[..length]) == v[length] }
}

// ---------------------------------------------------------------- sudoku

fn box_dims(size: usize) -> Result<(usize, usize), TaskError> {
    match size {
        4 => Ok((2, 2)),
        9 => Ok((3, 3)),
        _ => Err(TaskError::InvalidParams(format!("sudoku size must be 4 or 9, got {size}"))),
    }
}

pub fn sudoku_space(size: usize) -> VariableSpace {
    let cells = size * size;
    let mut sp = VariableSpace::flat(cells * size);
    sp.groups = (0..cells).map(|c| (c * size..(c + 1) * size).collect()).collect();
    sp
}

/// Row, column, box and cell one-hot constraints, each with bounds [1, 1].
pub fn sudoku_ground_truth(size: usize) -> Result<CardinalitySystem, TaskError> {
    let (br, bc) = box_dims(size)?;
    let bit = |r: usize, c: usize, k: usize| (r * size + c) * size + k;
    let mut cons = Vec::new();
    for r in 0..size {
        for k in 0..size {
            cons.push((0..size).map(|c| bit(r, c, k)).collect::<Vec<_>>());
        }
    }
    for c in 0..size {
        for k in 0..size {
            cons.push((0..size).map(|r| bit(r, c, k)).collect());
        }
    }
    for b in 0..size {
        let (r0, c0) = ((b / (size / bc)) * br, (b % (size / bc)) * bc);
        for k in 0..size {
            cons.push((0..br).flat_map(|a| (0..bc).map(move |e| bit(r0 + a, c0 + e, k))).collect());
        }
    }
    for cell in 0..size * size {
        cons.push((cell * size..(cell + 1) * size).collect());
    }
    let constraints = cons.into_iter().map(|v| CardinalityConstraint::new(v, 1, 1)).collect();
    CardinalitySystem::new(sudoku_space(size), constraints).map_err(|e| TaskError::InvalidParams(e.to_string()))
}

/// Bitmask backtracking over a board of digits `0..size` (`None` = blank).
struct SudokuSolver {
    size: usize,
    br: usize,
    bc: usize,
}

impl SudokuSolver {
    fn box_of(&self, r: usize, c: usize) -> usize {
        (r / self.br) * (self.size / self.bc) + c / self.bc
    }

    fn masks(&self, board: &[Option<usize>]) -> Option<(Vec<u32>, Vec<u32>, Vec<u32>)> {
        let n = self.size;
        let (mut rows, mut cols, mut boxes) = (vec![0u32; n], vec![0u32; n], vec![0u32; n]);
        for (i, v) in board.iter().enumerate() {
            if let Some(k) = v {
                let (r, c) = (i / n, i % n);
                let b = self.box_of(r, c);
                let bit = 1u32 << k;
                if rows[r] & bit != 0 || cols[c] & bit != 0 || boxes[b] & bit != 0 {
                    return None;
                }
                rows[r] |= bit;
                cols[c] |= bit;
                boxes[b] |= bit;
            }
        }
        Some((rows, cols, boxes))
    }

    /// Number of completions, stopping once `limit` is reached.
    fn count(&self, board: &mut Vec<Option<usize>>, limit: usize) -> usize {
        let Some((mut rows, mut cols, mut boxes)) = self.masks(board) else { return 0 };
        let mut found = 0;
        self.count_rec(board, &mut rows, &mut cols, &mut boxes, limit, &mut found);
        found
    }

    fn count_rec(
        &self,
        board: &mut Vec<Option<usize>>,
        rows: &mut [u32],
        cols: &mut [u32],
        boxes: &mut [u32],
        limit: usize,
        found: &mut usize,
    ) {
        let n = self.size;
        let full = (1u32 << n) - 1;
        // most constrained blank first
        let mut pick: Option<(usize, u32)> = None;
        for (i, v) in board.iter().enumerate() {
            if v.is_none() {
                let (r, c) = (i / n, i % n);
                let avail = full & !(rows[r] | cols[c] | boxes[self.box_of(r, c)]);
                if pick.map_or(true, |(_, a)| avail.count_ones() < a.count_ones()) {
                    pick = Some((i, avail));
                    if avail.count_ones() <= 1 {
                        break;
                    }
                }
            }
        }
        let Some((i, avail)) = pick else {
            *found += 1;
            return;
        };
        let (r, c) = (i / n, i % n);
        let b = self.box_of(r, c);
        for k in 0..n {
            if avail & (1 << k) == 0 {
                continue;
            }
            board[i] = Some(k);
            rows[r] |= 1 << k;
            cols[c] |= 1 << k;
            boxes[b] |= 1 << k;
            self.count_rec(board, rows, cols, boxes, limit, found);
            rows[r] &= !(1 << k);
            cols[c] &= !(1 << k);
            boxes[b] &= !(1 << k);
            board[i] = None;
            if *found >= limit {
                return;
            }
        }
    }

    fn random_full(&self, rng: &mut RngState) -> Vec<usize> {
        let n = self.size;
        let mut board = vec![None; n * n];
        let (mut rows, mut cols, mut boxes) = (vec![0u32; n], vec![0u32; n], vec![0u32; n]);
        let ok = self.fill(0, &mut board, &mut rows, &mut cols, &mut boxes, rng);
        debug_assert!(ok);
        board.into_iter().map(|v| v.expect("filled")).collect()
    }

    fn fill(
        &self,
        i: usize,
        board: &mut Vec<Option<usize>>,
        rows: &mut [u32],
        cols: &mut [u32],
        boxes: &mut [u32],
        rng: &mut RngState,
    ) -> bool {
        let n = self.size;
        if i == n * n {
            return true;
        }
        let (r, c) = (i / n, i % n);
        let b = self.box_of(r, c);
        let mut digits: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut digits);
        for k in digits {
            let bit = 1u32 << k;
            if (rows[r] | cols[c] | boxes[b]) & bit != 0 {
                continue;
            }
            board[i] = Some(k);
            rows[r] |= bit;
            cols[c] |= bit;
            boxes[b] |= bit;
            if self.fill(i + 1, board, rows, cols, boxes, rng) {
                return true;
            }
            rows[r] &= !bit;
            cols[c] &= !bit;
            boxes[b] &= !bit;
            board[i] = None;
        }
        false
    }
}

/// Counts completions of a partial board (stops at `limit`).
pub fn sudoku_solution_count(size: usize, board: &[Option<usize>], limit: usize) -> Result<usize, TaskError> {
    let (br, bc) = box_dims(size)?;
    if board.len() != size * size {
        return Err(TaskError::InvalidParams("board has the wrong number of cells".into()));
    }
    Ok(SudokuSolver { size, br, bc }.count(&mut board.to_vec(), limit))
}

/// Random 8×8 bitmaps, one per digit, pairwise distinct.
pub fn glyph_font(size: usize) -> Vec<Vec<bool>> {
    let mut rng = RngState::new(FONT_SEED ^ size as u64);
    let mut font: Vec<Vec<bool>> = Vec::new();
    while font.len() < size {
        let g: Vec<bool> = (0..64).map(|_| rng.bernoulli(0.5)).collect();
        if !font.contains(&g) {
            font.push(g);
        }
    }
    font
}

#[derive(Debug, Clone, PartialEq)]
pub struct SudokuParams {
    pub size: usize,
    pub n: usize,
    pub givens: (usize, usize),
    pub glyphs: GlyphMode,
    pub sigma: f64,
    pub seed: u64,
    pub stream: u64,
}

impl SudokuParams {
    pub fn symbolic4(n: usize, seed: u64) -> Self {
        SudokuParams { size: 4, n, givens: (4, 8), glyphs: GlyphMode::Symbolic, sigma: 0.0, seed, stream: TRAIN_STREAM }
    }
}

/// Puzzles with unique solutions. Cells are removed in random order while the
/// solution stays unique, until the drawn givens target is reached.
pub fn gen_sudoku(p: &SudokuParams, idx: Option<&IdxDataset>) -> Result<(Dataset, CardinalitySystem), TaskError> {
    let (br, bc) = box_dims(p.size)?;
    let size = p.size;
    let cells = size * size;
    if p.givens.0 > p.givens.1 || p.givens.1 > cells || p.n == 0 {
        return Err(TaskError::InvalidParams(format!("givens range {:?} for {cells} cells", p.givens)));
    }
    if !(0.0..=1.0).contains(&p.sigma) {
        return Err(TaskError::InvalidParams(format!("noise rate {} outside [0, 1]", p.sigma)));
    }
    let cell_pixels = match p.glyphs {
        GlyphMode::Symbolic => 0,
        GlyphMode::Synthetic => 64,
        GlyphMode::Idx => {
            let d = idx.ok_or(TaskError::IdxUnavailable)?;
            for k in 1..=size as u8 {
                if !d.labels.contains(&k) {
                    return Err(TaskError::InvalidParams(format!("idx data has no image of digit {k}")));
                }
            }
            d.images.rows * d.images.cols
        }
    };
    let solver = SudokuSolver { size, br, bc };
    let font = glyph_font(size);
    let by_label: Vec<Vec<usize>> = match (p.glyphs, idx) {
        (GlyphMode::Idx, Some(d)) => {
            (1..=size as u8).map(|k| (0..d.labels.len()).filter(|&i| d.labels[i] == k).collect()).collect()
        }
        _ => Vec::new(),
    };
    let mut rng = RngState::substream(p.seed, p.stream);
    let mut samples = Vec::with_capacity(p.n);
    for _ in 0..p.n {
        let full = solver.random_full(&mut rng);
        let target = p.givens.0 + rng.below(p.givens.1 - p.givens.0 + 1);
        let mut board: Vec<Option<usize>> = full.iter().map(|&k| Some(k)).collect();
        let mut order: Vec<usize> = (0..cells).collect();
        rng.shuffle(&mut order);
        let mut givens = cells;
        for c in order {
            if givens <= target {
                break;
            }
            let keep = board[c].take();
            if solver.count(&mut board, 2) == 1 {
                givens -= 1;
            } else {
                board[c] = keep;
            }
        }
        let mut z = vec![0u8; cells * size];
        let mut y = vec![0u8; cells * size];
        let mask: Vec<u8> = board.iter().map(|v| v.is_some() as u8).collect();
        for c in 0..cells {
            let bit = c * size + full[c];
            if board[c].is_some() {
                z[bit] = 1;
            } else {
                y[bit] = 1;
            }
        }
        let x = match p.glyphs {
            GlyphMode::Symbolic => None,
            GlyphMode::Synthetic => {
                let mut x = vec![0.0; cells * 64];
                for c in (0..cells).filter(|&c| board[c].is_some()) {
                    for (j, &on) in font[full[c]].iter().enumerate() {
                        let flip = rng.bernoulli(p.sigma);
                        x[c * 64 + j] = if on != flip { 1.0 } else { 0.0 };
                    }
                }
                Some(x)
            }
            GlyphMode::Idx => {
                let d = idx.expect("checked above");
                let mut x = vec![0.0; cells * cell_pixels];
                for c in (0..cells).filter(|&c| board[c].is_some()) {
                    let pool = &by_label[full[c]];
                    let img = d.images.image(pool[rng.below(pool.len())]);
                    for (j, &px) in img.iter().enumerate() {
                        x[c * cell_pixels + j] = px as f64 / 255.0;
                    }
                }
                Some(x)
            }
        };
        samples.push(TaskSample { x, y, z: Some(z), mask });
    }
    let header = DatasetHeader {
        version: DATASET_FORMAT_VERSION,
        task: TaskDescriptor::Sudoku { size, glyphs: p.glyphs, sigma: p.sigma, cell_pixels },
        space: sudoku_space(size),
    };
    Ok((Dataset { header, samples }, sudoku_ground_truth(size)?))
}

// ---------------------------------------------------------------- nonogram

/// Run lengths of the filled cells.
pub fn line_clue(line: &[bool]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut run = 0;
    for &b in line {
        if b {
            run += 1;
        } else if run > 0 {
            out.push(run);
            run = 0;
        }
    }
    if run > 0 {
        out.push(run);
    }
    out
}

/// Every clue a line of this length can have, in order of first appearance
/// when lines are enumerated as binary numbers.
pub fn all_clues(size: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    for k in 0u64..(1u64 << size) {
        let line: Vec<bool> = (0..size).map(|j| (k >> (size - 1 - j)) & 1 == 1).collect();
        let c = line_clue(&line);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// All lines of length `size` whose clue is `clue`.
pub fn lines_with_clue(size: usize, clue: &[u32]) -> Vec<Vec<bool>> {
    (0u64..(1u64 << size))
        .map(|k| (0..size).map(|j| (k >> (size - 1 - j)) & 1 == 1).collect::<Vec<bool>>())
        .filter(|l| line_clue(l) == clue)
        .collect()
}

pub fn nonogram_space(size: usize, clue_count: usize) -> VariableSpace {
    VariableSpace {
        observed_input_bits: clue_count,
        latent_bits: size - 1,
        output_bits: size,
        auxiliary_bits: size - 1,
        groups: vec![(0..clue_count).collect()],
        names: None,
    }
}

/// Lines are the rows then columns of random boards (fill rate 0.4), taken
/// until `n` are collected.
pub fn gen_nonogram(size: usize, n: usize, seed: u64, stream: u64) -> Result<Dataset, TaskError> {
    if size < 2 || size > 16 || n == 0 {
        return Err(TaskError::InvalidParams(format!("nonogram size {size} outside [2, 16] or N = 0")));
    }
    let clues = all_clues(size);
    let mut rng = RngState::substream(seed, stream);
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let board: Vec<bool> = (0..size * size).map(|_| rng.bernoulli(0.4)).collect();
        let rows = (0..size).map(|r| (0..size).map(|c| board[r * size + c]).collect::<Vec<_>>());
        let cols = (0..size).map(|c| (0..size).map(|r| board[r * size + c]).collect::<Vec<_>>());
        for line in rows.chain(cols) {
            if samples.len() == n {
                break;
            }
            let clue = line_clue(&line);
            let k = clues.iter().position(|c| *c == clue).expect("every clue is enumerated");
            let mut x = vec![0.0; clues.len()];
            x[k] = 1.0;
            samples.push(TaskSample { x: Some(x), y: bits_to_u8(&line), z: None, mask: Vec::new() });
        }
    }
    let header = DatasetHeader {
        version: DATASET_FORMAT_VERSION,
        space: nonogram_space(size, clues.len()),
        task: TaskDescriptor::Nonogram { size, clues },
    };
    Ok(Dataset { header, samples })
}

// ---------------------------------------------------------------- gridpath

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub blocked: Vec<bool>,
}

impl Grid {
    pub fn open(height: usize, width: usize) -> Self {
        Grid { height, width, blocked: vec![false; height * width] }
    }

    fn neighbors(&self, (r, c): (usize, usize)) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cand = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        cand.into_iter().filter(move |&(a, b)| a < self.height && b < self.width && !self.blocked[a * self.width + b])
    }
}

/// 4-neighbour unit-cost A* with the Manhattan heuristic. Open nodes are
/// expanded in `(f, row, col)` order. Returns the cells from start to goal.
pub fn astar(grid: &Grid, start: (usize, usize), goal: (usize, usize)) -> Result<Vec<(usize, usize)>, TaskError> {
    let w = grid.width;
    let inside = |(r, c): (usize, usize)| r < grid.height && c < w;
    if !inside(start) || !inside(goal) || grid.blocked[start.0 * w + start.1] || grid.blocked[goal.0 * w + goal.1] {
        return Err(TaskError::InvalidParams("endpoints must be open cells inside the grid".into()));
    }
    let h = |(r, c): (usize, usize)| r.abs_diff(goal.0) + c.abs_diff(goal.1);
    let mut g = vec![usize::MAX; grid.height * w];
    let mut parent: Vec<Option<usize>> = vec![None; grid.height * w];
    let mut closed = vec![false; grid.height * w];
    let mut open = BinaryHeap::new();
    g[start.0 * w + start.1] = 0;
    open.push(Reverse((h(start), start.0, start.1)));
    while let Some(Reverse((_, r, c))) = open.pop() {
        let i = r * w + c;
        if closed[i] {
            continue;
        }
        closed[i] = true;
        if (r, c) == goal {
            let mut path = vec![(r, c)];
            let mut cur = i;
            while let Some(p) = parent[cur] {
                path.push((p / w, p % w));
                cur = p;
            }
            path.reverse();
            return Ok(path);
        }
        for nb in grid.neighbors((r, c)) {
            let j = nb.0 * w + nb.1;
            let ng = g[i] + 1;
            if !closed[j] && ng < g[j] {
                g[j] = ng;
                parent[j] = Some(i);
                open.push(Reverse((ng + h(nb), nb.0, nb.1)));
            }
        }
    }
    Err(TaskError::NoPath)
}

/// Shortest path length in steps by breadth-first search.
pub fn bfs_distance(grid: &Grid, start: (usize, usize), goal: (usize, usize)) -> Option<usize> {
    let w = grid.width;
    let mut dist = vec![usize::MAX; grid.height * w];
    let mut q = VecDeque::new();
    dist[start.0 * w + start.1] = 0;
    q.push_back(start);
    while let Some(cur) = q.pop_front() {
        if cur == goal {
            return Some(dist[cur.0 * w + cur.1]);
        }
        for nb in grid.neighbors(cur) {
            let j = nb.0 * w + nb.1;
            if dist[j] == usize::MAX {
                dist[j] = dist[cur.0 * w + cur.1] + 1;
                q.push_back(nb);
            }
        }
    }
    None
}

pub fn gridpath_space(height: usize, width: usize) -> VariableSpace {
    VariableSpace {
        observed_input_bits: 0,
        latent_bits: height * width,
        output_bits: height * width,
        auxiliary_bits: 0,
        groups: Vec::new(),
        names: None,
    }
}

/// Noise amplitude added to obstacle indicators in `x`.
pub const GRID_NOISE: f64 = 0.3;

/// Start is fixed at the top-left cell; goals are drawn until reachable.
pub fn gen_gridpath(height: usize, width: usize, obstacles: usize, n: usize, seed: u64, stream: u64) -> Result<Dataset, TaskError> {
    let cells = height * width;
    if height == 0 || width == 0 || cells < 2 || obstacles + 2 > cells || n == 0 {
        return Err(TaskError::InvalidParams(format!("{obstacles} obstacles on a {height}x{width} grid")));
    }
    let mut rng = RngState::substream(seed, stream);
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let mut grid = Grid::open(height, width);
        let mut pool: Vec<usize> = (1..cells).collect();
        rng.shuffle(&mut pool);
        for &i in &pool[..obstacles] {
            grid.blocked[i] = true;
        }
        let open: Vec<usize> = (1..cells).filter(|&i| !grid.blocked[i]).collect();
        let mut path = None;
        for _ in 0..20 {
            let gi = open[rng.below(open.len())];
            if let Ok(p) = astar(&grid, (0, 0), (gi / width, gi % width)) {
                path = Some(p);
                break;
            }
        }
        let Some(path) = path else { continue };
        let mut y = vec![0u8; cells];
        for (r, c) in path {
            y[r * width + c] = 1;
        }
        let z = bits_to_u8(&grid.blocked);
        let x = grid.blocked.iter().map(|&b| (b as u8 as f64) + rng.uniform_range(-GRID_NOISE, GRID_NOISE)).collect();
        samples.push(TaskSample { x: Some(x), y, z: Some(z), mask: Vec::new() });
    }
    let header = DatasetHeader {
        version: DATASET_FORMAT_VERSION,
        task: TaskDescriptor::Gridpath { height, width, obstacles },
        space: gridpath_space(height, width),
    };
    Ok(Dataset { header, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::evaluate;

    fn board_bits(s: &TaskSample) -> Vec<bool> {
        s.y.iter().zip(s.z.as_ref().unwrap()).map(|(&a, &b)| a == 1 || b == 1).collect()
    }

    #[test]
    fn xor_examples() {
        assert!(!parity(&[true, false, true]));
        let d = gen_xor(1, 50, 3, TRAIN_STREAM).unwrap();
        assert!(d.samples.iter().all(|s| s.y[0] as f64 == s.x.as_ref().unwrap()[0]));
        let big = gen_xor(20, 9000, 1, TRAIN_STREAM).unwrap();
        let ones = big.samples.iter().filter(|s| s.y[0] == 1).count() as f64 / 9000.0;
        assert!((ones - 0.5).abs() <= 0.02);
        assert_eq!(big.space().dim(), 40);
    }

    #[test]
    fn sudoku_boards_satisfy_ground_truth() {
        let (d, gt) = gen_sudoku(&SudokuParams::symbolic4(50, 4), None).unwrap();
        assert_eq!(gt.len(), 64);
        for s in &d.samples {
            assert!(evaluate(&gt, &board_bits(s)).unwrap().satisfied);
            let givens: Vec<Option<usize>> =
                (0..16).map(|c| (s.mask[c] == 1).then(|| (0..4).find(|&k| s.z.as_ref().unwrap()[c * 4 + k] == 1).unwrap())).collect();
            assert_eq!(sudoku_solution_count(4, &givens, 2).unwrap(), 1);
        }
        assert_eq!(sudoku_ground_truth(9).unwrap().len(), 324);
    }

    #[test]
    fn nine_by_nine_generation() {
        let p = SudokuParams { size: 9, n: 3, givens: (17, 34), glyphs: GlyphMode::Symbolic, sigma: 0.0, seed: 2, stream: 0 };
        let (d, gt) = gen_sudoku(&p, None).unwrap();
        for s in &d.samples {
            assert!(evaluate(&gt, &board_bits(s)).unwrap().satisfied);
        }
    }

    #[test]
    fn clean_glyphs_are_classwise_identical() {
        let p = SudokuParams { glyphs: GlyphMode::Synthetic, ..SudokuParams::symbolic4(10, 1) };
        let (d, _) = gen_sudoku(&p, None).unwrap();
        let font = glyph_font(4);
        for s in &d.samples {
            let x = s.x.as_ref().unwrap();
            for c in (0..16).filter(|&c| s.mask[c] == 1) {
                let k = (0..4).find(|&k| s.z.as_ref().unwrap()[c * 4 + k] == 1).unwrap();
                assert_eq!(&x[c * 64..(c + 1) * 64], bits_to_f64(&font[k]).as_slice());
            }
        }
    }

    #[test]
    fn idx_mode_needs_images() {
        let p = SudokuParams { glyphs: GlyphMode::Idx, ..SudokuParams::symbolic4(1, 1) };
        assert!(matches!(gen_sudoku(&p, None), Err(TaskError::IdxUnavailable)));
    }

    #[test]
    fn nonogram_clues() {
        assert_eq!(lines_with_clue(7, &[7]), vec![vec![true; 7]]);
        let alt: Vec<bool> = [1, 0, 1, 0, 1, 0, 1].iter().map(|&v| v == 1).collect();
        assert_eq!(lines_with_clue(7, &[1, 1, 1, 1]), vec![alt]);
        assert_eq!(lines_with_clue(7, &[]), vec![vec![false; 7]]);
        let d = gen_nonogram(7, 30, 5, TRAIN_STREAM).unwrap();
        let clues = all_clues(7);
        for s in &d.samples {
            let k = s.x.as_ref().unwrap().iter().position(|&v| v == 1.0).unwrap();
            let line: Vec<bool> = s.y.iter().map(|&v| v == 1).collect();
            assert_eq!(line_clue(&line), clues[k]);
        }
    }

    #[test]
    fn astar_examples() {
        assert_eq!(astar(&Grid::open(3, 3), (0, 0), (2, 2)).unwrap().len(), 5);
        let mut walled = Grid::open(3, 3);
        walled.blocked[1 * 3 + 2] = true;
        walled.blocked[2 * 3 + 1] = true;
        assert!(matches!(astar(&walled, (0, 0), (2, 2)), Err(TaskError::NoPath)));
        let mut rng = RngState::new(8);
        for _ in 0..100 {
            let mut g = Grid::open(10, 10);
            for i in 1..99 {
                g.blocked[i] = rng.bernoulli(0.3);
            }
            match astar(&g, (0, 0), (9, 9)) {
                Ok(p) => assert_eq!(Some(p.len() - 1), bfs_distance(&g, (0, 0), (9, 9))),
                Err(_) => assert_eq!(bfs_distance(&g, (0, 0), (9, 9)), None),
            }
        }
    }

    #[test]
    fn jsonl_round_trip_and_determinism() {
        let d = gen_gridpath(5, 5, 5, 4, 2, TRAIN_STREAM).unwrap();
        let text = d.to_jsonl();
        assert_eq!(text, gen_gridpath(5, 5, 5, 4, 2, TRAIN_STREAM).unwrap().to_jsonl());
        assert_eq!(text.lines().count(), 5);
        assert_eq!(Dataset::read_jsonl(text.as_bytes()).unwrap(), d);
        let bad = text.replacen("\"y\":[", "\"y\":[7,", 1);
        assert!(matches!(Dataset::read_jsonl(bad.as_bytes()), Err(TaskError::Format { line: 2, .. })));
    }
}
