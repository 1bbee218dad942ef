//! Dense linear algebra and seeded randomness.
//!
//! Everything here is deterministic. The random generator is ChaCha8 (the
//! `rand_chacha` implementation) seeded from a 64-bit value; its stream position
//! is the generator's 128-bit word counter, so a state can be saved and resumed
//! exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pivots at or below this value abort a Cholesky factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("matrix is not positive definite: pivot {index} is {pivot}")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("non-finite entry at flat index {0}")]
    NonFinite(usize),
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = NumError;
    fn try_from(raw: RawMatrix) -> Result<Self, NumError> {
        DenseMatrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty list gives a 0x0 matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumError::ShapeMismatch(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics, and a 0-column matrix still has rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, NumError> {
        if self.cols != other.rows {
            return Err(NumError::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, NumError> {
        if v.len() != self.cols {
            return Err(NumError::ShapeMismatch(format!("{}x{} times vector of {}", self.rows, self.cols, v.len())));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    /// `AᵀA`, skipping zero entries so one-hot data stays cheap.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.cols;
        let mut g = DenseMatrix::zeros(n, n);
        let mut nz: Vec<(usize, f64)> = Vec::with_capacity(n);
        for r in self.iter_rows() {
            nz.clear();
            nz.extend(r.iter().copied().enumerate().filter(|&(_, v)| v != 0.0));
            for (a, &(i, vi)) in nz.iter().enumerate() {
                for &(j, vj) in &nz[a..] {
                    g.data[i * n + j] += vi * vj;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    /// Column sums, i.e. `Aᵀe`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (a, v) in s.iter_mut().zip(r) {
                *a += v;
            }
        }
        s
    }

    pub fn add_diagonal(&mut self, c: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += c;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute entry; this is the norm used for all tolerances here.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, NumError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumError::ShapeMismatch("subtracting matrices of different shape".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor `A = LLᵀ`, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self, NumError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(NumError::ShapeMismatch(format!("{}x{} is not square", a.rows(), a.cols())));
        }
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (a.get(i, j), a.get(j, i));
                if (x - y).abs() > 1e-10 * (1.0 + x.abs().max(y.abs())) {
                    return Err(NumError::NotSymmetric { row: i, col: j });
                }
            }
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > PIVOT_TOLERANCE) {
                return Err(NumError::NotPositiveDefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                s -= dot(ri, rj);
                l[i * n + j] = s / d;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Overwrites `b` with `A⁻¹b`.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let s = b[i] - dot(&self.l[i * n..i * n + i], &b[..i]);
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }
}

/// Solves `AX = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if b.rows() != a.rows() {
        return Err(NumError::ShapeMismatch(format!(
            "right-hand side has {} rows, system has {}",
            b.rows(),
            a.rows()
        )));
    }
    let chol = Cholesky::factor(a)?;
    let bt = b.transpose();
    let mut xt = bt.clone();
    for r in 0..xt.rows() {
        chol.solve_in_place(xt.row_mut(r));
    }
    Ok(xt.transpose())
}

/// Numerical rank by Gaussian elimination with partial pivoting. A pivot counts
/// when its magnitude exceeds `tol` times the largest absolute entry.
pub fn rank(m: &DenseMatrix, tol: f64) -> usize {
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0;
    }
    let threshold = tol * scale;
    let (rows, cols) = (m.rows(), m.cols());
    let mut a = m.as_slice().to_vec();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let mut best = r;
        for i in r + 1..rows {
            if a[i * cols + c].abs() > a[best * cols + c].abs() {
                best = i;
            }
        }
        let p = a[best * cols + c];
        if p.abs() <= threshold {
            continue;
        }
        if best != r {
            for k in c..cols {
                a.swap(best * cols + k, r * cols + k);
            }
        }
        for i in r + 1..rows {
            let f = a[i * cols + c] / p;
            if f == 0.0 {
                continue;
            }
            for k in c..cols {
                a[i * cols + k] -= f * a[r * cols + k];
            }
        }
        r += 1;
    }
    r
}

/// Seeded generator with a resumable stream position.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Serializable snapshot of an [`RngState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent sub-stream of this seed; used to partition work by index.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot { seed: self.seed, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(snap.seed);
        rng.set_stream(snap.stream);
        rng.set_word_pos(snap.word_pos);
        RngState { seed: snap.seed, rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        let v = lo + (hi - lo) * self.uniform();
        // rounding can land exactly on hi
        if v >= hi {
            lo.max(hi - (hi - lo) * f64::EPSILON)
        } else {
            v
        }
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Minimizes `xᵀHx − 2rᵀx` over the unit box by exact cyclic coordinate
/// minimization from `start` (`H` symmetric with a positive diagonal). Each
/// coordinate move is an exact line minimization, so the value never rises.
/// Stops after a sweep whose largest move is below `tol`.
pub fn box_coordinate_descent(h: &DenseMatrix, r: &[f64], start: &[f64], max_sweeps: usize, tol: f64) -> Vec<f64> {
    let n = start.len();
    let mut x = start.to_vec();
    let mut hx = h.matvec(&x).expect("square system");
    for _ in 0..max_sweeps {
        let mut largest = 0.0f64;
        for i in 0..n {
            let hii = h.get(i, i);
            let nv = ((r[i] - (hx[i] - hii * x[i])) / hii).clamp(0.0, 1.0);
            let delta = nv - x[i];
            if delta != 0.0 {
                for (k, v) in hx.iter_mut().enumerate() {
                    *v += h.get(k, i) * delta;
                }
                x[i] = nv;
                largest = largest.max(delta.abs());
            }
        }
        if largest <= tol {
            break;
        }
    }
    x
}

pub fn uniform_matrix(rng: &mut RngState, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
    assert!(lo < hi, "uniform_matrix needs lo < hi");
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    DenseMatrix { rows, cols, data }
}

/// Worker count from `NESY_THREADS`, at least 1. Unset means 1.
pub fn thread_budget() -> usize {
    std::env::var("NESY_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(1).max(1)
}

/// Applies `f` to every row of `m`. Rows are split into contiguous blocks over
/// at most [`thread_budget`] threads; each row is computed independently so the
/// result does not depend on the split.
pub fn par_rows_mut<F>(m: &mut DenseMatrix, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let cols = m.cols;
    let rows = m.rows;
    if cols == 0 || rows == 0 {
        return;
    }
    let threads = thread_budget().min(rows);
    if threads <= 1 {
        for (i, r) in m.data.chunks_mut(cols).enumerate() {
            f(i, r);
        }
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (b, block) in m.data.chunks_mut(per * cols).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, r) in block.chunks_mut(cols).enumerate() {
                    f(b * per + i, r);
                }
            });
        }
    });
}
