//! Small rectifier MLP with exact backpropagation, plus the IDX image format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{dot, DenseMatrix, RngState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Softmax over each listed group of outputs.
    Softmax { groups: Vec<Vec<usize>> },
    /// Independent sigmoid per output.
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub head: Head,
    /// The model classifies one cell at a time and is applied to each cell of a board.
    pub shared_cell: bool,
}

/// Parameter-shaped container for gradients and updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer { w: DenseMatrix::zeros(l.w.rows(), l.w.cols()), b: vec![0.0; l.b.len()] })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, o) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.as_mut_slice().iter_mut().zip(o.w.as_slice()) {
                *x += c * y;
            }
            for (x, y) in a.b.iter_mut().zip(&o.b) {
                *x += c * y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.w.squared_norm() + l.b.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.as_slice().iter().chain(&l.b).copied()).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Trace {
    /// inputs to each layer, then the final pre-activation
    acts: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl MlpModel {
    /// He-uniform weights, zero biases. `sizes` lists input, hidden and output widths.
    pub fn new(sizes: &[usize], head: Head, shared_cell: bool, rng: &mut RngState) -> Result<Self, PerceptionError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(PerceptionError::InvalidModel(format!("layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|p| {
                let bound = (6.0 / p[0] as f64).sqrt();
                let data = (0..p[0] * p[1]).map(|_| rng.uniform_range(-bound, bound)).collect();
                Layer { w: DenseMatrix::from_vec(p[1], p[0], data).expect("finite"), b: vec![0.0; p[1]] }
            })
            .collect();
        let model = MlpModel { sizes: sizes.to_vec(), layers, head, shared_cell };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.layers.len() + 1 != self.sizes.len() {
            return Err(PerceptionError::InvalidModel("layer count does not match sizes".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.w.cols() != self.sizes[k] || l.w.rows() != self.sizes[k + 1] || l.b.len() != self.sizes[k + 1] {
                return Err(PerceptionError::InvalidModel(format!("layer {k} has the wrong shape")));
            }
        }
        if let Head::Softmax { groups } = &self.head {
            let out = self.output_dim();
            let mut seen = vec![false; out];
            for g in groups {
                for &i in g {
                    if i >= out || std::mem::replace(&mut seen[i], true) {
                        return Err(PerceptionError::InvalidModel(format!("bad softmax group {g:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    fn trace(&self, x: &[f64]) -> Result<Trace, PerceptionError> {
        if x.len() != self.input_dim() {
            return Err(PerceptionError::ShapeMismatch(format!("input has {} entries, model expects {}", x.len(), self.input_dim())));
        }
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let input = acts.last().expect("nonempty");
            let mut z: Vec<f64> = l.w.iter_rows().zip(&l.b).map(|(r, b)| dot(r, input) + b).collect();
            if k < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        let logits = acts.last().expect("nonempty");
        let out = self.apply_head(logits);
        Ok(Trace { acts, out })
    }

    fn apply_head(&self, logits: &[f64]) -> Vec<f64> {
        match &self.head {
            Head::Logistic => logits.iter().map(|&z| sigmoid(z)).collect(),
            Head::Softmax { groups } => {
                // outputs outside every group fall back to the logistic
                let mut out: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
                for g in groups {
                    let mx = g.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = g.iter().map(|&i| (logits[i] - mx).exp()).sum();
                    for &i in g {
                        out[i] = (logits[i] - mx).exp() / total;
                    }
                }
                out
            }
        }
    }

    /// Gradient of the loss w.r.t. the logits, given dL/dp.
    fn head_backward(&self, p: &[f64], dp: &[f64]) -> Vec<f64> {
        let mut dz: Vec<f64> = p.iter().zip(dp).map(|(p, g)| g * p * (1.0 - p)).collect();
        if let Head::Softmax { groups } = &self.head {
            for g in groups {
                let inner: f64 = g.iter().map(|&i| dp[i] * p[i]).sum();
                for &i in g {
                    dz[i] = p[i] * (dp[i] - inner);
                }
            }
        }
        dz
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, PerceptionError> {
        Ok(self.trace(x)?.out)
    }

    /// `‖f(x) − target‖²`
    pub fn loss(&self, x: &[f64], target: &[f64]) -> Result<f64, PerceptionError> {
        let p = self.forward(x)?;
        self.check_target(target)?;
        Ok(p.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
    }

    fn check_target(&self, target: &[f64]) -> Result<(), PerceptionError> {
        if target.len() != self.output_dim() {
            return Err(PerceptionError::ShapeMismatch(format!("target has {} entries, model outputs {}", target.len(), self.output_dim())));
        }
        Ok(())
    }

    pub fn backward_mse(&self, x: &[f64], target: &[f64]) -> Result<Gradients, PerceptionError> {
        self.check_target(target)?;
        let tr = self.trace(x)?;
        let dp: Vec<f64> = tr.out.iter().zip(target).map(|(p, t)| 2.0 * (p - t)).collect();
        let mut delta = self.head_backward(&tr.out, &dp);
        let mut grads = Gradients::zeros_like(self);
        for k in (0..self.layers.len()).rev() {
            let input = &tr.acts[k];
            let g = &mut grads.layers[k];
            for (o, &dz) in delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                for (gw, &a) in g.w.row_mut(o).iter_mut().zip(input) {
                    *gw = dz * a;
                }
                g.b[o] = dz;
            }
            if k > 0 {
                let l = &self.layers[k];
                let mut prev = vec![0.0; input.len()];
                for (o, &dz) in delta.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    for (pv, &wv) in prev.iter_mut().zip(l.w.row(o)) {
                        *pv += dz * wv;
                    }
                }
                // rectifier: inputs to layer k are post-activation values
                for (pv, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.as_mut_slice().iter_mut().chain(l.b.iter_mut()))
    }

    /// Every weight and bias, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.as_slice().iter().chain(&l.b).copied()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
    }
}

/// `θ ← θ − η·g`
pub fn sgd_step(model: &MlpModel, grads: &Gradients, eta: f64) -> MlpModel {
    let mut next = model.clone();
    for (p, g) in next.params_mut().zip(grads.flat()) {
        *p -= eta * g;
    }
    next
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h`. Entries where both are below `1e-9` count as agreeing.
pub fn gradient_check(model: &MlpModel, x: &[f64], target: &[f64], h: f64) -> Result<f64, PerceptionError> {
    let analytic = model.backward_mse(x, target)?.flat();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *probe.params_mut().nth(k).expect("index in range");
        *probe.params_mut().nth(k).expect("index in range") = orig + h;
        let up = probe.loss(x, target)?;
        *probe.params_mut().nth(k).expect("index in range") = orig - h;
        let down = probe.loss(x, target)?;
        *probe.params_mut().nth(k).expect("index in range") = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-9 {
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("file has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxDataset {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    let b = bytes.get(at..at + 4).ok_or(IdxError::TruncatedFile { expected: at + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize) -> Result<(), IdxError> {
    match bytes.len() {
        n if n < expected => Err(IdxError::TruncatedFile { expected, found: n }),
        n if n > expected => Err(IdxError::TrailingBytes { extra: n - expected }),
        _ => Ok(()),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    check_len(bytes, 16 + n * rows * cols)?;
    Ok(IdxImages { n, rows, cols, pixels: bytes[16..].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + n)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IDX_IMAGES_MAGIC, img.n as u32, img.rows as u32, img.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io { path: path.display().to_string(), source })
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages, IdxError> {
    parse_idx_images(&read(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    parse_idx_labels(&read(path)?)
}

pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<IdxDataset, IdxError> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if images.n != labels.len() {
        return Err(IdxError::CountMismatch { images: images.n, labels: labels.len() });
    }
    Ok(IdxDataset { images, labels })
}

/// Random nets (2 to 3 layers, widths 1 to 6, either head, random biases) with
/// random inputs and targets in `[0, 1]`; returns the worst relative error of each.
pub fn gradient_check_suite(seed: u64, nets: usize) -> Result<Vec<f64>, PerceptionError> {
    (0..nets as u64)
        .map(|k| {
            let mut rng = RngState::substream(seed, k);
            let depth = 2 + rng.below(2);
            let sizes: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(6)).collect();
            let out = sizes[depth];
            let head = if k % 2 == 0 { Head::Softmax { groups: vec![(0..out).collect()] } } else { Head::Logistic };
            let mut model = MlpModel::new(&sizes, head, false, &mut rng)?;
            // nonzero biases keep pre-activations off the rectifier kink
            for l in &mut model.layers {
                l.b.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
            }
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let target: Vec<f64> = (0..out).map(|_| rng.uniform()).collect();
            gradient_check(&model, &x, &target, 1e-6)
        })
        .collect()
}
