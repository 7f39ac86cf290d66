//! Small dual-tower encoder: patch embedding, mean pooling, a residual MLP
//! for feature extraction and a linear projection head onto the unit sphere.
//!
//! Everything runs in f64 with hand-written reverse-mode gradients so the
//! training loop can be checked against finite differences.

mod io;

pub use io::{
    export_embeddings, import_embeddings, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, CheckpointHeader, PARAMETER_ORDER,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Pre-normalization norms below this are treated as a dead network.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            input_channels: 1,
            patch_size: 16,
            feature_dim: 64,
            hidden_dim: 128,
            projection_dim: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("input_channels", self.input_channels),
            ("patch_size", self.patch_size),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("projection_dim", self.projection_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be ≥ 1")));
        }
        if !self.input_h.is_multiple_of(self.patch_size) || !self.input_w.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "encoder input {}×{} not divisible by patch size {}",
                self.input_h, self.input_w, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.input_channels
    }

    pub fn patch_count(&self) -> usize {
        (self.input_h / self.patch_size) * (self.input_w / self.patch_size)
    }
}

/// Row-major `rows × cols` matrix. Layers store weights as `fan_in × fan_out`
/// and compute `y = Wᵀx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-s..s)).collect(),
        }
    }

    /// `Wᵀx + b`.
    fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = bias.to_vec();
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            if *xi == 0.0 {
                continue;
            }
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        y
    }

    /// `W g`, the gradient w.r.t. the layer input.
    fn back(&self, g: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(g).map(|(w, gj)| w * gj).sum())
            .collect()
    }

    /// `self += x ⊗ g`.
    fn add_outer(&mut self, x: &[f64], g: &[f64]) {
        for (xi, row) in x.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if *xi == 0.0 {
                continue;
            }
            for (w, gj) in row.iter_mut().zip(g) {
                *w += xi * gj;
            }
        }
    }
}

/// Trainable parameters of one tower. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    pub hidden_w: Matrix,
    pub hidden_b: Vec<f64>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let (p, f, h, d) = (
            config.patch_len(),
            config.feature_dim,
            config.hidden_dim,
            config.projection_dim,
        );
        Self {
            patch_w: Matrix::zeros(p, f),
            patch_b: vec![0.0; f],
            hidden_w: Matrix::zeros(f, h),
            hidden_b: vec![0.0; h],
            out_w: Matrix::zeros(h, f),
            out_b: vec![0.0; f],
            proj_w: Matrix::zeros(f, d),
            proj_b: vec![0.0; d],
        }
    }

    /// Shapes `(rows, cols)` of each tensor in [`PARAMETER_ORDER`].
    pub fn shapes(&self) -> [(usize, usize); 8] {
        [
            (self.patch_w.rows, self.patch_w.cols),
            (1, self.patch_b.len()),
            (self.hidden_w.rows, self.hidden_w.cols),
            (1, self.hidden_b.len()),
            (self.out_w.rows, self.out_w.cols),
            (1, self.out_b.len()),
            (self.proj_w.rows, self.proj_w.cols),
            (1, self.proj_b.len()),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.patch_w.data,
            &self.patch_b,
            &self.hidden_w.data,
            &self.hidden_b,
            &self.out_w.data,
            &self.out_b,
            &self.proj_w.data,
            &self.proj_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.patch_w.data,
            &mut self.patch_b,
            &mut self.hidden_w.data,
            &mut self.hidden_b,
            &mut self.out_w.data,
            &mut self.out_b,
            &mut self.proj_w.data,
            &mut self.proj_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Glorot-uniform weights drawn from the config seed, zero biases.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (p, f, h, d) = (
        config.patch_len(),
        config.feature_dim,
        config.hidden_dim,
        config.projection_dim,
    );
    Ok(EncoderParams {
        patch_w: Matrix::glorot(p, f, &mut rng),
        patch_b: vec![0.0; f],
        hidden_w: Matrix::glorot(f, h, &mut rng),
        hidden_b: vec![0.0; h],
        out_w: Matrix::glorot(h, f, &mut rng),
        out_b: vec![0.0; f],
        proj_w: Matrix::glorot(f, d, &mut rng),
        proj_b: vec![0.0; d],
    })
}

/// A unit-norm vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// L2-normalize `v`; near-zero vectors are rejected.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if !norm.is_finite() || norm < DEGENERATE_NORM {
            return Err(Error::Validation(format!(
                "degenerate embedding (norm {norm:e})"
            )));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Intermediates kept from [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mean_patch: Vec<f64>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    features: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

impl ForwardTrace {
    /// Pre-normalization projection norm.
    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// Average of all non-overlapping patches, each flattened channel-major
/// then row-major within the patch.
fn mean_patch(config: &EncoderConfig, input: &Grid) -> Vec<f64> {
    let ps = config.patch_size;
    let mut acc = vec![0.0; config.patch_len()];
    for py in 0..config.input_h / ps {
        for px in 0..config.input_w / ps {
            for c in 0..config.input_channels {
                for dy in 0..ps {
                    let row = (c * input.height + py * ps + dy) * input.width + px * ps;
                    let dst = &mut acc[(c * ps + dy) * ps..(c * ps + dy + 1) * ps];
                    for (a, v) in dst.iter_mut().zip(&input.data[row..row + ps]) {
                        *a += v;
                    }
                }
            }
        }
    }
    let k = config.patch_count() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

pub fn forward(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: &Grid,
) -> Result<(Embedding, ForwardTrace)> {
    if (input.channels, input.height, input.width)
        != (config.input_channels, config.input_h, config.input_w)
    {
        return Err(Error::Shape(format!(
            "encoder expects {}×{}×{} input, got {}×{}×{}",
            config.input_channels,
            config.input_h,
            config.input_w,
            input.channels,
            input.height,
            input.width
        )));
    }
    if input.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("encoder input has non-finite values".into()));
    }
    // Mean pooling commutes with the linear patch embedding, so the patches
    // are averaged first and embedded once.
    let mean_patch = mean_patch(config, input);
    let pooled = params.patch_w.affine(&mean_patch, &params.patch_b);
    let hidden_pre = params.hidden_w.affine(&pooled, &params.hidden_b);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&a| a.max(0.0)).collect();
    let mut features = params.out_w.affine(&hidden, &params.out_b);
    for (f, p) in features.iter_mut().zip(&pooled) {
        *f += p;
    }
    let projected = params.proj_w.affine(&features, &params.proj_b);
    let norm = l2_norm(&projected);
    if !norm.is_finite() {
        return Err(Error::Numerical("encoder output is not finite".into()));
    }
    if norm < DEGENERATE_NORM {
        return Err(Error::Numerical(format!(
            "degenerate embedding: projection norm {norm:e}"
        )));
    }
    let embedding: Vec<f64> = projected.iter().map(|v| v / norm).collect();
    Ok((
        Embedding(embedding.clone()),
        ForwardTrace {
            mean_patch,
            pooled,
            hidden_pre,
            hidden,
            features,
            norm,
            embedding,
        },
    ))
}

/// Gradient of `⟨upstream, embedding⟩` w.r.t. every parameter.
pub fn backward(
    params: &EncoderParams,
    config: &EncoderConfig,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<EncoderParams> {
    if upstream.len() != config.projection_dim {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, embedding has {}",
            upstream.len(),
            config.projection_dim
        )));
    }
    let mut grads = EncoderParams::zeros(config);
    let f = &trace.embedding;
    // d(v/|v|) = (I − f fᵀ) dv / |v|
    let along = dot(f, upstream);
    let g_proj: Vec<f64> = upstream
        .iter()
        .zip(f)
        .map(|(g, fi)| (g - fi * along) / trace.norm)
        .collect();
    grads.proj_w.add_outer(&trace.features, &g_proj);
    grads.proj_b.copy_from_slice(&g_proj);
    let g_features = params.proj_w.back(&g_proj);

    grads.out_w.add_outer(&trace.hidden, &g_features);
    grads.out_b.copy_from_slice(&g_features);
    let g_hidden = params.out_w.back(&g_features);
    let g_hidden_pre: Vec<f64> = g_hidden
        .iter()
        .zip(&trace.hidden_pre)
        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
        .collect();

    grads.hidden_w.add_outer(&trace.pooled, &g_hidden_pre);
    grads.hidden_b.copy_from_slice(&g_hidden_pre);
    let mut g_pooled = params.hidden_w.back(&g_hidden_pre);
    for (g, r) in g_pooled.iter_mut().zip(&g_features) {
        *g += r;
    }

    grads.patch_w.add_outer(&trace.mean_patch, &g_pooled);
    grads.patch_b.copy_from_slice(&g_pooled);
    Ok(grads)
}

/// Convenience wrapper returning only the embedding.
pub fn embed(params: &EncoderParams, config: &EncoderConfig, input: &Grid) -> Result<Embedding> {
    forward(params, config, input).map(|(e, _)| e)
}
