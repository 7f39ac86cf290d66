//! Batched contrastive loss over the N×N image/LiDAR similarity matrix, its
//! closed-form gradient, and the single-negative triplet baseline.
//!
//! Row `i` of the similarity matrix pairs image `i` with every LiDAR sample;
//! the diagonal holds the positives and the other `N − 1` entries of each row
//! (and column) are the in-batch negatives.

use rand::Rng;

use crate::encoder::{dot, Embedding};
use crate::error::{Error, Result};

/// Aligned image/LiDAR embeddings: index `i` of each list is a positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image: Vec<Vec<f64>>,
    pub lidar: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(image: Vec<Vec<f64>>, lidar: Vec<Vec<f64>>) -> Result<Self> {
        if image.len() != lidar.len() {
            return Err(Error::Shape(format!(
                "batch has {} image and {} LiDAR embeddings",
                image.len(),
                lidar.len()
            )));
        }
        if image.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let dim = image[0].len();
        if image.iter().chain(&lidar).any(|v| v.len() != dim) {
            return Err(Error::Shape("batch embeddings differ in dimension".into()));
        }
        Ok(Self { image, lidar })
    }

    pub fn from_embeddings(image: &[Embedding], lidar: &[Embedding]) -> Result<Self> {
        Self::new(
            image.iter().map(|e| e.as_slice().to_vec()).collect(),
            lidar.iter().map(|e| e.as_slice().to_vec()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    /// Apply the same permutation to both modality lists.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            image: perm.iter().map(|&i| self.image[i].clone()).collect(),
            lidar: perm.iter().map(|&i| self.lidar[i].clone()).collect(),
        }
    }
}

/// Dense `n × n` matrix of logits, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "similarity matrix must be square");
        Self {
            n,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        Self {
            n,
            data: (0..n * n).map(|k| self.get(k % n, k / n)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// `S[i][j] = (fᵢ · fⱼ⁺) / τ`.
pub fn similarity_matrix(batch: &Batch, temperature: f64) -> Result<SimilarityMatrix> {
    check_temperature(temperature)?;
    let n = batch.len();
    let mut data = Vec::with_capacity(n * n);
    for f in &batch.image {
        for g in &batch.lidar {
            data.push(dot(f, g) / temperature);
        }
    }
    Ok(SimilarityMatrix { n, data })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over rows of `log(1 + Σ_{j≠i} exp(S_ij − S_ii))`.
pub fn npair_loss_from_similarity(s: &SimilarityMatrix) -> f64 {
    let n = s.n;
    let mut total = 0.0;
    for i in 0..n {
        let diag = s.get(i, i);
        let gaps: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| s.get(i, j) - diag).collect();
        let m = gaps.iter().copied().fold(0.0f64, f64::max);
        let tail: f64 = gaps.iter().map(|d| (d - m).exp()).sum();
        total += if m == 0.0 {
            tail.ln_1p()
        } else {
            m + ((-m).exp() + tail).ln()
        };
    }
    total / n as f64
}

/// Mean over rows of the softmax cross-entropy with the diagonal as target.
pub fn softmax_loss_from_similarity(s: &SimilarityMatrix) -> f64 {
    let n = s.n;
    (0..n)
        .map(|i| log_sum_exp(s.row(i)) - s.get(i, i))
        .sum::<f64>()
        / n as f64
}

/// Average of the row-wise (image → LiDAR) and column-wise (LiDAR → image)
/// cross-entropies.
pub fn symmetric_loss_from_similarity(s: &SimilarityMatrix) -> f64 {
    0.5 * (softmax_loss_from_similarity(s) + softmax_loss_from_similarity(&s.transpose()))
}

/// Image-anchored N-pair form of the batched loss.
pub fn loss_npair_form(batch: &Batch, temperature: f64) -> Result<f64> {
    Ok(npair_loss_from_similarity(&similarity_matrix(batch, temperature)?))
}

/// Image-anchored softmax form; algebraically equal to [`loss_npair_form`].
pub fn loss_softmax_form(batch: &Batch, temperature: f64) -> Result<f64> {
    Ok(softmax_loss_from_similarity(&similarity_matrix(batch, temperature)?))
}

pub fn loss_symmetric(batch: &Batch, temperature: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Validation(
            "symmetric contrastive loss needs at least 2 pairs".into(),
        ));
    }
    Ok(symmetric_loss_from_similarity(&similarity_matrix(batch, temperature)?))
}

/// Loss value with its gradient w.r.t. every image and LiDAR embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub image: Vec<Vec<f64>>,
    pub lidar: Vec<Vec<f64>>,
    /// `∂L/∂S` from the image → LiDAR (row) term alone.
    pub row_term: SimilarityMatrix,
    /// `∂L/∂S` from the LiDAR → image (column) term alone.
    pub column_term: SimilarityMatrix,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Closed-form gradient of [`loss_symmetric`].
pub fn loss_gradient(batch: &Batch, temperature: f64) -> Result<LossGradient> {
    let loss = loss_symmetric(batch, temperature)?;
    let s = similarity_matrix(batch, temperature)?;
    let n = s.n;
    let scale = 1.0 / (2.0 * n as f64);

    let mut row_term = SimilarityMatrix { n, data: vec![0.0; n * n] };
    for i in 0..n {
        for (j, p) in softmax(s.row(i)).into_iter().enumerate() {
            row_term.data[i * n + j] = (p - if i == j { 1.0 } else { 0.0 }) * scale;
        }
    }
    let st = s.transpose();
    let mut column_term = SimilarityMatrix { n, data: vec![0.0; n * n] };
    for j in 0..n {
        for (i, p) in softmax(st.row(j)).into_iter().enumerate() {
            column_term.data[i * n + j] = (p - if i == j { 1.0 } else { 0.0 }) * scale;
        }
    }

    let dim = batch.image[0].len();
    let mut g_image = vec![vec![0.0; dim]; n];
    let mut g_lidar = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let ds = (row_term.get(i, j) + column_term.get(i, j)) / temperature;
            for k in 0..dim {
                g_image[i][k] += ds * batch.lidar[j][k];
                g_lidar[j][k] += ds * batch.image[i][k];
            }
        }
    }
    Ok(LossGradient {
        loss,
        image: g_image,
        lidar: g_lidar,
        row_term,
        column_term,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, ‖a − p‖ − ‖a − n‖ + margin)`.
pub fn loss_triplet(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (distance(anchor, positive) - distance(anchor, negative) + margin).max(0.0)
}

/// One in-batch negative per anchor, never the anchor's own index.
pub fn sample_negatives<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "need at least two pairs to draw a negative");
    (0..n)
        .map(|i| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Adds the gradient of `‖a − b‖` w.r.t. `a` (scaled) into `out`.
fn add_distance_grad(out: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let d = distance(a, b);
    if d == 0.0 {
        return;
    }
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (x - y) / d;
    }
}

/// Symmetric triplet baseline: image anchors against LiDAR positives and
/// `lidar_negatives`, plus LiDAR anchors against image positives and
/// `image_negatives`, averaged over anchors and directions.
pub fn triplet_batch_gradient(
    batch: &Batch,
    lidar_negatives: &[usize],
    image_negatives: &[usize],
    margin: f64,
) -> Result<LossGradient> {
    let n = batch.len();
    if lidar_negatives.len() != n || image_negatives.len() != n {
        return Err(Error::Shape("one negative per anchor required".into()));
    }
    if margin < 0.0 {
        return Err(Error::Config(format!("triplet margin {margin} must be ≥ 0")));
    }
    let dim = batch.image[0].len();
    let mut g_image = vec![vec![0.0; dim]; n];
    let mut g_lidar = vec![vec![0.0; dim]; n];
    let w = 0.5 / n as f64;
    let mut loss = 0.0;
    for image_anchored in [true, false] {
        let (anchors, others, negatives) = if image_anchored {
            (&batch.image, &batch.lidar, lidar_negatives)
        } else {
            (&batch.lidar, &batch.image, image_negatives)
        };
        let (g_anchor, g_other) = if image_anchored {
            (&mut g_image, &mut g_lidar)
        } else {
            (&mut g_lidar, &mut g_image)
        };
        for i in 0..n {
            let (a, p, ng) = (&anchors[i], &others[i], &others[negatives[i]]);
            let l = loss_triplet(a, p, ng, margin);
            loss += w * l;
            if l <= 0.0 {
                continue;
            }
            // ∂/∂a (‖a−p‖ − ‖a−n‖), ∂/∂p = −(a−p)/‖a−p‖, ∂/∂n = (a−n)/‖a−n‖
            add_distance_grad(&mut g_anchor[i], a, p, w);
            add_distance_grad(&mut g_anchor[i], a, ng, -w);
            add_distance_grad(&mut g_other[i], p, a, w);
            add_distance_grad(&mut g_other[negatives[i]], ng, a, -w);
        }
    }
    let zeros = SimilarityMatrix { n, data: vec![0.0; n * n] };
    Ok(LossGradient {
        loss,
        image: g_image,
        lidar: g_lidar,
        row_term: zeros.clone(),
        column_term: zeros,
    })
}
