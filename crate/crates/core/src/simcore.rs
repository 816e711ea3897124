//! Similarity kernels and the image-text contrastive loss.
//!
//! For a batch of `B` image/text pairs with similarity matrix `S` and
//! temperature `tau`, the image-to-text distribution of image `a` is the
//! softmax over `b` of `S[a][b] / tau`, and the text-to-image distribution of
//! text `a` is the softmax over `b` of `S[b][a] / tau`. The loss is half the
//! batch mean of the two cross-entropies against the supplied targets.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 0.4;

/// Row-sum tolerance for target distributions.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Plain left-to-right dot product.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity of two nonzero vectors of equal dimension.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Square batch similarity matrix together with its softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    tau: f64,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>, tau: f64) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "similarity matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { values, tau })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }
}

/// Row-stochastic target matrix (`y` in the cross-entropy).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    rows: Array2<f64>,
}

impl TargetDistribution {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::NotDistribution {
                    row: i,
                    sum: row.sum(),
                });
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::NotDistribution { row: i, sum });
            }
        }
        Ok(Self { rows })
    }

    /// Identity targets: pair `a` matches only itself.
    pub fn one_hot_diagonal(batch: usize) -> Self {
        Self {
            rows: Array2::eye(batch),
        }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn dim(&self) -> (usize, usize) {
        self.rows.dim()
    }
}

/// Loss value plus both softmax-normalized similarity matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ItcResult {
    pub loss: f64,
    pub p_i2t: Array2<f64>,
    pub p_t2i: Array2<f64>,
}

/// `B x B` cosine matrix between image rows and text rows.
pub fn pairwise_similarity(
    images: ArrayView2<f64>,
    texts: ArrayView2<f64>,
    tau: f64,
) -> Result<SimilarityMatrix> {
    if images.ncols() != texts.ncols() {
        return Err(Error::DimensionMismatch {
            expected: images.ncols(),
            found: texts.ncols(),
        });
    }
    if images.nrows() != texts.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs {} texts",
            images.nrows(),
            texts.nrows()
        )));
    }
    let b = images.nrows();
    let images: Vec<Vec<f64>> = images.outer_iter().map(|r| r.to_vec()).collect();
    let texts: Vec<Vec<f64>> = texts.outer_iter().map(|r| r.to_vec()).collect();
    let mut values = Array2::zeros((b, b));
    for (a, img) in images.iter().enumerate() {
        for (t, txt) in texts.iter().enumerate() {
            values[[a, t]] = cosine(img, txt)?;
        }
    }
    SimilarityMatrix::new(values, tau)
}

/// Numerically stable log-softmax of one row of logits.
fn log_softmax(logits: ArrayView1<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Row-wise softmax of `m / tau`, returned as (probabilities, log-probabilities).
fn softmax_rows(m: ArrayView2<f64>, tau: f64) -> (Array2<f64>, Array2<f64>) {
    let mut logp = Array2::zeros(m.dim());
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let scaled = row.mapv(|v| v / tau);
        for (j, lp) in log_softmax(scaled.view()).into_iter().enumerate() {
            logp[[i, j]] = lp;
        }
    }
    (logp.mapv(f64::exp), logp)
}

fn check_shapes(sim: &SimilarityMatrix, targets: &[&TargetDistribution]) -> Result<()> {
    let b = sim.batch_size();
    for t in targets {
        if t.dim() != (b, b) {
            return Err(Error::ShapeMismatch(format!(
                "targets {:?} vs similarity {b}x{b}",
                t.dim()
            )));
        }
    }
    Ok(())
}

fn cross_entropy_sum(targets: &Array2<f64>, logp: &Array2<f64>) -> f64 {
    targets
        .iter()
        .zip(logp.iter())
        .filter(|(y, _)| **y > 0.0)
        .map(|(y, lp)| -y * lp)
        .sum()
}

/// Image-text contrastive loss and the two softmax matrices.
pub fn itc_loss(
    sim: &SimilarityMatrix,
    targets_i2t: &TargetDistribution,
    targets_t2i: &TargetDistribution,
) -> Result<ItcResult> {
    check_shapes(sim, &[targets_i2t, targets_t2i])?;
    let b = sim.batch_size();
    if b == 0 {
        return Err(Error::Empty("batch of size 0".into()));
    }
    let (p_i2t, logp_i2t) = softmax_rows(sim.values().view(), sim.tau());
    let (p_t2i, logp_t2i) = softmax_rows(sim.values().t(), sim.tau());
    let ce = cross_entropy_sum(targets_i2t.rows(), &logp_i2t)
        + cross_entropy_sum(targets_t2i.rows(), &logp_t2i);
    Ok(ItcResult {
        loss: 0.5 * ce / b as f64,
        p_i2t,
        p_t2i,
    })
}

/// Gradient of [`itc_loss`] with respect to each raw similarity entry.
///
/// `dL/dS = ((P_i2t - Y_i2t) + (P_t2i - Y_t2i)^T) / (2 * tau * B)`.
pub fn itc_loss_grad(
    sim: &SimilarityMatrix,
    targets_i2t: &TargetDistribution,
    targets_t2i: &TargetDistribution,
) -> Result<Array2<f64>> {
    let result = itc_loss(sim, targets_i2t, targets_t2i)?;
    let scale = 0.5 / (sim.tau() * sim.batch_size() as f64);
    let i2t = &result.p_i2t - targets_i2t.rows();
    let t2i = &result.p_t2i - targets_t2i.rows();
    Ok((i2t + t2i.t()) * scale)
}

/// `alpha * momentum + (1 - alpha) * onehot`.
pub fn mix_pseudo_targets(
    onehot: &TargetDistribution,
    momentum: &TargetDistribution,
    alpha: f64,
) -> Result<TargetDistribution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if onehot.dim() != momentum.dim() {
        return Err(Error::ShapeMismatch(format!(
            "onehot {:?} vs momentum {:?}",
            onehot.dim(),
            momentum.dim()
        )));
    }
    let rows = momentum.rows() * alpha + onehot.rows() * (1.0 - alpha);
    TargetDistribution::new(rows)
}

/// Soft targets from a momentum model's similarity matrix: the softmax of
/// its image-to-text and text-to-image rows.
pub fn momentum_targets(
    momentum_sim: &SimilarityMatrix,
) -> (TargetDistribution, TargetDistribution) {
    let (i2t, _) = softmax_rows(momentum_sim.values().view(), momentum_sim.tau());
    let (t2i, _) = softmax_rows(momentum_sim.values().t(), momentum_sim.tau());
    (
        TargetDistribution { rows: i2t },
        TargetDistribution { rows: t2i },
    )
}
