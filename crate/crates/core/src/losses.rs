//! Training objectives: a Euclidean proxy-anchor loss, the manifold
//! point-to-point loss, and their sum, each with exact gradients.
//!
//! Gradients flow only through the explicit distances. Chart construction,
//! chart assignment and the similarity targets are constants within a step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{self, ManifoldChart, ManifoldError, SimilarityParams};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no proxy has a positive sample in the batch")]
    NoPositiveProxy,
    #[error("sample {index} has label {label}, but there are only {classes} proxies")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// Which way the proxy-anchor exponents point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyAnchorForm {
    /// Positives penalized by `exp(a (d - eps))`, negatives by
    /// `exp(-a (d - eps))`: same-class samples are pulled inside the margin
    /// and other samples pushed beyond it.
    #[default]
    Attract,
    /// Positives penalized by `exp(-a (d - eps))`, negatives by
    /// `exp(a (d - eps))`, i.e. the cosine-form signs applied unchanged to a
    /// distance.
    CosineSigns,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossHyperparams {
    /// Proxy-anchor temperature.
    pub alpha: f64,
    /// Proxy-anchor margin.
    pub epsilon: f64,
    /// Scale of the manifold dissimilarity target.
    pub delta: f64,
    pub n_alpha: f64,
    pub n_beta: f64,
    #[serde(default)]
    pub proxy_anchor_form: ProxyAnchorForm,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            alpha: 32.0,
            epsilon: 0.1,
            delta: 2.0,
            n_alpha: 4.0,
            n_beta: 0.5,
            proxy_anchor_form: ProxyAnchorForm::Attract,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidHyperparams(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(LossError::InvalidHyperparams(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(LossError::InvalidHyperparams(format!("delta must be positive, got {}", self.delta)));
        }
        self.similarity()?;
        Ok(())
    }

    pub fn similarity(&self) -> Result<SimilarityParams, LossError> {
        Ok(SimilarityParams::new(self.n_alpha, self.n_beta)?)
    }
}

/// A loss value with gradients for the batch embeddings and the proxies.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `batch x d'`.
    pub grad_embeddings: DMatrix<f64>,
    /// `classes x d'`; all zero for the manifold loss.
    pub grad_proxies: DMatrix<f64>,
}

impl LossOutput {
    pub fn zeros(batch: usize, classes: usize, dim: usize) -> Self {
        Self { value: 0.0, grad_embeddings: DMatrix::zeros(batch, dim), grad_proxies: DMatrix::zeros(classes, dim) }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_embeddings.iter().all(|x| x.is_finite())
            && self.grad_proxies.iter().all(|x| x.is_finite())
    }
}

/// Adds `weight * log(1 + sum_i exp(sign * alpha * (d_i - eps)))` to `out`
/// along with its gradient. `members` are batch rows, `diffs[i]` is
/// `z_i - proxy` for member `i`.
fn accumulate_softplus_term(
    out: &mut LossOutput,
    class: usize,
    members: &[usize],
    diffs: &[DVector<f64>],
    sign: f64,
    hp: &LossHyperparams,
    weight: f64,
) {
    if members.is_empty() {
        return;
    }
    let dists: Vec<f64> = diffs.iter().map(|d| d.norm()).collect();
    let exponents: Vec<f64> = dists.iter().map(|d| sign * hp.alpha * (d - hp.epsilon)).collect();
    let shift = exponents.iter().copied().fold(0.0f64, f64::max);
    let scaled: Vec<f64> = exponents.iter().map(|a| (a - shift).exp()).collect();
    let denom = (-shift).exp() + scaled.iter().sum::<f64>();
    out.value += weight * (shift + denom.ln());
    for (k, &row) in members.iter().enumerate() {
        if dists[k] == 0.0 {
            continue;
        }
        let g = weight * scaled[k] / denom * sign * hp.alpha / dists[k];
        for (c, &diff) in diffs[k].iter().enumerate() {
            let gc = g * diff;
            out.grad_embeddings[(row, c)] += gc;
            out.grad_proxies[(class, c)] -= gc;
        }
    }
}

/// Proxy-anchor loss with Euclidean distances.
///
/// The positive part averages over proxies with at least one same-class
/// sample in the batch; the negative part averages over all proxies.
pub fn proxy_anchor_loss(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    proxies: &DMatrix<f64>,
    hp: &LossHyperparams,
) -> Result<LossOutput, LossError> {
    let (n, dim) = embeddings.shape();
    let classes = proxies.nrows();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(LossError::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if proxies.ncols() != dim {
        return Err(LossError::Shape(format!("proxies have width {}, embeddings {dim}", proxies.ncols())));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { index, label, classes });
    }
    let with_positives = (0..classes).filter(|c| labels.contains(c)).count();
    if with_positives == 0 {
        return Err(LossError::NoPositiveProxy);
    }
    let pos_sign = match hp.proxy_anchor_form {
        ProxyAnchorForm::Attract => 1.0,
        ProxyAnchorForm::CosineSigns => -1.0,
    };
    let mut out = LossOutput::zeros(n, classes, dim);
    for class in 0..classes {
        let proxy = proxies.row(class).transpose();
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| labels[i] == class);
        let diffs = |rows: &[usize]| -> Vec<DVector<f64>> {
            rows.iter().map(|&i| embeddings.row(i).transpose() - &proxy).collect()
        };
        let pos_w = 1.0 / with_positives as f64;
        accumulate_softplus_term(&mut out, class, &pos, &diffs(&pos), pos_sign, hp, pos_w);
        let neg_w = 1.0 / classes as f64;
        accumulate_softplus_term(&mut out, class, &neg, &diffs(&neg), -pos_sign, hp, neg_w);
    }
    Ok(out)
}

/// Manifold point-to-point loss over ordered pairs `i != j`:
/// `sum (delta * (1 - s_ij) - |z_i - z_j|)^2`.
pub fn manifold_loss(
    embeddings: &DMatrix<f64>,
    similarities: &DMatrix<f64>,
    hp: &LossHyperparams,
) -> Result<LossOutput, LossError> {
    let (n, dim) = embeddings.shape();
    if similarities.shape() != (n, n) {
        return Err(LossError::Shape(format!("similarity matrix is {:?}, batch has {n} rows", similarities.shape())));
    }
    let points = manifold::rows_of(embeddings);
    let mut out = LossOutput::zeros(n, 0, dim);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let diff = &points[i] - &points[j];
            let dist = diff.norm();
            let residual = hp.delta * (1.0 - similarities[(i, j)]) - dist;
            out.value += residual * residual;
            if dist > 0.0 {
                let g = -2.0 * residual / dist;
                for c in 0..dim {
                    out.grad_embeddings[(i, c)] += g * diff[c];
                    out.grad_embeddings[(j, c)] -= g * diff[c];
                }
            }
        }
    }
    Ok(out)
}

/// Combined objective and its two components.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedLoss {
    pub total: LossOutput,
    pub proxy_anchor: f64,
    pub manifold: f64,
}

/// Sum of the manifold and proxy-anchor losses, with similarities taken
/// from `charts` built on this batch.
pub fn combined_loss(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    proxies: &DMatrix<f64>,
    charts: &[ManifoldChart],
    hp: &LossHyperparams,
) -> Result<CombinedLoss, LossError> {
    hp.validate()?;
    let points = manifold::rows_of(embeddings);
    let s = manifold::similarity_matrix(&points, charts, &hp.similarity()?)?;
    combined_with_similarities(embeddings, labels, proxies, &s, hp)
}

/// As [`combined_loss`] with a precomputed similarity matrix.
pub fn combined_with_similarities(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    proxies: &DMatrix<f64>,
    similarities: &DMatrix<f64>,
    hp: &LossHyperparams,
) -> Result<CombinedLoss, LossError> {
    let pa = proxy_anchor_loss(embeddings, labels, proxies, hp)?;
    let mf = manifold_loss(embeddings, similarities, hp)?;
    Ok(CombinedLoss {
        proxy_anchor: pa.value,
        manifold: mf.value,
        total: LossOutput {
            value: mf.value + pa.value,
            grad_embeddings: pa.grad_embeddings + mf.grad_embeddings,
            grad_proxies: pa.grad_proxies,
        },
    })
}
