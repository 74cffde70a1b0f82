//! The training loop: per batch, project, build charts, evaluate the combined
//! loss, step both optimizers, then move the momentum proxies.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::EmbeddingDataset;
use crate::losses::{self, LossError, LossHyperparams};
use crate::manifold::{self, ChartConfig, ManifoldError};
use crate::nnet::{Adam, Checkpoint, CheckpointHeader, NnetError, ProjectionHead};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("class {class} has no examples in the training data")]
    MissingClass { class: usize },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (proxy-anchor {proxy_anchor}, manifold {manifold})"
    )]
    NonFinite { epoch: u32, batch: usize, proxy_anchor: f64, manifold: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Per-epoch learning-rate factor for both optimizers.
    pub decay: f64,
    /// Momentum-proxy coefficient.
    pub mu: f64,
    pub prototype_dim: usize,
    pub seed: u64,
    pub chart: ChartConfig,
    pub loss: LossHyperparams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            base_lr: 1e-3,
            decay: 0.97,
            mu: 0.99,
            prototype_dim: 64,
            seed: 0,
            chart: ChartConfig::default(),
            loss: LossHyperparams::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size < self.chart.m + 1 {
            return bad(format!("batch size {} is below m + 1 = {}", self.batch_size, self.chart.m + 1));
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.base_lr) || !positive(self.decay) {
            return bad("learning rate and decay must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu = {} is outside [0, 1]", self.mu));
        }
        if self.prototype_dim == 0 {
            return bad("prototype_dim must be positive".into());
        }
        self.chart.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Trainable proxies and their momentum shadow, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyState {
    pub theta_q: DMatrix<f64>,
    pub theta_m: DMatrix<f64>,
    pub mu: f64,
}

impl ProxyState {
    /// `theta_q ~ N(0, 1/d')` entrywise; `theta_m` starts equal to it.
    pub fn init(classes: usize, dim: usize, mu: f64, rng: &mut impl RngCore) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let theta_q = DMatrix::from_fn(classes, dim, |_, _| normal.sample(rng));
        Self { theta_m: theta_q.clone(), theta_q, mu }
    }

    /// `theta_m <- mu * theta_m + (1 - mu) * theta_q`.
    pub fn momentum_update(&mut self) {
        let mu = self.mu;
        self.theta_m.zip_apply(&self.theta_q, |m, q| *m = mu * *m + (1.0 - mu) * q);
    }
}

/// Embeddings with class indices in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddings {
    pub embeddings: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledEmbeddings {
    pub fn from_dataset(ds: &EmbeddingDataset) -> Self {
        Self { embeddings: ds.matrix(), labels: ds.class_indices(), classes: ds.task().num_classes() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    pub mean_proxy_anchor: f64,
    pub mean_manifold: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Batches whose charts were all rank-deficient; trained on the
    /// proxy-anchor term alone.
    pub batches_without_charts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub proxies: ProxyState,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                schema_version: Checkpoint::SCHEMA_VERSION,
                input_dim: self.head.input_dim(),
                prototype_dim: self.head.prototype_dim(),
                classes: self.proxies.theta_q.nrows(),
                seed: config.seed,
                epoch: self.history.len() as u32,
                norm_eps: self.head.norm_eps,
                config: serde_json::to_value(config).expect("config serializes"),
            },
            head: self.head.clone(),
            theta_q: self.proxies.theta_q.clone(),
            theta_m: self.proxies.theta_m.clone(),
        }
    }
}

/// Consecutive chunks of `order`; a final chunk shorter than `min_len` is
/// merged into the one before it.
pub fn partition_batches(order: &[usize], batch_size: usize, min_len: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_len) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

pub fn train(data: &LabeledEmbeddings, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let n = data.embeddings.nrows();
    if n < config.chart.m + 1 {
        return Err(ManifoldError::BatchTooSmall { size: n, m: config.chart.m }.into());
    }
    for class in 0..data.classes {
        if !data.labels.contains(&class) {
            return Err(TrainError::MissingClass { class });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = ProjectionHead::init(data.embeddings.ncols(), config.prototype_dim, rng.next_u64())?;
    let mut proxies = ProxyState::init(data.classes, config.prototype_dim, config.mu, &mut rng);
    let mut head_opt = Adam::new(config.base_lr, config.decay);
    let mut proxy_opt = Adam::new(config.base_lr, config.decay);
    let similarity = config.loss.similarity()?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs as usize);
    for epoch in 0..config.epochs {
        head_opt.decay_lr(epoch);
        proxy_opt.decay_lr(epoch);
        order.shuffle(&mut rng);
        let batches = partition_batches(&order, config.batch_size, config.chart.m + 1);
        let (mut sum_total, mut sum_pa, mut sum_mf) = (0.0, 0.0, 0.0);
        let mut without_charts = 0;
        for (b, rows) in batches.iter().enumerate() {
            let z = data.embeddings.select_rows(rows);
            let labels: Vec<usize> = rows.iter().map(|&i| data.labels[i]).collect();
            let (projected, cache) = head.forward(&z)?;
            let chart_cfg = ChartConfig { seed: rng.next_u64(), ..config.chart.clone() };
            let charts = manifold::build_charts(&projected, &chart_cfg)?;
            let step = if charts.is_empty() {
                log::warn!("epoch {epoch} batch {b}: every chart was rank-deficient");
                without_charts += 1;
                let pa = losses::proxy_anchor_loss(&projected, &labels, &proxies.theta_q, &config.loss)?;
                losses::CombinedLoss { proxy_anchor: pa.value, manifold: 0.0, total: pa }
            } else {
                let points = manifold::rows_of(&projected);
                let s = manifold::similarity_matrix(&points, &charts, &similarity)?;
                losses::combined_with_similarities(&projected, &labels, &proxies.theta_q, &s, &config.loss)?
            };
            if !step.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    proxy_anchor: step.proxy_anchor,
                    manifold: step.manifold,
                });
            }
            let grads = head.backward(&cache, &step.total.grad_embeddings);
            head_opt.step(&mut [
                (head.weight.as_mut_slice(), grads.weight.as_slice()),
                (head.bias.as_mut_slice(), grads.bias.as_slice()),
            ]);
            proxy_opt.step(&mut [(proxies.theta_q.as_mut_slice(), step.total.grad_proxies.as_slice())]);
            proxies.momentum_update();
            sum_total += step.total.value;
            sum_pa += step.proxy_anchor;
            sum_mf += step.manifold;
        }
        let k = batches.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: sum_total / k,
            mean_proxy_anchor: sum_pa / k,
            mean_manifold: sum_mf / k,
            lr: head_opt.lr,
            batches_without_charts: without_charts,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} (pa {:.6}, manifold {:.6}) lr {:.3e}",
            stats.mean_loss,
            stats.mean_proxy_anchor,
            stats.mean_manifold,
            stats.lr
        );
        history.push(stats);
    }
    Ok(TrainOutcome { head, proxies, history })
}

/// Plain-text training log, one line per epoch.
pub fn format_log(history: &[EpochStats]) -> String {
    let mut out = String::from("# epoch\tmean_proxy_anchor\tmean_manifold\tlr\n");
    for s in history {
        writeln!(out, "{}\t{:.9e}\t{:.9e}\t{:.9e}", s.epoch, s.mean_proxy_anchor, s.mean_manifold, s.lr)
            .expect("writing to a String");
    }
    out
}
