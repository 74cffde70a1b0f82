//! Projection head `Linear -> per-sample normalization -> ReLU`, its
//! hand-written backward pass, and an Adam optimizer with per-epoch
//! exponential learning-rate decay.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{self, StoreError};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("input width {found} does not match head input width {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("prototype width {prototype} exceeds input width {input}")]
    WidthOrder { input: usize, prototype: usize },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// `z' = relu(normalize(W z + b))`, normalization over the features of each
/// sample with biased variance and no affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    /// `d' x d`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub norm_eps: f64,
}

/// Intermediates kept by [`ProjectionHead::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    normalized: DMatrix<f64>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub input: DMatrix<f64>,
}

impl ProjectionHead {
    /// Weights uniform in `±1/sqrt(d)`, zero bias.
    pub fn init(input_dim: usize, prototype_dim: usize, seed: u64) -> Result<Self, NnetError> {
        if prototype_dim > input_dim || prototype_dim == 0 {
            return Err(NnetError::WidthOrder { input: input_dim, prototype: prototype_dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight = DMatrix::from_fn(prototype_dim, input_dim, |_, _| rng.random_range(-bound..bound));
        Ok(Self { weight, bias: DVector::zeros(prototype_dim), norm_eps: DEFAULT_NORM_EPS })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn prototype_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Maps each row of `batch` (`n x d`) to a row of the result (`n x d'`).
    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache), NnetError> {
        if batch.ncols() != self.input_dim() {
            return Err(NnetError::InputWidth { expected: self.input_dim(), found: batch.ncols() });
        }
        let width = self.prototype_dim() as f64;
        let mut pre = batch * self.weight.transpose();
        for mut row in pre.row_iter_mut() {
            row += self.bias.transpose();
        }
        let mut inv_std = Vec::with_capacity(pre.nrows());
        for mut row in pre.row_iter_mut() {
            let mean = row.sum() / width;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / width;
            let s = 1.0 / (var + self.norm_eps).sqrt();
            row.apply(|x| *x = (*x - mean) * s);
            inv_std.push(s);
        }
        let out = pre.map(|x| x.max(0.0));
        Ok((out, ForwardCache { input: batch.clone(), normalized: pre, inv_std }))
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// forward output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> HeadGradients {
        let width = self.prototype_dim() as f64;
        let mut grad_pre = grad_out.zip_map(&cache.normalized, |g, v| if v > 0.0 { g } else { 0.0 });
        for (r, mut row) in grad_pre.row_iter_mut().enumerate() {
            let xhat = cache.normalized.row(r);
            let sum_g = row.sum();
            let sum_gx = row.dot(&xhat);
            let s = cache.inv_std[r];
            for c in 0..row.len() {
                row[c] = s / width * (width * row[c] - sum_g - xhat[c] * sum_gx);
            }
        }
        HeadGradients {
            weight: grad_pre.transpose() * &cache.input,
            bias: grad_pre.row_sum().transpose(),
            input: &grad_pre * &self.weight,
        }
    }
}

/// Bias-corrected Adam over any number of parameter tensors, one step
/// counter shared by all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub base_lr: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch learning-rate factor.
    pub decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(base_lr: f64, decay: f64) -> Self {
        Self { base_lr, lr: base_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every `(params, grads)` pair.
    pub fn step(&mut self, tensors: &mut [(&mut [f64], &[f64])]) {
        if self.m.is_empty() {
            self.m = tensors.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), tensors.len(), "tensor count changed between steps");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (params, grads)) in tensors.iter_mut().enumerate() {
            assert_eq!(params.len(), grads.len(), "parameter/gradient length");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Sets the learning rate for `epoch` (0-based): `base_lr * decay^epoch`.
    pub fn decay_lr(&mut self, epoch: u32) {
        self.lr = self.base_lr * self.decay.powi(epoch as i32);
    }
}

/// Metadata stored in front of the matrix blocks of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub input_dim: usize,
    pub prototype_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub epoch: u32,
    pub norm_eps: f64,
    /// Training configuration snapshot.
    pub config: serde_json::Value,
}

/// Head parameters and both proxy sets.
///
/// On disk: one line of JSON header, then four `.mbic` blocks holding the
/// weight, bias, trainable proxies and momentum proxies as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub head: ProjectionHead,
    pub theta_q: DMatrix<f64>,
    pub theta_m: DMatrix<f64>,
}

fn to_block(m: &DMatrix<f64>) -> Vec<u8> {
    let data: Vec<f32> = m.row_iter().flat_map(|r| r.iter().map(|&x| x as f32).collect::<Vec<_>>()).collect();
    embedstore::encode_block(m.nrows(), m.ncols(), &data)
}

fn from_block(b: &embedstore::MatrixBlock) -> DMatrix<f64> {
    DMatrix::from_fn(b.rows, b.cols, |i, j| f64::from(b.data[i * b.cols + j]))
}

impl Checkpoint {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        out.extend(to_block(&self.head.weight));
        out.extend(to_block(&DMatrix::from_row_slice(1, self.head.bias.len(), self.head.bias.as_slice())));
        out.extend(to_block(&self.theta_q));
        out.extend(to_block(&self.theta_m));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnetError> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NnetError::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| NnetError::Checkpoint(format!("header: {e}")))?;
        if header.schema_version != Self::SCHEMA_VERSION {
            return Err(NnetError::Checkpoint(format!("unsupported schema_version {}", header.schema_version)));
        }
        let mut rest = &bytes[newline + 1..];
        let mut blocks = Vec::with_capacity(4);
        for _ in 0..4 {
            let (b, r) = embedstore::decode_block(rest)?;
            blocks.push(from_block(&b));
            rest = r;
        }
        if !rest.is_empty() {
            return Err(NnetError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        let expect = |m: &DMatrix<f64>, shape: (usize, usize), what: &str| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(NnetError::Checkpoint(format!("{what} block is {:?}, expected {shape:?}", m.shape())))
            }
        };
        let (d, dp, c) = (header.input_dim, header.prototype_dim, header.classes);
        expect(&blocks[0], (dp, d), "weight")?;
        expect(&blocks[1], (1, dp), "bias")?;
        expect(&blocks[2], (c, dp), "theta_q")?;
        expect(&blocks[3], (c, dp), "theta_m")?;
        let theta_m = blocks.pop().expect("4 blocks");
        let theta_q = blocks.pop().expect("4 blocks");
        let bias = blocks.pop().expect("4 blocks").row(0).transpose();
        let weight = blocks.pop().expect("4 blocks");
        Ok(Self { head: ProjectionHead { weight, bias, norm_eps: header.norm_eps }, header, theta_q, theta_m })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnetError> {
        Ok(embedstore::write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, NnetError> {
        let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
