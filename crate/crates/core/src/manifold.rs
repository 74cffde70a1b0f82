//! Piecewise-linear charts over a batch of transformed embeddings.
//!
//! Each chart is an `m`-dimensional affine patch fitted by PCA around an
//! anchor point. A neighbour is added to the patch only if, after refitting,
//! every member is still reconstructed with quality at least `T / 100`.
//! Charts feed the orthogonal / on-manifold distance split that defines the
//! pairwise manifold similarity.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ManifoldError {
    #[error("batch of {size} points is too small for {m}-dimensional charts (need at least {})", m + 1)]
    BatchTooSmall { size: usize, m: usize },
    #[error("need at least {} points to fit a {m}-dimensional basis, got {n}", m + 1)]
    TooFewPoints { n: usize, m: usize },
    #[error("centered points have rank {rank}, below the requested dimension {m}")]
    RankDeficient { rank: usize, m: usize },
    #[error("invalid chart configuration: {0}")]
    InvalidConfig(String),
    #[error("no charts to assign from")]
    NoCharts,
}

/// Chart construction settings. `None` fields resolve per batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    /// Number of anchors; defaults to `ceil(batch / 16)`.
    #[serde(default)]
    pub n_anchors: Option<usize>,
    /// Intrinsic dimension of every chart.
    pub m: usize,
    /// Deepest neighbour rank considered; defaults to `min(32, batch - 1)`.
    #[serde(default)]
    pub k: Option<usize>,
    /// Reconstruction quality threshold, in percent.
    pub quality_threshold: f64,
    pub seed: u64,
}

impl Default for ChartConfig {
    fn default() -> Self {
        Self { n_anchors: None, m: 3, k: None, quality_threshold: 90.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedChartConfig {
    pub n_anchors: usize,
    pub m: usize,
    pub k: usize,
    pub min_quality: f64,
    pub seed: u64,
}

impl ChartConfig {
    pub fn validate(&self) -> Result<(), ManifoldError> {
        if self.m == 0 {
            return Err(ManifoldError::InvalidConfig("m must be at least 1".into()));
        }
        if !(self.quality_threshold > 0.0 && self.quality_threshold <= 100.0) {
            return Err(ManifoldError::InvalidConfig(format!(
                "quality threshold {} is outside (0, 100]",
                self.quality_threshold
            )));
        }
        if let Some(k) = self.k {
            if k < self.m {
                return Err(ManifoldError::InvalidConfig(format!("k = {k} is below m = {}", self.m)));
            }
        }
        if self.n_anchors == Some(0) {
            return Err(ManifoldError::InvalidConfig("n_anchors must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, batch_size: usize) -> Result<ResolvedChartConfig, ManifoldError> {
        self.validate()?;
        if batch_size < self.m + 1 {
            return Err(ManifoldError::BatchTooSmall { size: batch_size, m: self.m });
        }
        let n_anchors = self.n_anchors.unwrap_or_else(|| batch_size.div_ceil(16)).min(batch_size);
        let k = self.k.unwrap_or_else(|| 32.min(batch_size - 1)).min(batch_size - 1);
        Ok(ResolvedChartConfig {
            n_anchors,
            m: self.m,
            k,
            min_quality: self.quality_threshold / 100.0,
            seed: self.seed,
        })
    }
}

/// A local `m`-dimensional affine approximation around an anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldChart {
    /// Batch-local index of the anchor.
    pub anchor_id: usize,
    /// Batch-local member indices, anchor first.
    pub members: Vec<usize>,
    pub mean: DVector<f64>,
    /// `m x d` matrix with orthonormal rows.
    pub basis: DMatrix<f64>,
}

/// Serializable view of a chart, for `inspect charts`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChartDump {
    pub anchor_id: usize,
    pub members: Vec<usize>,
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub member_quality: Vec<f64>,
}

impl ManifoldChart {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dump(&self, points: &[DVector<f64>]) -> ChartDump {
        ChartDump {
            anchor_id: self.anchor_id,
            members: self.members.clone(),
            mean: self.mean.iter().copied().collect(),
            basis: self.basis.row_iter().map(|r| r.iter().copied().collect()).collect(),
            member_quality: self
                .members
                .iter()
                .map(|&i| reconstruction_quality(&points[i], &self.mean, &self.basis))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaFit {
    pub mean: DVector<f64>,
    /// Top `m` right singular directions as rows, largest first.
    pub basis: DMatrix<f64>,
    /// All singular values of the centered matrix, descending.
    pub singular_values: Vec<f64>,
}

/// Splits the rows of a matrix into owned vectors.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

fn mean_of(points: &[&DVector<f64>]) -> DVector<f64> {
    let d = points[0].len();
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += *p;
    }
    mean / points.len() as f64
}

/// Thin SVD of the centered points. Does not check rank.
fn principal_directions(points: &[&DVector<f64>], m: usize) -> PcaFit {
    let mean = mean_of(points);
    let d = mean.len();
    let centered = DMatrix::from_fn(points.len(), d, |i, j| points[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(m, d);
    for (row, &src) in order.iter().take(m).enumerate() {
        let mut dir = v_t.row(src).into_owned();
        if let Some(first) = dir.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                dir.neg_mut();
            }
        }
        basis.set_row(row, &dir);
    }
    PcaFit { mean, basis, singular_values: order.iter().map(|&i| svd.singular_values[i]).collect() }
}

fn numerical_rank(singular_values: &[f64], n: usize, d: usize) -> usize {
    let top = singular_values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    let tol = top * n.max(d) as f64 * f64::EPSILON * 16.0;
    singular_values.iter().filter(|&&s| s > tol).count()
}

/// Mean and top-`m` principal directions of `points`.
pub fn fit_pca_basis(points: &[&DVector<f64>], m: usize) -> Result<PcaFit, ManifoldError> {
    if points.len() < m + 1 {
        return Err(ManifoldError::TooFewPoints { n: points.len(), m });
    }
    let d = points[0].len();
    if m > d {
        return Err(ManifoldError::RankDeficient { rank: d, m });
    }
    let fit = principal_directions(points, m);
    let rank = numerical_rank(&fit.singular_values, points.len(), d);
    if rank < m {
        return Err(ManifoldError::RankDeficient { rank, m });
    }
    Ok(fit)
}

/// Fraction of `point - mean` explained by the span of `basis`; 1 at the mean.
pub fn reconstruction_quality(point: &DVector<f64>, mean: &DVector<f64>, basis: &DMatrix<f64>) -> f64 {
    let r = point - mean;
    let total = r.norm_squared();
    if total == 0.0 {
        return 1.0;
    }
    let coeffs = basis * &r;
    let residual = &r - basis.transpose() * coeffs;
    (1.0 - residual.norm_squared() / total).clamp(0.0, 1.0)
}

fn all_members_fit(points: &[&DVector<f64>], fit: &PcaFit, min_quality: f64) -> bool {
    points.iter().all(|p| reconstruction_quality(p, &fit.mean, &fit.basis) >= min_quality)
}

/// Anchor first, then every other index by ascending distance (ties by index).
pub fn neighbour_order(points: &[DVector<f64>], anchor: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> =
        (0..points.len()).filter(|&i| i != anchor).map(|i| ((&points[i] - &points[anchor]).norm(), i)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    std::iter::once(anchor).chain(others.into_iter().map(|(_, i)| i)).collect()
}

/// Grows one chart around `anchor`. `None` if the accepted set is rank-deficient.
pub fn grow_chart(points: &[DVector<f64>], anchor: usize, cfg: &ResolvedChartConfig) -> Option<ManifoldChart> {
    let order = neighbour_order(points, anchor);
    let m = cfg.m;
    // anchor + m-1 nearest neighbours; candidates are neighbour ranks m..=k
    let mut members: Vec<usize> = order[..m].to_vec();
    for &candidate in order.iter().take(cfg.k).skip(m) {
        let tentative: Vec<&DVector<f64>> =
            members.iter().chain(std::iter::once(&candidate)).map(|&i| &points[i]).collect();
        let fit = principal_directions(&tentative, m);
        if all_members_fit(&tentative, &fit, cfg.min_quality) {
            members.push(candidate);
        }
    }
    let refs: Vec<&DVector<f64>> = members.iter().map(|&i| &points[i]).collect();
    match fit_pca_basis(&refs, m) {
        Ok(fit) => Some(ManifoldChart { anchor_id: anchor, members, mean: fit.mean, basis: fit.basis }),
        Err(e) => {
            log::debug!("dropping chart at anchor {anchor}: {e}");
            None
        }
    }
}

/// Draws the anchors for a batch, ascending.
pub fn draw_anchors(batch_size: usize, cfg: &ResolvedChartConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut anchors = rand::seq::index::sample(&mut rng, batch_size, cfg.n_anchors).into_vec();
    anchors.sort_unstable();
    anchors
}

/// Builds up to `n_anchors` charts over the batch rows, ordered by anchor.
pub fn build_charts(batch: &DMatrix<f64>, config: &ChartConfig) -> Result<Vec<ManifoldChart>, ManifoldError> {
    let cfg = config.resolve(batch.nrows())?;
    if cfg.m > batch.ncols() {
        return Err(ManifoldError::InvalidConfig(format!(
            "m = {} exceeds the embedding width {}",
            cfg.m,
            batch.ncols()
        )));
    }
    let points = rows_of(batch);
    let anchors = draw_anchors(points.len(), &cfg);
    Ok(anchors.par_iter().filter_map(|&a| grow_chart(&points, a, &cfg)).collect())
}

/// Index into `charts` of the chart whose anchor is nearest to the point.
pub fn assign_chart(
    point_idx: usize,
    points: &[DVector<f64>],
    charts: &[ManifoldChart],
) -> Result<usize, ManifoldError> {
    let p = &points[point_idx];
    charts
        .iter()
        .enumerate()
        .map(|(i, c)| ((p - &points[c.anchor_id]).norm(), c.anchor_id, i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, _, i)| i)
        .ok_or(ManifoldError::NoCharts)
}

/// Orthogonal distance `o` from `z_i` to the chart through `z_j`, and the
/// on-chart distance `p` from `z_j` to the projection of `z_i`.
pub fn projection_distances(z_i: &DVector<f64>, z_j: &DVector<f64>, basis: &DMatrix<f64>) -> (f64, f64) {
    let diff = z_i - z_j;
    let along = basis.transpose() * (basis * &diff);
    let off = &diff - &along;
    (off.norm(), along.norm())
}

/// Attenuation exponents of the manifold similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityParams {
    n_alpha: f64,
    n_beta: f64,
}

impl SimilarityParams {
    pub fn new(n_alpha: f64, n_beta: f64) -> Result<Self, ManifoldError> {
        if !(n_beta > 0.0 && n_alpha > n_beta) || !n_alpha.is_finite() {
            return Err(ManifoldError::InvalidConfig(format!(
                "need N_alpha > N_beta > 0, got N_alpha = {n_alpha}, N_beta = {n_beta}"
            )));
        }
        Ok(Self { n_alpha, n_beta })
    }

    pub fn n_alpha(&self) -> f64 {
        self.n_alpha
    }

    pub fn n_beta(&self) -> f64 {
        self.n_beta
    }

    /// `s' = (1 + o^2)^-N_alpha * (1 + p)^-N_beta`.
    pub fn directed(&self, o: f64, p: f64) -> f64 {
        (1.0 + o * o).powf(-self.n_alpha) * (1.0 + p).powf(-self.n_beta)
    }

    /// Symmetrized similarity from the two directed distance pairs.
    pub fn pair(&self, o_ij: f64, p_ij: f64, o_ji: f64, p_ji: f64) -> f64 {
        0.5 * (self.directed(o_ij, p_ij) + self.directed(o_ji, p_ji))
    }
}

/// Symmetric `B x B` similarity matrix with unit diagonal. Entry `(i, j)`
/// averages `s'(i, j)` and `s'(j, i)`, each measured in the chart assigned
/// to the second point.
pub fn similarity_matrix(
    points: &[DVector<f64>],
    charts: &[ManifoldChart],
    params: &SimilarityParams,
) -> Result<DMatrix<f64>, ManifoldError> {
    let n = points.len();
    let assigned: Vec<usize> = (0..n).map(|j| assign_chart(j, points, charts)).collect::<Result<_, _>>()?;
    // directed[j][i] = s'(i, j), measured in the chart of j
    let directed: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let basis = &charts[assigned[j]].basis;
            (0..n)
                .map(|i| {
                    if i == j {
                        1.0
                    } else {
                        let (o, p) = projection_distances(&points[i], &points[j], basis);
                        params.directed(o, p)
                    }
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.5 * (directed[j][i] + directed[i][j]) }))
}
