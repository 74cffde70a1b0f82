//! Independent reference implementations used by the integration tests.
//! Everything here works on plain `Vec<f64>` data and avoids the library's
//! own numerical code paths.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Neumaier compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with their unit eigenvectors.
pub fn jacobi_eigen(sym: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = sym.len();
    let mut a: Vec<Vec<f64>> = sym.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Mean and top-`m` principal directions through the explicit covariance.
pub fn pca_oracle(points: &[Vec<f64>], m: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        let r = sub(p, &mean);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / n;
            }
        }
    }
    let (values, vectors) = jacobi_eigen(&cov);
    (mean, vectors.into_iter().take(m).collect(), values)
}

pub fn quality_oracle(point: &[f64], mean: &[f64], basis: &[Vec<f64>]) -> f64 {
    let r = sub(point, mean);
    let total = dot(&r, &r);
    if total == 0.0 {
        return 1.0;
    }
    let mut proj = vec![0.0; r.len()];
    for b in basis {
        let c = dot(&r, b);
        for (p, x) in proj.iter_mut().zip(b) {
            *p += c * x;
        }
    }
    let res = sub(&r, &proj);
    1.0 - dot(&res, &res) / total
}

/// Replays the chart-growth rule for one anchor: anchor plus its m-1 nearest
/// neighbours, then candidate ranks m..k-1 kept iff every member of the
/// tentative set reaches `min_quality`.
pub fn chart_members_oracle(points: &[Vec<f64>], anchor: usize, m: usize, k: usize, min_quality: f64) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> =
        (0..points.len()).filter(|&i| i != anchor).map(|i| (norm(&sub(&points[i], &points[anchor])), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = std::iter::once(anchor).chain(ranked.into_iter().map(|(_, i)| i)).collect();
    let mut members: Vec<usize> = order[..m].to_vec();
    for rank in m..k.min(order.len()) {
        let mut tentative = members.clone();
        tentative.push(order[rank]);
        let pts: Vec<Vec<f64>> = tentative.iter().map(|&i| points[i].clone()).collect();
        let (mean, basis, _) = pca_oracle(&pts, m);
        if pts.iter().all(|p| quality_oracle(p, &mean, &basis) >= min_quality) {
            members = tentative;
        }
    }
    members
}

/// Literal proxy-anchor value. `attract` selects which sign goes on the
/// positive term: `exp(+a(d-e))` when true, the printed `exp(-a(d-e))`
/// otherwise; the negative term carries the opposite sign.
pub fn proxy_anchor_oracle(
    z: &[Vec<f64>],
    labels: &[usize],
    proxies: &[Vec<f64>],
    alpha: f64,
    eps: f64,
    attract: bool,
) -> f64 {
    let pos_sign = if attract { 1.0 } else { -1.0 };
    let classes = proxies.len();
    let with_pos: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
    let pos = compensated_sum(with_pos.iter().map(|&c| {
        let inner = compensated_sum(
            (0..z.len())
                .filter(|&i| labels[i] == c)
                .map(|i| (pos_sign * alpha * (norm(&sub(&z[i], &proxies[c])) - eps)).exp()),
        );
        (1.0 + inner).ln()
    }));
    let neg = compensated_sum((0..classes).map(|c| {
        let inner = compensated_sum(
            (0..z.len())
                .filter(|&i| labels[i] != c)
                .map(|i| (-pos_sign * alpha * (norm(&sub(&z[i], &proxies[c])) - eps)).exp()),
        );
        (1.0 + inner).ln()
    }));
    pos / with_pos.len() as f64 + neg / classes as f64
}

/// Sum over ordered pairs of `(delta (1 - s_ij) - |z_i - z_j|)^2`.
pub fn manifold_oracle(z: &[Vec<f64>], s: &[Vec<f64>], delta: f64) -> f64 {
    let n = z.len();
    compensated_sum(
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| (delta * (1.0 - s[i][j]) - norm(&sub(&z[i], &z[j]))).powi(2)),
    )
}

/// `o`, `p` for `z_i` against the affine span through `z_j` with `basis`.
pub fn distances_oracle(zi: &[f64], zj: &[f64], basis: &[Vec<f64>]) -> (f64, f64) {
    let diff = sub(zi, zj);
    let mut proj = zj.to_vec();
    for b in basis {
        let c = dot(&diff, b);
        for (p, x) in proj.iter_mut().zip(b) {
            *p += c * x;
        }
    }
    (norm(&sub(zi, &proj)), norm(&sub(&proj, zj)))
}

/// Element-by-element forward pass of the projection head for one sample.
pub fn forward_oracle(weight: &[Vec<f64>], bias: &[f64], eps: f64, x: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = weight.iter().zip(bias).map(|(row, b)| dot(row, x) + b).collect();
    let w = u.len() as f64;
    let mean = u.iter().sum::<f64>() / w;
    let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
    u.iter().map(|v| ((v - mean) / (var + eps).sqrt()).max(0.0)).collect()
}

/// Scalar Adam recurrence.
pub fn adam_oracle(mut x: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    x
}

/// Central finite difference of `f` in every coordinate of `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors. Entries where both
/// sides are below `floor` in magnitude are compared against `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// `n` noisy samples around a random affine `m`-plane in `d` dimensions.
pub fn near_subspace(seed: u64, n: usize, d: usize, m: usize, noise: f64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let frame = uniform_matrix(&mut r, m, d, -1.0, 1.0);
    let offset: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let coords = uniform_matrix(&mut r, n, m, -2.0, 2.0);
    let jitter = if noise > 0.0 { uniform_matrix(&mut r, n, d, -noise, noise) } else { DMatrix::zeros(n, d) };
    DMatrix::from_fn(n, d, |i, j| {
        offset[j] + (0..m).map(|a| coords[(i, a)] * frame[(a, j)]).sum::<f64>() + jitter[(i, j)]
    })
}

pub fn dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

pub fn dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Indices sorted by `key` descending, ties by index, first `k`.
pub fn top_k_desc(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0
            && (scores[idx[j]] > scores[idx[j - 1]] || (scores[idx[j]] == scores[idx[j - 1]] && idx[j] < idx[j - 1]))
        {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.truncate(k);
    idx
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn tokens_oracle(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Okapi BM25 (k1 = 1.2, b = 0.75) computed straight from the formula.
pub fn bm25_oracle(query: &str, docs: &[String]) -> Vec<f64> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokens_oracle(d)).collect();
    let n = docs.len() as f64;
    let avg = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut df: HashMap<&str, f64> = HashMap::new();
    for doc in &tokenized {
        let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let q = tokens_oracle(query);
    tokenized
        .iter()
        .map(|doc| {
            q.iter()
                .map(|t| {
                    let f = doc.iter().filter(|x| *x == t).count() as f64;
                    let dft = df.get(t.as_str()).copied().unwrap_or(0.0);
                    let idf = ((n - dft + 0.5) / (dft + 0.5) + 1.0).ln();
                    idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avg))
                })
                .sum()
        })
        .collect()
}

/// Random small vocabulary sentence.
pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    const VOCAB: [&str; 24] = [
        "river", "Paris", "tower", "claim", "the", "a", "of", "built", "1889", "summary", "Bank", "rain", "final",
        "park", "council", "Nolan", "film", "actor", "is", "was", "not", "true", "capital", "city",
    ];
    let seps = [" ", ", ", ". ", "; ", "-", " ("];
    let mut s = String::new();
    for i in 0..words {
        if i > 0 {
            s.push_str(seps[rng.random_range(0..seps.len())]);
        }
        s.push_str(VOCAB[rng.random_range(0..VOCAB.len())]);
    }
    s
}

pub mod grad {
    //! Finite-difference gradient checks shared by the gradient and
    //! acceptance targets. Each returns the worst relative error.

    use super::*;
    use mbicl::losses::{self, LossHyperparams, ProxyAnchorForm};
    use mbicl::manifold::{self, ChartConfig};
    use mbicl::nnet::ProjectionHead;

    pub const H: f64 = 1e-4;
    pub const FLOOR: f64 = 1e-6;
    pub const N: usize = 16;
    pub const D: usize = 8;
    pub const D_PROTO: usize = 4;
    pub const C: usize = 2;
    pub const KINK_MARGIN: f64 = 1e-2;

    /// Smallest |normalised pre-activation| over the batch.
    pub fn kink_distance(head: &ProjectionHead, x: &DMatrix<f64>) -> f64 {
        let w = to_rows(&head.weight);
        let mut least = f64::INFINITY;
        for row in to_rows(x) {
            let lin: Vec<f64> = w.iter().zip(head.bias.iter()).map(|(wr, b)| dot(wr, &row) + b).collect();
            let mean = lin.iter().sum::<f64>() / lin.len() as f64;
            let var = lin.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lin.len() as f64;
            for v in &lin {
                least = least.min(((v - mean) / (var + head.norm_eps).sqrt()).abs());
            }
        }
        least
    }

    fn labels(r: &mut ChaCha8Rng) -> Vec<usize> {
        let mut l: Vec<usize> = (0..N).map(|_| r.random_range(0..C)).collect();
        l[0] = 0;
        l[1] = 1;
        l
    }

    fn flat(m: &DMatrix<f64>) -> Vec<f64> {
        m.transpose().iter().copied().collect()
    }

    fn unflat(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    pub fn proxy_anchor(seed: u64, form: ProxyAnchorForm) -> f64 {
        let mut r = rng(seed);
        let z = uniform_matrix(&mut r, N, D_PROTO, 0.0, 1.0);
        let proxies = uniform_matrix(&mut r, C, D_PROTO, 0.0, 1.0);
        let labels = labels(&mut r);
        let hp = LossHyperparams { proxy_anchor_form: form, ..LossHyperparams::default() };
        let out = losses::proxy_anchor_loss(&z, &labels, &proxies, &hp).unwrap();
        let nz = finite_difference(&flat(&z), H, |v| {
            losses::proxy_anchor_loss(&unflat(v, N, D_PROTO), &labels, &proxies, &hp).unwrap().value
        });
        let np = finite_difference(&flat(&proxies), H, |v| {
            losses::proxy_anchor_loss(&z, &labels, &unflat(v, C, D_PROTO), &hp).unwrap().value
        });
        max_relative_error(&flat(&out.grad_embeddings), &nz, FLOOR).max(max_relative_error(
            &flat(&out.grad_proxies),
            &np,
            FLOOR,
        ))
    }

    pub fn manifold(seed: u64) -> f64 {
        let mut r = rng(seed);
        let z = uniform_matrix(&mut r, N, D_PROTO, 0.0, 1.0);
        let mut s = DMatrix::from_element(N, N, 1.0);
        for i in 0..N {
            for j in 0..i {
                let v = r.random_range(0.0..1.0);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        let hp = LossHyperparams::default();
        let out = losses::manifold_loss(&z, &s, &hp).unwrap();
        let nz =
            finite_difference(&flat(&z), H, |v| losses::manifold_loss(&unflat(v, N, D_PROTO), &s, &hp).unwrap().value);
        max_relative_error(&flat(&out.grad_embeddings), &nz, FLOOR)
    }

    /// Head forward, charts and similarities from the unperturbed output,
    /// then the combined loss. Charts and `s` stay fixed under perturbation.
    /// Draws whose normalised pre-activations come within `KINK_MARGIN` of
    /// zero are redrawn, since a central difference across the ReLU kink is
    /// not a derivative.
    pub fn composition(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (head, x) = loop {
            let mut head = ProjectionHead::init(D, D_PROTO, r.random()).unwrap();
            for b in head.bias.iter_mut() {
                *b = r.random_range(-0.1..0.1);
            }
            let x = uniform_matrix(&mut r, N, D, -1.0, 1.0);
            if kink_distance(&head, &x) > KINK_MARGIN {
                break (head, x);
            }
        };
        let proxies = uniform_matrix(&mut r, C, D_PROTO, 0.0, 1.0);
        let labels = labels(&mut r);
        let hp = LossHyperparams::default();
        let (z, cache) = head.forward(&x).unwrap();
        let cfg = ChartConfig { m: 2, k: Some(8), n_anchors: Some(2), quality_threshold: 50.0, seed };
        let charts = manifold::build_charts(&z, &cfg).unwrap_or_default();
        let s = if charts.is_empty() {
            DMatrix::from_element(N, N, 0.5)
        } else {
            manifold::similarity_matrix(&manifold::rows_of(&z), &charts, &hp.similarity().unwrap()).unwrap()
        };
        let total = |head: &ProjectionHead, proxies: &DMatrix<f64>| {
            let (z, _) = head.forward(&x).unwrap();
            losses::combined_with_similarities(&z, &labels, proxies, &s, &hp).unwrap().total.value
        };
        let out = losses::combined_with_similarities(&z, &labels, &proxies, &s, &hp).unwrap();
        let g = head.backward(&cache, &out.total.grad_embeddings);

        let nw = finite_difference(&flat(&head.weight), H, |v| {
            let h = ProjectionHead { weight: unflat(v, D_PROTO, D), ..head.clone() };
            total(&h, &proxies)
        });
        let nb = finite_difference(head.bias.as_slice(), H, |v| {
            let h = ProjectionHead { bias: DVector::from_column_slice(v), ..head.clone() };
            total(&h, &proxies)
        });
        let np = finite_difference(&flat(&proxies), H, |v| total(&head, &unflat(v, C, D_PROTO)));
        let nx = finite_difference(&flat(&x), H, |v| {
            let (z, _) = head.forward(&unflat(v, N, D)).unwrap();
            losses::combined_with_similarities(&z, &labels, &proxies, &s, &hp).unwrap().total.value
        });
        max_relative_error(&flat(&g.weight), &nw, FLOOR)
            .max(max_relative_error(g.bias.as_slice(), &nb, FLOOR))
            .max(max_relative_error(&flat(&out.total.grad_proxies), &np, FLOOR))
            .max(max_relative_error(&flat(&g.input), &nx, FLOOR))
    }
}

pub mod sampling {
    //! Exhaustive-scan comparisons for the selection methods. Each check
    //! returns the number of queries it compared.

    use super::*;
    use mbicl::samplers::{self, Bm25Index, SelectionResult};

    pub const POOL: usize = 200;
    pub const QUERIES: usize = 100;
    const DIM: usize = 16;

    fn pool_ids() -> Vec<usize> {
        (0..POOL).map(|i| 3 * i + 7).collect()
    }

    fn expect(got: &SelectionResult, ids: &[usize], rows: &[usize], values: &[f64], what: &str) {
        let want: Vec<usize> = rows.iter().map(|&r| ids[r]).collect();
        assert_eq!(got.demo_ids, want, "{what}");
        for (d, v) in got.per_id.iter().zip(values) {
            assert!((d.value - v).abs() <= 1e-12 * v.abs().max(1.0), "{what}: {} vs {v}", d.value);
        }
    }

    pub fn knn(seed: u64) -> usize {
        let mut r = rng(seed);
        let ids = pool_ids();
        let pool = uniform_matrix(&mut r, POOL, DIM, -1.0, 1.0);
        let rows = to_rows(&pool);
        for q in 0..QUERIES {
            let query: Vec<f64> = (0..DIM).map(|_| r.random_range(-1.0..1.0)).collect();
            let shots = 1 + q % 8;
            let sims: Vec<f64> = rows.iter().map(|p| cosine_oracle(p, &query)).collect();
            let top = top_k_desc(&sims, shots);
            let vals: Vec<f64> = top.iter().map(|&i| sims[i]).collect();
            let got = samplers::knn_select(Some(q), &dvector(&query), &ids, &pool, shots).unwrap();
            expect(&got, &ids, &top, &vals, "knn");
        }
        QUERIES
    }

    pub fn bm25(seed: u64) -> usize {
        let mut r = rng(seed);
        let ids = pool_ids();
        let docs: Vec<String> = (0..POOL)
            .map(|_| {
                let n = r.random_range(3..20);
                random_text(&mut r, n)
            })
            .collect();
        let index = Bm25Index::new(&docs);
        for q in 0..QUERIES {
            let n = r.random_range(1..6);
            let query = random_text(&mut r, n);
            let shots = 1 + q % 8;
            let scores = bm25_oracle(&query, &docs);
            let top = top_k_desc(&scores, shots);
            let vals: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
            let got = samplers::bm25_select(Some(q), &query, &ids, &index, shots).unwrap();
            expect(&got, &ids, &top, &vals, &format!("bm25 query {query:?}"));
        }
        QUERIES
    }

    pub fn perplexity(seed: u64) -> usize {
        let mut r = rng(seed);
        let ids = pool_ids();
        for q in 0..QUERIES {
            // Coarse values so ties occur and exercise the id rule.
            let ppl: Vec<f64> = (0..POOL).map(|_| r.random_range(4..40) as f64 * 0.25).collect();
            let shots = 1 + q % 8;
            let neg: Vec<f64> = ppl.iter().map(|p| -p).collect();
            let top = top_k_desc(&neg, shots);
            let vals: Vec<f64> = top.iter().map(|&i| ppl[i]).collect();
            let scores: Vec<Option<f64>> = ppl.iter().copied().map(Some).collect();
            let got = samplers::perplexity_select(&ids, &scores, shots).unwrap();
            expect(&got, &ids, &top, &vals, "perplexity");
        }
        QUERIES
    }

    /// Nearest rows to each target in turn, skipping rows already taken.
    fn nearest_oracle(
        rows: &[Vec<f64>],
        targets: &[(Vec<f64>, Vec<usize>)],
        quotas: &[usize],
    ) -> (Vec<usize>, Vec<f64>) {
        let mut taken = vec![false; rows.len()];
        let (mut picked, mut dists) = (Vec::new(), Vec::new());
        for ((target, members), &quota) in targets.iter().zip(quotas) {
            let neg: Vec<f64> =
                (0..rows.len())
                    .map(|i| {
                        if taken[i] || !members.contains(&i) {
                            f64::NEG_INFINITY
                        } else {
                            -norm(&sub(&rows[i], target))
                        }
                    })
                    .collect();
            for i in top_k_desc(&neg, quota) {
                taken[i] = true;
                picked.push(i);
                dists.push(-neg[i]);
            }
        }
        (picked, dists)
    }

    pub fn cluster(seed: u64) -> usize {
        let mut r = rng(seed);
        let ids = pool_ids();
        for q in 0..QUERIES {
            let classes = 2 + q % 3;
            let pool = uniform_matrix(&mut r, POOL, DIM, -1.0, 1.0);
            let rows = to_rows(&pool);
            let mut labels: Vec<usize> = (0..POOL).map(|_| r.random_range(0..classes)).collect();
            for c in 0..classes {
                labels[c] = c;
            }
            let targets: Vec<(Vec<f64>, Vec<usize>)> = (0..classes)
                .map(|c| {
                    let members: Vec<usize> = (0..POOL).filter(|&i| labels[i] == c).collect();
                    let centroid = (0..DIM)
                        .map(|j| members.iter().map(|&i| rows[i][j]).sum::<f64>() / members.len() as f64)
                        .collect();
                    (centroid, members)
                })
                .collect();
            let shots = classes + q % 5;
            let quotas: Vec<usize> = (0..classes).map(|c| shots / classes + usize::from(c < shots % classes)).collect();
            let (top, vals) = nearest_oracle(&rows, &targets, &quotas);
            let got = samplers::cluster_select(&ids, &pool, &labels, classes, shots).unwrap();
            expect(&got, &ids, &top, &vals, "cluster");
        }
        QUERIES
    }

    pub fn mbicl(seed: u64) -> usize {
        let mut r = rng(seed);
        let ids = pool_ids();
        for q in 0..QUERIES {
            let classes = 2 + q % 3;
            let pool = uniform_matrix(&mut r, POOL, DIM, 0.0, 1.0);
            // Proxies share a neighbourhood so the uniqueness rule matters.
            let base: Vec<f64> = (0..DIM).map(|_| r.random_range(0.0..1.0)).collect();
            let proxies: Vec<Vec<f64>> =
                (0..classes).map(|_| base.iter().map(|b| b + r.random_range(-0.05..0.05)).collect()).collect();
            let rows = to_rows(&pool);
            let all: Vec<usize> = (0..POOL).collect();
            let targets: Vec<(Vec<f64>, Vec<usize>)> = proxies.iter().map(|p| (p.clone(), all.clone())).collect();
            let shots = classes + q % 5;
            let quotas: Vec<usize> = (0..classes).map(|c| shots / classes + usize::from(c < shots % classes)).collect();
            let (top, vals) = nearest_oracle(&rows, &targets, &quotas);
            let got = samplers::mbicl_select(&ids, &pool, &dmatrix(&proxies), shots).unwrap();
            expect(&got, &ids, &top, &vals, "mbicl");
        }
        QUERIES
    }

    /// The hand-worked three-document corpus.
    pub fn bm25_hand_corpus() -> (Vec<usize>, Vec<f64>) {
        let docs = ["a b", "a a b", "c"];
        let index = Bm25Index::new(&docs);
        let got = samplers::bm25_select(None, "a", &[0, 1, 2], &index, 3).unwrap();
        (got.demo_ids, got.per_id.iter().map(|d| d.value).collect())
    }
}

pub mod fixtures {
    //! Fixture loading and CLI invocation helpers.

    use std::path::{Path, PathBuf};
    use std::process::Command;

    use mbicl::embedstore::{ExampleRecord, Task};
    use serde::Deserialize;

    pub fn dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
    }

    #[derive(Deserialize)]
    struct CaseRecord {
        id: usize,
        label: String,
        fields: std::collections::BTreeMap<String, String>,
    }

    #[derive(Deserialize)]
    struct Case {
        demos: Vec<CaseRecord>,
        query: CaseRecord,
    }

    fn record(c: CaseRecord) -> ExampleRecord {
        ExampleRecord {
            id: c.id,
            fields: c.fields,
            consolidated_text: String::new(),
            label: c.label,
            vector: Vec::new(),
            perplexity_score: None,
        }
    }

    /// Per task: the two demos and the query from `prompts/cases.json`.
    pub fn prompt_cases() -> Vec<(Task, Vec<ExampleRecord>, ExampleRecord)> {
        let text = std::fs::read_to_string(dir().join("prompts/cases.json")).unwrap();
        let cases: std::collections::BTreeMap<String, Case> = serde_json::from_str(&text).unwrap();
        cases
            .into_iter()
            .map(|(t, c)| {
                let task: Task = serde_json::from_value(serde_json::Value::String(t)).unwrap();
                (task, c.demos.into_iter().map(record).collect(), record(c.query))
            })
            .collect()
    }

    pub fn golden_name(task: Task, shots: usize) -> String {
        let t = match task {
            Task::HaluevalQa => "qa",
            Task::HaluevalDialogue => "dialogue",
            Task::HaluevalSummarization => "summarization",
            Task::Fever => "fever",
        };
        let k = ["zero", "one", "two"][shots];
        format!("{t}_{k}_shot.txt")
    }

    /// Compare `build_prompt` against every golden file; returns mismatching
    /// file names.
    pub fn golden_prompt_mismatches() -> (usize, Vec<String>) {
        let mut checked = 0;
        let mut bad = Vec::new();
        for (task, demos, query) in prompt_cases() {
            for shots in 0..=2 {
                let name = golden_name(task, shots);
                let want = std::fs::read_to_string(dir().join("prompts").join(&name)).unwrap();
                let refs: Vec<&ExampleRecord> = demos.iter().take(shots).collect();
                let got = mbicl::harness::build_prompt(task, &refs, &query).unwrap();
                checked += 1;
                if got != want {
                    bad.push(name);
                }
            }
        }
        (checked, bad)
    }

    pub struct Run {
        pub code: i32,
        pub stderr: String,
    }

    pub fn mbicl<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
        mbicl_threads(args, 2)
    }

    pub fn mbicl_threads<S: AsRef<std::ffi::OsStr>>(args: &[S], threads: usize) -> Run {
        let out = Command::new(env!("CARGO_BIN_EXE_mbicl"))
            .args(args)
            .env("MBICL_THREADS", threads.to_string())
            .output()
            .unwrap();
        Run { code: out.status.code().unwrap_or(-1), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
    }

    pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) {
        let r = mbicl(args);
        assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    }

    /// prompts then score on the tiny fixture; returns the report as JSON.
    pub fn tiny_report(work: &Path) -> serde_json::Value {
        let stem = dir().join("tiny");
        let prompts_dir = work.join("prompts");
        let score_dir = work.join("score");
        ok(&[
            "prompts".as_ref(),
            "--data".as_ref(),
            stem.as_os_str(),
            "--selections".as_ref(),
            dir().join("tiny_selection.jsonl").as_os_str(),
            "--out".as_ref(),
            prompts_dir.as_os_str(),
        ]);
        ok(&[
            "score".as_ref(),
            "--data".as_ref(),
            stem.as_os_str(),
            "--prompts".as_ref(),
            prompts_dir.join("prompts.jsonl").as_os_str(),
            "--completions".as_ref(),
            dir().join("tiny_completions.jsonl").as_os_str(),
            "--out".as_ref(),
            score_dir.as_os_str(),
        ]);
        serde_json::from_str(&std::fs::read_to_string(score_dir.join("report.json")).unwrap()).unwrap()
    }

    pub fn golden_report() -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir().join("tiny_report.json")).unwrap()).unwrap()
    }
}

pub mod pipeline {
    //! The synthetic train → select → prompts chain through the binary.

    use std::path::{Path, PathBuf};

    use super::fixtures::{mbicl_threads, Run};
    use mbicl::synthetic;

    pub const CONFIG: &str = "epochs = 3\nprototype_dim = 8\nseed = 11\n";

    /// Writes the two-Gaussian dataset and a config; returns the data stem.
    pub fn prepare(dir: &Path, n: usize, seed: u64) -> PathBuf {
        let ds = synthetic::two_gaussians(n, 32, 4.0, seed);
        let stem = dir.join("synth");
        ds.save(&stem.with_extension("mbic"), &dir.join("synth.meta.jsonl")).unwrap();
        std::fs::write(dir.join("train.toml"), CONFIG).unwrap();
        stem
    }

    fn run(threads: usize, args: &[&std::ffi::OsStr]) {
        let r: Run = mbicl_threads(args, threads);
        assert_eq!(r.code, 0, "{:?}: {}", args, r.stderr);
    }

    /// Runs the chain into `out` and returns the artifact files it wrote.
    pub fn chain(dir: &Path, stem: &Path, out: &Path, threads: usize) -> Vec<PathBuf> {
        let train = out.join("train");
        let select = out.join("select");
        let prompts = out.join("prompts");
        let config = dir.join("train.toml");
        run(
            threads,
            &[
                "train".as_ref(),
                "--config".as_ref(),
                config.as_os_str(),
                "--data".as_ref(),
                stem.as_os_str(),
                "--out".as_ref(),
                train.as_os_str(),
            ],
        );
        let checkpoint = train.join("checkpoint.mbic");
        run(
            threads,
            &[
                "select".as_ref(),
                "--method".as_ref(),
                "mbicl".as_ref(),
                "--shots".as_ref(),
                "2".as_ref(),
                "--checkpoint".as_ref(),
                checkpoint.as_os_str(),
                "--data".as_ref(),
                stem.as_os_str(),
                "--out".as_ref(),
                select.as_os_str(),
            ],
        );
        let selections = select.join("selections.jsonl");
        run(
            threads,
            &[
                "prompts".as_ref(),
                "--data".as_ref(),
                stem.as_os_str(),
                "--selections".as_ref(),
                selections.as_os_str(),
                "--out".as_ref(),
                prompts.as_os_str(),
            ],
        );
        vec![checkpoint, train.join("train.log"), selections, prompts.join("prompts.jsonl")]
    }
}
