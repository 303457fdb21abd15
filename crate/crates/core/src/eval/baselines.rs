//! Classical clustering baselines: k-means, Gaussian-mixture EM and silhouette model selection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 300;
/// Convergence threshold on the per-point log-likelihood improvement.
pub const EM_TOL: f64 = 1e-5;
pub const COV_REG: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_k(x: &Tensor, k: usize) -> Result<()> {
    if x.ndim() != 2 || x.rows() == 0 {
        return Err(Error::Shape(format!("expected a non-empty N×D matrix, got {:?}", x.shape())));
    }
    if k == 0 || k > x.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [1, N = {}]", x.rows())));
    }
    Ok(())
}

/// k-means++ seeding: each new centre is drawn with probability proportional to the
/// squared distance to the nearest existing centre.
pub fn kmeans_pp(x: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    check_k(x, k)?;
    let n = x.rows();
    let mut centres = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centres.push(c);
    }
    Ok(centres)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

fn assign(x: &Tensor, centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let row = x.row(i);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(row, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *label = best;
        inertia += best_d;
    }
    inertia
}

/// Lloyd iterations from the given centres.
pub fn lloyd(x: &Tensor, mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let (n, dim, k) = (x.rows(), x.cols(), centroids.len());
    let mut labels = vec![0; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        history.push(assign(x, &centroids, &mut labels));
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums[l].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                // farthest point from its current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(x.row(a), &centroids[labels[a]]).total_cmp(&sq_dist(x.row(b), &centroids[labels[b]]))
                    })
                    .unwrap_or(0);
                labels[far] = j;
                x.row(far).to_vec()
            };
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let inertia = assign(x, &centroids, &mut labels);
    history.push(inertia);
    KMeansResult {
        labels,
        centroids,
        inertia,
        history,
    }
}

/// Best of `restarts` k-means++ initialised Lloyd runs by inertia.
pub fn kmeans(x: &Tensor, k: usize, restarts: usize, rng: &mut impl Rng) -> Result<KMeansResult> {
    check_k(x, k)?;
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(x, kmeans_pp(x, k, rng)?);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// One unrestricted covariance per component.
    Full,
    /// All components share a single `σ²·I`.
    SphericalShared,
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Total log-likelihood at the final parameters.
    pub loglik: f64,
    /// Total log-likelihood before each M-step.
    pub history: Vec<f64>,
}

struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn data_matrix(x: &Tensor) -> Vec<DVector<f64>> {
    (0..x.rows()).map(|i| DVector::from_column_slice(x.row(i))).collect()
}

/// Responsibilities and total log-likelihood.
fn e_step(xs: &[DVector<f64>], p: &Params) -> Option<(Vec<Vec<f64>>, f64)> {
    let d = xs[0].len() as f64;
    let chols: Vec<Cholesky<f64, Dyn>> = p.covs.iter().map(|c| Cholesky::new(c.clone())).collect::<Option<_>>()?;
    let log_norm: Vec<f64> = chols
        .iter()
        .zip(&p.weights)
        .map(|(ch, w)| {
            let log_det: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            w.ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det)
        })
        .collect();
    let mut total = 0.0;
    let mut resp = Vec::with_capacity(xs.len());
    for x in xs {
        let logs: Vec<f64> = chols
            .iter()
            .zip(&p.means)
            .zip(&log_norm)
            .map(|((ch, mu), c)| {
                let diff = x - mu;
                let z = ch.l().solve_lower_triangular(&diff).unwrap_or(diff);
                c - 0.5 * z.norm_squared()
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse;
        resp.push(logs.iter().map(|l| (l - lse).exp()).collect());
    }
    total.is_finite().then_some((resp, total))
}

fn m_step(xs: &[DVector<f64>], resp: &[Vec<f64>], kind: CovarianceKind) -> Option<Params> {
    let (n, k, d) = (xs.len(), resp[0].len(), xs[0].len());
    let mut nk = vec![0.0; k];
    let mut means = vec![DVector::zeros(d); k];
    for (x, r) in xs.iter().zip(resp) {
        for j in 0..k {
            nk[j] += r[j];
            means[j] += x * r[j];
        }
    }
    if nk.iter().any(|&v| v < 1e-10) {
        return None;
    }
    for j in 0..k {
        means[j] /= nk[j];
    }
    let reg = DMatrix::identity(d, d) * COV_REG;
    let covs = match kind {
        CovarianceKind::Full => (0..k)
            .map(|j| {
                let mut s = DMatrix::zeros(d, d);
                for (x, r) in xs.iter().zip(resp) {
                    let diff = x - &means[j];
                    s += &diff * diff.transpose() * r[j];
                }
                s / nk[j] + &reg
            })
            .collect(),
        CovarianceKind::SphericalShared => {
            let mut ss = 0.0;
            for (x, r) in xs.iter().zip(resp) {
                for j in 0..k {
                    ss += r[j] * (x - &means[j]).norm_squared();
                }
            }
            let var = ss / (n * d) as f64 + COV_REG;
            vec![DMatrix::identity(d, d) * var; k]
        }
    };
    Some(Params {
        weights: nk.iter().map(|v| v / n as f64).collect(),
        means,
        covs,
    })
}

fn em_once(xs: &[DVector<f64>], init: &[usize], k: usize, kind: CovarianceKind) -> Option<GmmFit> {
    let hard: Vec<Vec<f64>> = init.iter().map(|&l| (0..k).map(|j| if j == l { 1.0 } else { 0.0 }).collect()).collect();
    let mut params = m_step(xs, &hard, kind)?;
    let n = xs.len() as f64;
    let mut history = Vec::new();
    let (mut resp, mut ll) = e_step(xs, &params)?;
    for _ in 0..EM_MAX_ITERS {
        history.push(ll);
        params = m_step(xs, &resp, kind)?;
        let (r, next) = e_step(xs, &params)?;
        let improvement = (next - ll) / n;
        resp = r;
        ll = next;
        if improvement < EM_TOL {
            break;
        }
    }
    history.push(ll);
    let labels = resp
        .iter()
        .map(|r| (0..k).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
        .collect();
    Some(GmmFit {
        labels,
        weights: params.weights,
        means: params.means,
        covariances: params.covs,
        loglik: ll,
        history,
    })
}

/// EM for a `k`-component Gaussian mixture, best of `restarts` by log-likelihood.
///
/// Each restart initialises responsibilities from a k-means++ seeded Lloyd run; restarts
/// whose covariances turn singular or whose components empty out are discarded.
pub fn gmm_em(x: &Tensor, k: usize, kind: CovarianceKind, restarts: usize, rng: &mut impl Rng) -> Result<GmmFit> {
    check_k(x, k)?;
    let xs = data_matrix(x);
    let mut best: Option<GmmFit> = None;
    for _ in 0..restarts.max(1) {
        let init = lloyd(x, kmeans_pp(x, k, rng)?).labels;
        if let Some(fit) = em_once(&xs, &init, k, kind) {
            if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                best = Some(fit);
            }
        }
    }
    best.ok_or_else(|| Error::Numerical(format!("EM failed in all {restarts} restarts for k = {k}")))
}

/// Symmetric matrix of Euclidean distances between rows.
pub fn pairwise_distances(x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(x.row(i), x.row(j)).sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Mean silhouette coefficient; `None` when fewer than two or more than `N − 1` clusters
/// are occupied. Points in singleton clusters score 0.
pub fn silhouette(dist: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let occupied = sizes.iter().filter(|&&s| s > 0).count();
    if occupied < 2 || occupied >= n {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            sums[labels[j]] += dist[i][j];
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    KMeans,
    Gmm,
    SGmm,
}

impl Baseline {
    pub fn cluster(self, x: &Tensor, k: usize, restarts: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        Ok(match self {
            Baseline::KMeans => kmeans(x, k, restarts, rng)?.labels,
            Baseline::Gmm => gmm_em(x, k, CovarianceKind::Full, restarts, rng)?.labels,
            Baseline::SGmm => gmm_em(x, k, CovarianceKind::SphericalShared, restarts, rng)?.labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub k_hat: usize,
    pub labels: Vec<usize>,
    /// `(k, score)` per candidate; undefined silhouettes score −1.
    pub scores: Vec<(usize, f64)>,
}

/// Runs `method` for every `K` in `k_range` and keeps the highest mean silhouette,
/// preferring the smaller `K` on ties.
pub fn silhouette_select_k(
    x: &Tensor,
    method: Baseline,
    k_range: std::ops::RangeInclusive<usize>,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<Selection> {
    if *k_range.start() < 2 || k_range.is_empty() {
        return Err(Error::InvalidArgument(format!("invalid K range {k_range:?}")));
    }
    let dist = pairwise_distances(x);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    let mut scores = Vec::new();
    for k in k_range.filter(|&k| k <= x.rows()) {
        let labels = method.cluster(x, k, restarts, rng)?;
        let s = silhouette(&dist, &labels).unwrap_or(-1.0);
        scores.push((k, s));
        if best.as_ref().is_none_or(|b| s > b.1) {
            best = Some((k, s, labels));
        }
    }
    let (k_hat, _, labels) = best.ok_or_else(|| Error::InvalidArgument("no candidate K fits the data".into()))?;
    Ok(Selection { k_hat, labels, scores })
}
