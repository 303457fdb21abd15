use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{Dataset, PriorConfig, PriorKind, PriorSpec, Provenance, TaskConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const DIRICHLET_MAX_ATTEMPTS: usize = 1000;
/// Log-density gaps this small count as ties, each side taking half.
const TIE_TOL: f64 = 1e-9;
const SCALE_SEARCH_ITERS: usize = 40;
/// Smallest admissible eigenvalue ratio λ_min/λ_max, i.e. 1 − 0.9².
pub const MIN_EIGEN_RATIO: f64 = 1.0 - 0.9 * 0.9;
/// Heteroscedastic components draw a log-uniform variance scale in this range.
const VARIANCE_SCALE_RANGE: (f64, f64) = (0.5, 2.0);

/// Full generative parameters of a Gaussian mixture task.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `D × D` covariance per component.
    pub covariances: Vec<DMatrix<f64>>,
    pub spherical: bool,
    pub homoscedastic: bool,
    pub target_omega_max: f64,
    pub achieved_omega_max: f64,
    /// Factor applied to the initial means about their centroid.
    pub mean_scale: f64,
}

impl GmmSpec {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvalidArgument(format!(
                "gmm spec with {} weights, {} means, {} covariances",
                k,
                self.means.len(),
                self.covariances.len()
            )));
        }
        let d = self.dim();
        if self.means.iter().any(|m| m.len() != d)
            || self.covariances.iter().any(|c| c.nrows() != d || c.ncols() != d)
        {
            return Err(Error::Shape("gmm spec components disagree on dimension".into()));
        }
        Ok(())
    }
}

/// Bayes misclassification overlaps between mixture components.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    /// `one_sided[i][j]` = o_{j|i}; the diagonal is zero.
    pub one_sided: Vec<Vec<f64>>,
    pub pairwise: Vec<Vec<f64>>,
    pub omega_max: f64,
}

fn cholesky(cov: &DMatrix<f64>, what: usize) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(cov.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical(format!("covariance {what} is not positive definite")))
}

/// Monte-Carlo overlap as a function of the mean scale `s`.
///
/// Samples from component `i` are `s·μ_i + L_i ε`; for each ordered pair the
/// log-density gap is a quadratic in `s`, so its coefficients are cached once
/// and every evaluation is `O(mc · K²)`.
pub(crate) struct OverlapEvaluator {
    k: usize,
    mc: usize,
    /// Per ordered pair `(i, j)`: constant term and linear coefficient per sample.
    c0: Vec<Vec<f64>>,
    c1: Vec<Vec<f64>>,
    /// Per ordered pair: `‖L_j⁻¹(μ_i − μ_j)‖²`.
    c2: Vec<f64>,
}

impl OverlapEvaluator {
    pub(crate) fn new(
        weights: &[f64],
        means: &[Vec<f64>],
        covs: &[DMatrix<f64>],
        mc: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if mc < 1000 {
            return Err(Error::InvalidArgument(format!(
                "overlap estimation needs at least 1000 samples, got {mc}"
            )));
        }
        let k = weights.len();
        let d = means[0].len();
        let chol: Vec<DMatrix<f64>> = covs.iter().enumerate().map(|(i, c)| cholesky(c, i)).collect::<Result<_>>()?;
        let logdet: Vec<f64> = chol.iter().map(|l| l.diagonal().iter().map(|v| v.ln()).sum()).collect();
        let mut c0 = Vec::with_capacity(k * k);
        let mut c1 = Vec::with_capacity(k * k);
        let mut c2 = Vec::with_capacity(k * k);
        for i in 0..k {
            let eps = DMatrix::<f64>::from_fn(d, mc, |_, _| rng.sample(StandardNormal));
            let eps_sq: Vec<f64> = eps.column_iter().map(|c| c.norm_squared()).collect();
            let own = weights[i].ln() - logdet[i];
            for j in 0..k {
                if i == j {
                    c0.push(vec![]);
                    c1.push(vec![]);
                    c2.push(0.0);
                    continue;
                }
                let lj = &chol[j];
                let m = lj
                    .solve_lower_triangular(&chol[i])
                    .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
                let diff = DVector::from_iterator(d, means[i].iter().zip(&means[j]).map(|(a, b)| a - b));
                let b = lj
                    .solve_lower_triangular(&diff)
                    .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
                let a = &m * &eps;
                let other = weights[j].ln() - logdet[j];
                let mut row0 = Vec::with_capacity(mc);
                let mut row1 = Vec::with_capacity(mc);
                for (t, col) in a.column_iter().enumerate() {
                    // own log density minus other's, at s = 0
                    row0.push(own - 0.5 * eps_sq[t] - other + 0.5 * col.norm_squared());
                    row1.push(col.dot(&b));
                }
                c0.push(row0);
                c1.push(row1);
                c2.push(b.norm_squared());
            }
        }
        Ok(OverlapEvaluator { k, mc, c0, c1, c2 })
    }

    pub(crate) fn report(&self, s: f64) -> OverlapReport {
        let k = self.k;
        let mut one_sided = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let p = i * k + j;
                let quad = 0.5 * s * s * self.c2[p];
                let hits: f64 = self.c0[p]
                    .iter()
                    .zip(&self.c1[p])
                    .map(|(&a, &b)| {
                        let gap = a + s * b + quad;
                        if gap < -TIE_TOL {
                            1.0
                        } else if gap <= TIE_TOL {
                            0.5
                        } else {
                            0.0
                        }
                    })
                    .sum();
                one_sided[i][j] = hits / self.mc as f64;
            }
        }
        let mut pairwise = vec![vec![0.0; k]; k];
        let mut omega_max: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    pairwise[i][j] = one_sided[i][j] + one_sided[j][i];
                    omega_max = omega_max.max(pairwise[i][j]);
                }
            }
        }
        OverlapReport {
            one_sided,
            pairwise,
            omega_max,
        }
    }
}

/// Estimates o_{j|i}, ω_ij and Ω_max by Monte Carlo with `mc_samples` draws per component.
pub fn pairwise_overlap(spec: &GmmSpec, mc_samples: usize, rng: &mut impl Rng) -> Result<OverlapReport> {
    spec.validate()?;
    let ev = OverlapEvaluator::new(&spec.weights, &spec.means, &spec.covariances, mc_samples, rng)?;
    Ok(ev.report(1.0))
}

pub(crate) fn sample_dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 {
            return g.into_iter().map(|v| v / total).collect();
        }
    }
}

fn sample_weights(k: usize, alpha: f64, pi_low: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if k as f64 * pi_low > 1.0 + 1e-12 {
        return Err(Error::Infeasible(format!(
            "{k} components cannot each hold at least {pi_low}"
        )));
    }
    for _ in 0..DIRICHLET_MAX_ATTEMPTS {
        let w = sample_dirichlet(alpha, k, rng);
        if w.iter().all(|&v| v >= pi_low) {
            return Ok(w);
        }
    }
    // Near the feasibility boundary rejection almost never succeeds; shift a fresh
    // draw onto the floor instead.
    let slack = (1.0 - k as f64 * pi_low).max(0.0);
    let w = sample_dirichlet(alpha, k, rng);
    let mut w: Vec<f64> = w.into_iter().map(|v| pi_low + slack * v).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Haar-distributed orthogonal matrix from the QR decomposition of a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn log_uniform(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

fn sample_covariance(d: usize, spherical: bool, rng: &mut impl Rng) -> DMatrix<f64> {
    let scale = log_uniform(VARIANCE_SCALE_RANGE.0, VARIANCE_SCALE_RANGE.1, rng);
    if spherical {
        return DMatrix::identity(d, d) * scale;
    }
    let q = random_orthogonal(d, rng);
    let lambda = DVector::from_fn(d, |_, _| scale * log_uniform(MIN_EIGEN_RATIO, 1.0, rng));
    let mut cov = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    // exact symmetry
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Upper end of the target Ω_max range for dimension `d`.
pub fn omega_upper(d: usize) -> f64 {
    (1.5 / (d as f64).powf(0.82)).min(0.8)
}

pub(crate) fn build_gmm_spec(d: usize, k: usize, prior: &PriorConfig, rng: &mut impl Rng) -> Result<GmmSpec> {
    let weights = sample_weights(k, prior.dirichlet_alpha, prior.pi_low, rng)?;
    let spherical = rng.random_bool(0.5);
    let homoscedastic = rng.random_bool(0.5);
    let covariances = if homoscedastic {
        vec![sample_covariance(d, spherical, rng); k]
    } else {
        (0..k).map(|_| sample_covariance(d, spherical, rng)).collect()
    };
    let raw: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let mut hi = omega_upper(d);
    if let Some(cap) = prior.omega_cap {
        hi = hi.min(cap);
    }
    let lo = OMEGA_MIN.min(hi);
    let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };

    let centroid: Vec<f64> = (0..d).map(|c| raw.iter().map(|m| m[c]).sum::<f64>() / k as f64).collect();
    let centered: Vec<Vec<f64>> = raw
        .iter()
        .map(|m| m.iter().zip(&centroid).map(|(a, c)| a - c).collect())
        .collect();
    let mut mc_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let ev = OverlapEvaluator::new(&weights, &centered, &covariances, prior.overlap_mc_samples, &mut mc_rng)?;
    let (mean_scale, achieved) = search_scale(|s| ev.report(s).omega_max, target);

    let means = centered
        .iter()
        .map(|m| m.iter().zip(&centroid).map(|(v, c)| c + mean_scale * v).collect())
        .collect();
    Ok(GmmSpec {
        weights,
        means,
        covariances,
        spherical,
        homoscedastic,
        target_omega_max: target,
        achieved_omega_max: achieved,
        mean_scale,
    })
}

/// Lowest target Ω_max drawn by the generator.
pub const OMEGA_MIN: f64 = 0.01;

/// Bisection on a decreasing function; returns the evaluated point closest to `target`.
fn search_scale(f: impl Fn(f64) -> f64, target: f64) -> (f64, f64) {
    let mut best = (0.0, f(0.0));
    let consider = |s: f64, v: f64, best: &mut (f64, f64)| {
        if (v - target).abs() < (best.1 - target).abs() {
            *best = (s, v);
        }
    };
    if best.1 <= target {
        return best;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut f_hi = f(hi);
    consider(hi, f_hi, &mut best);
    while f_hi > target && hi < 1e8 {
        lo = hi;
        hi *= 2.0;
        f_hi = f(hi);
        consider(hi, f_hi, &mut best);
    }
    for _ in 0..SCALE_SEARCH_ITERS {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        consider(mid, v, &mut best);
        if v > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

/// Draws mixture weights, covariances and means, then rescales the means so
/// the Monte-Carlo Ω_max approaches a target drawn from the dimension-dependent range.
pub fn generate_gmm_spec(cfg: &TaskConfig, prior: &PriorConfig, rng: &mut impl Rng) -> Result<GmmSpec> {
    if cfg.prior_kind != PriorKind::Gmm {
        return Err(Error::InvalidArgument("generate_gmm_spec called for a non-GMM task".into()));
    }
    cfg.validate()?;
    build_gmm_spec(cfg.d, cfg.k_true, prior, rng)
}

/// Draws labels and rows from the mixture; returns `(x, labels)`.
pub(crate) fn sample_mixture(spec: &GmmSpec, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let d = spec.dim();
    let chol: Vec<DMatrix<f64>> = spec
        .covariances
        .iter()
        .enumerate()
        .map(|(i, c)| cholesky(c, i))
        .collect::<Result<_>>()?;
    let cdf: Vec<f64> = spec
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        let z = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        let eps = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let row = &chol[z] * eps;
        data.extend(row.iter().zip(&spec.means[z]).map(|(e, m)| e + m));
        labels.push(z);
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}

/// Samples `cfg.n` labelled rows from `spec`, without preprocessing.
pub fn sample_gmm_dataset(spec: &GmmSpec, cfg: &TaskConfig, rng: &mut impl Rng) -> Result<Dataset> {
    let (x, labels) = sample_mixture(spec, cfg.n, rng)?;
    let d = x.cols();
    Ok(Dataset {
        x,
        col_kind: vec![super::ColKind::Numeric; d],
        labels: Some(labels),
        k_true: spec.k(),
        provenance: Provenance {
            config: Some(cfg.clone()),
            spec: Some(PriorSpec::Gmm(spec.clone())),
            notes: vec!["overlap targeted by Monte-Carlo mean-scale search".into()],
        },
    })
}
