//! Synthetic clustering tasks.
//!
//! Two priors are available: an overlap-controlled Gaussian mixture ([`gmm`])
//! and a mixed-type prior with an invertible residual warp and categorical
//! columns ([`zeus`]). [`sample_task`] draws a full preprocessed task from a seed.

pub mod gmm;
mod io;
pub mod zeus;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gmm::{generate_gmm_spec, omega_upper, pairwise_overlap, sample_gmm_dataset, GmmSpec, OverlapReport};
pub use io::DatasetMeta;
pub use zeus::{build_iresnet, generate_zeus_dataset, IResNet, ResBlock, ZeusSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Gmm,
    Zeus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColKind {
    Numeric,
    Categorical,
}

/// Size and kind of one synthetic task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n: usize,
    pub d: usize,
    pub k_true: usize,
    pub prior_kind: PriorKind,
    pub seed: u64,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_true < 2 || self.n < 2 || self.d < 2 {
            return Err(Error::InvalidArgument(format!(
                "task needs n ≥ 2, d ≥ 2, k ≥ 2; got n={}, d={}, k={}",
                self.n, self.d, self.k_true
            )));
        }
        Ok(())
    }
}

/// Sampling ranges and knobs shared by both priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub k_max: usize,
    /// Probability that a task has exactly two clusters.
    pub p_k2: f64,
    /// Probability of the GMM prior; the rest is ZEUS.
    pub p_gmm: f64,
    pub pi_low: f64,
    pub dirichlet_alpha: f64,
    pub cat_beta: f64,
    pub max_categories: usize,
    /// Optional ceiling on the target Ω_max, below the dimension-dependent bound.
    pub omega_cap: Option<f64>,
    pub overlap_mc_samples: usize,
    pub permute_features: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PriorConfig {
    pub fn paper() -> Self {
        PriorConfig {
            n_min: 500,
            n_max: 1000,
            d_min: 2,
            d_max: 64,
            k_max: 10,
            p_k2: 0.3,
            p_gmm: 0.4,
            pi_low: 0.1,
            dirichlet_alpha: 2.0,
            cat_beta: 0.5,
            max_categories: 5,
            omega_cap: None,
            overlap_mc_samples: 4000,
            permute_features: true,
        }
    }

    pub fn desk() -> Self {
        PriorConfig {
            n_min: 100,
            n_max: 200,
            d_min: 2,
            d_max: 8,
            k_max: 6,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_min > self.n_max || self.d_min > self.d_max {
            return bad(format!(
                "empty size range: n [{}, {}], d [{}, {}]",
                self.n_min, self.n_max, self.d_min, self.d_max
            ));
        }
        if self.n_min < 2 || self.d_min < 2 || self.k_max < 2 {
            return bad("n, d and k_max must be at least 2".into());
        }
        for (name, p) in [("p_k2", self.p_k2), ("p_gmm", self.p_gmm)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.max_categories < 2 || self.dirichlet_alpha <= 0.0 || self.cat_beta <= 0.0 {
            return bad("categorical and Dirichlet parameters out of range".into());
        }
        if self.omega_cap.is_some_and(|c| !(c > 0.0 && c < 1.0)) {
            return bad("omega_cap must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Draws task sizes: `n`, `d` uniform, `K = 2` with probability `p_k2` else uniform
/// on `3..=k_max`, GMM prior with probability `p_gmm`.
pub fn sample_task_config(rng: &mut impl Rng, prior: &PriorConfig) -> Result<TaskConfig> {
    prior.validate()?;
    let n = rng.random_range(prior.n_min..=prior.n_max);
    let d = rng.random_range(prior.d_min..=prior.d_max);
    let k_true = if prior.k_max == 2 || rng.random_bool(prior.p_k2) {
        2
    } else {
        rng.random_range(3..=prior.k_max)
    };
    let prior_kind = if rng.random_bool(prior.p_gmm) {
        PriorKind::Gmm
    } else {
        PriorKind::Zeus
    };
    Ok(TaskConfig {
        n,
        d,
        k_true,
        prior_kind,
        seed: rng.random(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec {
    Gmm(GmmSpec),
    Zeus(ZeusSpec),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub config: Option<TaskConfig>,
    pub spec: Option<PriorSpec>,
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn achieved_omega_max(&self) -> Option<f64> {
        match &self.spec {
            Some(PriorSpec::Gmm(g)) => Some(g.achieved_omega_max),
            Some(PriorSpec::Zeus(z)) => Some(z.base_gmm.achieved_omega_max),
            None => None,
        }
    }
}

/// A feature table with column kinds and, for synthetic tasks, ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub col_kind: Vec<ColKind>,
    pub labels: Option<Vec<usize>>,
    pub k_true: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.ndim() != 2 || self.col_kind.len() != self.d() {
            return Err(Error::Shape(format!(
                "dataset x {:?} with {} column kinds",
                self.x.shape(),
                self.col_kind.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n() {
                return Err(Error::Shape(format!("{} labels for {} rows", l.len(), self.n())));
            }
            if let Some(&bad) = l.iter().find(|&&z| z >= self.k_true) {
                return Err(Error::InvalidArgument(format!("label {bad} ≥ k_true {}", self.k_true)));
            }
        }
        Ok(())
    }
}

/// Standardizes every column to mean 0 and population std 1; constant columns become 0.
pub fn standardize_columns(x: &mut Tensor) {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 {
        return;
    }
    let data = x.data_mut();
    for c in 0..d {
        let mean = (0..n).map(|r| data[r * d + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (data[r * d + c] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for r in 0..n {
            let v = &mut data[r * d + c];
            *v = if std > 1e-12 * (1.0 + mean.abs()) { (*v - mean) / std } else { 0.0 };
        }
    }
}

/// Column z-normalization, optionally followed by a uniform random column permutation.
pub fn preprocess(mut ds: Dataset, permute_features: bool, rng: &mut impl Rng) -> Dataset {
    standardize_columns(&mut ds.x);
    if permute_features {
        let mut perm: Vec<usize> = (0..ds.d()).collect();
        perm.shuffle(rng);
        ds.x = ds.x.permute_cols(&perm);
        ds.col_kind = perm.iter().map(|&p| ds.col_kind[p]).collect();
        ds.provenance.notes.push(format!("column permutation {perm:?}"));
    }
    ds
}

/// 64-bit mixing hash for deriving per-item seeds.
pub fn mix_seed(base: u64, i: u64) -> u64 {
    let mut z = base ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates and preprocesses the task described by `cfg`; deterministic in `cfg.seed`.
pub fn generate_task(cfg: &TaskConfig, prior: &PriorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ds = match cfg.prior_kind {
        PriorKind::Gmm => {
            let spec = generate_gmm_spec(cfg, prior, &mut rng)?;
            sample_gmm_dataset(&spec, cfg, &mut rng)?
        }
        PriorKind::Zeus => generate_zeus_dataset(cfg, prior, &mut rng)?,
    };
    Ok(preprocess(ds, prior.permute_features, &mut rng))
}

/// Draws a task configuration from `prior` and generates it.
pub fn sample_task(prior: &PriorConfig, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = sample_task_config(&mut rng, prior)?;
    generate_task(&cfg, prior)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_ranges_and_k_prior() {
        let prior = PriorConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut k2 = 0;
        let mut gmm = 0;
        for _ in 0..10000 {
            let c = sample_task_config(&mut rng, &prior).unwrap();
            assert!((500..=1000).contains(&c.n) && (2..=64).contains(&c.d) && (2..=10).contains(&c.k_true));
            k2 += usize::from(c.k_true == 2);
            gmm += usize::from(c.prior_kind == PriorKind::Gmm);
        }
        assert!((k2 as f64 / 1e4 - 0.3).abs() < 0.02);
        assert!((gmm as f64 / 1e4 - 0.4).abs() < 0.02);
    }

    #[test]
    fn desk_ranges() {
        let prior = PriorConfig {
            d_max: 8,
            ..PriorConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = sample_task_config(&mut rng, &prior).unwrap();
            assert!((100..=200).contains(&c.n) && (2..=8).contains(&c.d));
        }
    }

    #[test]
    fn empty_ranges_rejected() {
        let prior = PriorConfig {
            n_min: 10,
            n_max: 5,
            ..PriorConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_task_config(&mut rng, &prior).is_err());
    }

    fn one_column(values: Vec<f64>) -> Dataset {
        Dataset {
            x: Tensor::new(vec![values.len(), 1], values).unwrap(),
            col_kind: vec![ColKind::Numeric],
            labels: None,
            k_true: 2,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn standardize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = preprocess(one_column(vec![1.0, 2.0, 3.0]), false, &mut rng);
        let want = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((ds.x.data()[0] + want).abs() < 1e-12);
        assert_eq!(ds.x.data()[1], 0.0);
        assert!((ds.x.data()[2] - 1.2247).abs() < 1e-4);
        let ds = preprocess(one_column(vec![5.0; 3]), false, &mut rng);
        assert_eq!(ds.x.data(), &[0.0; 3]);
    }

    #[test]
    fn permutation_inverts_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![4, 5], (0..20).map(|v| v as f64 * 0.37).collect()).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        assert_eq!(x.permute_cols(&perm).permute_cols(&inv), x);
    }

    #[test]
    fn tasks_are_deterministic_and_valid() {
        let prior = PriorConfig::desk();
        for seed in 0..12 {
            let a = sample_task(&prior, seed).unwrap();
            let b = sample_task(&prior, seed).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            for c in 0..a.d() {
                let col: Vec<f64> = (0..a.n()).map(|r| a.x.at(r, c)).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                assert!(mean.abs() < 1e-6);
                assert!((var.sqrt() - 1.0).abs() < 1e-6 || col.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn labels_cover_all_clusters() {
        let prior = PriorConfig::desk();
        let mut missing = 0;
        for seed in 0..100 {
            let ds = sample_task(&prior, mix_seed(99, seed)).unwrap();
            let labels = ds.labels.unwrap();
            let distinct: std::collections::HashSet<_> = labels.iter().collect();
            missing += usize::from(distinct.len() != ds.k_true);
        }
        // P(missing) ≤ K(1 − 0.1)^100 ≈ 1.6e-4 per task
        assert!(missing <= 1, "{missing}");
    }

    #[test]
    fn seed_mixing_spreads() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| mix_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(mix_seed(7, 0), mix_seed(8, 0));
    }
}
