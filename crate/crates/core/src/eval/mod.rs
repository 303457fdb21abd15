//! Evaluation protocol: the learned model and classical baselines on labelled datasets,
//! with the cluster count either given or inferred.

pub mod baselines;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{
    gmm_em, kmeans, kmeans_pp, lloyd, pairwise_distances, silhouette, silhouette_select_k, Baseline, CovarianceKind,
    GmmFit, KMeansResult, Selection, DEFAULT_RESTARTS,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{hard_ari, hard_nmi, k_mae, k_median_ae, median_rank, quantile};
use crate::model::Amoclust;
use crate::prior::{mix_seed, standardize_columns, ColKind, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Model,
    KMeans,
    Gmm,
    SGmm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Model, Method::KMeans, Method::Gmm, Method::SGmm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Model => "model",
            Method::KMeans => "kmeans",
            Method::Gmm => "gmm",
            Method::SGmm => "sgmm",
        }
    }

    fn baseline(self) -> Option<Baseline> {
        match self {
            Method::Model => None,
            Method::KMeans => Some(Baseline::KMeans),
            Method::Gmm => Some(Baseline::Gmm),
            Method::SGmm => Some(Baseline::SGmm),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?} (expected model, kmeans, gmm or sgmm)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    KnownK,
    InferredK,
}

impl Track {
    pub fn name(self) -> &'static str {
        match self {
            Track::KnownK => "known_k",
            Track::InferredK => "inferred_k",
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Track {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known_k" => Ok(Track::KnownK),
            "inferred_k" => Ok(Track::InferredK),
            _ => Err(Error::InvalidArgument(format!("unknown track {s:?} (expected known_k or inferred_k)"))),
        }
    }
}

/// A labelled dataset with a stable name.
#[derive(Clone, Debug)]
pub struct EvalTask {
    pub name: String,
    pub ds: Dataset,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub restarts: usize,
    /// Largest `K` considered when a baseline selects `K` by silhouette.
    pub k_max: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            restarts: DEFAULT_RESTARTS,
            k_max: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetResult {
    pub method: String,
    pub dataset: String,
    pub track: Track,
    pub k_true: usize,
    pub k_pred: usize,
    pub ari: f64,
    pub nmi: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub track: Track,
    pub rows: Vec<DatasetResult>,
    pub median_ari: f64,
    pub iqr_ari: f64,
    pub median_nmi: f64,
    pub iqr_nmi: f64,
    /// Filled in by [`rank_methods`]; NaN until then.
    pub median_rank_ari: f64,
    pub iqr_rank_ari: f64,
    /// Absent on the known-K track.
    pub k_mae: Option<f64>,
    pub k_mae_median: Option<f64>,
}

fn iqr(v: &[f64]) -> f64 {
    quantile(v, 0.75) - quantile(v, 0.25)
}

impl MethodResult {
    pub fn from_rows(method: Method, track: Track, rows: Vec<DatasetResult>) -> Result<Self> {
        let ari: Vec<f64> = rows.iter().map(|r| r.ari).collect();
        let nmi: Vec<f64> = rows.iter().map(|r| r.nmi).collect();
        let (k_mae, k_mae_median) = match track {
            Track::KnownK => (None, None),
            Track::InferredK => {
                let pred: Vec<usize> = rows.iter().map(|r| r.k_pred).collect();
                let truth: Vec<usize> = rows.iter().map(|r| r.k_true).collect();
                (Some(k_mae(&pred, &truth)?), Some(k_median_ae(&pred, &truth)?))
            }
        };
        Ok(MethodResult {
            method,
            track,
            median_ari: quantile(&ari, 0.5),
            iqr_ari: iqr(&ari),
            median_nmi: quantile(&nmi, 0.5),
            iqr_nmi: iqr(&nmi),
            median_rank_ari: f64::NAN,
            iqr_rank_ari: f64::NAN,
            k_mae,
            k_mae_median,
            rows,
        })
    }

    /// Fraction of datasets whose predicted `K` is exact.
    pub fn k_accuracy(&self) -> f64 {
        let hits = self.rows.iter().filter(|r| r.k_pred == r.k_true).count();
        hits as f64 / self.rows.len().max(1) as f64
    }
}

/// Replaces each categorical column by one indicator column per distinct value (in
/// increasing value order); numeric columns pass through.
pub fn one_hot_categoricals(ds: &Dataset) -> Tensor {
    if ds.col_kind.iter().all(|k| *k == ColKind::Numeric) {
        return ds.x.clone();
    }
    let n = ds.n();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (j, kind) in ds.col_kind.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| ds.x.at(i, j)).collect();
        match kind {
            ColKind::Numeric => columns.push(col),
            ColKind::Categorical => {
                let mut levels = col.clone();
                levels.sort_by(f64::total_cmp);
                levels.dedup();
                for level in levels {
                    columns.push(col.iter().map(|&v| if v == level { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    let data = (0..n).flat_map(|i| columns.iter().map(move |c| c[i])).collect();
    Tensor::new(vec![n, columns.len()], data).expect("consistent one-hot shape")
}

/// FNV-1a, used to derive per-dataset seeds from names.
fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn labels_of(task: &EvalTask) -> Result<&[usize]> {
    task.ds
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("dataset {} has no labels", task.name)))
}

/// Runs one method on one dataset.
pub fn evaluate_one(
    method: Method,
    track: Track,
    task: &EvalTask,
    model: Option<&Amoclust>,
    opts: &EvalOptions,
) -> Result<DatasetResult> {
    let z = labels_of(task)?;
    let ds = &task.ds;
    let start = Instant::now();
    let (k_pred, labels) = match method.baseline() {
        None => {
            let model = model.ok_or_else(|| Error::InvalidArgument("method model needs a trained model".into()))?;
            let k = match track {
                Track::KnownK => Some(ds.k_true),
                Track::InferredK => None,
            };
            let c = model.cluster(ds, k)?;
            (c.k, c.labels)
        }
        Some(baseline) => {
            let seed = mix_seed(mix_seed(opts.seed, name_hash(&task.name)), name_hash(method.name()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = one_hot_categoricals(ds);
            match track {
                Track::KnownK => (ds.k_true, baseline.cluster(&x, ds.k_true, opts.restarts, &mut rng)?),
                Track::InferredK => {
                    let top = opts.k_max.min(ds.n() - 1).max(2);
                    let sel = silhouette_select_k(&x, baseline, 2..=top, opts.restarts, &mut rng)?;
                    (sel.k_hat, sel.labels)
                }
            }
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(DatasetResult {
        method: method.name().into(),
        dataset: task.name.clone(),
        track,
        k_true: ds.k_true,
        k_pred,
        ari: hard_ari(&labels, z)?,
        nmi: hard_nmi(&labels, z)?,
        wall_ms,
    })
}

/// Runs `method` on every task (in parallel); rows come back in task order.
pub fn evaluate_method(
    method: Method,
    tasks: &[EvalTask],
    track: Track,
    model: Option<&Amoclust>,
    opts: &EvalOptions,
) -> Result<MethodResult> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no datasets to evaluate".into()));
    }
    let rows = tasks
        .par_iter()
        .map(|t| evaluate_one(method, track, t, model, opts))
        .collect::<Result<Vec<_>>>()?;
    MethodResult::from_rows(method, track, rows)
}

/// Fills the rank statistics of methods sharing a track, ranking ARI per dataset.
pub fn rank_methods(results: &mut [MethodResult]) -> Result<()> {
    let tracks: Vec<Track> = {
        let mut t: Vec<Track> = results.iter().map(|r| r.track).collect();
        t.sort();
        t.dedup();
        t
    };
    for track in tracks {
        let idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].track == track).collect();
        let mut names: Vec<&str> = results[idx[0]].rows.iter().map(|r| r.dataset.as_str()).collect();
        names.sort_unstable();
        let scores = idx
            .iter()
            .map(|&i| {
                let mut rows: Vec<&DatasetResult> = results[i].rows.iter().collect();
                rows.sort_by(|a, b| a.dataset.cmp(&b.dataset));
                if rows.iter().map(|r| r.dataset.as_str()).ne(names.iter().copied()) {
                    return Err(Error::InvalidArgument(format!("methods on track {track} saw different datasets")));
                }
                Ok(rows.iter().map(|r| r.ari).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let ranks = median_rank(&scores, true)?;
        for (&i, r) in idx.iter().zip(ranks) {
            results[i].median_rank_ari = r.median_rank;
            results[i].iqr_rank_ari = r.iqr;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    method: &'a str,
    track: Track,
    median_ari: f64,
    iqr_ari: f64,
    median_nmi: f64,
    iqr_nmi: f64,
    median_rank_ari: f64,
    k_mae_median: Option<f64>,
    iqr_rank_ari: f64,
    k_mae: Option<f64>,
}

/// Every requested method on every task for every track; results are sorted by
/// (track, method) with rows sorted by dataset name.
pub fn benchmark(
    model: Option<&Amoclust>,
    tasks: &[EvalTask],
    methods: &[Method],
    tracks: &[Track],
    opts: &EvalOptions,
) -> Result<Vec<MethodResult>> {
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let mut tracks = tracks.to_vec();
    tracks.sort();
    tracks.dedup();
    let mut out = Vec::new();
    for &track in &tracks {
        for &method in &methods {
            let mut r = evaluate_method(method, tasks, track, model, opts)?;
            r.rows.sort_by(|a, b| a.dataset.cmp(&b.dataset));
            out.push(r);
        }
    }
    rank_methods(&mut out)?;
    Ok(out)
}

pub const PER_DATASET_CSV: &str = "results_per_dataset.csv";
pub const AGGREGATE_CSV: &str = "results_aggregate.csv";

pub fn write_results(out_dir: &Path, results: &[MethodResult]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(PER_DATASET_CSV))?;
    for row in results.iter().flat_map(|r| &r.rows) {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join(AGGREGATE_CSV))?;
    for r in results {
        w.serialize(AggregateRow {
            method: r.method.name(),
            track: r.track,
            median_ari: r.median_ari,
            iqr_ari: r.iqr_ari,
            median_nmi: r.median_nmi,
            iqr_nmi: r.iqr_nmi,
            median_rank_ari: r.median_rank_ari,
            k_mae_median: r.k_mae_median,
            iqr_rank_ari: r.iqr_rank_ari,
            k_mae: r.k_mae,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Runs [`benchmark`] and writes both result tables into `out_dir`.
pub fn benchmark_run(
    model: Option<&Amoclust>,
    tasks: &[EvalTask],
    methods: &[Method],
    tracks: &[Track],
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<Vec<MethodResult>> {
    let results = benchmark(model, tasks, methods, tracks, opts)?;
    write_results(out_dir, &results)?;
    Ok(results)
}

/// Loads every `<name>.csv` in `dir` (sorted by name) and z-normalizes its columns.
/// Unreadable or unlabelled files are returned as `(name, reason)` instead of failing
/// the whole load.
pub fn load_tasks(dir: &Path) -> Result<(Vec<EvalTask>, Vec<(String, String)>)> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".csv").map(str::to_owned)
        })
        .collect();
    names.sort();
    let (mut tasks, mut skipped) = (Vec::new(), Vec::new());
    for name in names {
        match Dataset::load(dir, &name) {
            Ok(mut ds) if ds.labels.is_some() => {
                standardize_columns(&mut ds.x);
                tasks.push(EvalTask { name, ds })
            }
            Ok(_) => skipped.push((name, "no label column".into())),
            Err(e) => skipped.push((name, e.to_string())),
        }
    }
    Ok((tasks, skipped))
}
