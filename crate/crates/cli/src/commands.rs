use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use amoclust::checkpoint::{self, TrainingInfo};
use amoclust::config::load_train_config;
use amoclust::eval::{benchmark_run, load_tasks, EvalOptions, Method};
use amoclust::prior::{mix_seed, sample_task, standardize_columns, Dataset, DatasetMeta, PriorConfig, PriorKind};
use amoclust::train::{train_run, write_train_log, TrainConfig};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use crate::table::read_table;
use crate::{ClusterArgs, EvalArgs, GenArgs, PriorChoice, TrainArgs};

/// Probability of the GMM prior in the mixed setting.
const MIXED_P_GMM: f64 = 0.4;

fn gen_prior(a: &GenArgs) -> Result<PriorConfig> {
    let base = PriorConfig::desk();
    let prior = PriorConfig {
        n_min: a.n_min.unwrap_or(base.n_min),
        n_max: a.n_max.unwrap_or(base.n_max),
        d_min: a.d_min.unwrap_or(base.d_min),
        d_max: a.d_max.unwrap_or(base.d_max),
        k_max: a.k_max.unwrap_or(base.k_max),
        omega_cap: a.omega_cap.or(base.omega_cap),
        p_gmm: match a.prior {
            PriorChoice::Gmm => 1.0,
            PriorChoice::Zeus => 0.0,
            PriorChoice::Mixed => MIXED_P_GMM,
        },
        ..base
    };
    prior.validate()?;
    Ok(prior)
}

pub fn gen(a: &GenArgs, seed: u64) -> Result<()> {
    let prior = gen_prior(a)?;
    let sets: Vec<Dataset> = (0..a.count as u64)
        .into_par_iter()
        .map(|i| sample_task(&prior, mix_seed(seed, i)))
        .collect::<amoclust::Result<_>>()?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let width = a.count.saturating_sub(1).to_string().len().max(4);
    let mut k_hist = BTreeMap::new();
    let mut omegas = Vec::new();
    for (i, ds) in sets.iter().enumerate() {
        ds.save(&a.out, &format!("task_{i:0width$}"))?;
        *k_hist.entry(ds.k_true).or_insert(0usize) += 1;
        if ds.provenance.config.as_ref().map(|c| c.prior_kind) == Some(PriorKind::Gmm) {
            omegas.extend(ds.provenance.achieved_omega_max());
        }
    }
    println!("wrote {} datasets to {}", sets.len(), a.out.display());
    let hist: Vec<String> = k_hist.iter().map(|(k, c)| format!("K={k}: {c}")).collect();
    println!("K histogram: {}", hist.join(", "));
    println!("GMM fraction: {:.3}", omegas.len() as f64 / sets.len().max(1) as f64);
    if !omegas.is_empty() {
        println!("mean achieved Omega_max (GMM): {:.4}", omegas.iter().sum::<f64>() / omegas.len() as f64);
    }
    Ok(())
}

pub fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => load_train_config(path)?,
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let log_path = match &a.log {
        Some(p) => p.clone(),
        None => a.out.with_file_name("train_log.csv"),
    };
    let every = (cfg.steps / 20).max(1);
    let steps = cfg.steps;
    let out = train_run(cfg.clone(), |m| {
        if (m.step + 1) % every == 0 || m.step + 1 == steps {
            eprintln!(
                "step {:>6}/{steps}  lr {:.2e}  pin {:.4}  cin {:.4}",
                m.step + 1,
                m.lr,
                m.pin_loss,
                m.cin_loss
            );
        }
    })?;
    let model = amoclust::model::Amoclust::new(out.state.pin, out.state.cin)?;
    checkpoint::save(&a.out, &model, &TrainingInfo::from_config(&cfg, out.state.step))?;
    write_train_log(&log_path, &out.log)?;
    println!("checkpoint: {}", a.out.display());
    println!("log: {} ({} steps)", log_path.display(), out.log.len());
    Ok(())
}

pub fn eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let (tasks, skipped) = load_tasks(&a.data)?;
    for (name, reason) in &skipped {
        eprintln!("warning: skipping {name}: {reason}");
    }
    if tasks.is_empty() {
        bail!("no labelled datasets in {}", a.data.display());
    }
    let model = match (&a.model, a.methods.contains(&Method::Model)) {
        (Some(path), _) => Some(checkpoint::load(path)?.0),
        (None, true) => bail!("method model needs --model"),
        (None, false) => None,
    };
    let opts = EvalOptions {
        restarts: a.restarts,
        k_max: a.k_max.or(model.as_ref().map(|m| m.k_max())).unwrap_or(10),
        seed,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let results = benchmark_run(model.as_ref(), &tasks, &a.methods, &a.tracks, &opts, &a.out)?;
    println!("{:<8} {:<11} {:>10} {:>10} {:>10} {:>8}", "method", "track", "median_ari", "median_nmi", "rank_ari", "k_mae");
    for r in &results {
        let k_mae = r.k_mae.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<8} {:<11} {:>10.4} {:>10.4} {:>10.2} {:>8}",
            r.method.name(),
            r.track.name(),
            r.median_ari,
            r.median_nmi,
            r.median_rank_ari,
            k_mae
        );
    }
    Ok(())
}

/// Sidecar written next to `out` recording categorical encodings.
pub fn encoding_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("encoding.json")
}

pub fn cluster(a: &ClusterArgs) -> Result<()> {
    let (model, manifest) = checkpoint::load(&a.model)?;
    let meta_path = a.input.with_extension("meta.json");
    let meta: Option<DatasetMeta> = if meta_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&meta_path)?).with_context(|| format!("bad sidecar {}", meta_path.display()))?)
    } else {
        None
    };
    let table = read_table(&a.input, meta.as_ref())?;
    eprintln!("{} rows; features: {}", table.x.rows(), table.columns.join(", "));
    if let Some(env) = manifest.training.envelope {
        for msg in env.violations(table.x.rows(), table.x.cols()) {
            eprintln!("warning: {msg}; results may be unreliable");
        }
    }
    if !table.encodings.is_empty() {
        let path = encoding_path(&a.out);
        fs::write(&path, serde_json::to_string_pretty(&table.encodings_json())?)?;
        eprintln!("categorical encodings: {}", path.display());
    }
    let mut ds = table.into_dataset();
    standardize_columns(&mut ds.x);
    let c = model.cluster(&ds, a.k)?;
    let mut w = std::io::BufWriter::new(fs::File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?);
    match &c.posterior {
        Some(post) => {
            let p: Vec<String> = post.iter().map(|v| v.to_string()).collect();
            writeln!(w, "# k_hat={} posterior(K=2..{})={}", c.k, post.len() + 1, p.join(";"))?;
        }
        None => writeln!(w, "# k={} (given)", c.k)?,
    }
    writeln!(w, "row,cluster,max_prob")?;
    let probs = &c.partition.probs;
    for (i, label) in c.labels.iter().enumerate() {
        writeln!(w, "{i},{label},{}", probs.at(i, *label))?;
    }
    w.flush()?;
    println!("K = {}; wrote {} rows to {}", c.k, c.labels.len(), a.out.display());
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<ExitCode> {
    let start = std::time::Instant::now();
    let checks = amoclust::gradsuite::run_suite(seed)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{:<width$}  max_rel_err {:.3e}  tol {:.0e}  {}",
            c.name,
            c.max_rel_err,
            c.tol,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!(
        "{} checks, {failed} failed, {:.1} s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
