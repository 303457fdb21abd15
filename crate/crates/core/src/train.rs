//! Training on freshly sampled synthetic tasks.
//!
//! The partition network is trained with a partition loss at the true `K`; the
//! cardinality head is trained with a loss on the fingerprint of partitions at every
//! candidate `K`. In the decoupled mode the fingerprint is computed from values, so the
//! cardinality loss cannot reach the partition network.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::cin::{fingerprint_concat, CinHead, CinHyper, CinModel, Fingerprint};
use crate::error::{Error, Result};
use crate::metrics::{
    matching_ce_loss, matching_softacc_loss, soft_ari, soft_nmi, SoftPartitionVar, SINKHORN_TEMPERATURE,
};
use crate::nn::ParamStore;
use crate::pin::{PinHyper, PinModel};
use crate::prior::{mix_seed, sample_task, Dataset, PriorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinLossKind {
    Softari,
    Softnmi,
    MatchCe,
    MatchSoftacc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CinLossKind {
    Ce,
    Ordinal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// The cardinality loss sees stop-gradient partitions.
    Decoupled,
    /// One summed loss backpropagates into both networks.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_tasks: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub pin_loss: PinLossKind,
    pub cin_loss: CinLossKind,
    pub coupling: Coupling,
    pub prior: PriorConfig,
    pub pin: PinHyper,
    pub cin_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            steps: 1000,
            batch_tasks: 8,
            warmup_steps: 100,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            pin_loss: PinLossKind::Softari,
            cin_loss: CinLossKind::Ce,
            coupling: Coupling::Decoupled,
            prior: PriorConfig::desk(),
            pin: PinHyper::desk(),
            cin_hidden: 256,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_tasks: 512,
            warmup_steps: 2000,
            peak_lr: 1e-4,
            prior: PriorConfig::paper(),
            pin: PinHyper::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn cin_hyper(&self) -> CinHyper {
        CinHyper {
            k_max: self.pin.k_max,
            hidden: self.cin_hidden,
            head: match self.cin_loss {
                CinLossKind::Ce => CinHead::Softmax,
                CinLossKind::Ordinal => CinHead::Ordinal,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_tasks == 0 {
            return bad("steps and batch_tasks must be positive".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if !(self.peak_lr > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return bad("peak_lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        if self.prior.k_max > self.pin.k_max {
            return bad(format!(
                "prior k_max {} exceeds model k_max {}",
                self.prior.k_max, self.pin.k_max
            ));
        }
        self.prior.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pin.validate()?;
        self.cin_hyper().validate()
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, total, peak) = (cfg.warmup_steps, cfg.steps, cfg.peak_lr);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if total <= w {
        return peak;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || grads.iter().zip(store.values()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let step = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = *w * decay - lr * step;
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// Partition loss at the true `K`; lower is better for every kind.
pub fn pin_loss<'g>(part: SoftPartitionVar<'g>, z: &[usize], kind: PinLossKind) -> Result<Var<'g>> {
    match kind {
        PinLossKind::Softari => Ok(soft_ari(part.probs, z)?.scale(-1.0)),
        PinLossKind::Softnmi => Ok(soft_nmi(part.probs, z)?.scale(-1.0)),
        PinLossKind::MatchCe => matching_ce_loss(part, z),
        PinLossKind::MatchSoftacc => matching_softacc_loss(part.probs, z, SINKHORN_TEMPERATURE),
    }
}

fn check_k_true(k_true: usize, k_max: usize) -> Result<()> {
    if k_true < 2 || k_true > k_max {
        return Err(Error::InvalidArgument(format!("k_true {k_true} outside [2, {k_max}]")));
    }
    Ok(())
}

/// Cross-entropy `−log p̂(K*)` from `[1, k_max − 1]` logits.
pub fn cin_ce_loss<'g>(logits: Var<'g>, k_true: usize) -> Result<Var<'g>> {
    let k_max = logits.shape()[1] + 1;
    check_k_true(k_true, k_max)?;
    Ok(logits.log_softmax().narrow(1, k_true - 2, 1)?.sum().scale(-1.0))
}

/// Mean binary cross-entropy of ordinal logits against `y_K = [K* > K]`, `K = 2..k_max−1`.
pub fn cin_ordinal_loss<'g>(eta: Var<'g>, k_true: usize) -> Result<Var<'g>> {
    let m = eta.shape()[1];
    check_k_true(k_true, m + 2)?;
    let y = Tensor::new(vec![1, m], ordinal_targets(k_true, m + 2))?;
    eta.softplus().sub(eta.mul(eta.graph().constant(y))?)?.mean().pipe_ok()
}

/// Indicators `[K* > K]` for `K = 2..k_max−1`.
pub fn ordinal_targets(k_true: usize, k_max: usize) -> Vec<f64> {
    (2..k_max).map(|k| if k_true > k { 1.0 } else { 0.0 }).collect()
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl PipeOk for Var<'_> {}

/// What a task contributes to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Both,
    PinOnly,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub pin_loss: f64,
    pub cin_loss: f64,
    pub pin_grads: Vec<Tensor>,
    pub cin_grads: Vec<Tensor>,
}

/// Fingerprint of `PIN(X, K)` for every candidate `K`, from values only.
fn detached_fingerprint(pin: &PinModel, r0: &Tensor) -> Result<Fingerprint> {
    let g = Graph::new();
    let p = pin.store.bind(&g, false);
    let r0 = g.constant(r0.clone());
    let parts = (2..=pin.hyper.k_max)
        .map(|k| Ok(pin.partition(&p, r0, k)?.value()))
        .collect::<Result<Vec<_>>>()?;
    Fingerprint::from_partitions(&parts)
}

fn cin_loss_var<'g>(cin: &CinModel, p: &crate::nn::Bound<'g>, fp: Var<'g>, k_true: usize, kind: CinLossKind) -> Result<Var<'g>> {
    match kind {
        CinLossKind::Ce => cin_ce_loss(cin.logits(p, fp)?, k_true),
        CinLossKind::Ordinal => cin_ordinal_loss(cin.ordinal_logits(p, fp)?, k_true),
    }
}

/// Losses and parameter gradients for one labelled task.
pub fn task_gradients(
    pin: &PinModel,
    cin: &CinModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TaskOutcome> {
    let z = ds
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("training task has no labels".into()))?;
    check_k_true(ds.k_true, pin.hyper.k_max)?;
    let g = Graph::new();
    let pp = pin.store.bind(&g, true);
    let cp = cin.store.bind(&g, true);
    let r0 = pin.encode(&pp, &ds.x, &ds.col_kind)?;
    let part = pin.partition(&pp, r0, ds.k_true)?;
    let l_pin = pin_loss(part, z, cfg.pin_loss)?;
    let (total, l_cin) = match objective {
        Objective::PinOnly => (l_pin, None),
        Objective::Both => {
            let fp = match cfg.coupling {
                Coupling::Decoupled => g.constant(detached_fingerprint(pin, &r0.value())?.to_tensor()),
                Coupling::Additive => {
                    let probs: Vec<Var> = (2..=pin.hyper.k_max)
                        .map(|k| Ok(pin.partition(&pp, r0, k)?.probs))
                        .collect::<Result<_>>()?;
                    fingerprint_concat(&probs)?
                }
            };
            let l_cin = cin_loss_var(cin, &cp, fp, ds.k_true, cfg.cin_loss)?;
            (l_pin.add(l_cin)?, Some(l_cin))
        }
    };
    let (pin_loss, cin_loss) = (l_pin.item(), l_cin.map_or(0.0, |v| v.item()));
    if !pin_loss.is_finite() || !cin_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (pin {pin_loss}, cin {cin_loss}) on a task with n={}, d={}, k={}",
            ds.n(),
            ds.d(),
            ds.k_true
        )));
    }
    if total.requires_grad() {
        g.backward(total)?;
    }
    Ok(TaskOutcome {
        pin_loss,
        cin_loss,
        pin_grads: pp.grads(),
        cin_grads: cp.grads(),
    })
}

#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub pin_loss: f64,
    pub cin_loss: f64,
    pub pin: Vec<Tensor>,
    pub cin: Vec<Tensor>,
}

fn mean_in_order(parts: impl Iterator<Item = Vec<Tensor>>, count: usize) -> Vec<Tensor> {
    let mut acc: Option<Vec<Tensor>> = None;
    for grads in parts {
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign(y)),
        }
    }
    let scale = 1.0 / count as f64;
    acc.unwrap_or_default().into_iter().map(|t| t.map(|v| v * scale)).collect()
}

/// Per-task gradients computed in parallel and averaged in task order.
pub fn batch_gradients(
    pin: &PinModel,
    cin: &CinModel,
    batch: &[Dataset],
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let outcomes: Vec<TaskOutcome> = batch
        .par_iter()
        .map(|ds| task_gradients(pin, cin, ds, cfg, objective))
        .collect::<Result<_>>()?;
    let b = outcomes.len();
    let pin_loss = outcomes.iter().map(|o| o.pin_loss).sum::<f64>() / b as f64;
    let cin_loss = outcomes.iter().map(|o| o.cin_loss).sum::<f64>() / b as f64;
    let (pg, cg): (Vec<_>, Vec<_>) = outcomes.into_iter().map(|o| (o.pin_grads, o.cin_grads)).unzip();
    let pin_grads = mean_in_order(pg.into_iter(), b);
    let cin_grads = mean_in_order(cg.into_iter(), b);
    for (name, grads) in [("pin", &pin_grads), ("cin", &cin_grads)] {
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(Error::Numerical(format!("non-finite {name} gradient")));
        }
    }
    Ok(BatchGradients {
        pin_loss,
        cin_loss,
        pin: pin_grads,
        cin: cin_grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub pin_loss: f64,
    pub cin_loss: f64,
    pub grad_norm_pin: f64,
    pub grad_norm_cin: f64,
    pub wall_ms: f64,
}

/// Networks, optimizers and configuration of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub pin: PinModel,
    pub cin: CinModel,
    pub pin_opt: AdamW,
    pub cin_opt: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pin = PinModel::new(cfg.pin.clone(), mix_seed(cfg.seed, u64::MAX))?;
        let cin = CinModel::new(cfg.cin_hyper(), mix_seed(cfg.seed, u64::MAX - 1))?;
        let pin_opt = AdamW::new(&pin.store, cfg.weight_decay);
        let cin_opt = AdamW::new(&cin.store, cfg.weight_decay);
        Ok(TrainState {
            cfg,
            pin,
            cin,
            pin_opt,
            cin_opt,
            step: 0,
        })
    }

    /// Seed of task `b` in step `step`.
    pub fn task_seed(&self, step: usize, b: usize) -> u64 {
        mix_seed(mix_seed(self.cfg.seed, step as u64), b as u64)
    }

    /// Fresh tasks for `step`, generated in parallel.
    pub fn sample_batch(&self, step: usize) -> Result<Vec<Dataset>> {
        (0..self.cfg.batch_tasks)
            .into_par_iter()
            .map(|b| sample_task(&self.cfg.prior, self.task_seed(step, b)))
            .collect()
    }

    /// One optimizer update on `batch` with the learning rate of the current step.
    pub fn train_step(&mut self, batch: &[Dataset]) -> Result<StepMetrics> {
        let start = Instant::now();
        let mut grads = batch_gradients(&self.pin, &self.cin, batch, &self.cfg, Objective::Both)?;
        let grad_norm_pin = clip_global_norm(&mut grads.pin, self.cfg.grad_clip);
        let grad_norm_cin = clip_global_norm(&mut grads.cin, self.cfg.grad_clip);
        let lr = lr_at(self.step, &self.cfg);
        self.pin_opt.update(&mut self.pin.store, &grads.pin, lr)?;
        self.cin_opt.update(&mut self.cin.store, &grads.cin, lr)?;
        let metrics = StepMetrics {
            step: self.step,
            lr,
            pin_loss: grads.pin_loss,
            cin_loss: grads.cin_loss,
            grad_norm_pin,
            grad_norm_cin,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(metrics)
    }
}

pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<StepMetrics>,
}

/// Runs `cfg.steps` updates on fresh tasks; `on_step` sees every metrics row.
pub fn train_run(cfg: TrainConfig, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutput> {
    let mut state = TrainState::new(cfg)?;
    let mut log = Vec::with_capacity(state.cfg.steps);
    while state.step < state.cfg.steps {
        let start = Instant::now();
        let batch = state.sample_batch(state.step)?;
        let step = state.step;
        let mut m = state
            .train_step(&batch)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        m.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        on_step(&m);
        log.push(m);
    }
    Ok(TrainOutput { state, log })
}

pub fn write_train_log(path: &Path, log: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::one_hot;
    use crate::pin::DecoderKind;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 20,
            batch_tasks: 3,
            warmup_steps: 5,
            prior: PriorConfig {
                n_min: 20,
                n_max: 40,
                d_min: 2,
                d_max: 3,
                k_max: 4,
                overlap_mc_samples: 1000,
                ..PriorConfig::desk()
            },
            pin: PinHyper {
                d: 16,
                d_tok: 8,
                l_enc: 1,
                l_dec: 1,
                heads: 2,
                k_max: 4,
                ..PinHyper::desk()
            },
            cin_hidden: 32,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(2000, &cfg), 1e-4);
        assert!(lr_at(10_000, &cfg) <= 1e-6 * 1e-4);
        let left = lr_at(1999, &cfg) + 1e-4 / 2000.0;
        assert!((left - lr_at(2000, &cfg)).abs() < 1e-12);
        let mut prev = f64::MAX;
        for s in 2000..=10_000 {
            let v = lr_at(s, &cfg);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn zero_gradient_update_is_pure_decay() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.5, 0.3]).unwrap());
        let before = store.values()[0].clone();
        let mut opt = AdamW::new(&store, 0.01);
        opt.update(&mut store, &[Tensor::zeros(&[3])], 1e-3).unwrap();
        let want: Vec<f64> = before.data().iter().map(|p| p * (1.0 - 1e-3 * 0.01)).collect();
        assert_eq!(store.values()[0].data(), want.as_slice());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.0);
        opt.update(&mut store, &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()], 0.1).unwrap();
        let w = store.values()[0].data();
        assert!((w[0] + 0.1).abs() < 1e-8 && (w[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn loss_examples() {
        let g = Graph::new();
        let z = [0, 1, 1, 0, 2];
        let logits = one_hot(&z, 3).unwrap().map(|v| 60.0 * v);
        let part = SoftPartitionVar::from_logits(g.param(logits));
        assert!((pin_loss(part, &z, PinLossKind::Softari).unwrap().item() + 1.0).abs() < 1e-10);
        assert!(pin_loss(part, &z, PinLossKind::MatchCe).unwrap().item() < 1e-10);
        let uniform = g.param(Tensor::zeros(&[1, 9]));
        assert!((cin_ce_loss(uniform, 4).unwrap().item() - 9f64.ln()).abs() < 1e-12);
        assert!(cin_ce_loss(uniform, 11).is_err());
        let sure = g.param(Tensor::new(vec![1, 3], vec![-100.0, 100.0, -100.0]).unwrap());
        assert!(cin_ce_loss(sure, 3).unwrap().item() < 1e-12);
        assert_eq!(ordinal_targets(2, 10), vec![0.0; 8]);
        assert_eq!(ordinal_targets(4, 6), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn ordinal_loss_matches_bce() {
        let g = Graph::new();
        let eta = [0.3, -1.2, 2.0];
        let v = cin_ordinal_loss(g.param(Tensor::new(vec![1, 3], eta.to_vec()).unwrap()), 3).unwrap().item();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let y = [1.0, 0.0, 0.0];
        let want = eta
            .iter()
            .zip(y)
            .map(|(&e, y)| -(y * sig(e).ln() + (1.0 - y) * (1.0 - sig(e)).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn every_pin_loss_has_finite_gradients() {
        let cfg = tiny_cfg();
        let state = TrainState::new(cfg.clone()).unwrap();
        let batch = state.sample_batch(0).unwrap();
        for kind in [PinLossKind::Softari, PinLossKind::Softnmi, PinLossKind::MatchCe, PinLossKind::MatchSoftacc] {
            let c = TrainConfig { pin_loss: kind, ..cfg.clone() };
            let g = batch_gradients(&state.pin, &state.cin, &batch, &c, Objective::Both).unwrap();
            assert!(g.pin_loss.is_finite() && global_norm(&g.pin) > 0.0, "{kind:?}");
        }
    }

    #[test]
    fn decoupled_pin_gradients_equal_pin_only() {
        let cfg = tiny_cfg();
        let state = TrainState::new(cfg.clone()).unwrap();
        let batch = state.sample_batch(0).unwrap();
        let both = batch_gradients(&state.pin, &state.cin, &batch, &cfg, Objective::Both).unwrap();
        let only = batch_gradients(&state.pin, &state.cin, &batch, &cfg, Objective::PinOnly).unwrap();
        assert_eq!(both.pin, only.pin);
        assert!(global_norm(&both.cin) > 0.0);
        let additive = TrainConfig { coupling: Coupling::Additive, ..cfg };
        let add = batch_gradients(&state.pin, &state.cin, &batch, &additive, Objective::Both).unwrap();
        assert_ne!(add.pin, only.pin);
    }

    #[test]
    fn batch_order_does_not_change_losses() {
        let cfg = tiny_cfg();
        let state = TrainState::new(cfg.clone()).unwrap();
        let mut batch = state.sample_batch(1).unwrap();
        let a = batch_gradients(&state.pin, &state.cin, &batch, &cfg, Objective::Both).unwrap();
        batch.reverse();
        let b = batch_gradients(&state.pin, &state.cin, &batch, &cfg, Objective::Both).unwrap();
        assert!((a.pin_loss - b.pin_loss).abs() < 1e-10 && (a.cin_loss - b.cin_loss).abs() < 1e-10);
    }

    #[test]
    fn short_run_is_deterministic_and_logs_every_step() {
        let cfg = TrainConfig { steps: 4, warmup_steps: 1, ..tiny_cfg() };
        let a = train_run(cfg.clone(), |_| {}).unwrap();
        let b = train_run(cfg, |_| {}).unwrap();
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.log.last().unwrap().pin_loss, b.log.last().unwrap().pin_loss);
        assert_eq!(a.state.pin.store, b.state.pin.store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.csv");
        write_train_log(&path, &a.log).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("step,lr,pin_loss,cin_loss,grad_norm_pin,grad_norm_cin,wall_ms\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn ablation_variants_train_briefly() {
        for (decoder, cin_loss) in [
            (DecoderKind::Naive, CinLossKind::Ce),
            (DecoderKind::NonIterative, CinLossKind::Ordinal),
        ] {
            let mut cfg = TrainConfig { steps: 3, warmup_steps: 1, cin_loss, ..tiny_cfg() };
            cfg.pin.decoder = decoder;
            let out = train_run(cfg, |_| {}).unwrap();
            assert!(out.log.iter().all(|m| m.pin_loss.is_finite() && m.cin_loss.is_finite()));
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny_cfg();
        cfg.warmup_steps = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.prior.k_max = 6;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::preset("huge").is_err());
    }
}
