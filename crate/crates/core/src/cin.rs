//! Cardinality inference: predicts the number of clusters from the soft partitions
//! the partition network produces for every candidate `K`.
//!
//! Each partition is summarized by its normalized Gram matrix `G = PᵀP / N`, whose
//! sorted diagonal and sorted strict upper triangle are invariant to row and column
//! permutations of `P`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::SoftPartition;
use crate::nn::{Bound, Init, Mlp, ParamId, ParamStore};
use crate::pin::PinModel;
use crate::prior::Dataset;

/// Length of `g^(K)`: `K` diagonal entries plus `K(K−1)/2` off-diagonal ones.
pub fn fingerprint_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Length of the concatenated fingerprint over `K = 2..=k_max`.
pub fn fingerprint_width(k_max: usize) -> usize {
    (2..=k_max).map(fingerprint_len).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub per_k: Vec<Vec<f64>>,
    pub concat: Vec<f64>,
}

impl Fingerprint {
    pub fn from_partitions(parts: &[SoftPartition]) -> Result<Self> {
        let per_k: Vec<Vec<f64>> = parts.iter().map(|p| gram_fingerprint(&p.probs)).collect::<Result<_>>()?;
        let concat = per_k.iter().flatten().copied().collect();
        Ok(Fingerprint { per_k, concat })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.concat.len()], self.concat.clone()).expect("row vector")
    }
}

/// `PᵀP / N` with each entry's products summed in sorted order, so the result is
/// bitwise independent of the row order of `P`.
fn gram(probs: &Tensor) -> Result<Tensor> {
    if probs.ndim() != 2 || probs.rows() == 0 {
        return Err(Error::Shape(format!("fingerprint needs an N×K matrix, got {:?}", probs.shape())));
    }
    let (n, k) = (probs.rows(), probs.cols());
    let mut out = Tensor::zeros(&[k, k]);
    let mut prods = vec![0.0; n];
    for a in 0..k {
        for b in a..k {
            for (i, v) in prods.iter_mut().enumerate() {
                *v = probs.at(i, a) * probs.at(i, b);
            }
            prods.sort_by(f64::total_cmp);
            let s = prods.iter().sum::<f64>() / n as f64;
            out.data_mut()[a * k + b] = s;
            out.data_mut()[b * k + a] = s;
        }
    }
    Ok(out)
}

/// Flat indices into a `K×K` Gram matrix, in fingerprint order: diagonal entries
/// sorted descending, then strict-upper entries sorted descending (stable on ties).
pub fn fingerprint_order(g: &Tensor) -> Vec<usize> {
    let k = g.rows();
    let by_value_desc = |idx: &mut Vec<usize>| idx.sort_by(|&a, &b| g.data()[b].total_cmp(&g.data()[a]));
    let mut diag: Vec<usize> = (0..k).map(|i| i * k + i).collect();
    by_value_desc(&mut diag);
    let mut upper: Vec<usize> = (0..k).flat_map(|i| (i + 1..k).map(move |j| i * k + j)).collect();
    by_value_desc(&mut upper);
    diag.extend(upper);
    diag
}

/// Sorted Gram fingerprint `g^(K)` of an `N×K` assignment matrix.
pub fn gram_fingerprint(probs: &Tensor) -> Result<Vec<f64>> {
    let g = gram(probs)?;
    Ok(fingerprint_order(&g).into_iter().map(|i| g.data()[i]).collect())
}

/// Differentiable fingerprint: the sort order is computed on values and applied as a
/// 0/1 selection matrix, so gradients flow to `probs` through the gathered entries.
pub fn fingerprint_var<'g>(probs: Var<'g>) -> Result<Var<'g>> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("fingerprint needs an N×K matrix, got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    let gm = probs.transpose()?.matmul(probs)?.scale(1.0 / n as f64);
    let order = fingerprint_order(&gm.value());
    let mut sel = Tensor::zeros(&[k * k, order.len()]);
    for (col, &src) in order.iter().enumerate() {
        sel.data_mut()[src * order.len() + col] = 1.0;
    }
    gm.reshape(&[1, k * k])?.matmul(probs.graph().constant(sel))
}

/// Concatenated differentiable fingerprint over a sweep of partitions, shape `[1, W]`.
pub fn fingerprint_concat<'g>(probs: &[Var<'g>]) -> Result<Var<'g>> {
    let parts: Vec<Var<'g>> = probs.iter().map(|&p| fingerprint_var(p)).collect::<Result<_>>()?;
    concat(&parts, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CinHead {
    /// Softmax posterior over `K = 2..=k_max`.
    Softmax,
    /// Scalar score against monotone thresholds.
    Ordinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CinHyper {
    pub k_max: usize,
    pub hidden: usize,
    pub head: CinHead,
}

impl CinHyper {
    pub fn new(k_max: usize) -> Self {
        CinHyper {
            k_max,
            hidden: 256,
            head: CinHead::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max < 2 || self.hidden == 0 {
            return Err(Error::Config(format!("cin needs k_max ≥ 2 and hidden > 0, got {self:?}")));
        }
        if self.head == CinHead::Ordinal && self.k_max < 3 {
            return Err(Error::Config("the ordinal head needs k_max ≥ 3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct OrdinalHead {
    score: Mlp,
    deltas: ParamId,
    log_scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct CinModel {
    pub hyper: CinHyper,
    pub store: ParamStore,
    mlp: Option<Mlp>,
    ordinal: Option<OrdinalHead>,
}

impl CinModel {
    pub fn new(hyper: CinHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = fingerprint_width(hyper.k_max);
        let h = hyper.hidden;
        let (mlp, ordinal) = match hyper.head {
            CinHead::Softmax => (
                Some(Mlp::new(&mut store, "cin.mlp", &[w, h, h, hyper.k_max - 1], Init::FanIn, &mut rng)),
                None,
            ),
            CinHead::Ordinal => {
                let score = Mlp::new(&mut store, "cin.score", &[w, h, h, 1], Init::FanIn, &mut rng);
                // softplus(δ) = 1, so the initial thresholds are 1, 2, 3, ...
                let delta0 = (std::f64::consts::E - 1.0).ln();
                let deltas = store.add("cin.deltas", Tensor::full(&[1, hyper.k_max - 2], delta0));
                let log_scale = store.add("cin.log_scale", Tensor::scalar(0.0));
                (
                    None,
                    Some(OrdinalHead {
                        score,
                        deltas,
                        log_scale,
                    }),
                )
            }
        };
        Ok(CinModel {
            hyper,
            store,
            mlp,
            ordinal,
        })
    }

    pub fn input_width(&self) -> usize {
        fingerprint_width(self.hyper.k_max)
    }

    fn check_width<'g>(&self, fp: Var<'g>) -> Result<()> {
        let w = self.input_width();
        if fp.shape() != [1, w] {
            return Err(Error::Shape(format!("cin expects a [1, {w}] fingerprint, got {:?}", fp.shape())));
        }
        Ok(())
    }

    /// Logits over `K = 2..=k_max`, shape `[1, k_max − 1]` (softmax head only).
    pub fn logits<'g>(&self, p: &Bound<'g>, fp: Var<'g>) -> Result<Var<'g>> {
        self.check_width(fp)?;
        let mlp = self
            .mlp
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this cin model has an ordinal head".into()))?;
        mlp.forward(p, fp)
    }

    /// Ordinal logits `η_K = s·(score − b_K)` for `K = 2..k_max−1`, shape `[1, k_max − 2]`.
    pub fn ordinal_logits<'g>(&self, p: &Bound<'g>, fp: Var<'g>) -> Result<Var<'g>> {
        self.check_width(fp)?;
        let head = self
            .ordinal
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this cin model has no ordinal head".into()))?;
        let score = head.score.forward(p, fp)?;
        let thresholds = self.threshold_var(p, head)?;
        let scale = p.var(head.log_scale).exp();
        score.sub(thresholds)?.mul(scale)
    }

    fn threshold_var<'g>(&self, p: &Bound<'g>, head: &OrdinalHead) -> Result<Var<'g>> {
        let m = self.hyper.k_max - 2;
        let mut upper = Tensor::zeros(&[m, m]);
        for j in 0..m {
            for i in j..m {
                upper.data_mut()[j * m + i] = 1.0;
            }
        }
        let sp = p.var(head.deltas).softplus();
        sp.matmul(sp.graph().constant(upper))
    }

    /// Current thresholds `b_2 ≤ … ≤ b_{k_max−1}`.
    pub fn thresholds(&self) -> Option<Vec<f64>> {
        let head = self.ordinal.as_ref()?;
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        Some(self.threshold_var(&p, head).ok()?.value().data().to_vec())
    }

    /// Posterior over `K = 2..=k_max` (softmax head only).
    pub fn posterior(&self, fp: &Fingerprint) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        Ok(self.logits(&p, g.constant(fp.to_tensor()))?.softmax().value().data().to_vec())
    }

    /// Predicted cluster count for a fingerprint with whichever head the model has.
    pub fn predict_k(&self, fp: &Fingerprint) -> Result<usize> {
        match self.hyper.head {
            CinHead::Softmax => Ok(argmax_k(&self.posterior(fp)?)),
            CinHead::Ordinal => {
                let g = Graph::new();
                let p = self.store.bind(&g, false);
                let eta = self.ordinal_logits(&p, g.constant(fp.to_tensor()))?.value();
                Ok(ordinal_count(eta.data()))
            }
        }
    }
}

/// `2 + argmax`, lowest `K` on ties.
pub fn argmax_k(posterior: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in posterior.iter().enumerate() {
        if v > posterior[best] {
            best = i;
        }
    }
    best + 2
}

/// `2 + #{K : η_K ≥ 0}`.
pub fn ordinal_count(eta: &[f64]) -> usize {
    2 + eta.iter().filter(|&&v| v >= 0.0).count()
}

/// Runs the partition network at every candidate `K` and returns the fingerprint.
pub fn dataset_fingerprint(ds: &Dataset, pin: &PinModel) -> Result<Fingerprint> {
    Fingerprint::from_partitions(&pin.predict_all_k(ds)?)
}

/// Estimated number of clusters of `ds`.
pub fn predict_k(ds: &Dataset, pin: &PinModel, cin: &CinModel) -> Result<usize> {
    if pin.hyper.k_max != cin.hyper.k_max {
        return Err(Error::Config(format!(
            "pin k_max {} differs from cin k_max {}",
            pin.hyper.k_max, cin.hyper.k_max
        )));
    }
    cin.predict_k(&dataset_fingerprint(ds, pin)?)
}
