//! A trained partition network paired with its cardinality head.

use crate::autodiff::Graph;
use crate::cin::{argmax_k, ordinal_count, CinHead, CinModel, Fingerprint};
use crate::error::{Error, Result};
use crate::metrics::SoftPartition;
use crate::pin::PinModel;
use crate::prior::Dataset;

#[derive(Clone, Debug)]
pub struct Amoclust {
    pub pin: PinModel,
    pub cin: CinModel,
}

/// Output of clustering one dataset.
#[derive(Clone, Debug)]
pub struct Clustering {
    pub k: usize,
    /// Distribution over `K = 2..=k_max`, present when `K` was inferred.
    pub posterior: Option<Vec<f64>>,
    pub partition: SoftPartition,
    pub labels: Vec<usize>,
}

impl Clustering {
    fn new(k: usize, posterior: Option<Vec<f64>>, partition: SoftPartition) -> Self {
        let labels = partition.hard_labels();
        Clustering {
            k,
            posterior,
            partition,
            labels,
        }
    }
}

/// Class probabilities implied by ordinal exceedance logits, clamped to be non-negative.
pub fn ordinal_posterior(eta: &[f64]) -> Vec<f64> {
    let exceed: Vec<f64> = eta.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let mut p = Vec::with_capacity(eta.len() + 1);
    let mut prev = 1.0;
    for &e in &exceed {
        p.push((prev - e).max(0.0));
        prev = e;
    }
    p.push(prev);
    let total: f64 = p.iter().sum();
    p.iter().map(|v| v / total).collect()
}

impl Amoclust {
    pub fn new(pin: PinModel, cin: CinModel) -> Result<Self> {
        if pin.hyper.k_max != cin.hyper.k_max {
            return Err(Error::Config(format!(
                "pin k_max {} differs from cin k_max {}",
                pin.hyper.k_max, cin.hyper.k_max
            )));
        }
        Ok(Amoclust { pin, cin })
    }

    pub fn k_max(&self) -> usize {
        self.pin.hyper.k_max
    }

    /// Estimated `K` and the posterior over `2..=k_max` from precomputed partitions.
    pub fn infer_k(&self, parts: &[SoftPartition]) -> Result<(usize, Vec<f64>)> {
        let fp = Fingerprint::from_partitions(parts)?;
        match self.cin.hyper.head {
            CinHead::Softmax => {
                let post = self.cin.posterior(&fp)?;
                Ok((argmax_k(&post), post))
            }
            CinHead::Ordinal => {
                let g = Graph::new();
                let p = self.cin.store.bind(&g, false);
                let eta = self.cin.ordinal_logits(&p, g.constant(fp.to_tensor()))?.value();
                Ok((ordinal_count(eta.data()), ordinal_posterior(eta.data())))
            }
        }
    }

    /// Clusters `ds` with a given `K`, or infers `K` first when `k` is `None`.
    pub fn cluster(&self, ds: &Dataset, k: Option<usize>) -> Result<Clustering> {
        match k {
            Some(k) => Ok(Clustering::new(k, None, self.pin.predict(ds, k)?)),
            None => {
                let mut parts = self.pin.predict_all_k(ds)?;
                let (k, post) = self.infer_k(&parts)?;
                Ok(Clustering::new(k, Some(post), parts.swap_remove(k - 2)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cin::CinHyper;
    use crate::pin::PinHyper;
    use crate::prior::{sample_task, PriorConfig};

    fn tiny(head: CinHead) -> Amoclust {
        let pin = PinModel::new(PinHyper { d: 16, d_tok: 8, l_enc: 1, l_dec: 1, heads: 2, k_max: 5, ..PinHyper::desk() }, 1).unwrap();
        let cin = CinModel::new(CinHyper { k_max: 5, hidden: 16, head }, 2).unwrap();
        Amoclust::new(pin, cin).unwrap()
    }

    #[test]
    fn inferred_path_matches_fixed_k() {
        let prior = PriorConfig { n_min: 30, n_max: 40, k_max: 5, ..PriorConfig::desk() };
        let ds = sample_task(&prior, 3).unwrap();
        for head in [CinHead::Softmax, CinHead::Ordinal] {
            let m = tiny(head);
            let auto = m.cluster(&ds, None).unwrap();
            let post = auto.posterior.as_ref().unwrap();
            assert_eq!(post.len(), 4);
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let fixed = m.cluster(&ds, Some(auto.k)).unwrap();
            assert_eq!(fixed.partition.probs, auto.partition.probs);
            assert_eq!(auto.labels.len(), ds.n());
        }
    }

    #[test]
    fn ordinal_posterior_examples() {
        let p = ordinal_posterior(&[50.0, 50.0, -50.0]);
        assert_eq!(p.iter().cloned().fold(0.0, f64::max), p[2]);
        assert!(p[2] > 0.999);
        let flat = ordinal_posterior(&[0.0]);
        assert_eq!(flat, vec![0.5, 0.5]);
    }

    #[test]
    fn mismatched_heads_rejected() {
        let pin = PinModel::new(PinHyper { k_max: 4, ..PinHyper::desk() }, 1).unwrap();
        let cin = CinModel::new(CinHyper::new(5), 2).unwrap();
        assert!(Amoclust::new(pin, cin).is_err());
    }
}
