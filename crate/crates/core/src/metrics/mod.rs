//! Partition agreement metrics, their differentiable relaxations and the
//! matching-based losses used in ablations.

mod ari;
mod confusion;
mod hungarian;
mod matching;
mod nmi;
mod summary;

pub use ari::{hard_ari, soft_ari, soft_ari_value};
pub use confusion::{one_hot, soft_confusion, soft_confusion_value, ConfusionMatrix};
pub use hungarian::{brute_force_assignment, hungarian, MatchResult};
pub use matching::{
    matching_ce_loss, matching_softacc_loss, sinkhorn, SINKHORN_EPS, SINKHORN_ITERS, SINKHORN_TEMPERATURE,
};
pub use nmi::{hard_nmi, soft_nmi, soft_nmi_value};
pub use summary::{k_mae, k_median_ae, median_rank, quantile, RankSummary};

use crate::autodiff::{Tensor, Var};

/// Soft assignment of N rows to K clusters.
#[derive(Clone, Debug)]
pub struct SoftPartition {
    /// N×K logits.
    pub logits: Tensor,
    /// N×K row-stochastic probabilities, `softmax(logits)` row-wise.
    pub probs: Tensor,
}

impl SoftPartition {
    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    pub fn k(&self) -> usize {
        self.probs.cols()
    }

    /// Hard labels by row-wise argmax.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }

    /// Largest probability of each row.
    pub fn confidence(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.probs.row(i).iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Graph-resident soft partition.
#[derive(Clone, Copy, Debug)]
pub struct SoftPartitionVar<'g> {
    pub logits: Var<'g>,
    pub probs: Var<'g>,
}

impl<'g> SoftPartitionVar<'g> {
    pub fn from_logits(logits: Var<'g>) -> Self {
        SoftPartitionVar {
            logits,
            probs: logits.softmax(),
        }
    }

    pub fn value(&self) -> SoftPartition {
        SoftPartition {
            logits: (*self.logits.value()).clone(),
            probs: (*self.probs.value()).clone(),
        }
    }
}
