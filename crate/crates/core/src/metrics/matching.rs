use super::confusion::{soft_confusion, soft_confusion_value};
use super::hungarian::hungarian;
use super::SoftPartitionVar;
use crate::autodiff::{concat, Tensor, Var};
use crate::error::{Error, Result};

/// Shift inside `log(M + ε)` before Sinkhorn scaling.
pub const SINKHORN_EPS: f64 = 1e-8;
pub const SINKHORN_TEMPERATURE: f64 = 0.05;
pub const SINKHORN_ITERS: usize = 50;
/// Early-stop threshold on the L∞ change of the transport plan.
const SINKHORN_TOL: f64 = 1e-6;

/// Pads a `r × c` matrix with zero rows/columns to a square.
fn pad_square(m: Var<'_>) -> Result<Var<'_>> {
    let shape = m.shape();
    let (r, c) = (shape[0], shape[1]);
    let g = m.graph();
    let mut out = m;
    if c < r {
        out = concat(&[out, g.constant(Tensor::zeros(&[r, r - c]))], 1)?;
    }
    if r < c {
        out = concat(&[out, g.constant(Tensor::zeros(&[c - r, c]))], 0)?;
    }
    Ok(out)
}

fn pad_square_value(m: &Tensor) -> Tensor {
    let s = m.rows().max(m.cols());
    let mut out = Tensor::zeros(&[s, s]);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.data_mut()[i * s + j] = m.at(i, j);
        }
    }
    out
}

/// Hungarian matching on the (stop-gradient) soft confusion, then cross-entropy
/// of the logits against the remapped labels.
///
/// Points whose true cluster is matched to a padding row (more true clusters
/// than predicted ones) are left out of the mean.
pub fn matching_ce_loss<'g>(p: SoftPartitionVar<'g>, z: &[usize]) -> Result<Var<'g>> {
    let k_pred = p.probs.shape()[1];
    let k_true = z.iter().max().map_or(1, |&m| m + 1);
    let conf = soft_confusion_value(&p.probs.value(), z, k_true)?;
    let matched = hungarian(&pad_square_value(&conf.m));
    let mut pred_for_true = vec![usize::MAX; matched.permutation.len()];
    for (k, &j) in matched.permutation.iter().enumerate() {
        pred_for_true[j] = k;
    }
    let n = z.len();
    let mut target = Tensor::zeros(&[n, k_pred]);
    let mut used = 0usize;
    for (i, &l) in z.iter().enumerate() {
        let k = pred_for_true[l];
        if k < k_pred {
            target.data_mut()[i * k_pred + k] = 1.0;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("matching_ce_loss: no matched points".into()));
    }
    let g = p.logits.graph();
    let ll = p.logits.log_softmax().mul(g.constant(target))?.sum();
    Ok(ll.scale(-1.0 / used as f64))
}

/// Log-domain Sinkhorn normalization of `exp(log(m + ε) / temperature)`.
///
/// Alternates row and column normalization, stopping early once the plan moves
/// by less than 1e-6 in L∞. The last step normalizes columns.
pub fn sinkhorn<'g>(m: Var<'g>, temperature: f64, iters: usize) -> Result<Var<'g>> {
    if temperature <= 0.0 || iters == 0 {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn needs temperature > 0 and iters >= 1 (got {temperature}, {iters})"
        )));
    }
    let mv = m.value();
    if mv.ndim() != 2 || mv.rows() != mv.cols() {
        return Err(Error::Shape(format!("sinkhorn expects a square matrix, got {:?}", mv.shape())));
    }
    if mv.data().iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("sinkhorn on an all-zero matrix".into()));
    }
    let mut log_plan = m.add_scalar(SINKHORN_EPS).log().scale(1.0 / temperature);
    let mut prev: Option<Tensor> = None;
    for _ in 0..iters {
        log_plan = log_plan.sub(log_plan.logsumexp())?;
        let t = log_plan.transpose()?;
        log_plan = t.sub(t.logsumexp())?.transpose()?;
        let plan = log_plan.value().map(f64::exp);
        if let Some(p) = &prev {
            if p.max_abs_diff(&plan) < SINKHORN_TOL {
                break;
            }
        }
        prev = Some(plan);
    }
    Ok(log_plan.exp())
}

/// `1 - <Π, M>_F / N` with `Π = sinkhorn(M)`; gradients flow through both factors.
pub fn matching_softacc_loss<'g>(probs: Var<'g>, z: &[usize], temperature: f64) -> Result<Var<'g>> {
    let n = z.len();
    let k_true = z.iter().max().map_or(1, |&m| m + 1);
    let m = pad_square(soft_confusion(probs, z, k_true)?)?;
    let plan = sinkhorn(m, temperature, SINKHORN_ITERS)?;
    let agreement = plan.mul(m)?.sum().scale(1.0 / n as f64);
    Ok(agreement.scale(-1.0).add_scalar(1.0))
}
