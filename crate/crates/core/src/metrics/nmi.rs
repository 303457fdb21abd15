use super::ari::contingency;
use super::confusion::soft_confusion;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Normalized mutual information with arithmetic-mean normalization, `2I / (H_a + H_b)`.
///
/// Returns 0 when both partitions have zero entropy.
pub fn hard_nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "hard_nmi: label vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("hard_nmi on empty labels".into()));
    }
    let n = a.len() as f64;
    let (table, ka, kb) = contingency(a, b);
    let pa: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let pij = table[i][j] / n;
            if pij > 0.0 {
                mi += pij * (pij / (pa[i] * pb[j])).ln();
            }
        }
    }
    let h = entropy(pa.into_iter()) + entropy(pb.into_iter());
    if h <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * mi / h).clamp(0.0, 1.0))
}

/// Differentiable NMI between soft assignments and hard labels, with ε-floored logs.
pub fn soft_nmi<'g>(probs: Var<'g>, z: &[usize]) -> Result<Var<'g>> {
    let n = probs.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument("soft_nmi needs at least 2 points".into()));
    }
    let k_true = z.iter().max().map_or(1, |&m| m + 1);
    let joint = soft_confusion(probs, z, k_true)?.scale(1.0 / n as f64);
    let pk = joint.sum_axis(1)?;
    let pj = joint.sum_axis(0)?;
    let log_ratio = joint.log().sub(pk.log())?.sub(pj.log())?;
    let mi = joint.mul(log_ratio)?.sum();
    let hk = pk.mul(pk.log())?.sum().scale(-1.0);
    let hj = pj.mul(pj.log())?.sum().scale(-1.0);
    let h = hk.add(hj)?;
    if h.item() <= 1e-12 {
        return Ok(probs.graph().constant(Tensor::scalar(0.0)));
    }
    mi.scale(2.0).div(h)
}

pub fn soft_nmi_value(probs: &Tensor, z: &[usize]) -> Result<f64> {
    let g = Graph::new();
    Ok(soft_nmi(g.constant(probs.clone()), z)?.item())
}
