use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Soft contingency table between predicted clusters (rows) and true labels (columns).
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    /// K_pred × K_true, `m[k][l] = Σ_i P_ik Z_il`.
    pub m: Tensor,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub total: f64,
}

impl ConfusionMatrix {
    pub fn from_matrix(m: Tensor) -> Self {
        let (r, c) = (m.rows(), m.cols());
        let row_sums: Vec<f64> = (0..r).map(|k| m.row(k).iter().sum()).collect();
        let col_sums: Vec<f64> = (0..c).map(|l| (0..r).map(|k| m.at(k, l)).sum()).collect();
        let total = row_sums.iter().sum();
        ConfusionMatrix {
            m,
            row_sums,
            col_sums,
            total,
        }
    }
}

pub(crate) fn check_labels(z: &[usize], k_true: usize) -> Result<()> {
    if let Some(&bad) = z.iter().find(|&&l| l >= k_true) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k_true} clusters"
        )));
    }
    Ok(())
}

/// N×K one-hot encoding of `z`.
pub fn one_hot(z: &[usize], k: usize) -> Result<Tensor> {
    check_labels(z, k)?;
    let mut t = Tensor::zeros(&[z.len(), k]);
    for (i, &l) in z.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    Ok(t)
}

/// Differentiable `M = Pᵀ Z`.
pub fn soft_confusion<'g>(probs: Var<'g>, z: &[usize], k_true: usize) -> Result<Var<'g>> {
    let n = probs.shape()[0];
    if z.len() != n {
        return Err(Error::Shape(format!(
            "soft_confusion: {} labels for {n} rows",
            z.len()
        )));
    }
    let zt = probs.graph().constant(one_hot(z, k_true)?);
    probs.transpose()?.matmul(zt)
}

pub fn soft_confusion_value(probs: &Tensor, z: &[usize], k_true: usize) -> Result<ConfusionMatrix> {
    let g = Graph::new();
    let m = soft_confusion(g.constant(probs.clone()), z, k_true)?;
    Ok(ConfusionMatrix::from_matrix((*m.value()).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_agreement_is_diagonal() {
        let z = [0, 0, 1, 1, 2, 2];
        let p = one_hot(&z, 3).unwrap();
        let c = soft_confusion_value(&p, &z, 3).unwrap();
        assert_eq!(c.m.data(), &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]);
        assert_eq!(c.total, 6.0);
    }

    #[test]
    fn uniform_mass() {
        let z = [0, 1, 1, 2, 2, 2];
        let p = Tensor::full(&[6, 3], 1.0 / 3.0);
        let c = soft_confusion_value(&p, &z, 3).unwrap();
        for k in 0..3 {
            for (l, count) in [1.0, 2.0, 3.0].iter().enumerate() {
                assert!((c.m.at(k, l) - count / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, k, kt) = (20, 4, 3);
        let mut p = Tensor::zeros(&[n, k]);
        for i in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum();
            for j in 0..k {
                p.data_mut()[i * k + j] = row[j] / s;
            }
        }
        let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        let c = soft_confusion_value(&p, &z, kt).unwrap();
        for a in 0..k {
            for b in 0..kt {
                let mut want = 0.0;
                for i in 0..n {
                    if z[i] == b {
                        want += p.at(i, a);
                    }
                }
                assert!((c.m.at(a, b) - want).abs() < 1e-12);
            }
        }
        assert!((c.total - n as f64).abs() < 1e-8);
        let rs: f64 = c.row_sums.iter().sum();
        let cs: f64 = c.col_sums.iter().sum();
        assert!((rs - cs).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::full(&[2, 2], 0.5);
        assert!(soft_confusion_value(&p, &[0, 2], 2).is_err());
    }
}
