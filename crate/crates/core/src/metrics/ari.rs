use super::confusion::soft_confusion;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominators smaller than this are treated as a degenerate (single-cluster) comparison.
const DEGENERATE_DENOM: f64 = 1e-8;

fn comb2(x: f64) -> f64 {
    0.5 * x * (x - 1.0)
}

fn compact_labels(a: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = a
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Contingency table of two hard labelings after compacting label ids.
pub(crate) fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, usize, usize) {
    let (ca, ka) = compact_labels(a);
    let (cb, kb) = compact_labels(b);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in ca.iter().zip(&cb) {
        table[x][y] += 1.0;
    }
    (table, ka, kb)
}

/// Adjusted Rand index between two hard partitions.
pub fn hard_ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "hard_ari: label vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("hard_ari needs at least 2 points".into()));
    }
    let (table, _, _) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&v| comb2(v)).sum();
    let row: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let ncols = table.first().map_or(0, Vec::len);
    let col: f64 = (0..ncols)
        .map(|j| comb2(table.iter().map(|r| r[j]).sum()))
        .sum();
    Ok(ari_from_parts(index, row, col, comb2(a.len() as f64)))
}

fn ari_from_parts(index: f64, row: f64, col: f64, total: f64) -> f64 {
    let expected = row * col / total;
    let max = 0.5 * (row + col);
    let denom = max - expected;
    if denom.abs() < DEGENERATE_DENOM {
        return if (index - expected).abs() < DEGENERATE_DENOM { 1.0 } else { 0.0 };
    }
    (index - expected) / denom
}

/// Generalized binomial `x(x-1)/2`, elementwise.
fn comb2_var(x: Var<'_>) -> Result<Var<'_>> {
    Ok(x.mul(x)?.sub(x)?.scale(0.5))
}

/// Differentiable ARI between soft assignments and hard labels.
///
/// Counts are soft: `n_kl = Σ_i P_ik Z_il`. A degenerate comparison (both sides
/// effectively a single cluster) yields a constant 0 with no gradient.
pub fn soft_ari<'g>(probs: Var<'g>, z: &[usize]) -> Result<Var<'g>> {
    let n = probs.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument("soft_ari needs at least 2 points".into()));
    }
    let k_true = z.iter().max().map_or(1, |&m| m + 1);
    let m = soft_confusion(probs, z, k_true)?;
    let index = comb2_var(m)?.sum();
    let row = comb2_var(m.sum_axis(1)?)?.sum();
    let col = comb2_var(m.sum_axis(0)?)?.sum();
    let total = comb2(n as f64);
    let expected = row.mul(col)?.scale(1.0 / total);
    let max = row.add(col)?.scale(0.5);
    let denom = max.sub(expected)?;
    if denom.item().abs() < DEGENERATE_DENOM {
        return Ok(probs.graph().constant(Tensor::scalar(0.0)));
    }
    index.sub(expected)?.div(denom)
}

pub fn soft_ari_value(probs: &Tensor, z: &[usize]) -> Result<f64> {
    let g = Graph::new();
    Ok(soft_ari(g.constant(probs.clone()), z)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::metrics::one_hot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pair-counting ARI straight from the definition.
    fn pair_count_ari(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                if sa && sb {
                    both += 1.0;
                }
                if sa {
                    in_a += 1.0;
                }
                if sb {
                    in_b += 1.0;
                }
            }
        }
        let pairs = (n * (n - 1) / 2) as f64;
        let expected = in_a * in_b / pairs;
        let max = 0.5 * (in_a + in_b);
        if (max - expected).abs() < 1e-8 {
            return if (both - expected).abs() < 1e-8 { 1.0 } else { 0.0 };
        }
        (both - expected) / (max - expected)
    }

    #[test]
    fn relabeling_invariance() {
        assert_eq!(hard_ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_negative_value() {
        assert!((hard_ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.random_range(2..=30);
            let ka = rng.random_range(1..=5);
            let kb = rng.random_range(1..=5);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
            let got = hard_ari(&a, &b).unwrap();
            assert!((got - pair_count_ari(&a, &b)).abs() < 1e-12);
            assert_eq!(got, hard_ari(&b, &a).unwrap(), "symmetry");
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(hard_ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn soft_one_hot_is_one() {
        let z = [2, 0, 1, 1, 0, 2, 2];
        let p = one_hot(&z, 3).unwrap();
        assert!((soft_ari_value(&p, &z).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn soft_on_one_hot_equals_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let k = rng.random_range(2..=6);
            let n = rng.random_range(k + 1..=50);
            let mut z: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            // keep away from the degenerate single-cluster comparison
            z[0] = 0;
            z[1] = 1;
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let p = one_hot(&pred, k).unwrap();
            let soft = soft_ari_value(&p, &z).unwrap();
            let hard = hard_ari(&pred, &z).unwrap();
            assert!((soft - hard).abs() < 1e-10, "{soft} vs {hard}");
        }
    }

    #[test]
    fn uniform_two_cluster_straight_line() {
        // P uniform over K=2 for Z = [0,0,1,1]: every n_kl = 1, row sums 2, col sums 2.
        let p = Tensor::full(&[4, 2], 0.5);
        let index = 4.0 * (0.5 * 1.0 * 0.0);
        let rows = 2.0 * (0.5 * 2.0 * 1.0);
        let cols = 2.0 * (0.5 * 2.0 * 1.0);
        let expected = rows * cols / 6.0;
        let want = (index - expected) / ((rows + cols) / 2.0 - expected);
        assert!((soft_ari_value(&p, &[0, 0, 1, 1]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn degenerate_returns_zero() {
        let p = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(soft_ari_value(&p, &[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, k) = (10, 3);
        let logits = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let z: Vec<usize> = (0..n).map(|i| i % k).collect();
        let r = finite_difference_check(|_, l| soft_ari(l.softmax(), &z), &logits, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
