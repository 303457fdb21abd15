use crate::error::{Error, Result};

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "k_mae: {} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("k_mae on empty input".into()));
    }
    Ok(())
}

fn abs_errors(pred: &[usize], truth: &[usize]) -> Vec<f64> {
    pred.iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .collect()
}

/// Mean absolute error between predicted and true cluster counts.
pub fn k_mae(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let e = abs_errors(pred, truth);
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Median absolute error between predicted and true cluster counts.
pub fn k_median_ae(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(quantile(&abs_errors(pred, truth), 0.5))
}

/// Linear-interpolation quantile (the numpy default). NaN for empty input.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSummary {
    pub median_rank: f64,
    pub iqr: f64,
    /// Rank on each dataset, 1 = best, ties averaged.
    pub ranks: Vec<f64>,
}

/// Ranks methods per dataset and summarizes each method's ranks.
///
/// `scores[m][d]` is the score of method `m` on dataset `d`.
pub fn median_rank(scores: &[Vec<f64>], higher_better: bool) -> Result<Vec<RankSummary>> {
    let n_methods = scores.len();
    let n_data = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != n_data) {
        return Err(Error::Shape("median_rank: ragged score matrix".into()));
    }
    if scores.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("median_rank: NaN score".into()));
    }
    let mut ranks = vec![vec![0.0; n_data]; n_methods];
    for d in 0..n_data {
        let mut order: Vec<usize> = (0..n_methods).collect();
        let key = |m: usize| if higher_better { -scores[m][d] } else { scores[m][d] };
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && key(order[j + 1]) == key(order[i]) {
                j += 1;
            }
            // positions i..=j share the average of ranks i+1..=j+1
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &m in &order[i..=j] {
                ranks[m][d] = avg;
            }
            i = j + 1;
        }
    }
    Ok(ranks
        .into_iter()
        .map(|r| RankSummary {
            median_rank: quantile(&r, 0.5),
            iqr: quantile(&r, 0.75) - quantile(&r, 0.25),
            ranks: r,
        })
        .collect())
}
