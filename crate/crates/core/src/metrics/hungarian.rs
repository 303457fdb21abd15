use crate::autodiff::Tensor;

/// Optimal one-to-one matching of predicted clusters to true clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `permutation[k]` is the true cluster matched to predicted cluster `k`.
    pub permutation: Vec<usize>,
    /// `Σ_k m[k][permutation[k]]`, summed in row order.
    pub score: f64,
}

fn score_of(m: &Tensor, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(k, &j)| m.at(k, j)).sum()
}

/// Maximum-score assignment on a square matrix (shortest augmenting path with
/// potentials, O(K³)).
///
/// Rows are inserted in index order and ties between equally short augmenting
/// paths go to the lowest column index, so the result is deterministic.
pub fn hungarian(m: &Tensor) -> MatchResult {
    let n = m.rows();
    assert_eq!(n, m.cols(), "hungarian expects a square matrix");
    if n == 0 {
        return MatchResult {
            permutation: vec![],
            score: 0.0,
        };
    }
    let cost = |i: usize, j: usize| -m.at(i - 1, j - 1);
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[row_of[j] - 1] = j - 1;
    }
    let score = score_of(m, &permutation);
    MatchResult { permutation, score }
}

/// Exhaustive search over all K! permutations (lexicographic order, first maximum wins).
pub fn brute_force_assignment(m: &Tensor) -> MatchResult {
    let n = m.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = MatchResult {
        permutation: perm.clone(),
        score: score_of(m, &perm),
    };
    // Heap-free lexicographic enumeration via next_permutation
    loop {
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).expect("exists");
        perm.swap(i - 1, j);
        perm[i..].reverse();
        let s = score_of(m, &perm);
        if s > best.score {
            best = MatchResult {
                permutation: perm.clone(),
                score: s,
            };
        }
    }
    best
}
