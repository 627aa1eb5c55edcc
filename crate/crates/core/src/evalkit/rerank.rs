//! k-reciprocal re-ranking.
//!
//! Works on the joint (query ∪ gallery) distance matrix:
//!
//! 1. squared distances, each row scaled by its maximum
//! 2. `R(i, k1)`: members of `i`'s top `k1 + 1` that also hold `i` in theirs
//! 3. expansion by `R(c, round(k1 / 2))` for `c ∈ R(i, k1)` when that set
//!    overlaps `R(i, k1)` in more than two thirds of its members
//! 4. `V[i, j] ∝ exp(-d[i, j])` over the expanded set, rows summing to one
//! 5. local query expansion: mean of `V` over `i`'s top `k2` rows
//! 6. Jaccard distance `1 - Σ min / Σ max` between query and gallery rows
//! 7. `d* = (1 - λ) d_J + λ d`

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::EvalSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self, total: usize) -> Result<()> {
        if self.k1 == 0 {
            return Err(Error::config("k1", "must be >= 1"));
        }
        if self.k2 == 0 {
            return Err(Error::config("k2", "must be >= 1"));
        }
        if self.k2 > self.k1 {
            return Err(Error::config("k2", format!("k2 = {} exceeds k1 = {}", self.k2, self.k1)));
        }
        if self.k1 >= total {
            return Err(Error::config("k1", format!("k1 = {} needs more than {total} samples", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Squared distances scaled per row by the row maximum.
fn scaled_squared(original: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut d = original.mapv(|v| v * v);
    for mut row in d.rows_mut() {
        let top = row.fold(0.0f64, |a, &b| a.max(b));
        if top > 0.0 {
            row.mapv_inplace(|v| v / top);
        }
    }
    d
}

fn rankings(d: &Array2<f64>) -> Vec<Vec<usize>> {
    d.rows()
        .into_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            order
        })
        .collect()
}

fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let width = (k + 1).min(rank.len());
    rank[i][..width]
        .iter()
        .copied()
        .filter(|&j| rank[j][..width].contains(&i))
        .collect()
}

fn expanded(rank: &[Vec<usize>], i: usize, k1: usize) -> Vec<usize> {
    let base = reciprocal(rank, i, k1);
    let half = ((k1 as f64) / 2.0).round_ties_even() as usize;
    let mut out = base.clone();
    for &c in &base {
        let cand = reciprocal(rank, c, half);
        let overlap = cand.iter().filter(|j| base.contains(j)).count();
        if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
            out.extend(cand);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Expanded k-reciprocal neighbour set of every sample of the joint matrix.
pub fn k_reciprocal_sets(original: ArrayView2<'_, f64>, k1: usize) -> Vec<Vec<usize>> {
    let rank = rankings(&scaled_squared(original));
    (0..rank.len()).map(|i| expanded(&rank, i, k1)).collect()
}

/// Re-ranked query × gallery distances from a joint `(q + g) × (q + g)`
/// matrix whose first `n_query` rows are the queries.
pub fn rerank_joint(original: ArrayView2<'_, f64>, n_query: usize, cfg: &RerankConfig) -> Result<Array2<f64>> {
    let n = original.nrows();
    if original.ncols() != n {
        return Err(Error::Shape(format!("joint distance matrix must be square, got {:?}", original.dim())));
    }
    if n_query == 0 || n_query >= n {
        return Err(Error::Shape(format!("{n_query} queries in a joint matrix of {n}")));
    }
    cfg.validate(n)?;

    let dist = scaled_squared(original);
    let rank = rankings(&dist);

    let mut v = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let members = expanded(&rank, i, cfg.k1);
        let weights: Vec<f64> = members.iter().map(|&j| (-dist[[i, j]]).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in members.iter().zip(weights) {
            v[[i, j]] = w / total;
        }
    }

    if cfg.k2 > 1 {
        let mut expanded_v = Array2::<f64>::zeros((n, n));
        for (i, ranked) in rank.iter().enumerate() {
            let mut row = expanded_v.row_mut(i);
            for &j in &ranked[..cfg.k2] {
                row += &v.row(j);
            }
            row /= cfg.k2 as f64;
        }
        v = expanded_v;
    }

    // inverted index: for each column, the rows holding a nonzero entry
    let inverted: Vec<Vec<usize>> = (0..n)
        .map(|col| (0..n).filter(|&row| v[[row, col]] != 0.0).collect())
        .collect();

    let n_gallery = n - n_query;
    let mut out = Array2::<f64>::zeros((n_query, n_gallery));
    let mut shared = vec![0.0f64; n];
    for q in 0..n_query {
        shared.iter_mut().for_each(|s| *s = 0.0);
        for col in (0..n).filter(|&c| v[[q, c]] != 0.0) {
            let vq = v[[q, col]];
            for &row in &inverted[col] {
                shared[row] += vq.min(v[[row, col]]);
            }
        }
        for g in 0..n_gallery {
            let s = shared[n_query + g];
            let jaccard = 1.0 - s / (2.0 - s);
            out[[q, g]] = (1.0 - cfg.lambda) * jaccard + cfg.lambda * dist[[q, n_query + g]];
        }
    }
    Ok(out)
}

/// Re-ranked query × gallery distances of a split's stored features.
pub fn k_reciprocal_rerank(split: &EvalSplit, cfg: &RerankConfig) -> Result<Array2<f64>> {
    cfg.validate(split.query.len() + split.gallery.len())?;
    rerank_joint(split.joint_distances().view(), split.query.len(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line_points() -> Array2<f64> {
        let xs: [f64; 6] = [0.0, 0.1, 0.3, 1.0, 1.15, 2.0];
        Array2::from_shape_fn((6, 6), |(i, j)| (xs[i] - xs[j]).abs())
    }

    #[test]
    fn reciprocal_sets_on_a_line() {
        let sets = k_reciprocal_sets(line_points().view(), 2);
        // 0's top-3 is {0, 1, 2}; 2's top-3 is {2, 1, 0} so 2 is reciprocal
        assert_eq!(sets[0], vec![0, 1, 2]);
        for (i, s) in sets.iter().enumerate() {
            assert!(s.contains(&i));
        }
    }

    #[test]
    fn config_checks() {
        let d = line_points();
        let bad = RerankConfig { k1: 2, k2: 3, lambda: 0.3 };
        assert!(matches!(rerank_joint(d.view(), 2, &bad), Err(Error::ConfigInvalid { .. })));
        let too_big = RerankConfig { k1: 6, k2: 1, lambda: 0.3 };
        assert!(rerank_joint(d.view(), 2, &too_big).is_err());
        assert!(rerank_joint(array![[0.0, 1.0]].view(), 1, &RerankConfig::default()).is_err());
    }

    #[test]
    fn lambda_one_keeps_order() {
        let d = line_points();
        let out = rerank_joint(d.view(), 2, &RerankConfig { k1: 2, k2: 1, lambda: 1.0 }).unwrap();
        for q in 0..2 {
            let row = out.row(q);
            let mut a: Vec<usize> = (0..4).collect();
            a.sort_by(|&x, &y| row[x].total_cmp(&row[y]));
            let orig = d.row(q);
            let mut b: Vec<usize> = (0..4).collect();
            b.sort_by(|&x, &y| orig[2 + x].total_cmp(&orig[2 + y]));
            assert_eq!(a, b);
        }
    }
}
