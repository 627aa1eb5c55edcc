//! Brute-force reference implementations used as test oracles. They share no
//! code with the library: plain `Vec`s, naive loops, no log-domain tricks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

pub type Rows = Vec<Vec<f64>>;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn unit_rows(rows: &Rows) -> Rows {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Mean positive and mean weighted-negative hinge over all anchors.
pub fn lin_terms(rows: &Rows, labels: &[usize], r: f64, t: f64) -> (f64, f64) {
    let n = rows.len();
    let (mut lp_total, mut ln_total) = (0.0, 0.0);
    for i in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dist(&rows[i], &rows[j]);
            if labels[j] == labels[i] {
                pos.push(f64::max(d - r, 0.0));
            } else {
                let w = (-d).exp() * (t * (2.0 - d)).exp();
                neg.push((w, f64::max(2.0 - d, 0.0)));
            }
        }
        lp_total += pos.iter().sum::<f64>() / pos.len() as f64;
        let z: f64 = neg.iter().map(|(w, _)| w).sum();
        ln_total += neg.iter().map(|(w, h)| w / z * h).sum::<f64>();
    }
    (lp_total / n as f64, ln_total / n as f64)
}

pub fn smoothed_ce(logits: &Rows, labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let c = row.len() as f64;
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (k, v) in row.iter().enumerate() {
            let q = if k == y { 1.0 - eps + eps / c } else { eps / c };
            total -= q * (v.exp() / z).ln();
        }
    }
    total / logits.len() as f64
}

/// One side of a retrieval split as plain vectors.
#[derive(Debug, Clone)]
pub struct Side {
    pub classes: Vec<usize>,
    pub cameras: Vec<i64>,
}

fn junk(q: &Side, qi: usize, g: &Side, gi: usize) -> bool {
    q.cameras[qi] != -1 && g.cameras[gi] != -1 && q.cameras[qi] == g.cameras[gi] && q.classes[qi] == g.classes[gi]
}

/// Position of gallery item `gi` among query `qi`'s valid items, counting
/// the ones strictly closer or equally close with a smaller index.
fn position(dist: &Rows, q: &Side, qi: usize, g: &Side, gi: usize) -> usize {
    (0..dist[qi].len())
        .filter(|&o| !junk(q, qi, g, o))
        .filter(|&o| dist[qi][o] < dist[qi][gi] || (dist[qi][o] == dist[qi][gi] && o < gi))
        .count()
}

/// CMC curve and mAP by enumerating every gallery position directly.
/// Returns `(cmc, map, used)`.
pub fn cmc_map(dist: &Rows, q: &Side, g: &Side) -> (Vec<f64>, f64, usize) {
    let n_g = g.classes.len();
    let mut first_hits = vec![0usize; n_g];
    let mut aps = Vec::new();
    for qi in 0..q.classes.len() {
        let valid: Vec<usize> = (0..n_g).filter(|&gi| !junk(q, qi, g, gi)).collect();
        let mut at: BTreeMap<usize, usize> = BTreeMap::new();
        for &gi in &valid {
            at.insert(position(dist, q, qi, g, gi), gi);
        }
        if !valid.iter().any(|&gi| g.classes[gi] == q.classes[qi]) {
            continue;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        let mut first = None;
        for pos in 0..valid.len() {
            let gi = at[&pos];
            if g.classes[gi] == q.classes[qi] {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        first_hits[first.unwrap()] += 1;
        aps.push(sum / hits as f64);
    }
    let used = aps.len();
    let mut cmc = Vec::new();
    let mut acc = 0;
    for c in first_hits {
        acc += c;
        cmc.push(if used == 0 { 0.0 } else { acc as f64 / used as f64 });
    }
    let map = if used == 0 { 0.0 } else { aps.iter().sum::<f64>() / used as f64 };
    (cmc, map, used)
}

/// Brute-force k-reciprocal re-ranking on a joint distance matrix, returning
/// the query × gallery block.
pub fn rerank(joint: &Rows, n_query: usize, k1: usize, k2: usize, lambda: f64) -> Rows {
    let n = joint.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        let top = joint[i].iter().map(|v| v * v).fold(0.0, f64::max);
        for j in 0..n {
            d[i][j] = if top > 0.0 { joint[i][j] * joint[i][j] / top } else { 0.0 };
        }
    }
    let rank_of = |i: usize, j: usize| (0..n).filter(|&o| d[i][o] < d[i][j] || (d[i][o] == d[i][j] && o < j)).count();
    let top = |i: usize, k: usize| -> BTreeSet<usize> { (0..n).filter(|&j| rank_of(i, j) <= k).collect() };
    let recip = |i: usize, k: usize| -> BTreeSet<usize> {
        let mine = top(i, k);
        mine.iter().copied().filter(|&j| top(j, k).contains(&i)).collect()
    };

    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = recip(i, k1);
        let mut set = base.clone();
        for &c in &base {
            let cand = recip(c, half);
            let shared = cand.intersection(&base).count();
            if 3 * shared > 2 * cand.len() {
                set.extend(cand);
            }
        }
        let z: f64 = set.iter().map(|&j| (-d[i][j]).exp()).sum();
        v.push(set.iter().map(|&j| (j, (-d[i][j]).exp() / z)).collect());
    }

    if k2 > 1 {
        let mut qe = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for j in (0..n).filter(|&j| rank_of(i, j) < k2) {
                for (&c, &w) in &v[j] {
                    *acc.entry(c).or_insert(0.0) += w;
                }
            }
            for w in acc.values_mut() {
                *w /= k2 as f64;
            }
            qe.push(acc);
        }
        v = qe;
    }

    let mut out = vec![vec![0.0; n - n_query]; n_query];
    for q in 0..n_query {
        for g in 0..n - n_query {
            let a = &v[q];
            let b = &v[n_query + g];
            let keys: BTreeSet<usize> = a.keys().chain(b.keys()).copied().collect();
            let (mut lo, mut hi) = (0.0, 0.0);
            for k in keys {
                let x = a.get(&k).copied().unwrap_or(0.0);
                let y = b.get(&k).copied().unwrap_or(0.0);
                lo += x.min(y);
                hi += x.max(y);
            }
            out[q][g] = (1.0 - lambda) * (1.0 - lo / hi) + lambda * d[q][n_query + g];
        }
    }
    out
}
