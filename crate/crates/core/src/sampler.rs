//! Identity-balanced P×K batch construction.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `P` identities with `K` dataset indices each, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub sample_indices: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Stateful sampler. Each class is scheduled `max(1, n_c / K)` times per
/// epoch; every batch takes the `P` classes with the most visits left
/// (random order among ties).
#[derive(Debug, Clone)]
pub struct PkSampler {
    classes: Vec<Vec<usize>>,
    remaining: Vec<usize>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(class_ids: &[usize], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("p", "must be >= 1"));
        }
        if k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &c) in class_ids.iter().enumerate() {
            grouped.entry(c).or_default().push(row);
        }
        if grouped.len() < p {
            return Err(Error::TooFewClasses {
                available: grouped.len(),
                requested: p,
            });
        }
        let classes: Vec<Vec<usize>> = grouped.into_values().collect();
        Ok(Self {
            remaining: vec![0; classes.len()],
            classes,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    fn epoch_done(&self) -> bool {
        self.remaining.iter().all(|&r| r == 0)
    }

    fn start_epoch(&mut self) {
        for (slot, rows) in self.remaining.iter_mut().zip(&self.classes) {
            *slot = (rows.len() / self.k).max(1);
        }
    }

    fn draw_class(&mut self, class: usize, out: &mut Vec<usize>) {
        let rows = &self.classes[class];
        if rows.len() >= self.k {
            out.extend(index::sample(&mut self.rng, rows.len(), self.k).into_iter().map(|i| rows[i]));
        } else {
            // every member once, the remainder with replacement
            let mut picks: Vec<usize> = rows.clone();
            while picks.len() < self.k {
                picks.push(rows[self.rng.random_range(0..rows.len())]);
            }
            picks.shuffle(&mut self.rng);
            out.extend(picks);
        }
    }

    /// Next batch; a new epoch starts when the current one is used up.
    pub fn next_batch(&mut self) -> BatchPlan {
        if self.epoch_done() {
            self.start_epoch();
        }
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(&mut self.rng);
        order.sort_by(|&a, &b| self.remaining[b].cmp(&self.remaining[a]));
        order.truncate(self.p);

        let mut sample_indices = Vec::with_capacity(self.batch_size());
        for &c in &order {
            self.remaining[c] = self.remaining[c].saturating_sub(1);
            self.draw_class(c, &mut sample_indices);
        }
        BatchPlan {
            sample_indices,
            p: self.p,
            k: self.k,
        }
    }

    /// All batches of one fresh epoch.
    pub fn next_epoch(&mut self) -> Vec<BatchPlan> {
        self.start_epoch();
        let mut plans = Vec::new();
        while !self.epoch_done() {
            plans.push(self.next_batch());
        }
        plans
    }
}

pub fn epoch_plan(class_ids: &[usize], p: usize, k: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    Ok(PkSampler::new(class_ids, p, k, seed)?.next_epoch())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
    }

    fn composition(plan: &BatchPlan, ids: &[usize]) -> HashMap<usize, usize> {
        let mut m = HashMap::new();
        for &i in &plan.sample_indices {
            *m.entry(ids[i]).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn default_batch_size() {
        let ids = labels(20, 6);
        let mut s = PkSampler::new(&ids, 16, 4, 0).unwrap();
        assert_eq!(s.next_batch().len(), 64);
    }

    #[test]
    fn forced_composition() {
        let ids = labels(2, 4);
        let mut s = PkSampler::new(&ids, 2, 2, 5).unwrap();
        let b = s.next_batch();
        assert_eq!(b.len(), 4);
        let comp = composition(&b, &ids);
        assert_eq!(comp[&0], 2);
        assert_eq!(comp[&1], 2);
    }

    #[test]
    fn small_class_covers_all_members() {
        let ids = vec![0, 0, 1, 1, 1, 1, 1];
        for seed in 0..200 {
            let mut s = PkSampler::new(&ids, 2, 4, seed).unwrap();
            let b = s.next_batch();
            let small: Vec<usize> = b.sample_indices.iter().copied().filter(|&i| ids[i] == 0).collect();
            assert_eq!(small.len(), 4);
            assert!(small.contains(&0) && small.contains(&1), "seed {seed}: {small:?}");
        }
    }

    #[test]
    fn epoch_size_and_determinism() {
        let ids = labels(32, 8);
        let a = epoch_plan(&ids, 16, 4, 3).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, epoch_plan(&ids, 16, 4, 3).unwrap());
        assert_ne!(a, epoch_plan(&ids, 16, 4, 4).unwrap());
        let mut visits: HashMap<usize, usize> = HashMap::new();
        for plan in &a {
            let comp = composition(plan, &ids);
            assert_eq!(comp.len(), 16);
            assert!(comp.values().all(|&v| v == 4));
            for c in comp.keys() {
                *visits.entry(*c).or_insert(0) += 1;
            }
        }
        assert!(visits.values().all(|&v| v >= 2));
    }

    #[test]
    fn all_classes_every_batch_when_p_is_total() {
        let ids = labels(5, 9);
        for plan in epoch_plan(&ids, 5, 3, 1).unwrap() {
            assert_eq!(composition(&plan, &ids).len(), 5);
        }
    }

    #[test]
    fn too_few_classes() {
        let err = PkSampler::new(&labels(3, 4), 4, 2, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewClasses { available: 3, requested: 4 }));
    }
}
