//! Re-identification evaluation: CMC, mAP and k-reciprocal re-ranking.
//!
//! Rankings sort the gallery by ascending distance with ties broken by
//! gallery index. Gallery items sharing both identity and camera with the
//! query are junk and dropped from that query's ranking; with camera id −1 on
//! either side nothing is dropped. Queries left without any positive are
//! skipped and counted.

mod distfile;
mod rerank;

pub use distfile::{read_matrix, read_matrix_from, write_matrix, write_matrix_to, DIST_MAGIC, DIST_VERSION};
pub use rerank::{k_reciprocal_rerank, k_reciprocal_sets, rerank_joint, RerankConfig};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{cross_distances, EmbeddingBatch, NO_CAMERA};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub query: EmbeddingBatch,
    pub gallery: EmbeddingBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[k - 1]` is the rank-k matching rate.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_queries_used: usize,
    pub n_queries_skipped: usize,
    pub reranked: Option<Box<EvalReport>>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).copied().unwrap_or(0.0)
    }
}

impl EvalSplit {
    pub fn new(query: EmbeddingBatch, gallery: EmbeddingBatch) -> Result<Self> {
        if query.dim() != gallery.dim() {
            return Err(Error::Shape(format!("query dim {} vs gallery dim {}", query.dim(), gallery.dim())));
        }
        Ok(Self { query, gallery })
    }

    /// Query × gallery Euclidean distances of the stored features.
    pub fn distances(&self) -> Array2<f64> {
        cross_distances(self.query.features(), self.gallery.features())
    }

    /// Distances over the stacked (query then gallery) features.
    pub fn joint_distances(&self) -> Array2<f64> {
        let all = concatenate(Axis(0), &[self.query.features(), self.gallery.features()]).expect("dims checked");
        cross_distances(all.view(), all.view())
    }

    /// Same labels, features replaced by the model's inference embeddings.
    pub fn embedded(&self, model: &ModelParams) -> Result<Self> {
        Ok(Self {
            query: self.query.with_features(model.embed(self.query.features())?)?,
            gallery: self.gallery.with_features(model.embed(self.gallery.features())?)?,
        })
    }

    fn is_junk(&self, q: usize, g: usize) -> bool {
        let qc = self.query.camera_ids()[q];
        let gc = self.gallery.camera_ids()[g];
        qc != NO_CAMERA && gc != NO_CAMERA && qc == gc && self.query.class_ids()[q] == self.gallery.class_ids()[g]
    }

    /// Match flags of query `q` in ranked order with junk removed, or `None`
    /// when no positive survives.
    pub fn ranked_matches(&self, q: usize, dist: ArrayView2<'_, f64>) -> Option<Vec<bool>> {
        let row = dist.row(q);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let class = self.query.class_ids()[q];
        let flags: Vec<bool> = order
            .into_iter()
            .filter(|&g| !self.is_junk(q, g))
            .map(|g| self.gallery.class_ids()[g] == class)
            .collect();
        flags.contains(&true).then_some(flags)
    }

    fn check(&self, dist: ArrayView2<'_, f64>) -> Result<()> {
        if dist.ncols() == 0 {
            return Err(Error::EmptyGallery);
        }
        if dist.dim() != (self.query.len(), self.gallery.len()) {
            return Err(Error::Shape(format!(
                "distance matrix {:?} for {} queries and {} gallery items",
                dist.dim(),
                self.query.len(),
                self.gallery.len()
            )));
        }
        if dist.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBatch("non-finite distance".into()));
        }
        Ok(())
    }
}

pub fn average_precision(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, _) in flags.iter().enumerate().filter(|(_, &m)| m) {
        hits += 1;
        total += hits as f64 / (pos + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// CMC over ranks `1..=gallery size` and the number of queries used.
pub fn cmc_curve(split: &EvalSplit, dist: ArrayView2<'_, f64>) -> Result<(Vec<f64>, usize)> {
    split.check(dist)?;
    let mut counts = vec![0usize; dist.ncols()];
    let mut used = 0;
    for q in 0..split.query.len() {
        if let Some(flags) = split.ranked_matches(q, dist) {
            used += 1;
            let first = flags.iter().position(|&m| m).expect("has a positive");
            counts[first] += 1;
        }
    }
    let mut cmc = Vec::with_capacity(counts.len());
    let mut acc = 0usize;
    for c in counts {
        acc += c;
        cmc.push(if used == 0 { 0.0 } else { acc as f64 / used as f64 });
    }
    Ok((cmc, used))
}

/// Mean average precision and the number of queries used.
pub fn mean_average_precision(split: &EvalSplit, dist: ArrayView2<'_, f64>) -> Result<(f64, usize)> {
    split.check(dist)?;
    let aps: Vec<f64> = (0..split.query.len())
        .filter_map(|q| split.ranked_matches(q, dist))
        .map(|flags| average_precision(&flags))
        .collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    Ok((map, aps.len()))
}

/// CMC and mAP of a precomputed query × gallery distance matrix.
pub fn score(split: &EvalSplit, dist: ArrayView2<'_, f64>) -> Result<EvalReport> {
    let (cmc, used) = cmc_curve(split, dist)?;
    let (map, _) = mean_average_precision(split, dist)?;
    Ok(EvalReport {
        cmc,
        map,
        n_queries_used: used,
        n_queries_skipped: split.query.len() - used,
        reranked: None,
    })
}

/// Scores a split whose features are already the embeddings to compare.
pub fn evaluate_features(split: &EvalSplit, rerank: Option<&RerankConfig>) -> Result<EvalReport> {
    let mut report = score(split, split.distances().view())?;
    if let Some(cfg) = rerank {
        let reranked = k_reciprocal_rerank(split, cfg)?;
        report.reranked = Some(Box::new(score(split, reranked.view())?));
    }
    Ok(report)
}

/// Embeds both sides with the model in inference mode and scores the
/// unit-norm post-BN features.
pub fn evaluate(split: &EvalSplit, model: &ModelParams, rerank: Option<&RerankConfig>) -> Result<EvalReport> {
    evaluate_features(&split.embedded(model)?, rerank)
}
