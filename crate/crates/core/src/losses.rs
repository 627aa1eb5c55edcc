//! The ranking-plus-classification loss family.
//!
//! For an anchor `i` with distances `d_ij` to the other batch members:
//!
//! * pairwise hinge: positives pay `[d_ij - r]+`, negatives pay `[2 - d_ij]+`
//! * positive loss `Lp(i)`: mean hinge over the anchor's positives
//! * negative weights `W_ij = exp(-d_ij) * exp(T * (2 - d_ij))`, normalized
//!   over the anchor's negatives
//! * negative loss `Ln(i)`: weight-normalized sum of negative hinges
//! * `Lin = mean_i (Lp(i) + Ln(i))`
//! * `M = softmax_ls + w * Lin`
//!
//! Features fed to the ranking terms are expected to be unit norm, which is
//! what makes 2 the largest attainable distance.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{pairwise_distances, DistanceMatrix, EmbeddingBatch};
use crate::error::{Error, Result};

/// Target distance for negatives: the diameter of the unit hypersphere.
pub const MAX_DISTANCE: f64 = 2.0;

/// Pairs closer than this cannot be differentiated through `d_ij`.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Radius `r` of the hypersphere positives are pulled into.
    pub radius: f64,
    /// Temperature `T` of the negative weighting.
    pub temperature: f64,
    /// Weight `w` of the ranking term in the combined loss.
    pub lin_weight: f64,
    /// Label smoothing coefficient of the softmax term.
    pub label_smoothing: f64,
    /// Treat negative weights as constants when differentiating.
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            radius: 0.7,
            temperature: 1.0,
            lin_weight: 0.4,
            label_smoothing: 0.1,
            detach_weights: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius < MAX_DISTANCE) {
            return Err(Error::config("radius", format!("must lie in (0, 2), got {}", self.radius)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be a finite non-negative number"));
        }
        if !(self.lin_weight >= 0.0 && self.lin_weight.is_finite()) {
            return Err(Error::config("lin_weight", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn max_distance(&self) -> f64 {
        MAX_DISTANCE
    }
}

/// Per-component values of the combined loss, all averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lp: f64,
    pub ln: f64,
    pub lin: f64,
    pub softmax_ls: f64,
    pub m_loss: f64,
}

impl LossBreakdown {
    pub fn compose(lp: f64, ln: f64, softmax_ls: f64, lin_weight: f64) -> Self {
        let lin = lp + ln;
        Self {
            lp,
            ln,
            lin,
            softmax_ls,
            m_loss: softmax_ls + lin_weight * lin,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("lp", self.lp),
            ("ln", self.ln),
            ("lin", self.lin),
            ("softmax_ls", self.softmax_ls),
            ("m_loss", self.m_loss),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Gradients of a loss with respect to the embedding rows and the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPacket {
    pub d_embeddings: Array2<f64>,
    pub d_logits: Array2<f64>,
}

impl GradPacket {
    pub fn zeros(batch: usize, dim: usize, classes: usize) -> Self {
        Self {
            d_embeddings: Array2::zeros((batch, dim)),
            d_logits: Array2::zeros((batch, classes)),
        }
    }
}

pub fn pairwise_loss(d_ij: f64, same_class: bool, cfg: &LossConfig) -> f64 {
    if same_class {
        (d_ij - cfg.radius).max(0.0)
    } else {
        (MAX_DISTANCE - d_ij).max(0.0)
    }
}

pub fn negative_weight(d_ij: f64, cfg: &LossConfig) -> f64 {
    (-d_ij).exp() * (cfg.temperature * (MAX_DISTANCE - d_ij)).exp()
}

fn positives(anchor: usize, class_ids: &[usize]) -> impl Iterator<Item = usize> + '_ {
    let c = class_ids[anchor];
    (0..class_ids.len()).filter(move |&j| j != anchor && class_ids[j] == c)
}

fn negatives(anchor: usize, class_ids: &[usize]) -> impl Iterator<Item = usize> + '_ {
    let c = class_ids[anchor];
    (0..class_ids.len()).filter(move |&j| class_ids[j] != c)
}

fn positive_loss_raw(anchor: usize, class_ids: &[usize], dist: &DistanceMatrix, cfg: &LossConfig) -> Result<f64> {
    let (count, total) = positives(anchor, class_ids)
        .fold((0usize, 0.0), |(n, s), j| (n + 1, s + pairwise_loss(dist.get(anchor, j), true, cfg)));
    if count == 0 {
        return Err(Error::NoPositives { anchor });
    }
    Ok(total / count as f64)
}

/// Mean hinge over the anchor's same-class partners (the anchor itself excluded).
pub fn positive_loss(anchor: usize, batch: &EmbeddingBatch, dist: &DistanceMatrix, cfg: &LossConfig) -> Result<f64> {
    positive_loss_raw(anchor, batch.class_ids(), dist, cfg)
}

/// Normalized negative weights of one anchor as `(index, weight)` pairs.
///
/// Evaluated in the log domain with the largest exponent subtracted, so the
/// weights sum to one even for large temperatures.
fn anchor_negative_weights(anchor: usize, class_ids: &[usize], dist: &DistanceMatrix, cfg: &LossConfig) -> Result<Vec<(usize, f64)>> {
    // log W = -d + T (2 - d)
    let logs: Vec<(usize, f64)> = negatives(anchor, class_ids)
        .map(|j| {
            let d = dist.get(anchor, j);
            (j, -d + cfg.temperature * (MAX_DISTANCE - d))
        })
        .collect();
    if logs.is_empty() {
        return Err(Error::NoNegatives { anchor });
    }
    let top = logs.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<(usize, f64)> = logs.into_iter().map(|(j, l)| (j, (l - top).exp())).collect();
    let total: f64 = scaled.iter().map(|&(_, w)| w).sum();
    Ok(scaled.into_iter().map(|(j, w)| (j, w / total)).collect())
}

/// B×B matrix of normalized negative weights; row `i` holds anchor `i`'s
/// weights and is zero on its positives.
pub fn normalized_negative_weights(batch: &EmbeddingBatch, dist: &DistanceMatrix, cfg: &LossConfig) -> Result<Array2<f64>> {
    let n = batch.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for (j, w) in anchor_negative_weights(i, batch.class_ids(), dist, cfg)? {
            out[[i, j]] = w;
        }
    }
    Ok(out)
}

fn negative_loss_raw(anchor: usize, class_ids: &[usize], dist: &DistanceMatrix, cfg: &LossConfig) -> Result<f64> {
    Ok(anchor_negative_weights(anchor, class_ids, dist, cfg)?
        .into_iter()
        .map(|(j, w)| w * pairwise_loss(dist.get(anchor, j), false, cfg))
        .sum())
}

pub fn negative_loss(anchor: usize, batch: &EmbeddingBatch, dist: &DistanceMatrix, cfg: &LossConfig) -> Result<f64> {
    negative_loss_raw(anchor, batch.class_ids(), dist, cfg)
}

/// Batch means of `Lp` and `Ln` over every anchor.
pub fn lin_components(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<(f64, f64)> {
    let dist = pairwise_distances(batch);
    let ids = batch.class_ids();
    let n = batch.len() as f64;
    let mut lp = 0.0;
    let mut ln = 0.0;
    for i in 0..batch.len() {
        lp += positive_loss_raw(i, ids, &dist, cfg)?;
        ln += negative_loss_raw(i, ids, &dist, cfg)?;
    }
    Ok((lp / n, ln / n))
}

pub fn lin_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<f64> {
    let (lp, ln) = lin_components(batch, cfg)?;
    Ok(lp + ln)
}

/// `Lin` with the negative weights held at the supplied values instead of
/// being recomputed from the current distances. With `weights` taken from
/// [`normalized_negative_weights`] at some point, this is the surrogate whose
/// gradient at that point equals the detached-weight gradient.
pub fn lin_loss_with_weights(batch: &EmbeddingBatch, cfg: &LossConfig, weights: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    let n = batch.len();
    if weights.dim() != (n, n) {
        return Err(Error::Shape(format!("weights {:?} for batch of {n}", weights.dim())));
    }
    let dist = pairwise_distances(batch);
    let ids = batch.class_ids();
    let mut lp = 0.0;
    let mut ln = 0.0;
    for i in 0..n {
        lp += positive_loss_raw(i, ids, &dist, cfg)?;
        let mut any = false;
        for j in negatives(i, ids) {
            any = true;
            ln += weights[[i, j]] * pairwise_loss(dist.get(i, j), false, cfg);
        }
        if !any {
            return Err(Error::NoNegatives { anchor: i });
        }
    }
    Ok((lp / n as f64, ln / n as f64))
}

fn check_logits(logits: ArrayView2<'_, f64>, class_ids: &[usize]) -> Result<()> {
    let (rows, classes) = logits.dim();
    if rows != class_ids.len() {
        return Err(Error::Shape(format!("{rows} logit rows for {} labels", class_ids.len())));
    }
    if classes < 2 {
        return Err(Error::Shape(format!("softmax needs at least 2 classes, got {classes}")));
    }
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= classes) {
        return Err(Error::Shape(format!("class id {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Row-wise log-softmax with max subtraction.
fn log_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let top = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn smoothed_target(k: usize, label: usize, classes: usize, epsilon: f64) -> f64 {
    let uniform = epsilon / classes as f64;
    if k == label {
        1.0 - epsilon + uniform
    } else {
        uniform
    }
}

/// Mean label-smoothed cross-entropy over the rows of `logits`.
pub fn softmax_ls(logits: ArrayView2<'_, f64>, class_ids: &[usize], epsilon: f64) -> Result<f64> {
    check_logits(logits, class_ids)?;
    let classes = logits.ncols();
    let log_p = log_softmax(logits);
    let total: f64 = log_p
        .axis_iter(Axis(0))
        .zip(class_ids)
        .map(|(row, &y)| {
            -row.iter()
                .enumerate()
                .map(|(k, lp)| smoothed_target(k, y, classes, epsilon) * lp)
                .sum::<f64>()
        })
        .sum();
    Ok(total / class_ids.len() as f64)
}

/// Gradient of [`softmax_ls`]: `(p - q) / B` per row.
pub fn softmax_ls_grad(logits: ArrayView2<'_, f64>, class_ids: &[usize], epsilon: f64) -> Result<Array2<f64>> {
    check_logits(logits, class_ids)?;
    let (rows, classes) = logits.dim();
    let mut grad = log_softmax(logits);
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(class_ids) {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (v.exp() - smoothed_target(k, y, classes, epsilon)) / rows as f64;
        }
    }
    Ok(grad)
}

/// Combined loss with all of its components.
pub fn m_loss(batch: &EmbeddingBatch, logits: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let (lp, ln) = lin_components(batch, cfg)?;
    let sm = softmax_ls(logits, batch.class_ids(), cfg.label_smoothing)?;
    Ok(LossBreakdown::compose(lp, ln, sm, cfg.lin_weight))
}

/// Gradient of `Lin` with respect to the embedding rows.
///
/// Hinges are differentiated with a zero subgradient on their boundary.
/// With `detach_weights` the normalized negative weights act as constants;
/// otherwise their dependence on `d_ij` is included.
pub fn lin_loss_grad(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Array2<f64>> {
    let n = batch.len();
    let feats = batch.features();
    let ids = batch.class_ids();
    let dist = pairwise_distances(batch);
    let inv_b = 1.0 / n as f64;

    // coeff[[i, j]] = dLin / d(d_ij) for the terms owned by anchor i
    let mut coeff = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let pos: Vec<usize> = positives(i, ids).collect();
        if pos.is_empty() {
            return Err(Error::NoPositives { anchor: i });
        }
        let scale = inv_b / pos.len() as f64;
        for &j in &pos {
            if dist.get(i, j) > cfg.radius {
                coeff[[i, j]] += scale;
            }
        }

        let weights = anchor_negative_weights(i, ids, &dist, cfg)?;
        let ln_i: f64 = weights
            .iter()
            .map(|&(j, w)| w * pairwise_loss(dist.get(i, j), false, cfg))
            .sum();
        for &(j, w) in &weights {
            let d = dist.get(i, j);
            let hinge_slope = if d < MAX_DISTANCE { -1.0 } else { 0.0 };
            let mut g = w * hinge_slope;
            if !cfg.detach_weights {
                // dLn/dd_j = w_j h'_j - (1 + T) w_j (h_j - Ln)
                let h = pairwise_loss(d, false, cfg);
                g -= (1.0 + cfg.temperature) * w * (h - ln_i);
            }
            coeff[[i, j]] += inv_b * g;
        }
    }

    let dim = batch.dim();
    let mut grad = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        for j in 0..n {
            let c = coeff[[i, j]];
            if c == 0.0 {
                continue;
            }
            let d = dist.get(i, j);
            if d < DEGENERATE_DISTANCE {
                return Err(Error::DegenerateDistance { i, j, distance: d });
            }
            for k in 0..dim {
                let u = c * (feats[[i, k]] - feats[[j, k]]) / d;
                grad[[i, k]] += u;
                grad[[j, k]] -= u;
            }
        }
    }
    Ok(grad)
}

/// Analytic gradient of [`m_loss`].
pub fn m_loss_grad(batch: &EmbeddingBatch, logits: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<GradPacket> {
    let d_logits = softmax_ls_grad(logits, batch.class_ids(), cfg.label_smoothing)?;
    let d_embeddings = if cfg.lin_weight == 0.0 {
        Array2::zeros((batch.len(), batch.dim()))
    } else {
        lin_loss_grad(batch, cfg)? * cfg.lin_weight
    };
    Ok(GradPacket { d_embeddings, d_logits })
}
