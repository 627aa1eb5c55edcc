//! Central finite-difference verification of the analytic gradients, at
//! the loss level (embeddings and logits) and through the whole model.
//!
//! With detached negative weights the analytic gradient is that of the
//! surrogate in which the normalized weights are frozen at the evaluation
//! point, so those trials difference the surrogate. Trials with live weights
//! difference the loss itself.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::{pairwise_distances_of, EmbeddingBatch};
use crate::error::Result;
use crate::losses::{self, LossConfig, MAX_DISTANCE};
use crate::model::{ClassifierInput, FeatureTap, HeadOptions, Mode, ModelParams};

/// Denominator floor of the relative error, so that gradients which are
/// zero up to round-off compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    /// Coordinates whose pairs sit this close to a hinge boundary are skipped.
    pub boundary_band: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            step: 1e-5,
            boundary_band: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub batch: usize,
    pub dim: usize,
    pub classes: usize,
    pub radius: f64,
    pub temperature: f64,
    pub lin_weight: f64,
    pub detach_weights: bool,
    pub feature_tap: FeatureTap,
    pub classifier_input: ClassifierInput,
    pub embedding_error: f64,
    pub logit_error: f64,
    pub parameter_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl TrialReport {
    pub fn max_error(&self) -> f64 {
        self.embedding_error.max(self.logit_error).max(self.parameter_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub trials: Vec<TrialReport>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Smallest distance from any pair to its hinge boundary, and the hinge
/// activity pattern.
fn hinge_state(features: ArrayView2<'_, f64>, labels: &[usize], cfg: &LossConfig) -> (f64, Vec<bool>) {
    let dist = pairwise_distances_of(features);
    let n = labels.len();
    let mut margin = f64::INFINITY;
    let mut active = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist.get(i, j);
            let boundary = if labels[i] == labels[j] { cfg.radius } else { MAX_DISTANCE };
            margin = margin.min((d - boundary).abs());
            active.push(if labels[i] == labels[j] { d > cfg.radius } else { d < MAX_DISTANCE });
        }
    }
    (margin, active)
}

struct Objective<'a> {
    labels: &'a [usize],
    cfg: &'a LossConfig,
    frozen: Option<Array2<f64>>,
}

impl Objective<'_> {
    fn new<'a>(features: ArrayView2<'_, f64>, labels: &'a [usize], cfg: &'a LossConfig) -> Result<Objective<'a>> {
        let frozen = if cfg.detach_weights {
            let batch = EmbeddingBatch::without_cameras(features.to_owned(), labels.to_vec())?;
            let dist = crate::embedding::pairwise_distances(&batch);
            Some(losses::normalized_negative_weights(&batch, &dist, cfg)?)
        } else {
            None
        };
        Ok(Objective { labels, cfg, frozen })
    }

    fn lin(&self, features: ArrayView2<'_, f64>) -> Result<f64> {
        let batch = EmbeddingBatch::without_cameras(features.to_owned(), self.labels.to_vec())?;
        match &self.frozen {
            Some(w) => {
                let (lp, ln) = losses::lin_loss_with_weights(&batch, self.cfg, w.view())?;
                Ok(lp + ln)
            }
            None => losses::lin_loss(&batch, self.cfg),
        }
    }

    fn total(&self, features: ArrayView2<'_, f64>, logits: ArrayView2<'_, f64>) -> Result<f64> {
        let sm = losses::softmax_ls(logits, self.labels, self.cfg.label_smoothing)?;
        Ok(sm + self.cfg.lin_weight * self.lin(features)?)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

#[derive(Default)]
struct Tally {
    max: f64,
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max = self.max.max(relative_error(analytic, numeric));
        self.checked += 1;
    }
}

/// Runs one randomized trial. Trial parameters are drawn from the seed.
pub fn run_trial(opts: &GradcheckOptions, trial: usize) -> Result<TrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64));
    let batch = pick(&mut rng, &[8usize, 16]);
    let dim = pick(&mut rng, &[4usize, 32]);
    let classes = pick(&mut rng, &[2usize, 4]);
    let cfg = LossConfig {
        radius: pick(&mut rng, &[0.6, 0.7, 0.8]),
        temperature: pick(&mut rng, &[0.5, 1.0, 5.0]),
        lin_weight: pick(&mut rng, &[0.2, 0.4, 0.6]),
        label_smoothing: pick(&mut rng, &[0.0, 0.1]),
        detach_weights: trial.is_multiple_of(2),
    };
    let head = HeadOptions {
        feature_tap: pick(&mut rng, &[FeatureTap::PostBn, FeatureTap::PreBn]),
        classifier_input: pick(&mut rng, &[ClassifierInput::PostBn, ClassifierInput::PostBnNormalized]),
    };
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let h = opts.step;

    // loss level: embeddings and logits
    let feats = {
        let raw = gaussian(&mut rng, batch, dim, 1.0);
        crate::embedding::normalize_rows(raw.view())?.0
    };
    let logits = gaussian(&mut rng, batch, classes, 2.0);
    let emb_batch = EmbeddingBatch::without_cameras(feats.clone(), labels.clone())?;
    let grad = losses::m_loss_grad(&emb_batch, logits.view(), &cfg)?;
    let objective = Objective::new(feats.view(), &labels, &cfg)?;

    let mut emb = Tally::default();
    for i in 0..batch {
        for c in 0..dim {
            let mut plus = feats.clone();
            plus[[i, c]] += h;
            let mut minus = feats.clone();
            minus[[i, c]] -= h;
            let (m0, s0) = hinge_state(feats.view(), &labels, &cfg);
            let (_, sp) = hinge_state(plus.view(), &labels, &cfg);
            let (_, sm) = hinge_state(minus.view(), &labels, &cfg);
            if m0 < opts.boundary_band || sp != s0 || sm != s0 {
                emb.skipped += 1;
                continue;
            }
            let numeric = (objective.total(plus.view(), logits.view())? - objective.total(minus.view(), logits.view())?) / (2.0 * h);
            emb.record(grad.d_embeddings[[i, c]], numeric);
        }
    }
    let mut lg = Tally::default();
    for i in 0..batch {
        for c in 0..classes {
            let mut plus = logits.clone();
            plus[[i, c]] += h;
            let mut minus = logits.clone();
            minus[[i, c]] -= h;
            let numeric = (objective.total(feats.view(), plus.view())? - objective.total(feats.view(), minus.view())?) / (2.0 * h);
            lg.record(grad.d_logits[[i, c]], numeric);
        }
    }

    // model level: every trainable tensor
    let input_dim = 6;
    let mut params = ModelParams::init(&[input_dim, 8, dim], classes, rng.random())?;
    params.bn_scale.mapv_inplace(|_| rng.random_range(0.5..1.5));
    // nonzero biases keep a sample with every hidden unit dead off the origin
    for layer in &mut params.encoder {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    // redraw until every sample keeps an active hidden unit; a fully dead row
    // maps to the bias vector and can collapse onto another such row
    let (inputs, trace) = loop {
        let inputs = gaussian(&mut rng, batch, input_dim, 1.0);
        let trace = params.forward(inputs.view(), Mode::Train, &head)?;
        let alive = trace.hidden_pre.iter().all(|z| z.rows().into_iter().all(|r| r.iter().any(|&v| v > 0.0)));
        if alive {
            break (inputs, trace);
        }
    };
    let model_objective = Objective::new(trace.metric_features().view(), &labels, &cfg)?;
    let metric_batch = EmbeddingBatch::without_cameras(trace.metric_features().clone(), labels.clone())?;
    let model_grad = params.backward(&trace, &losses::m_loss_grad(&metric_batch, trace.logits.view(), &cfg)?)?;
    let analytic: Vec<Vec<f64>> = model_grad.tensors().into_iter().map(<[f64]>::to_vec).collect();

    let state = |p: &ModelParams| -> Result<(f64, Vec<bool>, f64)> {
        let t = p.forward(inputs.view(), Mode::Train, &head)?;
        let (margin, mut sig) = hinge_state(t.metric_features().view(), &labels, &cfg);
        for z in &t.hidden_pre {
            sig.extend(z.iter().map(|&v| v > 0.0));
        }
        let loss = model_objective.total(t.metric_features().view(), t.logits.view())?;
        Ok((margin, sig, loss))
    };
    let (m0, s0, _) = state(&params)?;
    let mut par = Tally::default();
    for (t, grad) in analytic.iter().enumerate() {
        for (e, &a) in grad.iter().enumerate() {
            let mut plus = params.clone();
            plus.trainable_mut()[t].1[e] += h;
            let mut minus = params.clone();
            minus.trainable_mut()[t].1[e] -= h;
            let (_, sp, lp) = state(&plus)?;
            let (_, sm, lm) = state(&minus)?;
            if m0 < opts.boundary_band || sp != s0 || sm != s0 {
                par.skipped += 1;
                continue;
            }
            par.record(a, (lp - lm) / (2.0 * h));
        }
    }

    Ok(TrialReport {
        trial,
        batch,
        dim,
        classes,
        radius: cfg.radius,
        temperature: cfg.temperature,
        lin_weight: cfg.lin_weight,
        detach_weights: cfg.detach_weights,
        feature_tap: head.feature_tap,
        classifier_input: head.classifier_input,
        embedding_error: emb.max,
        logit_error: lg.max,
        parameter_error: par.max,
        checked: emb.checked + lg.checked + par.checked,
        skipped: emb.skipped + par.skipped,
    })
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    let trials = (0..opts.trials).map(|t| run_trial(opts, t)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckSummary {
        max_rel_error: trials.iter().map(TrialReport::max_error).fold(0.0, f64::max),
        checked: trials.iter().map(|t| t.checked).sum(),
        skipped: trials.iter().map(|t| t.skipped).sum(),
        tolerance: opts.tolerance,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn a_few_trials_pass() {
        let summary = run(&GradcheckOptions { trials: 4, seed: 3, ..Default::default() }).unwrap();
        assert!(summary.passed(), "max rel error {}", summary.max_rel_error);
        assert!(summary.checked > 0);
    }
}
