//! SGD training loop: sampler -> model -> losses -> update.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::{self, GradPacket, LossBreakdown, LossConfig};
use crate::model::{HeadOptions, Mode, ModelParams, ParamGrads, TensorKind};
use crate::sampler::PkSampler;
use crate::synthdata::SyntheticDataset;

/// Which terms of the combined loss drive the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// `softmax_ls + w * Lin`
    #[default]
    Combined,
    /// `Lin` alone
    LinOnly,
    /// `softmax_ls` alone
    SoftmaxOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::LinOnly, TrainMode::SoftmaxOnly, TrainMode::Combined];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Combined => "combined",
            TrainMode::LinOnly => "lin_only",
            TrainMode::SoftmaxOnly => "softmax_only",
        }
    }

    /// Weights applied to (softmax, Lin) in the objective.
    fn term_weights(self, lin_weight: f64) -> (f64, f64) {
        match self {
            TrainMode::Combined => (1.0, lin_weight),
            TrainMode::LinOnly => (0.0, 1.0),
            TrainMode::SoftmaxOnly => (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub p: usize,
    pub k: usize,
    pub mode: TrainMode,
    pub head: HeadOptions,
    /// Hidden layer widths of the encoder.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            warmup_epochs: 10,
            total_epochs: 120,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossConfig::default(),
            p: 16,
            k: 4,
            mode: TrainMode::Combined,
            head: HeadOptions::default(),
            hidden: vec![64],
            embedding_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be a finite non-negative number"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config("warmup_epochs", "must not exceed total_epochs"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be a finite non-negative number"));
        }
        if self.p < 2 {
            return Err(Error::config("p", "need at least 2 identities per batch"));
        }
        if self.k < 2 {
            return Err(Error::config("k", "need at least 2 samples per identity"));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        sizes
    }
}

/// Linear warmup to `base_lr`, then ×0.1 at 60% and again at 85% of training.
pub fn warmup_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let milestones = [cfg.total_epochs * 60 / 100, cfg.total_epochs * 85 / 100];
    let decays = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
    cfg.base_lr * 0.1f64.powi(decays)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub m_loss: f64,
    pub lp: f64,
    pub ln: f64,
    pub softmax_ls: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
            .collect()
    }
}

/// SGD with momentum, L2 weight decay folded into the gradient. The BN scale
/// is not decayed.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &mut ModelParams, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.trainable_mut().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        for (((kind, theta), grad), vel) in params
            .trainable_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.iter_mut())
        {
            let decay = if kind == TensorKind::BnScale { 0.0 } else { self.weight_decay };
            for ((t, &g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + decay * *t;
                *t -= lr * *v;
            }
        }
    }
}

/// Loss breakdown and parameter gradients of the mode's objective on one
/// batch, without touching the parameters.
pub fn objective_grad(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(crate::model::ForwardTrace, LossBreakdown, ParamGrads)> {
    let trace = params.forward(inputs, Mode::Train, &cfg.head)?;
    let batch = EmbeddingBatch::without_cameras(trace.metric_features().clone(), labels.to_vec())?;
    let breakdown = losses::m_loss(&batch, trace.logits.view(), &cfg.loss)?;
    if let Some(component) = breakdown.non_finite() {
        return Err(Error::NonFiniteLoss { component });
    }

    let (softmax_w, lin_w) = cfg.mode.term_weights(cfg.loss.lin_weight);
    let d_logits = if softmax_w == 0.0 {
        Array2::zeros(trace.logits.dim())
    } else {
        losses::softmax_ls_grad(trace.logits.view(), labels, cfg.loss.label_smoothing)? * softmax_w
    };
    let d_embeddings = if lin_w == 0.0 {
        Array2::zeros(batch.features().dim())
    } else {
        losses::lin_loss_grad(&batch, &cfg.loss)? * lin_w
    };
    let grads = params.backward(&trace, &GradPacket { d_embeddings, d_logits })?;
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss { component: "gradient" });
    }
    Ok((trace, breakdown, grads))
}

/// One SGD update. Returns the loss measured before the update.
pub fn train_step(
    params: &mut ModelParams,
    optimizer: &mut Sgd,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let (trace, breakdown, grads) = objective_grad(params, inputs, labels, cfg)?;
    params.update_running_stats(&trace);
    optimizer.step(params, &grads, lr);
    Ok(breakdown)
}

/// Trains a fresh model on `dataset`. `P` is capped at the number of
/// identities present.
pub fn fit(dataset: &SyntheticDataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let n_classes = dataset
        .class_ids
        .iter()
        .max()
        .map_or(dataset.n_classes, |&m| dataset.n_classes.max(m + 1));
    let mut params = ModelParams::init(&cfg.layer_sizes(dataset.dim()), n_classes, cfg.seed)?;
    let mut log = TrainLog::default();
    if cfg.total_epochs == 0 {
        return Ok((params, log));
    }

    let distinct = {
        let mut ids = dataset.class_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let mut sampler = PkSampler::new(&dataset.class_ids, cfg.p.min(distinct), cfg.k, cfg.seed.wrapping_add(0x5851_f42d_4c95_7f2d))?;
    let mut optimizer = Sgd::new(&mut params, cfg.momentum, cfg.weight_decay);

    for epoch in 0..cfg.total_epochs {
        let lr = warmup_lr(epoch, cfg);
        let plans = sampler.next_epoch();
        let mut sum = LossBreakdown::default();
        for plan in &plans {
            let inputs = dataset.features.select(Axis(0), &plan.sample_indices);
            let labels: Vec<usize> = plan.sample_indices.iter().map(|&i| dataset.class_ids[i]).collect();
            let b = train_step(&mut params, &mut optimizer, inputs.view(), &labels, cfg, lr)?;
            sum.lp += b.lp;
            sum.ln += b.ln;
            sum.softmax_ls += b.softmax_ls;
            sum.m_loss += b.m_loss;
        }
        let n = plans.len() as f64;
        log.records.push(EpochRecord {
            epoch,
            lr,
            m_loss: sum.m_loss / n,
            lp: sum.lp / n,
            ln: sum.ln / n,
            softmax_ls: sum.softmax_ls / n,
        });
    }
    Ok((params, log))
}
