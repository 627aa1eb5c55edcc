use ndarray::{array, Array2};

use metric_forge_core::losses::{self, GradPacket};
use metric_forge_core::model::{Mode, ModelParams};
use metric_forge_core::synthdata::{self, SynthSpec};
use metric_forge_core::trainer::{self, Sgd, TrainConfig, TrainMode};

fn four_points() -> (Array2<f64>, Vec<usize>) {
    (array![[1.0, 0.0], [0.9, 0.2], [0.0, 1.0], [0.2, 0.9]], vec![0, 0, 1, 1])
}

fn objective(params: &ModelParams, x: &Array2<f64>, y: &[usize], cfg: &TrainConfig) -> f64 {
    let (_, b, _) = trainer::objective_grad(params, x.view(), y, cfg).unwrap();
    match cfg.mode {
        TrainMode::Combined => b.m_loss,
        TrainMode::LinOnly => b.lin,
        TrainMode::SoftmaxOnly => b.softmax_ls,
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (x, y) = four_points();
    let cfg = TrainConfig::default();
    let mut params = ModelParams::init(&cfg.layer_sizes(2), 2, 0).unwrap();
    let before = params.clone();
    let mut opt = Sgd::new(&mut params, cfg.momentum, cfg.weight_decay);
    for _ in 0..3 {
        trainer::train_step(&mut params, &mut opt, x.view(), &y, &cfg, 0.0).unwrap();
    }
    assert_eq!(params.encoder, before.encoder);
    assert_eq!(params.bn_scale, before.bn_scale);
    assert_eq!(params.fc_weight, before.fc_weight);
}

#[test]
fn softmax_only_ignores_lin() {
    let (x, y) = four_points();
    let cfg = TrainConfig { mode: TrainMode::SoftmaxOnly, ..Default::default() };
    let params = ModelParams::init(&cfg.layer_sizes(2), 2, 1).unwrap();
    let (trace, _, grads) = trainer::objective_grad(&params, x.view(), &y, &cfg).unwrap();
    let d_logits = losses::softmax_ls_grad(trace.logits.view(), &y, cfg.loss.label_smoothing).unwrap();
    let softmax_alone = params
        .backward(&trace, &GradPacket { d_embeddings: Array2::zeros((4, cfg.embedding_dim)), d_logits })
        .unwrap();
    assert_eq!(grads, softmax_alone);

    let lin_cfg = TrainConfig { mode: TrainMode::LinOnly, ..Default::default() };
    let (_, _, lin_grads) = trainer::objective_grad(&params, x.view(), &y, &lin_cfg).unwrap();
    assert!(lin_grads.fc_weight.iter().all(|&v| v == 0.0));
}

#[test]
fn one_small_step_descends() {
    let (x, y) = four_points();
    for mode in TrainMode::ALL {
        let cfg = TrainConfig { mode, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let mut params = ModelParams::init(&cfg.layer_sizes(2), 2, 2).unwrap();
        let before = objective(&params, &x, &y, &cfg);
        let mut opt = Sgd::new(&mut params, cfg.momentum, cfg.weight_decay);
        trainer::train_step(&mut params, &mut opt, x.view(), &y, &cfg, 1e-3).unwrap();
        let after = objective(&params, &x, &y, &cfg);
        assert!(after < before, "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn repeated_batch_is_non_increasing() {
    let data = synthdata::generate(&SynthSpec { n_classes: 4, per_class: 6, ..Default::default() }).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    let y: Vec<usize> = rows.iter().map(|&i| data.class_ids[i]).collect();
    let cfg = TrainConfig::default();
    let mut params = ModelParams::init(&cfg.layer_sizes(data.dim()), data.n_classes, 3).unwrap();
    let mut opt = Sgd::new(&mut params, cfg.momentum, cfg.weight_decay);
    let mut prev = f64::INFINITY;
    for _ in 0..10 {
        let b = trainer::train_step(&mut params, &mut opt, data.features.view(), &y, &cfg, 1e-4).unwrap();
        assert!(b.m_loss <= prev + 1e-6, "{} after {}", b.m_loss, prev);
        prev = b.m_loss;
    }
}

#[test]
fn fit_is_deterministic() {
    let data = synthdata::generate(&SynthSpec { n_classes: 6, per_class: 8, ..Default::default() }).unwrap();
    let cfg = TrainConfig { total_epochs: 8, warmup_epochs: 2, p: 4, seed: 11, ..Default::default() };
    let (a, log_a) = trainer::fit(&data, &cfg).unwrap();
    let (b, log_b) = trainer::fit(&data, &cfg).unwrap();
    assert_eq!(log_a.to_jsonl(), log_b.to_jsonl());
    assert_eq!(a.to_checkpoint_string(), b.to_checkpoint_string());
    assert_eq!(log_a.records.len(), 8);

    let (c, _) = trainer::fit(&data, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.to_checkpoint_string(), c.to_checkpoint_string());
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = synthdata::generate(&SynthSpec { n_classes: 3, per_class: 4, ..Default::default() }).unwrap();
    let cfg = TrainConfig { total_epochs: 0, warmup_epochs: 0, ..Default::default() };
    let (params, log) = trainer::fit(&data, &cfg).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(params, ModelParams::init(&cfg.layer_sizes(data.dim()), 3, cfg.seed).unwrap());
}

#[test]
fn training_reduces_loss() {
    let data = synthdata::generate(&SynthSpec::default()).unwrap();
    let (params, log) = trainer::fit(&data, &TrainConfig::default()).unwrap();
    let first = log.records.first().unwrap().m_loss;
    let last = log.records.last().unwrap().m_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(log.records.iter().all(|r| r.m_loss.is_finite() && r.lr > 0.0));
    assert!(params.bn_running_var.iter().all(|&v| v > 0.0));
    let t = params.forward(data.features.view(), Mode::Infer, &Default::default()).unwrap();
    assert!(t.post_bn.iter().all(|v| v.is_finite()));
}
