//! Toy-scale BN-neck network: an MLP encoder standing in for a backbone,
//! a batch-norm layer with a learned scale and no shift, and a linear
//! classifier without bias.
//!
//! ```text
//! inputs -> [Linear -> ReLU]* -> Linear -> pre_bn -> BN(scale only) -> post_bn -> FC -> logits
//!                                                                      \-> L2 normalize -> ranking loss / retrieval
//! ```

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::normalize_rows;
use crate::error::{Error, Result};
use crate::losses::GradPacket;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const CHECKPOINT_MAGIC: &str = "metric-forge-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Which features the ranking loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    PostBn,
    PreBn,
}

/// Which features the classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    #[default]
    PostBn,
    PostBnNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HeadOptions {
    pub feature_tap: FeatureTap,
    pub classifier_input: ClassifierInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<DenseLayer>,
    pub bn_scale: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    /// `classes × embedding_dim`
    pub fc_weight: Array2<f64>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Gradients shaped like the trainable part of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: Vec<DenseLayer>,
    pub bn_scale: Array1<f64>,
    pub fc_weight: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    BnScale,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub options: HeadOptions,
    /// Input to every encoder layer; `layer_inputs[0]` is the raw batch.
    pub layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden (ReLU) layer.
    pub hidden_pre: Vec<Array2<f64>>,
    pub pre_bn: Array2<f64>,
    pub bn_mean: Array1<f64>,
    /// Biased variance used for normalization.
    pub bn_var: Array1<f64>,
    pub bn_inv_std: Array1<f64>,
    pub x_hat: Array2<f64>,
    pub post_bn: Array2<f64>,
    pub post_bn_norms: Vec<f64>,
    pub post_bn_normalized: Array2<f64>,
    pub pre_bn_norms: Option<Vec<f64>>,
    pub pre_bn_normalized: Option<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.pre_bn.nrows()
    }

    /// Unit-norm features consumed by the ranking loss.
    pub fn metric_features(&self) -> &Array2<f64> {
        match self.options.feature_tap {
            FeatureTap::PostBn => &self.post_bn_normalized,
            FeatureTap::PreBn => self.pre_bn_normalized.as_ref().expect("pre-BN tap computed in forward"),
        }
    }

    fn classifier_input(&self) -> &Array2<f64> {
        match self.options.classifier_input {
            ClassifierInput::PostBn => &self.post_bn,
            ClassifierInput::PostBnNormalized => &self.post_bn_normalized,
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Array2<f64> {
    let bound = glorot_bound(fan_in, fan_out);
    Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound))
}

/// Half-width of the uniform initialization interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Backward pass of row-wise L2 normalization.
fn normalize_backward(unit: &Array2<f64>, norms: &[f64], upstream: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = upstream.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let u = unit.row(i);
        let proj = u.dot(&row);
        row.zip_mut_with(&u, |g, &ui| *g -= ui * proj);
        row.mapv_inplace(|g| g / norms[i]);
    }
    out
}

impl ModelParams {
    /// Seeded initialization. `layer_sizes` runs from the input dimension to
    /// the embedding dimension, e.g. `[16, 64, 32]`.
    pub fn init(layer_sizes: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes", "need at least an input and an output size"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes", "every layer size must be >= 1"));
        }
        if n_classes == 0 {
            return Err(Error::config("n_classes", "must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = layer_sizes
            .windows(2)
            .map(|w| DenseLayer {
                weight: glorot(&mut rng, w[1], w[0]),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let dim = *layer_sizes.last().unwrap();
        let fc_weight = glorot(&mut rng, n_classes, dim);
        Ok(Self {
            encoder,
            bn_scale: Array1::ones(dim),
            bn_running_mean: Array1::zeros(dim),
            bn_running_var: Array1::ones(dim),
            fc_weight,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.encoder[0].weight.ncols()];
        sizes.extend(self.encoder.iter().map(|l| l.weight.nrows()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].weight.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.bn_scale.len()
    }

    pub fn n_classes(&self) -> usize {
        self.fc_weight.nrows()
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>, mode: Mode, options: &HeadOptions) -> Result<ForwardTrace> {
        let batch = inputs.nrows();
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if mode == Mode::Train && batch < 2 {
            return Err(Error::BatchTooSmall { size: batch });
        }
        if batch == 0 {
            return Err(Error::BatchTooSmall { size: 0 });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBatch("non-finite input".into()));
        }

        let mut layer_inputs = Vec::with_capacity(self.encoder.len());
        let mut hidden_pre = Vec::with_capacity(self.encoder.len().saturating_sub(1));
        let mut act = inputs.to_owned();
        let last = self.encoder.len() - 1;
        for (idx, layer) in self.encoder.iter().enumerate() {
            let z = act.dot(&layer.weight.t()) + &layer.bias;
            layer_inputs.push(act);
            if idx == last {
                act = z;
            } else {
                act = z.mapv(|v| v.max(0.0));
                hidden_pre.push(z);
            }
        }
        let pre_bn = act;

        let (bn_mean, bn_var) = match mode {
            Mode::Train => {
                let mean = pre_bn.mean_axis(Axis(0)).unwrap();
                let var = pre_bn.var_axis(Axis(0), 0.0);
                (mean, var)
            }
            Mode::Infer => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let bn_inv_std = bn_var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
        let x_hat = (&pre_bn - &bn_mean) * &bn_inv_std;
        let post_bn = &x_hat * &self.bn_scale;
        let (post_bn_normalized, post_bn_norms) = normalize_rows(post_bn.view())?;
        let (pre_bn_normalized, pre_bn_norms) = match options.feature_tap {
            FeatureTap::PreBn => {
                let (u, n) = normalize_rows(pre_bn.view())?;
                (Some(u), Some(n))
            }
            FeatureTap::PostBn => (None, None),
        };

        let mut trace = ForwardTrace {
            mode,
            options: *options,
            layer_inputs,
            hidden_pre,
            pre_bn,
            bn_mean,
            bn_var,
            bn_inv_std,
            x_hat,
            post_bn,
            post_bn_norms,
            post_bn_normalized,
            pre_bn_norms,
            pre_bn_normalized,
            logits: Array2::zeros((0, 0)),
        };
        trace.logits = trace.classifier_input().dot(&self.fc_weight.t());
        Ok(trace)
    }

    /// Unit-norm post-BN embeddings in inference mode.
    pub fn embed(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(inputs, Mode::Infer, &HeadOptions::default())?.post_bn_normalized)
    }

    /// Folds a train-mode batch into the running statistics (unbiased variance).
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        let n = trace.batch_size() as f64;
        let m = self.bn_momentum;
        let unbiased = trace.bn_var.mapv(|v| v * n / (n - 1.0));
        self.bn_running_mean = &self.bn_running_mean * (1.0 - m) + &trace.bn_mean * m;
        self.bn_running_var = &self.bn_running_var * (1.0 - m) + unbiased * m;
    }

    /// Backpropagates loss gradients on the metric features and the logits
    /// to every trainable tensor.
    pub fn backward(&self, trace: &ForwardTrace, grad: &GradPacket) -> Result<ParamGrads> {
        let batch = trace.batch_size();
        let dim = self.embedding_dim();
        if grad.d_embeddings.dim() != (batch, dim) {
            return Err(Error::Shape(format!(
                "d_embeddings {:?}, expected {:?}",
                grad.d_embeddings.dim(),
                (batch, dim)
            )));
        }
        if grad.d_logits.dim() != trace.logits.dim() {
            return Err(Error::Shape(format!(
                "d_logits {:?}, expected {:?}",
                grad.d_logits.dim(),
                trace.logits.dim()
            )));
        }

        let fc_weight = grad.d_logits.t().dot(trace.classifier_input());
        let d_cls = grad.d_logits.dot(&self.fc_weight);
        let mut d_post = match trace.options.classifier_input {
            ClassifierInput::PostBn => d_cls,
            ClassifierInput::PostBnNormalized => {
                normalize_backward(&trace.post_bn_normalized, &trace.post_bn_norms, d_cls.view())
            }
        };
        let mut d_pre = Array2::<f64>::zeros((batch, dim));
        match trace.options.feature_tap {
            FeatureTap::PostBn => {
                d_post += &normalize_backward(&trace.post_bn_normalized, &trace.post_bn_norms, grad.d_embeddings.view());
            }
            FeatureTap::PreBn => {
                let unit = trace.pre_bn_normalized.as_ref().expect("pre-BN tap computed in forward");
                let norms = trace.pre_bn_norms.as_ref().expect("pre-BN tap computed in forward");
                d_pre += &normalize_backward(unit, norms, grad.d_embeddings.view());
            }
        }

        let bn_scale = (&d_post * &trace.x_hat).sum_axis(Axis(0));
        let d_xhat = &d_post * &self.bn_scale;
        match trace.mode {
            Mode::Train => {
                let n = batch as f64;
                let sum_dxhat = d_xhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&d_xhat * &trace.x_hat).sum_axis(Axis(0));
                let centered = &d_xhat * n - &sum_dxhat - &trace.x_hat * &sum_dxhat_xhat;
                d_pre += &(centered * &trace.bn_inv_std / n);
            }
            Mode::Infer => d_pre += &(&d_xhat * &trace.bn_inv_std),
        }

        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut upstream = d_pre;
        for (idx, layer) in self.encoder.iter().enumerate().rev() {
            let dz = if idx + 1 == self.encoder.len() {
                upstream
            } else {
                let mut dz = upstream;
                dz.zip_mut_with(&trace.hidden_pre[idx], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz
            };
            let input = &trace.layer_inputs[idx];
            encoder.push(DenseLayer {
                weight: dz.t().dot(input),
                bias: dz.sum_axis(Axis(0)),
            });
            upstream = dz.dot(&layer.weight);
        }
        encoder.reverse();
        Ok(ParamGrads {
            encoder,
            bn_scale,
            fc_weight,
        })
    }

    /// Trainable tensors in a fixed order, as flat mutable slices.
    pub fn trainable_mut(&mut self) -> Vec<(TensorKind, &mut [f64])> {
        let mut out: Vec<(TensorKind, &mut [f64])> = Vec::new();
        for layer in &mut self.encoder {
            out.push((TensorKind::Weight, layer.weight.as_slice_mut().expect("standard layout")));
            out.push((TensorKind::Bias, layer.bias.as_slice_mut().expect("standard layout")));
        }
        out.push((TensorKind::BnScale, self.bn_scale.as_slice_mut().expect("standard layout")));
        out.push((TensorKind::Weight, self.fc_weight.as_slice_mut().expect("standard layout")));
        out
    }

    /// Every tensor with its checkpoint name and shape.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), layer.weight.shape().to_vec(), layer.weight.iter().copied().collect()));
            out.push((format!("encoder.{i}.bias"), layer.bias.shape().to_vec(), layer.bias.to_vec()));
        }
        out.push(("bn.scale".into(), vec![self.bn_scale.len()], self.bn_scale.to_vec()));
        out.push(("bn.running_mean".into(), vec![self.bn_running_mean.len()], self.bn_running_mean.to_vec()));
        out.push(("bn.running_var".into(), vec![self.bn_running_var.len()], self.bn_running_var.to_vec()));
        out.push(("fc.weight".into(), self.fc_weight.shape().to_vec(), self.fc_weight.iter().copied().collect()));
        out
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let sizes: Vec<String> = self.layer_sizes().iter().map(|v| v.to_string()).collect();
        writeln!(s, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "layer_sizes {}", sizes.join(" ")).unwrap();
        writeln!(s, "embedding_dim {}", self.embedding_dim()).unwrap();
        writeln!(s, "classes {}", self.n_classes()).unwrap();
        writeln!(s, "bn_eps {:.16e}", self.bn_eps).unwrap();
        writeln!(s, "bn_momentum {:.16e}", self.bn_momentum).unwrap();
        for (name, shape, values) in self.named_tensors() {
            let dims: Vec<String> = shape.iter().map(|v| v.to_string()).collect();
            writeln!(s, "tensor {name} {}", dims.join(" ")).unwrap();
            let row_len = *shape.last().unwrap();
            for row in values.chunks(row_len) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(s, "{}", cells.join(" ")).unwrap();
            }
        }
        writeln!(s, "end").unwrap();
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(0, format!("unexpected end of checkpoint, expected {what}")));

        let (ln, header) = next("header")?;
        if header != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
            return Err(Error::parse(ln, format!("unrecognized checkpoint header `{header}`")));
        }
        let field = |line: (usize, &str), key: &str| -> Result<Vec<String>> {
            let mut parts = line.1.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::parse(line.0, format!("expected `{key}`")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let num = |ln: usize, s: &str| -> Result<f64> { s.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad number `{s}`"))) };
        let int = |ln: usize, s: &str| -> Result<usize> { s.parse::<usize>().map_err(|_| Error::parse(ln, format!("bad integer `{s}`"))) };

        let l = next("layer_sizes")?;
        let layer_sizes = field(l, "layer_sizes")?.iter().map(|s| int(l.0, s)).collect::<Result<Vec<_>>>()?;
        let l = next("embedding_dim")?;
        let dim = int(l.0, field(l, "embedding_dim")?.first().map(String::as_str).unwrap_or(""))?;
        let l = next("classes")?;
        let classes = int(l.0, field(l, "classes")?.first().map(String::as_str).unwrap_or(""))?;
        let l = next("bn_eps")?;
        let bn_eps = num(l.0, field(l, "bn_eps")?.first().map(String::as_str).unwrap_or(""))?;
        let l = next("bn_momentum")?;
        let bn_momentum = num(l.0, field(l, "bn_momentum")?.first().map(String::as_str).unwrap_or(""))?;
        if layer_sizes.last() != Some(&dim) {
            return Err(Error::parse(l.0, "embedding_dim disagrees with layer_sizes"));
        }

        let mut params = Self::init(&layer_sizes, classes, 0)?;
        params.bn_eps = bn_eps;
        params.bn_momentum = bn_momentum;
        let expected: Vec<(String, Vec<usize>)> = params.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut loaded: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let l = next("tensor")?;
            let parts = field(l, "tensor")?;
            if parts.first() != Some(name) {
                return Err(Error::parse(l.0, format!("expected tensor `{name}`")));
            }
            let dims = parts[1..].iter().map(|s| int(l.0, s)).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::parse(l.0, format!("tensor `{name}` has shape {dims:?}, expected {shape:?}")));
            }
            let rows: usize = shape[..shape.len() - 1].iter().product();
            let mut values = Vec::with_capacity(shape.iter().product());
            for _ in 0..rows {
                let (ln, row) = next("tensor row")?;
                let cells = row.split_whitespace().map(|s| num(ln, s)).collect::<Result<Vec<_>>>()?;
                if cells.len() != *shape.last().unwrap() {
                    return Err(Error::parse(ln, format!("row of `{name}` has {} values", cells.len())));
                }
                values.extend(cells);
            }
            loaded.push(values);
        }
        let (ln, tail) = next("end")?;
        if tail != "end" {
            return Err(Error::parse(ln, "expected `end`"));
        }

        let mut it = loaded.into_iter();
        let mut take = |dst: &mut [f64]| dst.copy_from_slice(&it.next().unwrap());
        for layer in &mut params.encoder {
            take(layer.weight.as_slice_mut().unwrap());
            take(layer.bias.as_slice_mut().unwrap());
        }
        take(params.bn_scale.as_slice_mut().unwrap());
        take(params.bn_running_mean.as_slice_mut().unwrap());
        take(params.bn_running_var.as_slice_mut().unwrap());
        take(params.fc_weight.as_slice_mut().unwrap());
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if params.bn_running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::parse(0, "bn.running_var must be positive"));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

impl ParamGrads {
    /// Flat views in the same order as [`ModelParams::trainable_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.encoder {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.bn_scale.as_slice().expect("standard layout"));
        out.push(self.fc_weight.as_slice().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
