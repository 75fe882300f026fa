//! Multi-head two-layer probe over fixed feature vectors.
//!
//! Each category gets its own head `input -> hidden -> nodes` with an
//! activation and dropout between the two layers. Training uses the masked
//! max-constraint loss, AdamW with decoupled weight decay and a one-cycle
//! cosine learning-rate schedule.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{encode_batch, AnnotationSet};
use crate::constraint::{predict_bits, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::loss::{batch_loss, mc_loss_grad, HeadAggregation, HeadLoss};
use crate::metrics::{evaluate, MetricsReport};
use crate::rng::{streams, substream, StreamRng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl HeadConfig {
    pub const DEFAULT_HIDDEN: usize = 2048;
    pub const DEFAULT_DROPOUT: f64 = 0.7;

    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        HeadConfig {
            input_dim,
            hidden_dim: Self::DEFAULT_HIDDEN,
            output_dim,
            dropout: Self::DEFAULT_DROPOUT,
            activation: Activation::Relu,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "head dimensions must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Weight initialization bound as a function of fan-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    #[default]
    FanIn,
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    HeUniform,
}

impl Init {
    fn weight_bound(self, fan_in: usize) -> f64 {
        match self {
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Per-head shape and initialization shared by every head of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub init: Init,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden_dim: HeadConfig::DEFAULT_HIDDEN,
            dropout: HeadConfig::DEFAULT_DROPOUT,
            activation: Activation::Relu,
            init: Init::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    /// `hidden x input`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `output x hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Head {
    /// Uniform fan-in initialization; biases always use `1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        };
        let (input, hidden) = (config.input_dim, config.hidden_dim);
        let w1 = uniform(hidden, input, init.weight_bound(input));
        let b1 = uniform(1, hidden, Init::FanIn.weight_bound(input)).remove_axis(Axis(0));
        let w2 = uniform(config.output_dim, hidden, init.weight_bound(hidden));
        let b2 = uniform(1, config.output_dim, Init::FanIn.weight_bound(hidden)).remove_axis(Axis(0));
        Ok(Head { config, w1, b1, w2, b2 })
    }

    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(Head {
            config,
            w1: Array2::zeros((config.hidden_dim, config.input_dim)),
            b1: Array1::zeros(config.hidden_dim),
            w2: Array2::zeros((config.output_dim, config.hidden_dim)),
            b2: Array1::zeros(config.output_dim),
        })
    }

    fn params_mut(&mut self) -> [ndarray::ArrayViewMutD<'_, f64>; 4] {
        [
            self.w1.view_mut().into_dyn(),
            self.b1.view_mut().into_dyn(),
            self.w2.view_mut().into_dyn(),
            self.b2.view_mut().into_dyn(),
        ]
    }
}

/// Intermediate values of one head's forward pass.
struct HeadCache {
    pre: Array2<f64>,
    hidden: Array2<f64>,
    /// Scaled keep mask; `None` in eval mode.
    dropout: Option<Array2<f64>>,
    logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub categories: Vec<String>,
    pub heads: Vec<Head>,
}

impl Model {
    /// One head per hierarchy, initialized from `seed`'s init stream.
    pub fn new(hierarchies: &[Hierarchy], input_dim: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, streams::INIT, 0);
        let heads = hierarchies
            .iter()
            .map(|h| {
                let config = HeadConfig {
                    input_dim,
                    hidden_dim: arch.hidden_dim,
                    output_dim: h.len(),
                    dropout: arch.dropout,
                    activation: arch.activation,
                };
                Head::init(config, arch.init, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            categories: hierarchies.iter().map(|h| h.category().to_string()).collect(),
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.config.input_dim)
    }

    pub fn check_hierarchies(&self, hierarchies: &[Hierarchy]) -> Result<()> {
        if hierarchies.len() != self.heads.len() {
            return Err(Error::dims("heads", self.heads.len(), hierarchies.len()));
        }
        for ((h, head), name) in hierarchies.iter().zip(&self.heads).zip(&self.categories) {
            if h.category() != name {
                return Err(Error::CategoryMismatch(format!(
                    "model head `{name}` paired with hierarchy `{}`",
                    h.category()
                )));
            }
            if h.len() != head.config.output_dim {
                return Err(Error::dims(
                    format!("output nodes of head `{name}`"),
                    head.config.output_dim,
                    h.len(),
                ));
            }
        }
        Ok(())
    }

    fn check_features(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::dims(
                "feature columns",
                self.input_dim(),
                features.ncols(),
            ));
        }
        Ok(())
    }

    fn forward_head(
        head: &Head,
        x: &ArrayView2<f64>,
        mode: Mode,
        rng: Option<&mut StreamRng>,
    ) -> HeadCache {
        let act = head.config.activation;
        let mut pre = x.dot(&head.w1.t());
        pre += &head.b1;
        let mut hidden = pre.mapv(|v| act.apply(v));
        let dropout = match (mode, rng) {
            (Mode::Train, Some(rng)) if head.config.dropout > 0.0 => {
                let keep = 1.0 - head.config.dropout;
                let scale = 1.0 / keep;
                let mask = Array2::from_shape_simple_fn(hidden.dim(), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                });
                hidden *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let mut logits = hidden.dot(&head.w2.t());
        logits += &head.b2;
        HeadCache {
            pre,
            hidden,
            dropout,
            logits,
        }
    }

    /// Per-head logits. Dropout is only applied in [`Mode::Train`], drawing
    /// from `rng`.
    pub fn forward(
        &self,
        features: ArrayView2<f64>,
        mode: Mode,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_features(&features)?;
        Ok(self
            .heads
            .iter()
            .map(|head| Self::forward_head(head, &features, mode, rng.as_deref_mut()).logits)
            .collect())
    }

    /// Eval-mode logits.
    pub fn predict_logits(&self, features: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.forward(features, Mode::Eval, None)
    }

    /// Eval-mode constrained, binarized predictions as `[sample][head][node]`.
    pub fn predict_bits(
        &self,
        hierarchies: &[Hierarchy],
        features: ArrayView2<f64>,
        threshold: f64,
    ) -> Result<Vec<Vec<Vec<bool>>>> {
        self.check_hierarchies(hierarchies)?;
        let logits = self.predict_logits(features)?;
        let mut out = vec![Vec::with_capacity(self.heads.len()); features.nrows()];
        for (h, head_logits) in hierarchies.iter().zip(&logits) {
            for (s, row) in head_logits.rows().into_iter().enumerate() {
                out[s].push(predict_bits(h, &row.to_vec(), threshold)?);
            }
        }
        Ok(out)
    }
}

/// Gradients for one head, same shapes as its parameters.
struct HeadGrad {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl HeadGrad {
    fn tensors(&self) -> [ndarray::ArrayViewD<'_, f64>; 4] {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
        ]
    }
}

fn backward_head(head: &Head, x: &ArrayView2<f64>, cache: &HeadCache, dlogits: &Array2<f64>) -> HeadGrad {
    let w2 = dlogits.t().dot(&cache.hidden);
    let b2 = dlogits.sum_axis(Axis(0));
    let mut dhidden = dlogits.dot(&head.w2);
    if let Some(mask) = &cache.dropout {
        dhidden *= mask;
    }
    let act = head.config.activation;
    ndarray::Zip::from(&mut dhidden)
        .and(&cache.pre)
        .for_each(|d, &p| *d *= act.derivative(p));
    let w1 = dhidden.t().dot(x);
    let b1 = dhidden.sum_axis(Axis(0));
    HeadGrad { w1, b1, w2, b2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub start_end_lr: f64,
    pub warmup_to_peak_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub architecture: Architecture,
    pub aggregation: HeadAggregation,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-5,
            start_end_lr: 3e-6,
            warmup_to_peak_epoch: 10,
            epochs: 100,
            batch_size: 512,
            weight_decay: 1e-5,
            momentum_beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            architecture: Architecture::default(),
            aggregation: HeadAggregation::Mean,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.start_end_lr >= 0.0 && self.start_end_lr <= self.peak_lr) {
            return bad(format!(
                "need 0 <= start_end_lr ({}) <= peak_lr ({})",
                self.start_end_lr, self.peak_lr
            ));
        }
        if self.epochs == 0 || self.warmup_to_peak_epoch >= self.epochs {
            return bad(format!(
                "need warmup_to_peak_epoch ({}) < epochs ({})",
                self.warmup_to_peak_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum_beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Continuation phase: one tenth of the learning rates, no weight decay.
    pub fn fine_tune(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr / 10.0,
            start_end_lr: self.start_end_lr / 10.0,
            weight_decay: 0.0,
            epochs,
            warmup_to_peak_epoch: self.warmup_to_peak_epoch.min(epochs.saturating_sub(1)),
            ..self.clone()
        }
    }
}

/// One-cycle cosine schedule: a half-cosine ramp from `start_end_lr` up to
/// `peak_lr` at the start of epoch `warmup_to_peak_epoch`, then a half-cosine
/// decay back to `start_end_lr` at the final step.
pub fn lr_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> Result<f64> {
    let total = config.epochs * steps_per_epoch;
    if step >= total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warmup = config.warmup_to_peak_epoch * steps_per_epoch;
    let (lo, hi) = (config.start_end_lr, config.peak_lr);
    let cosine = |from: f64, to: f64, frac: f64| {
        to + (from - to) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
    };
    Ok(if step <= warmup && warmup > 0 {
        cosine(lo, hi, step as f64 / warmup as f64)
    } else {
        let span = (total - 1).saturating_sub(warmup);
        if span == 0 {
            hi
        } else {
            cosine(hi, lo, (step - warmup) as f64 / span as f64)
        }
    })
}

/// AdamW moment estimates for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<ndarray::ArrayD<f64>>,
    second: Vec<ndarray::ArrayD<f64>>,
}

impl AdamW {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .heads
            .iter()
            .flat_map(|h| {
                [
                    h.w1.shape().to_vec(),
                    h.b1.shape().to_vec(),
                    h.w2.shape().to_vec(),
                    h.b2.shape().to_vec(),
                ]
            })
            .collect();
        let zeros = |s: &Vec<usize>| ndarray::ArrayD::zeros(s.as_slice());
        AdamW {
            beta1,
            beta2,
            eps,
            step: 0,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
        }
    }

    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    fn update(&mut self, model: &mut Model, grads: &[Option<HeadGrad>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (h, (head, grad)) in model.heads.iter_mut().zip(grads).enumerate() {
            let zero_grads;
            let tensors = match grad {
                Some(g) => g.tensors(),
                None => {
                    zero_grads = HeadGrad {
                        w1: Array2::zeros(head.w1.dim()),
                        b1: Array1::zeros(head.b1.dim()),
                        w2: Array2::zeros(head.w2.dim()),
                        b2: Array1::zeros(head.b2.dim()),
                    };
                    zero_grads.tensors()
                }
            };
            for (k, (mut param, g)) in head.params_mut().into_iter().zip(tensors).enumerate() {
                let m = &mut self.first[h * 4 + k];
                let v = &mut self.second[h * 4 + k];
                ndarray::Zip::from(&mut param)
                    .and(m)
                    .and(v)
                    .and(&g)
                    .for_each(|p, m, v, &g| {
                        *p *= 1.0 - lr * weight_decay;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    });
            }
        }
    }
}

/// Features and labels for training or validation.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub features: ArrayView2<'a, f64>,
    pub annotations: &'a [AnnotationSet],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub loss: Option<f64>,
    pub ap: Option<f64>,
    pub hml_ap: Option<f64>,
    pub singular_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the steps that were taken.
    pub train_loss: Option<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
    pub lr: f64,
    pub validation: Option<ValidationSummary>,
}

/// Masked loss of a whole dataset in eval mode.
pub fn dataset_loss(
    model: &Model,
    hierarchies: &[Hierarchy],
    data: TrainData<'_>,
    aggregation: HeadAggregation,
) -> Result<Option<f64>> {
    let logits = model.predict_logits(data.features)?;
    let mut heads = Vec::with_capacity(hierarchies.len());
    for (h, head_logits) in hierarchies.iter().zip(&logits) {
        let (t, m) = encode_batch(data.annotations, h)?;
        heads.push(mc_loss_grad(head_logits.view(), t.view(), m.view(), h)?.0);
    }
    let report = batch_loss(&heads, aggregation);
    Ok((!report.skip).then_some(report.total))
}

/// Scores a model on labelled data.
pub fn evaluate_model(
    model: &Model,
    hierarchies: &[Hierarchy],
    data: TrainData<'_>,
    threshold: f64,
) -> Result<MetricsReport> {
    let preds = model.predict_bits(hierarchies, data.features, threshold)?;
    evaluate(hierarchies, data.annotations, &preds)
}

fn check_data(model: &Model, data: &TrainData<'_>) -> Result<()> {
    if data.features.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.features.nrows() != data.annotations.len() {
        return Err(Error::dims(
            "annotation rows",
            data.features.nrows(),
            data.annotations.len(),
        ));
    }
    model.check_features(&data.features)
}

/// Trains `model` in place. `on_epoch` sees every record as it is produced.
pub fn fit(
    model: &mut Model,
    hierarchies: &[Hierarchy],
    train: TrainData<'_>,
    validation: Option<TrainData<'_>>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    model.check_hierarchies(hierarchies)?;
    check_data(model, &train)?;
    if let Some(v) = &validation {
        check_data(model, v)?;
    }

    // Samples without a single unmasked bit cannot contribute; drop them up
    // front so they do not perturb batching.
    let usable: Vec<usize> = (0..train.annotations.len())
        .filter(|&i| !train.annotations[i].fully_masked())
        .collect();
    let steps_per_epoch = usable.len().div_ceil(config.batch_size).max(1);

    let mut shuffle_rng = substream(config.seed, streams::SHUFFLE, 0);
    let mut dropout_rng = substream(config.seed, streams::DROPOUT, 0);
    let mut optimizer = AdamW::new(model, config.momentum_beta1, config.beta2, config.adam_eps);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = usable.clone();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut taken = 0;
        let mut skipped = 0;
        let mut lr = lr_at(config, epoch * steps_per_epoch, steps_per_epoch)?;

        for (k, batch) in order.chunks(config.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + k;
            lr = lr_at(config, step, steps_per_epoch)?;
            let x = train.features.select(Axis(0), batch);
            let labels: Vec<AnnotationSet> =
                batch.iter().map(|&i| train.annotations[i].clone()).collect();

            let mut caches = Vec::with_capacity(model.heads.len());
            let mut head_losses: Vec<HeadLoss> = Vec::with_capacity(model.heads.len());
            let mut dlogits = Vec::with_capacity(model.heads.len());
            for (head, h) in model.heads.iter().zip(hierarchies) {
                let cache = Model::forward_head(head, &x.view(), Mode::Train, Some(&mut dropout_rng));
                let (t, m) = encode_batch(&labels, h)?;
                let (hl, g) = mc_loss_grad(cache.logits.view(), t.view(), m.view(), h)?;
                head_losses.push(hl);
                dlogits.push(g);
                caches.push(cache);
            }
            let report = batch_loss(&head_losses, config.aggregation);
            if report.skip {
                skipped += 1;
                continue;
            }
            if !report.total.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    step,
                    detail: format!("per-head losses {:?}", report.per_head),
                });
            }
            let weight = config.aggregation.head_weight(report.contributing_heads);
            let grads: Vec<Option<HeadGrad>> = model
                .heads
                .iter()
                .zip(&caches)
                .zip(&mut dlogits)
                .zip(&head_losses)
                .map(|(((head, cache), g), hl)| {
                    (hl.contributing_bits > 0).then(|| {
                        g.mapv_inplace(|v| v * weight);
                        backward_head(head, &x.view(), cache, g)
                    })
                })
                .collect();
            optimizer.update(model, &grads, lr, config.weight_decay);
            loss_sum += report.total;
            taken += 1;
        }
        // Epochs with no usable samples still consume their schedule slots.
        skipped += steps_per_epoch.saturating_sub(order.chunks(config.batch_size).len());

        let validation = match &validation {
            Some(v) => {
                let loss = dataset_loss(model, hierarchies, *v, config.aggregation)?;
                let report = evaluate_model(model, hierarchies, *v, config.threshold)?;
                Some(ValidationSummary {
                    loss,
                    ap: report.ap,
                    hml_ap: report.hml_ap,
                    singular_f1: report.singular_f1,
                })
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: (taken > 0).then(|| loss_sum / taken as f64),
            steps: taken,
            skipped_steps: skipped,
            lr,
            validation,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub category: String,
    #[serde(flatten)]
    pub config: HeadConfig,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// JSON checkpoint: dimensions plus row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub heads: Vec<HeadCheckpoint>,
}

impl From<&Model> for Checkpoint {
    fn from(model: &Model) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            heads: model
                .heads
                .iter()
                .zip(&model.categories)
                .map(|(h, c)| HeadCheckpoint {
                    category: c.clone(),
                    config: h.config,
                    w1: h.w1.iter().copied().collect(),
                    b1: h.b1.to_vec(),
                    w2: h.w2.iter().copied().collect(),
                    b2: h.b2.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<Checkpoint> for Model {
    type Error = Error;

    fn try_from(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::SchemaMismatch {
                file: "checkpoint".into(),
                field: "format_version".into(),
                reason: format!(
                    "expected {CHECKPOINT_FORMAT_VERSION}, got {}",
                    ck.format_version
                ),
            });
        }
        let mut categories = Vec::new();
        let mut heads = Vec::new();
        for h in ck.heads {
            let c = h.config;
            c.validate()?;
            let shape_err = |field: &str, expected: usize, got: usize| Error::SchemaMismatch {
                file: "checkpoint".into(),
                field: format!("{}.{field}", h.category),
                reason: format!("expected {expected} values, got {got}"),
            };
            let w1 = Array2::from_shape_vec((c.hidden_dim, c.input_dim), h.w1.clone())
                .map_err(|_| shape_err("w1", c.hidden_dim * c.input_dim, h.w1.len()))?;
            let w2 = Array2::from_shape_vec((c.output_dim, c.hidden_dim), h.w2.clone())
                .map_err(|_| shape_err("w2", c.output_dim * c.hidden_dim, h.w2.len()))?;
            if h.b1.len() != c.hidden_dim {
                return Err(shape_err("b1", c.hidden_dim, h.b1.len()));
            }
            if h.b2.len() != c.output_dim {
                return Err(shape_err("b2", c.output_dim, h.b2.len()));
            }
            categories.push(h.category.clone());
            heads.push(Head {
                config: c,
                w1,
                b1: Array1::from(h.b1),
                w2,
                b2: Array1::from(h.b2),
            });
        }
        Ok(Model { categories, heads })
    }
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), &Checkpoint::from(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Model::try_from(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::parse_annotation;
    use crate::hierarchy::catami;
    use crate::loss::mc_loss_logits;

    fn arch(hidden_dim: usize, dropout: f64) -> Architecture {
        Architecture {
            hidden_dim,
            dropout,
            ..Architecture::default()
        }
    }

    fn small_model(hs: &[Hierarchy], input: usize, seed: u64) -> Model {
        Model::new(hs, input, &arch(16, 0.5), seed).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        let spe = 7;
        let total = c.epochs * spe;
        assert!((lr_at(&c, 0, spe).unwrap() - 3e-6).abs() < 1e-18);
        assert!((lr_at(&c, 10 * spe, spe).unwrap() - 3e-5).abs() < 1e-18);
        assert!((lr_at(&c, total - 1, spe).unwrap() - 3e-6).abs() < 1e-9);
        assert!(matches!(
            lr_at(&c, total, spe),
            Err(Error::StepOutOfRange { .. })
        ));
        // Rises through warmup, falls after.
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(&c, s, spe).unwrap()).collect();
        assert!(lrs[..=10 * spe].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[10 * spe..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            start_end_lr: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_to_peak_epoch: 100,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(HeadConfig {
            dropout: 1.0,
            ..HeadConfig::new(3, 3)
        }
        .validate()
        .is_err());
        let ft = TrainConfig::default().fine_tune(300);
        assert!((ft.peak_lr - 3e-6).abs() < 1e-18);
        assert!((ft.start_end_lr - 3e-7).abs() < 1e-18);
        assert_eq!(ft.weight_decay, 0.0);
    }

    #[test]
    fn eval_forward_is_deterministic_and_zero_weights_give_null_prediction() {
        let hs = vec![catami::relief()];
        let m = small_model(&hs, 5, 1);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 / 10.0);
        assert_eq!(
            m.predict_logits(x.view()).unwrap(),
            m.predict_logits(x.view()).unwrap()
        );

        let zero = Model {
            categories: vec![hs[0].category().into()],
            heads: vec![Head::zeros(HeadConfig::new(5, hs[0].len())).unwrap()],
        };
        let logits = zero.predict_logits(x.view()).unwrap();
        assert!(logits[0].iter().all(|&v| v == 0.0));
        let bits = zero.predict_bits(&hs, x.view(), 0.5).unwrap();
        assert!(bits.iter().flatten().flatten().all(|&b| !b));
    }

    #[test]
    fn seeded_dropout_replays() {
        let hs = vec![catami::relief()];
        let m = small_model(&hs, 5, 1);
        let x = Array2::from_elem((3, 5), 0.3);
        let run = || {
            let mut rng = substream(9, streams::DROPOUT, 0);
            m.forward(x.view(), Mode::Train, Some(&mut rng)).unwrap()
        };
        assert_eq!(run(), run());
        assert_ne!(run(), m.predict_logits(x.view()).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let hs = vec![catami::relief()];
        let m = small_model(&hs, 5, 1);
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            m.predict_logits(x.view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn toy_data(hs: &[Hierarchy], n: usize) -> (Array2<f64>, Vec<AnnotationSet>) {
        let h = &hs[0];
        let features = Array2::from_shape_fn((n, h.len()), |(s, j)| {
            if j == 0 || j == 1 + s % (h.len() - 1) {
                1.0
            } else {
                0.0
            }
        });
        let ann = (0..n)
            .map(|s| AnnotationSet {
                sample_id: s.to_string(),
                categories: vec![parse_annotation(h, &[h.path(1 + s % (h.len() - 1))]).unwrap()],
            })
            .collect();
        (features, ann)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let hs = vec![catami::relief()];
        let (x, ann) = toy_data(&hs, 20);
        let mut m = small_model(&hs, hs[0].len(), 3);
        let before = m.clone();
        let cfg = TrainConfig {
            peak_lr: 0.0,
            start_end_lr: 0.0,
            epochs: 3,
            warmup_to_peak_epoch: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let data = TrainData {
            features: x.view(),
            annotations: &ann,
        };
        fit(&mut m, &hs, data, None, &cfg, |_| {}).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let hs = vec![catami::relief()];
        let (x, ann) = toy_data(&hs, 60);
        let data = TrainData {
            features: x.view(),
            annotations: &ann,
        };
        let cfg = TrainConfig {
            peak_lr: 1e-2,
            start_end_lr: 1e-3,
            epochs: 30,
            warmup_to_peak_epoch: 3,
            batch_size: 16,
            architecture: arch(32, 0.1),
            ..TrainConfig::default()
        };
        let train = |seed| {
            let mut m = Model::new(&hs, x.ncols(), &cfg.architecture, seed).unwrap();
            let hist = fit(&mut m, &hs, data, Some(data), &cfg, |_| {}).unwrap();
            (m, hist)
        };
        let (m1, h1) = train(4);
        let (m2, h2) = train(4);
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        let first = h1[0].validation.as_ref().unwrap().loss.unwrap();
        let last = h1.last().unwrap().validation.as_ref().unwrap().loss.unwrap();
        assert!(last < first * 0.5, "{first} -> {last}");
        let report = evaluate_model(&m1, &hs, data, 0.5).unwrap();
        assert!(report.ap.unwrap() > 0.9);
    }

    #[test]
    fn single_node_step_reduces_loss() {
        let hs = vec![Hierarchy::parse("only").unwrap()];
        let x = Array2::from_shape_fn((6, 2), |(i, j)| ((i + j) % 3) as f64 - 1.0);
        let ann: Vec<AnnotationSet> = (0..6)
            .map(|i| AnnotationSet {
                sample_id: i.to_string(),
                categories: vec![if i % 2 == 0 {
                    parse_annotation(&hs[0], &["only"]).unwrap()
                } else {
                    crate::annotations::CategoryLabels {
                        category: "only".into(),
                        present: true,
                        targets: vec![false],
                        mask: vec![false],
                    }
                }],
            })
            .collect();
        let mut m = Model::new(&hs, 2, &arch(8, 0.0), 2).unwrap();
        let loss = |m: &Model| {
            let logits = m.predict_logits(x.view()).unwrap();
            let (t, mk) = encode_batch(&ann, &hs[0]).unwrap();
            mc_loss_logits(logits[0].view(), t.view(), mk.view(), &hs[0])
                .unwrap()
                .loss
        };
        let before = loss(&m);
        let cfg = TrainConfig {
            peak_lr: 1e-3,
            start_end_lr: 1e-3,
            epochs: 1,
            warmup_to_peak_epoch: 0,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let data = TrainData {
            features: x.view(),
            annotations: &ann,
        };
        fit(&mut m, &hs, data, None, &cfg, |_| {}).unwrap();
        assert!(loss(&m) < before);
    }

    #[test]
    fn zero_weight_decay_matches_plain_adam() {
        let hs = vec![catami::relief()];
        let (x, ann) = toy_data(&hs, 8);
        let mut m = small_model(&hs, hs[0].len(), 5);
        let start = m.clone();
        let cfg = TrainConfig {
            peak_lr: 1e-3,
            start_end_lr: 1e-3,
            epochs: 1,
            warmup_to_peak_epoch: 0,
            batch_size: 8,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        m.heads[0].config.dropout = 0.0;
        let mut reference = start.clone();
        reference.heads[0].config.dropout = 0.0;
        let data = TrainData {
            features: x.view(),
            annotations: &ann,
        };
        fit(&mut m, &hs, data, None, &cfg, |_| {}).unwrap();

        // Plain Adam, first step: m_hat = g, v_hat = g^2.
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut substream(cfg.seed, streams::SHUFFLE, 0));
        let xb = x.select(Axis(0), &order);
        let labels: Vec<AnnotationSet> = order.iter().map(|&i| ann[i].clone()).collect();
        let head = &reference.heads[0];
        let cache = Model::forward_head(head, &xb.view(), Mode::Eval, None);
        let (t, mk) = encode_batch(&labels, &hs[0]).unwrap();
        let (_, g) = mc_loss_grad(cache.logits.view(), t.view(), mk.view(), &hs[0]).unwrap();
        let grad = backward_head(head, &xb.view(), &cache, &g);
        let lr = cfg.peak_lr;
        let adam = |p: f64, g: f64| {
            let m = (1.0 - 0.9) * g / (1.0 - 0.9);
            let v = (1.0 - 0.999) * g * g / (1.0 - 0.999);
            p - lr * m / (v.sqrt() + 1e-8)
        };
        let head = &mut reference.heads[0];
        ndarray::Zip::from(&mut head.w1).and(&grad.w1).for_each(|p, &g| *p = adam(*p, g));
        ndarray::Zip::from(&mut head.b1).and(&grad.b1).for_each(|p, &g| *p = adam(*p, g));
        ndarray::Zip::from(&mut head.w2).and(&grad.w2).for_each(|p, &g| *p = adam(*p, g));
        ndarray::Zip::from(&mut head.b2).and(&grad.b2).for_each(|p, &g| *p = adam(*p, g));
        assert_eq!(m, reference);
    }

    #[test]
    fn fully_masked_samples_do_not_change_training() {
        let hs = vec![catami::relief()];
        let (x, ann) = toy_data(&hs, 24);
        let cfg = TrainConfig {
            peak_lr: 1e-3,
            start_end_lr: 1e-4,
            epochs: 3,
            warmup_to_peak_epoch: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = |x: &Array2<f64>, ann: &[AnnotationSet]| {
            let mut m = small_model(&hs, hs[0].len(), 6);
            let data = TrainData {
                features: x.view(),
                annotations: ann,
            };
            fit(&mut m, &hs, data, None, &cfg, |_| {}).unwrap();
            m
        };
        let base = run(&x, &ann);

        let mut x2 = x.clone();
        let mut ann2 = ann.clone();
        for k in 0..5 {
            x2.push_row(Array1::from_elem(x.ncols(), k as f64).view()).unwrap();
            ann2.push(AnnotationSet {
                sample_id: format!("masked{k}"),
                categories: vec![crate::annotations::CategoryLabels::absent(&hs[0])],
            });
        }
        assert_eq!(run(&x2, &ann2), base);
    }

    #[test]
    fn all_masked_dataset_skips_every_step() {
        let hs = vec![catami::relief()];
        let (x, _) = toy_data(&hs, 10);
        let ann: Vec<AnnotationSet> = (0..10)
            .map(|i| AnnotationSet {
                sample_id: i.to_string(),
                categories: vec![crate::annotations::CategoryLabels::absent(&hs[0])],
            })
            .collect();
        let mut m = small_model(&hs, hs[0].len(), 6);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_to_peak_epoch: 1,
            ..TrainConfig::default()
        };
        let data = TrainData {
            features: x.view(),
            annotations: &ann,
        };
        let hist = fit(&mut m, &hs, data, None, &cfg, |_| {}).unwrap();
        assert!(hist.iter().all(|r| r.steps == 0 && r.train_loss.is_none()));
        assert_eq!(m, before);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let hs = vec![catami::relief()];
        let mut m = small_model(&hs, 3, 1);
        let x = Array2::zeros((0, 3));
        let data = TrainData {
            features: x.view(),
            annotations: &[],
        };
        assert!(matches!(
            fit(&mut m, &hs, data, None, &TrainConfig::default(), |_| {}),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let hs = vec![catami::relief(), catami::bedforms()];
        let m = small_model(&hs, 4, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
        let mut ck = Checkpoint::from(&m);
        ck.heads[0].w1.pop();
        assert!(matches!(
            Model::try_from(ck),
            Err(Error::SchemaMismatch { .. })
        ));
    }
}
