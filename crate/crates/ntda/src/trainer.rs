//! The training loop: warm up on the supervised objective, then alternate
//! per-epoch noise-model refits with filtered adversarial adaptation.
//!
//! Target labels are unreachable by construction: every entry point takes
//! target features as a bare matrix.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::losses::{loss_adv_d, loss_adv_f, loss_cls, loss_reg};
use crate::model::ModelState;
use crate::noisemodel::{compute_weights, prototype_distances, GaussianMixture2};

pub const RECORD_SCHEMA: &str = "ntda-record/1";

/// How the two parameter groups are stepped within one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Both gradient groups are computed at the pre-update state from one
    /// forward pass, then applied together (single-pass GAN discipline).
    Simultaneous,
    /// Prototypes step first; the extractor objective is then re-evaluated
    /// against the updated prototypes.
    Alternating,
}

/// How prototypes start out before gradient training takes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeInit {
    /// Per-class means of the initial source features. With coincident
    /// prototypes the classifier is shift-invariant and its feature gradient
    /// vanishes, leaving the compact regularizer free to collapse the
    /// embedding; class-mean placement breaks that symmetry from step one.
    ClassMeans,
    /// i.i.d. Gaussian entries with standard deviation 0.01.
    Gaussian,
}

/// The full hyper-parameter record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Disable to run the no-noise-removal ablation: every source sample
    /// keeps weight 1 and nothing is filtered.
    pub noise_removal: bool,
    pub update_mode: UpdateMode,
    pub prototype_init: PrototypeInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 10,
            train_epochs: 12,
            batch_size: 128,
            temperature: 10.0,
            eta: 0.5,
            lambda1: 0.5,
            lambda2: 1.0,
            learning_rate: 0.01,
            momentum: 0.5,
            weight_decay: 5e-4,
            seed: 0,
            hidden_dims: vec![64, 64],
            embed_dim: 16,
            noise_removal: true,
            update_mode: UpdateMode::Simultaneous,
            prototype_init: PrototypeInit::ClassMeans,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs < 1 {
            return Err(Error::Config("warmup_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in [0, 1), got {}", self.eta)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// The source-only baseline: warm-up only, no adaptation epochs.
    pub fn source_only(&self) -> TrainConfig {
        TrainConfig {
            train_epochs: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Adapt,
}

/// Fixed-bin histogram of source distances, kept per epoch so the warm-up
/// length can be chosen by inspecting how the clean/noisy modes separate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> DistanceHistogram {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !lo.is_finite() || !hi.is_finite() || lo == hi {
        return DistanceHistogram {
            bin_edges: vec![lo, hi],
            counts: vec![values.len()],
        };
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges = (0..=bins).map(|b| lo + width * b as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    DistanceHistogram { bin_edges, counts }
}

/// Per-epoch observability record; one JSON line per epoch in the records
/// file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema: String,
    pub epoch: usize,
    pub phase: Phase,
    pub batches: usize,
    pub mean_loss_cls: f64,
    pub mean_loss_reg: f64,
    pub mean_loss_adv_d: Option<f64>,
    pub mean_loss_adv_f: Option<f64>,
    /// Fraction of source samples with weight > 0 this epoch (1.0 in warm-up).
    pub retained_fraction: f64,
    pub gmm: Option<GaussianMixture2>,
    /// Mean discriminator output over the target set, evaluated at epoch end.
    /// Filled on adapt epochs and on the final warm-up epoch.
    pub mean_target_discriminator: Option<f64>,
    pub source_distance_histogram: DistanceHistogram,
    /// Per-sample weights over the full source set (adapt epochs only).
    pub weights: Option<Vec<f64>>,
}

impl EpochRecord {
    fn assert_finite(&self) -> Result<()> {
        let mut vals = vec![
            self.mean_loss_cls,
            self.mean_loss_reg,
            self.retained_fraction,
        ];
        vals.extend(self.mean_loss_adv_d);
        vals.extend(self.mean_loss_adv_f);
        vals.extend(self.mean_target_discriminator);
        if let Some(w) = &self.weights {
            vals.extend(w.iter().copied());
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("epoch {} record", self.epoch)));
        }
        Ok(())
    }
}

/// One SGD step with momentum and weight decay:
/// `v <- momentum v + grad + weight_decay p; p <- p - lr v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    config: &TrainConfig,
    group: &str,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd_step on {group}: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient for parameter group {group:?}")));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = config.momentum * *v + g + config.weight_decay * *p;
        *p -= config.learning_rate * *v;
    }
    Ok(())
}

/// Everything `train` produces: the final model and the per-epoch records.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: ModelState,
    pub records: Vec<EpochRecord>,
}

/// Shuffled index stream that cycles with a reshuffle when exhausted.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(mut indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        indices.shuffle(rng);
        IndexStream {
            order: indices,
            pos: 0,
        }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Velocity buffers mirroring the model's parameter groups.
struct Velocities {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    prototypes: Vec<f64>,
}

impl Velocities {
    fn for_model(model: &ModelState) -> Self {
        Velocities {
            layers: model
                .extractor
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weight.data().len()], vec![0.0; l.bias.len()]))
                .collect(),
            prototypes: vec![0.0; model.prototypes.prototypes().data().len()],
        }
    }
}

/// Mutable training state: the model, its optimizer buffers, and the RNG that
/// drives initialization and batch order.
pub struct TrainSession {
    model: ModelState,
    config: TrainConfig,
    rng: ChaCha8Rng,
    vel: Velocities,
}

/// Accumulated per-term loss sums for one epoch.
#[derive(Default)]
struct EpochSums {
    cls: f64,
    reg: f64,
    adv_d: f64,
    adv_f: f64,
    source_samples: usize,
    target_samples: usize,
    batches: usize,
}

impl TrainSession {
    pub fn new(config: &TrainConfig, source: &DomainDataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ModelState::init(
            source.input_dim(),
            &config.hidden_dims,
            config.embed_dim,
            source.class_count(),
            config.temperature,
            &mut rng,
        )?;
        if config.prototype_init == PrototypeInit::ClassMeans {
            // Overwrite the Gaussian draw; classes without samples keep it, so
            // RNG consumption does not depend on the data.
            let features = model.extractor.forward(source.features())?;
            let d = features.cols();
            let m = source.class_count();
            let mut sums = Matrix::zeros(m, d);
            let mut counts = vec![0usize; m];
            for (i, &y) in source.labels().iter().enumerate() {
                counts[y] += 1;
                for (acc, v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
                    *acc += v;
                }
            }
            let protos = model.prototypes.prototypes_mut();
            for y in 0..m {
                if counts[y] > 0 {
                    for (slot, &s) in protos.row_mut(y).iter_mut().zip(sums.row(y)) {
                        *slot = s / counts[y] as f64;
                    }
                }
            }
        }
        let vel = Velocities::for_model(&model);
        Ok(TrainSession {
            model,
            config: config.clone(),
            rng,
            vel,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    /// Mean discriminator output over a target feature set (evaluation only).
    pub fn mean_target_discriminator(&self, target_features: &Matrix) -> Result<Option<f64>> {
        if target_features.rows() == 0 {
            return Ok(None);
        }
        let f = self.model.extractor.forward(target_features)?;
        let d = self.model.prototypes.discriminate(&f)?;
        Ok(Some(d.iter().sum::<f64>() / d.len() as f64))
    }

    /// Applies one batch of supervised updates (classification + compactness),
    /// both parameter groups stepped from the pre-update state.
    fn supervised_batch(
        &mut self,
        x: &Matrix,
        labels: &[usize],
        weights: Option<&[f64]>,
        sums: &mut EpochSums,
    ) -> Result<()> {
        let trace = self.model.extractor.forward_trace(x)?;
        let (proto_grad, ext_grads, cls_v, reg_v) = {
            let features = trace.output();
            let protos = &self.model.prototypes;
            let cls = loss_cls(features, labels, protos, weights)?;
            let reg = loss_reg(features, labels, protos, weights)?;
            let l1 = self.config.lambda1;
            let proto_grad = cls.grad_prototypes.add_scaled(&reg.grad_prototypes, l1)?;
            let feat_grad = cls.grad_features.add_scaled(&reg.grad_features, l1)?;
            let ext_grads = self.model.extractor.backward(&trace, &feat_grad)?;
            (proto_grad, ext_grads, cls.value, reg.value)
        };

        sums.cls += cls_v * x.rows() as f64;
        sums.reg += reg_v * x.rows() as f64;
        sums.source_samples += x.rows();
        sums.batches += 1;

        self.step_prototypes(&proto_grad)?;
        self.step_extractor(&ext_grads.weights, &ext_grads.biases)
    }

    fn step_prototypes(&mut self, grad: &Matrix) -> Result<()> {
        sgd_step(
            self.model.prototypes.prototypes_mut().data_mut(),
            grad.data(),
            &mut self.vel.prototypes,
            &self.config,
            "prototypes",
        )
    }

    fn step_extractor(&mut self, weight_grads: &[Matrix], bias_grads: &[Vec<f64>]) -> Result<()> {
        let config = self.config.clone();
        for (l, layer) in self.model.extractor.layers_mut().iter_mut().enumerate() {
            sgd_step(
                layer.weight.data_mut(),
                weight_grads[l].data(),
                &mut self.vel.layers[l].0,
                &config,
                &format!("extractor layer {l} weight"),
            )?;
            sgd_step(
                &mut layer.bias,
                &bias_grads[l],
                &mut self.vel.layers[l].1,
                &config,
                &format!("extractor layer {l} bias"),
            )?;
        }
        Ok(())
    }

    /// One epoch of minibatch SGD on the unweighted supervised objective.
    /// Touches no target data and no noise model.
    pub fn warmup_epoch(&mut self, source: &DomainDataset, epoch: usize) -> Result<EpochRecord> {
        if source.is_empty() {
            return Err(Error::EmptyBatch("warm-up on empty source set".into()));
        }
        let mut stream: Vec<usize> = (0..source.len()).collect();
        stream.shuffle(&mut self.rng);
        let mut sums = EpochSums::default();
        for chunk in stream.chunks(self.config.batch_size) {
            let x = gather_rows(source.features(), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| source.labels()[i]).collect();
            self.supervised_batch(&x, &labels, None, &mut sums)?;
        }
        let distances = prototype_distances(&self.model, source)?;
        let record = EpochRecord {
            schema: RECORD_SCHEMA.to_string(),
            epoch,
            phase: Phase::Warmup,
            batches: sums.batches,
            mean_loss_cls: sums.cls / sums.source_samples as f64,
            mean_loss_reg: sums.reg / sums.source_samples as f64,
            mean_loss_adv_d: None,
            mean_loss_adv_f: None,
            retained_fraction: 1.0,
            gmm: None,
            mean_target_discriminator: None,
            source_distance_histogram: histogram(&distances, 30),
            weights: None,
        };
        record.assert_finite()?;
        Ok(record)
    }

    /// One adaptation epoch: refit the noise model on the full source set,
    /// drop zero-weight samples, then run paired source/target minibatches.
    pub fn adapt_epoch(
        &mut self,
        source: &DomainDataset,
        target_features: &Matrix,
        epoch: usize,
    ) -> Result<EpochRecord> {
        let (weights, gmm) = if self.config.noise_removal {
            let (w, g) = compute_weights(&self.model, source, self.config.eta)?;
            (w, Some(g))
        } else {
            (vec![1.0; source.len()], None)
        };
        self.adapt_epoch_with_weights(source, target_features, &weights, gmm, epoch)
    }

    /// The adaptation epoch body with externally supplied weights; exposed so
    /// weighting schemes can be studied in isolation.
    pub fn adapt_epoch_with_weights(
        &mut self,
        source: &DomainDataset,
        target_features: &Matrix,
        weights: &[f64],
        gmm: Option<GaussianMixture2>,
        epoch: usize,
    ) -> Result<EpochRecord> {
        if weights.len() != source.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} source samples",
                weights.len(),
                source.len()
            )));
        }
        let survivors: Vec<usize> = (0..source.len()).filter(|&i| weights[i] > 0.0).collect();
        let retained_fraction = if source.is_empty() {
            0.0
        } else {
            survivors.len() as f64 / source.len() as f64
        };
        let adversarial_active = self.config.lambda2 > 0.0 && target_features.rows() > 0;

        let mut sums = EpochSums::default();
        if survivors.is_empty() {
            log::warn!(
                "epoch {epoch}: every source weight is zero; running adversarial-only updates"
            );
            if adversarial_active {
                self.adversarial_only_epoch(target_features, &mut sums)?;
            }
        } else {
            let mut source_stream = IndexStream::new(survivors.clone(), &mut self.rng);
            // The target stream exists only when the adversarial terms do, so
            // a lambda2 = 0 epoch consumes the RNG exactly like a warm-up one.
            let mut target_stream = if adversarial_active {
                Some(IndexStream::new(
                    (0..target_features.rows()).collect(),
                    &mut self.rng,
                ))
            } else {
                None
            };
            let longest = if adversarial_active {
                survivors.len().max(target_features.rows())
            } else {
                survivors.len()
            };
            let b = self.config.batch_size;
            let n_batches = longest.div_ceil(b);
            for batch_idx in 0..n_batches {
                let count = b.min(longest - batch_idx * b);
                let src_idx = source_stream.take(count, &mut self.rng);
                let x = gather_rows(source.features(), &src_idx);
                let labels: Vec<usize> = src_idx.iter().map(|&i| source.labels()[i]).collect();
                let w: Vec<f64> = src_idx.iter().map(|&i| weights[i]).collect();
                match &mut target_stream {
                    None => {
                        self.supervised_batch(&x, &labels, Some(&w), &mut sums)?;
                    }
                    Some(ts) => {
                        let tgt_idx = ts.take(count, &mut self.rng);
                        let xt = gather_rows(target_features, &tgt_idx);
                        self.adversarial_batch(&x, &labels, &w, &xt, &mut sums)?;
                    }
                }
            }
        }

        let distances = prototype_distances(&self.model, source)?;
        let record = EpochRecord {
            schema: RECORD_SCHEMA.to_string(),
            epoch,
            phase: Phase::Adapt,
            batches: sums.batches,
            mean_loss_cls: ratio_or_zero(sums.cls, sums.source_samples),
            mean_loss_reg: ratio_or_zero(sums.reg, sums.source_samples),
            mean_loss_adv_d: adversarial_active
                .then(|| ratio_or_zero(sums.adv_d, sums.target_samples)),
            mean_loss_adv_f: adversarial_active
                .then(|| ratio_or_zero(sums.adv_f, sums.target_samples)),
            retained_fraction,
            gmm,
            mean_target_discriminator: self.mean_target_discriminator(target_features)?,
            source_distance_histogram: histogram(&distances, 30),
            weights: Some(weights.to_vec()),
        };
        record.assert_finite()?;
        Ok(record)
    }

    /// One paired batch: weighted supervised terms on source plus the
    /// adversarial pair on target.
    fn adversarial_batch(
        &mut self,
        x_source: &Matrix,
        labels: &[usize],
        weights: &[f64],
        x_target: &Matrix,
        sums: &mut EpochSums,
    ) -> Result<()> {
        let (l1, l2) = (self.config.lambda1, self.config.lambda2);
        let trace_s = self.model.extractor.forward_trace(x_source)?;
        let trace_t = self.model.extractor.forward_trace(x_target)?;

        // Pre-update gradients for both parameter groups.
        let (proto_grad, ext_w, ext_b, cls_v, reg_v, adv_d_v, adv_f_v) = {
            let protos = &self.model.prototypes;
            let f_s = trace_s.output();
            let f_t = trace_t.output();
            let cls = loss_cls(f_s, labels, protos, Some(weights))?;
            let reg = loss_reg(f_s, labels, protos, Some(weights))?;
            let adv_d = loss_adv_d(f_t, protos)?;
            let adv_f = loss_adv_f(f_t, protos)?;

            let proto_grad = cls
                .grad_prototypes
                .add_scaled(&reg.grad_prototypes, l1)?
                .add_scaled(&adv_d.grad_prototypes, l2)?;
            let src_feat_grad = cls.grad_features.add_scaled(&reg.grad_features, l1)?;
            let tgt_feat_grad = adv_f.grad_features.scale(l2);
            let gs = self.model.extractor.backward(&trace_s, &src_feat_grad)?;
            let gt = self.model.extractor.backward(&trace_t, &tgt_feat_grad)?;
            let ext_w: Vec<Matrix> = gs
                .weights
                .iter()
                .zip(&gt.weights)
                .map(|(a, b)| a.add(b))
                .collect::<Result<_>>()?;
            let ext_b: Vec<Vec<f64>> = gs
                .biases
                .iter()
                .zip(&gt.biases)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect();
            (
                proto_grad,
                ext_w,
                ext_b,
                cls.value,
                reg.value,
                adv_d.value,
                adv_f.value,
            )
        };

        sums.cls += cls_v * x_source.rows() as f64;
        sums.reg += reg_v * x_source.rows() as f64;
        sums.adv_d += adv_d_v * x_target.rows() as f64;
        sums.adv_f += adv_f_v * x_target.rows() as f64;
        sums.source_samples += x_source.rows();
        sums.target_samples += x_target.rows();
        sums.batches += 1;

        match self.config.update_mode {
            UpdateMode::Simultaneous => {
                self.step_prototypes(&proto_grad)?;
                self.step_extractor(&ext_w, &ext_b)
            }
            UpdateMode::Alternating => {
                // Prototypes first, then rebuild the extractor gradients
                // against the stepped prototypes (features are unchanged).
                self.step_prototypes(&proto_grad)?;
                let (ext_w, ext_b) = {
                    let protos = &self.model.prototypes;
                    let f_s = trace_s.output();
                    let f_t = trace_t.output();
                    let cls = loss_cls(f_s, labels, protos, Some(weights))?;
                    let reg = loss_reg(f_s, labels, protos, Some(weights))?;
                    let adv_f = loss_adv_f(f_t, protos)?;
                    let src_feat_grad = cls.grad_features.add_scaled(&reg.grad_features, l1)?;
                    let tgt_feat_grad = adv_f.grad_features.scale(l2);
                    let gs = self.model.extractor.backward(&trace_s, &src_feat_grad)?;
                    let gt = self.model.extractor.backward(&trace_t, &tgt_feat_grad)?;
                    let ext_w: Vec<Matrix> = gs
                        .weights
                        .iter()
                        .zip(&gt.weights)
                        .map(|(a, b)| a.add(b))
                        .collect::<Result<_>>()?;
                    let ext_b: Vec<Vec<f64>> = gs
                        .biases
                        .iter()
                        .zip(&gt.biases)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                        .collect();
                    (ext_w, ext_b)
                };
                self.step_extractor(&ext_w, &ext_b)
            }
        }
    }

    /// Degraded epoch used when no source sample survives filtering: only the
    /// lambda2-scaled adversarial terms are applied.
    fn adversarial_only_epoch(
        &mut self,
        target_features: &Matrix,
        sums: &mut EpochSums,
    ) -> Result<()> {
        let l2 = self.config.lambda2;
        let mut stream = IndexStream::new((0..target_features.rows()).collect(), &mut self.rng);
        let b = self.config.batch_size;
        let n_batches = target_features.rows().div_ceil(b);
        for batch_idx in 0..n_batches {
            let count = b.min(target_features.rows() - batch_idx * b);
            let idx = stream.take(count, &mut self.rng);
            let xt = gather_rows(target_features, &idx);
            let trace_t = self.model.extractor.forward_trace(&xt)?;
            let (proto_grad, ext_w, ext_b, adv_d_v, adv_f_v) = {
                let protos = &self.model.prototypes;
                let f_t = trace_t.output();
                let adv_d = loss_adv_d(f_t, protos)?;
                let adv_f = loss_adv_f(f_t, protos)?;
                let gt = self
                    .model
                    .extractor
                    .backward(&trace_t, &adv_f.grad_features.scale(l2))?;
                (
                    adv_d.grad_prototypes.scale(l2),
                    gt.weights,
                    gt.biases,
                    adv_d.value,
                    adv_f.value,
                )
            };
            sums.adv_d += adv_d_v * xt.rows() as f64;
            sums.adv_f += adv_f_v * xt.rows() as f64;
            sums.target_samples += xt.rows();
            sums.batches += 1;
            self.step_prototypes(&proto_grad)?;
            self.step_extractor(&ext_w, &ext_b)?;
        }
        Ok(())
    }
}

fn ratio_or_zero(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs warm-up on the supervised objective only. Target data is never
/// touched here.
pub fn warmup(session: &mut TrainSession, source: &DomainDataset) -> Result<Vec<EpochRecord>> {
    let epochs = session.config.warmup_epochs;
    let mut records = Vec::with_capacity(epochs);
    for e in 0..epochs {
        records.push(session.warmup_epoch(source, e)?);
    }
    Ok(records)
}

/// The full algorithm: warm up for `warmup_epochs`, then `train_epochs`
/// rounds of noise-model refit plus filtered adversarial training.
/// Deterministic per (config, seed).
pub fn train(
    config: &TrainConfig,
    source: &DomainDataset,
    target_features: &Matrix,
) -> Result<TrainOutput> {
    train_with_observer(config, source, target_features, |_, _| Ok(()))
}

/// Like `train`, but calls `observer` with the model state and the record
/// after every completed epoch, for record streaming and checkpoint cadence.
pub fn train_with_observer(
    config: &TrainConfig,
    source: &DomainDataset,
    target_features: &Matrix,
    mut observer: impl FnMut(&ModelState, &EpochRecord) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyBatch("training needs source data".into()));
    }
    if config.train_epochs > 0 && config.lambda2 > 0.0 && target_features.rows() == 0 {
        return Err(Error::EmptyBatch(
            "adversarial adaptation needs target features".into(),
        ));
    }
    if target_features.rows() > 0 && target_features.cols() != source.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "target dim {} vs source dim {}",
            target_features.cols(),
            source.input_dim()
        )));
    }

    let mut session = TrainSession::new(config, source)?;
    let mut records = Vec::with_capacity(config.warmup_epochs + config.train_epochs);
    for e in 0..config.warmup_epochs {
        let mut record = session.warmup_epoch(source, e)?;
        if e + 1 == config.warmup_epochs {
            // Observability for the adversarial-effect comparison: the target
            // entropy level the adaptation starts from.
            record.mean_target_discriminator =
                session.mean_target_discriminator(target_features)?;
        }
        observer(session.model(), &record)?;
        records.push(record);
    }
    for e in 0..config.train_epochs {
        let record = session.adapt_epoch(source, target_features, config.warmup_epochs + e)?;
        observer(session.model(), &record)?;
        records.push(record);
    }
    Ok(TrainOutput {
        model: session.into_model(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_shift, corrupt_mixed, gen_blobs, BlobSpec, DomainTag, ShiftSpec};

    fn quick_config() -> TrainConfig {
        TrainConfig {
            warmup_epochs: 3,
            train_epochs: 2,
            batch_size: 32,
            hidden_dims: vec![16],
            embed_dim: 8,
            ..TrainConfig::default()
        }
    }

    fn small_domain_pair(seed: u64) -> (DomainDataset, DomainDataset) {
        let spec = BlobSpec {
            classes: 3,
            per_class: 60,
            input_dim: 5,
            class_sep: 4.0,
            seed,
        };
        let source = gen_blobs(&spec, DomainTag::Source).unwrap();
        let target_clean =
            gen_blobs(&BlobSpec { seed: seed + 1, ..spec }, DomainTag::Target).unwrap();
        let shift = ShiftSpec {
            rotation_degrees: 25.0,
            translation: ShiftSpec::uniform_translation(5, 1.0),
            scale: 1.0,
        };
        let target = apply_shift(&target_clean, &shift).unwrap();
        (source, target)
    }

    #[test]
    fn sgd_step_identity_and_quadratic() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut params = [1.0, -2.0];
        let mut vel = [0.0, 0.0];
        sgd_step(&mut params, &[0.0, 0.0], &mut vel, &cfg, "test").unwrap();
        assert_eq!(params, [1.0, -2.0]);

        // One step on 0.5 theta^2 from theta = 1: grad = theta.
        let mut theta = [1.0];
        let mut vel = [0.0];
        sgd_step(&mut theta, &[1.0], &mut vel, &cfg, "test").unwrap();
        assert_eq!(theta, [0.9]);
    }

    #[test]
    fn sgd_weight_decay_contracts() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut params = [2.0, -3.0];
        let mut vel = [0.0, 0.0];
        let mut prev_norm = f64::INFINITY;
        for _ in 0..10 {
            sgd_step(&mut params, &[0.0, 0.0], &mut vel, &cfg, "test").unwrap();
            let norm: f64 = params.iter().map(|p| p * p).sum();
            assert!(norm < prev_norm);
            prev_norm = norm;
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let cfg = TrainConfig::default();
        let mut params = [1.0];
        let mut vel = [0.0];
        let err = sgd_step(&mut params, &[f64::NAN], &mut vel, &cfg, "prototypes").unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("prototypes"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn warmup_consumes_expected_batch_count() {
        let (source, _) = small_domain_pair(0);
        let cfg = TrainConfig {
            batch_size: 50,
            ..quick_config()
        };
        let mut session =
            TrainSession::new(&cfg, &source).unwrap();
        let records = warmup(&mut session, &source).unwrap();
        let expected = source.len().div_ceil(50);
        assert_eq!(records.len(), cfg.warmup_epochs);
        for r in &records {
            assert_eq!(r.batches, expected);
        }
    }

    #[test]
    fn warmup_loss_decreases_on_clean_blobs() {
        let (source, _) = small_domain_pair(1);
        // Full-batch epochs: the per-epoch means are then noiseless and the
        // early descent is strict.
        let cfg = TrainConfig {
            warmup_epochs: 5,
            batch_size: source.len(),
            ..quick_config()
        };
        let mut session =
            TrainSession::new(&cfg, &source).unwrap();
        let records = warmup(&mut session, &source).unwrap();
        for w in records.windows(2) {
            assert!(
                w[1].mean_loss_cls < w[0].mean_loss_cls,
                "loss did not decrease: {} -> {}",
                w[0].mean_loss_cls,
                w[1].mean_loss_cls
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let (source, _) = small_domain_pair(2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_config()
        };
        let mut session =
            TrainSession::new(&cfg, &source).unwrap();
        let before = session.model().clone();
        warmup(&mut session, &source).unwrap();
        let after = session.model();
        for (a, b) in before
            .extractor
            .layers()
            .iter()
            .zip(after.extractor.layers())
        {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(before.prototypes.prototypes(), after.prototypes.prototypes());
    }

    /// With noise removal off and lambda2 = 0, an adaptation epoch must be
    /// bitwise identical to a warm-up epoch: same batches, same updates, same
    /// RNG consumption.
    #[test]
    fn adapt_epoch_degenerates_to_warmup_epoch() {
        let (source, target) = small_domain_pair(3);
        let cfg = TrainConfig {
            lambda2: 0.0,
            noise_removal: false,
            ..quick_config()
        };
        let mut a = TrainSession::new(&cfg, &source).unwrap();
        let mut b = TrainSession::new(&cfg, &source).unwrap();
        a.warmup_epoch(&source, 0).unwrap();
        b.adapt_epoch(&source, target.features(), 0).unwrap();
        for (la, lb) in a
            .model()
            .extractor
            .layers()
            .iter()
            .zip(b.model().extractor.layers())
        {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
        assert_eq!(
            a.model().prototypes.prototypes(),
            b.model().prototypes.prototypes()
        );
    }

    /// Zero-weight samples change nothing: an epoch over a weighted set equals
    /// the same epoch over the physically filtered set.
    #[test]
    fn zero_weight_samples_equal_physical_removal() {
        let (source, target) = small_domain_pair(4);
        let n = source.len();
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    0.0
                } else {
                    0.5 + 0.5 * ((i % 2) as f64)
                }
            })
            .collect();
        let survivors: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
        let reduced = DomainDataset::new(
            gather_rows(source.features(), &survivors),
            survivors.iter().map(|&i| source.labels()[i]).collect(),
            None,
            DomainTag::Source,
            source.class_count(),
        )
        .unwrap();
        let reduced_weights: Vec<f64> = survivors.iter().map(|&i| weights[i]).collect();

        // Gaussian prototype init: both sessions must start from the same
        // state even though they see different datasets.
        let cfg = TrainConfig {
            prototype_init: PrototypeInit::Gaussian,
            ..quick_config()
        };
        let mut a = TrainSession::new(&cfg, &source).unwrap();
        let mut b = TrainSession::new(&cfg, &reduced).unwrap();
        a.adapt_epoch_with_weights(&source, target.features(), &weights, None, 0)
            .unwrap();
        b.adapt_epoch_with_weights(&reduced, target.features(), &reduced_weights, None, 0)
            .unwrap();
        for (la, lb) in a
            .model()
            .extractor
            .layers()
            .iter()
            .zip(b.model().extractor.layers())
        {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
        assert_eq!(
            a.model().prototypes.prototypes(),
            b.model().prototypes.prototypes()
        );
    }

    #[test]
    fn adapt_records_have_sane_ranges() {
        let (source, target) = small_domain_pair(5);
        let source = corrupt_mixed(&source, 0.4, 99).unwrap();
        let out = train(&quick_config(), &source, target.features()).unwrap();
        for r in &out.records {
            assert!(r.retained_fraction >= 0.0 && r.retained_fraction <= 1.0);
            if let Some(d) = r.mean_target_discriminator {
                assert!(d > 0.0 && d <= 1.0, "mean target D {d}");
            }
            if r.phase == Phase::Adapt {
                assert!(r.gmm.is_some());
                assert!(r.weights.is_some());
            }
        }
        // The final warm-up record carries the post-warm-up target entropy.
        let last_warm = &out.records[quick_config().warmup_epochs - 1];
        assert!(last_warm.mean_target_discriminator.is_some());
    }

    #[test]
    fn train_is_deterministic_per_seed() {
        let (source, target) = small_domain_pair(6);
        let source = corrupt_mixed(&source, 0.3, 7).unwrap();
        let cfg = quick_config();
        let a = train(&cfg, &source, target.features()).unwrap();
        let b = train(&cfg, &source, target.features()).unwrap();
        assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
        assert_eq!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&b.records).unwrap()
        );
    }

    #[test]
    fn source_only_config_runs_pure_warmup() {
        let (source, target) = small_domain_pair(8);
        let cfg = quick_config().source_only();
        let out = train(&cfg, &source, target.features()).unwrap();
        assert_eq!(out.records.len(), cfg.warmup_epochs);
        assert!(out.records.iter().all(|r| r.phase == Phase::Warmup));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad_eta = TrainConfig {
            eta: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad_eta.validate().is_err());
        let no_warmup = TrainConfig {
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(no_warmup.validate().is_err());
        let cold = TrainConfig {
            temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(cold.validate().is_err());
    }
}
