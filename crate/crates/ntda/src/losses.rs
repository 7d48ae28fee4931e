//! Scalar training objectives with analytic gradients with respect to the
//! features and the prototypes.
//!
//! Every gradient here is a hand-derived closed form built on one identity:
//! for logits `z_ij = -||f_i - p_j||^2 / T` and any scalar loss L,
//!
//! ```text
//! dL/df_i = sum_j (dL/dz_ij) * (-2/T) (f_i - p_j)
//! dL/dp_j = sum_i (dL/dz_ij) * ( 2/T) (f_i - p_j)
//! ```
//!
//! so each loss only has to produce its logit gradient. The whole module is
//! covered by central-difference checks (see `gradcheck`).

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::model::PrototypeSet;

/// Discriminator outputs are clamped to `[EPS, 1 - EPS]` before logs: the
/// GAN term diverges as D -> 1, which is exactly where uniform-posterior
/// targets start out.
pub const D_CLAMP: f64 = 1e-7;

/// Slope cap for the adversarial log terms. The true derivative of
/// `-log(1 - D)` reaches 1e7 right below the clamp, and one such batch can
/// throw the extractor across the embedding space; training instead follows
/// the linearized barrier whose slope is bounded by `1 / D_GRAD_GUARD`.
/// Values are untouched, and gradients match the analytic derivative
/// everywhere outside the guard zones `[0, guard]` and `[1 - guard, 1]`.
pub const D_GRAD_GUARD: f64 = 5e-2;

/// A scalar loss with gradients for both parameter groups it touches.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_prototypes: Matrix,
}

/// A labeled (and optionally weighted) source minibatch.
#[derive(Debug, Clone, Copy)]
pub struct SourceBatch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub weights: Option<&'a [f64]>,
}

/// Value and gradients of one of the alternating objectives; source and
/// target features get separate gradient blocks because they flow back
/// through separate forward passes.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub value: f64,
    pub grad_source_features: Matrix,
    pub grad_target_features: Matrix,
    pub grad_prototypes: Matrix,
}

fn check_batch(features: &Matrix, protos: &PrototypeSet, what: &str) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::EmptyBatch(what.into()));
    }
    if features.cols() != protos.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: feature dim {} vs prototype dim {}",
            features.cols(),
            protos.embed_dim()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite(format!("{what} features")));
    }
    Ok(())
}

fn check_labels_weights(
    n: usize,
    labels: &[usize],
    weights: Option<&[f64]>,
    class_count: usize,
) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} samples",
                w.len(),
                n
            )));
        }
        if let Some(&bad) = w.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config(format!("weight {bad} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Chains a logit gradient `g` (N x M) to feature and prototype gradients.
fn chain_through_logits(
    features: &Matrix,
    protos: &PrototypeSet,
    g: &Matrix,
) -> (Matrix, Matrix) {
    let (n, d) = features.shape();
    let m = protos.class_count();
    let t = protos.temperature();
    let p = protos.prototypes();
    let mut grad_f = Matrix::zeros(n, d);
    let mut grad_p = Matrix::zeros(m, d);
    for i in 0..n {
        let f_row = features.row(i);
        for j in 0..m {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            let c = 2.0 * gij / t;
            let p_row = p.row(j);
            for k in 0..d {
                let diff = f_row[k] - p_row[k];
                grad_f.set(i, k, grad_f.get(i, k) - c * diff);
                grad_p.set(j, k, grad_p.get(j, k) + c * diff);
            }
        }
    }
    (grad_f, grad_p)
}

fn finite_loss(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} value")))
    }
}

/// Weighted cross entropy on the prototype classifier,
/// `-(1/N) sum_i w_i log P(y_i | f_i)`, with w_i = 1 when `weights` is absent.
///
/// Normalization is by the batch size N, not by the weight sum, so heavily
/// down-weighted batches yield a proportionally smaller loss.
pub fn loss_cls(
    features: &Matrix,
    labels: &[usize],
    protos: &PrototypeSet,
    weights: Option<&[f64]>,
) -> Result<LossValue> {
    check_batch(features, protos, "loss_cls")?;
    let n = features.rows();
    check_labels_weights(n, labels, weights, protos.class_count())?;

    let log_post = protos.log_posteriors(features)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut g = Matrix::zeros(n, protos.class_count());
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        value -= inv_n * w * log_post.get(i, labels[i]);
        if w == 0.0 {
            continue;
        }
        for j in 0..protos.class_count() {
            let p = log_post.get(i, j).exp();
            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
            g.set(i, j, inv_n * w * (p - indicator));
        }
    }
    let (grad_features, grad_prototypes) = chain_through_logits(features, protos, &g);
    Ok(LossValue {
        value: finite_loss(value, "loss_cls")?,
        grad_features,
        grad_prototypes,
    })
}

/// Weighted compact regularizer, `(1/N) sum_i w_i ||f_i - p_{y_i}||^2`, which
/// pulls every sample toward its labeled class prototype.
pub fn loss_reg(
    features: &Matrix,
    labels: &[usize],
    protos: &PrototypeSet,
    weights: Option<&[f64]>,
) -> Result<LossValue> {
    check_batch(features, protos, "loss_reg")?;
    let n = features.rows();
    check_labels_weights(n, labels, weights, protos.class_count())?;

    let (_, d) = features.shape();
    let inv_n = 1.0 / n as f64;
    let p = protos.prototypes();
    let mut value = 0.0;
    let mut grad_f = Matrix::zeros(n, d);
    let mut grad_p = Matrix::zeros(protos.class_count(), d);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let y = labels[i];
        let f_row = features.row(i);
        let p_row = p.row(y);
        for k in 0..d {
            let diff = f_row[k] - p_row[k];
            value += inv_n * w * diff * diff;
            let c = 2.0 * inv_n * w * diff;
            grad_f.set(i, k, c);
            grad_p.set(y, k, grad_p.get(y, k) - c);
        }
    }
    Ok(LossValue {
        value: finite_loss(value, "loss_reg")?,
        grad_features: grad_f,
        grad_prototypes: grad_p,
    })
}

/// Per-row entropy terms shared by the two adversarial losses.
struct EntropyRows {
    log_post: Matrix,
    /// Unnormalized entropy H_i of each posterior row.
    entropy: Vec<f64>,
    /// Normalized discriminator outputs D_i, clamped into [0, 1].
    d: Vec<f64>,
}

fn entropy_rows(features: &Matrix, protos: &PrototypeSet) -> Result<EntropyRows> {
    let log_post = protos.log_posteriors(features)?;
    let ln_m = (protos.class_count() as f64).ln();
    let n = features.rows();
    let mut entropy = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let mut h = 0.0;
        for &lp in log_post.row(i) {
            h -= lp.exp() * lp;
        }
        entropy.push(h);
        d.push((h / ln_m).clamp(0.0, 1.0));
    }
    Ok(EntropyRows {
        log_post,
        entropy,
        d,
    })
}

/// Gradient of the normalized entropy with respect to the logits, scaled by
/// `upstream_i = dL/dD_i`, written into `g`.
fn entropy_logit_grad(rows: &EntropyRows, upstream: &[f64], m: usize) -> Matrix {
    let ln_m = (m as f64).ln();
    let n = rows.d.len();
    let mut g = Matrix::zeros(n, m);
    for i in 0..n {
        let scale = upstream[i] / ln_m;
        let h = rows.entropy[i];
        for j in 0..m {
            let lp = rows.log_post.get(i, j);
            let p = lp.exp();
            // dH/dz_ij = -p (ln p + H)
            g.set(i, j, scale * (-p * (lp + h)));
        }
    }
    g
}

/// Discriminator loss on target data, `-(1/N_t) sum_i log D(f_i)`.
/// Minimizing it over the prototypes keeps target entropy high.
pub fn loss_adv_d(target_features: &Matrix, protos: &PrototypeSet) -> Result<LossValue> {
    check_batch(target_features, protos, "loss_adv_d")?;
    let n = target_features.rows();
    let rows = entropy_rows(target_features, protos)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut upstream = vec![0.0; n];
    for i in 0..n {
        let clamped = rows.d[i].clamp(D_CLAMP, 1.0 - D_CLAMP);
        value -= inv_n * clamped.ln();
        upstream[i] = -inv_n / clamped.max(D_GRAD_GUARD);
    }
    let g = entropy_logit_grad(&rows, &upstream, protos.class_count());
    let (grad_features, grad_prototypes) = chain_through_logits(target_features, protos, &g);
    Ok(LossValue {
        value: finite_loss(value, "loss_adv_d")?,
        grad_features,
        grad_prototypes,
    })
}

/// Extractor-side GAN loss on target data, `-(1/N_t) sum_i log(1 - D(f_i))`.
/// Minimizing it over the extractor drives target entropy down, aligning
/// target data with the class prototypes.
pub fn loss_adv_f(target_features: &Matrix, protos: &PrototypeSet) -> Result<LossValue> {
    check_batch(target_features, protos, "loss_adv_f")?;
    let n = target_features.rows();
    let rows = entropy_rows(target_features, protos)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut upstream = vec![0.0; n];
    for i in 0..n {
        let clamped = rows.d[i].clamp(D_CLAMP, 1.0 - D_CLAMP);
        value -= inv_n * (1.0 - clamped).ln();
        upstream[i] = inv_n / (1.0 - clamped).max(D_GRAD_GUARD);
    }
    let g = entropy_logit_grad(&rows, &upstream, protos.class_count());
    let (grad_features, grad_prototypes) = chain_through_logits(target_features, protos, &g);
    Ok(LossValue {
        value: finite_loss(value, "loss_adv_f")?,
        grad_features,
        grad_prototypes,
    })
}

fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Config(format!(
            "trade-off weights must be >= 0, got lambda1={lambda1} lambda2={lambda2}"
        )));
    }
    Ok(())
}

fn composite(
    source: &SourceBatch,
    target_features: &Matrix,
    protos: &PrototypeSet,
    lambda1: f64,
    lambda2: f64,
    adversarial: fn(&Matrix, &PrototypeSet) -> Result<LossValue>,
) -> Result<CompositeLoss> {
    check_lambdas(lambda1, lambda2)?;
    let cls = loss_cls(source.features, source.labels, protos, source.weights)?;
    let reg = loss_reg(source.features, source.labels, protos, source.weights)?;
    let mut value = cls.value + lambda1 * reg.value;
    let grad_source_features = cls
        .grad_features
        .add_scaled(&reg.grad_features, lambda1)?;
    let mut grad_prototypes = cls
        .grad_prototypes
        .add_scaled(&reg.grad_prototypes, lambda1)?;
    let grad_target_features;
    if lambda2 > 0.0 {
        let adv = adversarial(target_features, protos)?;
        value += lambda2 * adv.value;
        grad_target_features = adv.grad_features.scale(lambda2);
        grad_prototypes = grad_prototypes.add_scaled(&adv.grad_prototypes, lambda2)?;
    } else {
        grad_target_features = Matrix::zeros(target_features.rows(), protos.embed_dim());
    }
    Ok(CompositeLoss {
        value: finite_loss(value, "composite objective")?,
        grad_source_features,
        grad_target_features,
        grad_prototypes,
    })
}

/// The prototype-side objective `L_cls_w + l1 L_reg_w + l2 L_adv_D`; its
/// `grad_prototypes` drives the prototype update.
pub fn objective_prototypes(
    source: &SourceBatch,
    target_features: &Matrix,
    protos: &PrototypeSet,
    lambda1: f64,
    lambda2: f64,
) -> Result<CompositeLoss> {
    composite(source, target_features, protos, lambda1, lambda2, loss_adv_d)
}

/// The extractor-side objective `L_cls_w + l1 L_reg_w + l2 L_adv_F`; its
/// feature gradients are chained through the extractor by the trainer.
pub fn objective_extractor(
    source: &SourceBatch,
    target_features: &Matrix,
    protos: &PrototypeSet,
    lambda1: f64,
    lambda2: f64,
) -> Result<CompositeLoss> {
    composite(source, target_features, protos, lambda1, lambda2, loss_adv_f)
}
