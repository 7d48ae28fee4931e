//! Unsupervised noise removal: a two-component Gaussian mixture fitted by EM
//! to the euclidean distances between source samples and their labeled class
//! prototypes. The smaller-mean component models clean data, which sits
//! closer to its prototype during the early training phase; its posterior is
//! thresholded and rescaled into a per-sample training weight.

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Standard deviations never drop below this floor, so a component cannot
/// collapse onto a single distance value.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Default EM convergence settings: 1-D two-component fits converge in tens
/// of iterations at this scale.
pub const EM_MAX_ITER: usize = 100;
pub const EM_TOL: f64 = 1e-6;

/// Two-component 1-D Gaussian mixture; component 0 is the clean (smaller
/// mean) component by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture2 {
    pub alpha: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

impl GaussianMixture2 {
    /// Builds a mixture, relabeling components so `mu[0] <= mu[1]` and
    /// flooring the standard deviations. `alpha[1]` is forced to
    /// `1 - alpha[0]` so the priors sum to one exactly.
    pub fn new(alpha: [f64; 2], mu: [f64; 2], sigma: [f64; 2]) -> Result<Self> {
        if alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Config(format!("priors {alpha:?} outside [0, 1]")));
        }
        if (alpha[0] + alpha[1] - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("priors {alpha:?} do not sum to 1")));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture parameters".into()));
        }
        let (a, m, s) = if mu[0] <= mu[1] {
            (alpha[0], mu, sigma)
        } else {
            (alpha[1], [mu[1], mu[0]], [sigma[1], sigma[0]])
        };
        Ok(GaussianMixture2 {
            alpha: [a, 1.0 - a],
            mu: m,
            sigma: [s[0].max(SIGMA_FLOOR), s[1].max(SIGMA_FLOOR)],
        })
    }
}

/// Record of one EM fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmTrace {
    pub iterations: usize,
    pub log_likelihood_history: Vec<f64>,
    pub converged: bool,
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    const LN_SQRT_TAU: f64 = 0.918_938_533_204_672_7; // ln(sqrt(2 pi))
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_TAU
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits the two-component mixture to `distances` with EM.
///
/// Initialization is deterministic: the sorted sample is split in half and
/// each half seeds one component. Stops when the log-likelihood improves by
/// less than `tol` or after `max_iter` iterations; the returned components
/// are relabeled so the clean (smaller-mean) one comes first.
pub fn fit_em(distances: &[f64], max_iter: usize, tol: f64) -> Result<(GaussianMixture2, EmTrace)> {
    let n = distances.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "EM needs at least 4 distances, got {n}"
        )));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Config("distances must be finite and >= 0".into()));
    }
    let lo = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::DegenerateData(
            "all distances identical; no mixture split exists".into(),
        ));
    }

    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lower, upper) = sorted.split_at(n / 2);
    let (mu0, s0) = mean_and_std(lower);
    let (mu1, s1) = mean_and_std(upper);
    let mut alpha = [0.5f64, 0.5];
    let mut mu = [mu0, mu1];
    let mut sigma = [s0.max(SIGMA_FLOOR), s1.max(SIGMA_FLOOR)];

    let mut history: Vec<f64> = Vec::new();
    let mut responsibilities = vec![0.0f64; n];
    let mut converged = false;
    for _ in 0..max_iter {
        // E-step: responsibilities of component 0, plus the log-likelihood of
        // the current parameters.
        let mut ll = 0.0;
        for (i, &d) in distances.iter().enumerate() {
            let l0 = alpha[0].ln() + log_normal_pdf(d, mu[0], sigma[0]);
            let l1 = alpha[1].ln() + log_normal_pdf(d, mu[1], sigma[1]);
            let max = l0.max(l1);
            ll += max + ((l0 - max).exp() + (l1 - max).exp()).ln();
            responsibilities[i] = 1.0 / (1.0 + (l1 - l0).exp());
        }
        if let Some(&prev) = history.last() {
            if ll - prev < tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        // M-step.
        let n0: f64 = responsibilities.iter().sum();
        let n1 = n as f64 - n0;
        alpha[0] = n0 / n as f64;
        alpha[1] = 1.0 - alpha[0];
        if n0 > 1e-12 {
            mu[0] = distances
                .iter()
                .zip(&responsibilities)
                .map(|(d, r)| d * r)
                .sum::<f64>()
                / n0;
            sigma[0] = (distances
                .iter()
                .zip(&responsibilities)
                .map(|(d, r)| r * (d - mu[0]).powi(2))
                .sum::<f64>()
                / n0)
                .sqrt()
                .max(SIGMA_FLOOR);
        }
        if n1 > 1e-12 {
            mu[1] = distances
                .iter()
                .zip(&responsibilities)
                .map(|(d, r)| d * (1.0 - r))
                .sum::<f64>()
                / n1;
            sigma[1] = (distances
                .iter()
                .zip(&responsibilities)
                .map(|(d, r)| (1.0 - r) * (d - mu[1]).powi(2))
                .sum::<f64>()
                / n1)
                .sqrt()
                .max(SIGMA_FLOOR);
        }
    }

    let mixture = GaussianMixture2::new(alpha, mu, sigma)?;
    let trace = EmTrace {
        iterations: history.len(),
        log_likelihood_history: history,
        converged,
    };
    Ok((mixture, trace))
}

/// Posterior probability that a distance came from the clean component,
/// computed in log space.
pub fn posterior_clean(d: f64, g: &GaussianMixture2) -> f64 {
    let l0 = g.alpha[0].ln() + log_normal_pdf(d, g.mu[0], g.sigma[0]);
    let l1 = g.alpha[1].ln() + log_normal_pdf(d, g.mu[1], g.sigma[1]);
    1.0 / (1.0 + (l1 - l0).exp())
}

/// Complement of `posterior_clean`; the two sum to 1 exactly.
pub fn posterior_noisy(d: f64, g: &GaussianMixture2) -> f64 {
    1.0 - posterior_clean(d, g)
}

/// Threshold-and-rescale weighting: zero when the clean posterior does not
/// exceed `eta`, linear from 0 to 1 above it.
pub fn sample_weight(p_clean: f64, eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_clean) {
        return Err(Error::Config(format!("p_clean {p_clean} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Config(format!(
            "eta must be in [0, 1) (eta = 1 divides by zero), got {eta}"
        )));
    }
    if p_clean > eta {
        Ok((p_clean - eta) / (1.0 - eta))
    } else {
        Ok(0.0)
    }
}

/// Fits the noise model on the full source set and returns per-sample
/// weights.
///
/// Distances fed to the mixture are euclidean (square roots of the squared
/// distances to the labeled class prototype), recomputed fresh from the
/// current model.
pub fn compute_weights(
    model: &ModelState,
    source: &DomainDataset,
    eta: f64,
) -> Result<(Vec<f64>, GaussianMixture2)> {
    if source.class_count() != model.prototypes.class_count() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {} prototypes",
            source.class_count(),
            model.prototypes.class_count()
        )));
    }
    let distances = prototype_distances(model, source)?;
    let (mixture, _) = fit_em(&distances, EM_MAX_ITER, EM_TOL)?;
    let weights = distances
        .iter()
        .map(|&d| sample_weight(posterior_clean(d, &mixture), eta))
        .collect::<Result<Vec<f64>>>()?;
    Ok((weights, mixture))
}

/// Euclidean distance of every source sample to its labeled class prototype.
pub fn prototype_distances(model: &ModelState, source: &DomainDataset) -> Result<Vec<f64>> {
    let features = model.extractor.forward(source.features())?;
    let sq = model.prototypes.sqdists(&features)?;
    Ok(source
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| sq.get(i, y).sqrt())
        .collect())
}
