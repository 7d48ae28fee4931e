//! The gradient verification suite: every analytic gradient in `losses` is
//! checked against central finite differences at many random states. Backs
//! the `gradcheck` CLI command and the acceptance gate.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{finite_diff_check, Matrix};
use crate::error::Result;
use crate::losses::{
    loss_adv_d, loss_adv_f, loss_cls, loss_reg, objective_extractor, objective_prototypes,
    SourceBatch,
};
use crate::model::PrototypeSet;

/// Outcome for one loss across all sampled states.
#[derive(Debug, Clone)]
pub struct GradSuiteResult {
    pub loss: &'static str,
    pub states: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

struct State {
    source_features: Matrix,
    target_features: Matrix,
    protos: PrototypeSet,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

const N_SOURCE: usize = 6;
const N_TARGET: usize = 5;
const CLASSES: usize = 4;
const EMBED: usize = 5;
const TEMPERATURE: f64 = 2.0;

/// Margin keeping sampled discriminator outputs outside the gradient-guard
/// zones, so +-h probes stay where analytic and numeric gradients agree.
const CLAMP_MARGIN: f64 = 0.06;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Draws states until every target row's discriminator output sits strictly
/// inside the clamp margin.
fn sample_state(seed: u64) -> State {
    let mut attempt = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let source_features = random_matrix(&mut rng, N_SOURCE, EMBED, 2.0);
        let target_features = random_matrix(&mut rng, N_TARGET, EMBED, 2.0);
        let protos =
            PrototypeSet::new(random_matrix(&mut rng, CLASSES, EMBED, 2.0), TEMPERATURE)
                .expect("valid prototypes");
        let labels = (0..N_SOURCE).map(|_| rng.random_range(0..CLASSES)).collect();
        let weights = (0..N_SOURCE).map(|_| rng.random_range(0.05..1.0)).collect();
        let d_ok = protos
            .discriminate(&target_features)
            .expect("finite features")
            .iter()
            .all(|&d| d > CLAMP_MARGIN && d < 1.0 - CLAMP_MARGIN);
        if d_ok {
            return State {
                source_features,
                target_features,
                protos,
                labels,
                weights,
            };
        }
        attempt = attempt.wrapping_add(0x1000_0000);
    }
}

/// A gradient block to verify: the parameter matrix it differentiates, the
/// analytic gradient, and the loss as a function of that matrix.
fn check_block(
    loss_fn: impl Fn(&Matrix) -> f64,
    params: &Matrix,
    analytic: &Matrix,
    h: f64,
    worst: &mut f64,
) -> Result<()> {
    let report = finite_diff_check(loss_fn, params, analytic, h, f64::INFINITY)?;
    if report.max_relative_error > *worst {
        *worst = report.max_relative_error;
    }
    Ok(())
}

macro_rules! simple_loss_case {
    ($name:literal, $f:path, $weighted:expr) => {
        (
            $name,
            Box::new(move |state: &State, h: f64, worst: &mut f64| -> Result<()> {
                let weights = if $weighted {
                    Some(state.weights.as_slice())
                } else {
                    None
                };
                let lv = $f(&state.source_features, &state.labels, &state.protos, weights)?;
                check_block(
                    |f| $f(f, &state.labels, &state.protos, weights).unwrap().value,
                    &state.source_features,
                    &lv.grad_features,
                    h,
                    worst,
                )?;
                let t = state.protos.temperature();
                check_block(
                    |p| {
                        let probe = PrototypeSet::new(p.clone(), t).unwrap();
                        $f(&state.source_features, &state.labels, &probe, weights)
                            .unwrap()
                            .value
                    },
                    state.protos.prototypes(),
                    &lv.grad_prototypes,
                    h,
                    worst,
                )
            }) as CaseFn,
        )
    };
}

macro_rules! adversarial_loss_case {
    ($name:literal, $f:path) => {
        (
            $name,
            Box::new(move |state: &State, h: f64, worst: &mut f64| -> Result<()> {
                let lv = $f(&state.target_features, &state.protos)?;
                check_block(
                    |f| $f(f, &state.protos).unwrap().value,
                    &state.target_features,
                    &lv.grad_features,
                    h,
                    worst,
                )?;
                let t = state.protos.temperature();
                check_block(
                    |p| {
                        let probe = PrototypeSet::new(p.clone(), t).unwrap();
                        $f(&state.target_features, &probe).unwrap().value
                    },
                    state.protos.prototypes(),
                    &lv.grad_prototypes,
                    h,
                    worst,
                )
            }) as CaseFn,
        )
    };
}

type CaseFn = Box<dyn Fn(&State, f64, &mut f64) -> Result<()>>;

const LAMBDA1: f64 = 0.5;
const LAMBDA2: f64 = 1.0;

fn composite_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        (
            "objective_prototypes",
            Box::new(|state: &State, h: f64, worst: &mut f64| -> Result<()> {
                let batch = SourceBatch {
                    features: &state.source_features,
                    labels: &state.labels,
                    weights: Some(&state.weights),
                };
                let obj = objective_prototypes(
                    &batch,
                    &state.target_features,
                    &state.protos,
                    LAMBDA1,
                    LAMBDA2,
                )?;
                let t = state.protos.temperature();
                check_block(
                    |p| {
                        let probe = PrototypeSet::new(p.clone(), t).unwrap();
                        objective_prototypes(
                            &batch,
                            &state.target_features,
                            &probe,
                            LAMBDA1,
                            LAMBDA2,
                        )
                        .unwrap()
                        .value
                    },
                    state.protos.prototypes(),
                    &obj.grad_prototypes,
                    h,
                    worst,
                )
            }),
        ),
        (
            "objective_extractor",
            Box::new(|state: &State, h: f64, worst: &mut f64| -> Result<()> {
                let batch = SourceBatch {
                    features: &state.source_features,
                    labels: &state.labels,
                    weights: Some(&state.weights),
                };
                let obj = objective_extractor(
                    &batch,
                    &state.target_features,
                    &state.protos,
                    LAMBDA1,
                    LAMBDA2,
                )?;
                check_block(
                    |f| {
                        let b = SourceBatch {
                            features: f,
                            labels: &state.labels,
                            weights: Some(&state.weights),
                        };
                        objective_extractor(
                            &b,
                            &state.target_features,
                            &state.protos,
                            LAMBDA1,
                            LAMBDA2,
                        )
                        .unwrap()
                        .value
                    },
                    &state.source_features,
                    &obj.grad_source_features,
                    h,
                    worst,
                )?;
                check_block(
                    |tf| {
                        objective_extractor(&batch, tf, &state.protos, LAMBDA1, LAMBDA2)
                            .unwrap()
                            .value
                    },
                    &state.target_features,
                    &obj.grad_target_features,
                    h,
                    worst,
                )
            }),
        ),
    ]
}

/// Runs every loss through `states_per_loss` random-state checks and reports
/// the worst relative error per loss.
pub fn run_gradient_suite(
    states_per_loss: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<GradSuiteResult>> {
    let mut cases: Vec<(&'static str, CaseFn)> = vec![
        simple_loss_case!("loss_cls", loss_cls, false),
        simple_loss_case!("loss_reg", loss_reg, false),
        adversarial_loss_case!("loss_adv_d", loss_adv_d),
        adversarial_loss_case!("loss_adv_f", loss_adv_f),
        simple_loss_case!("loss_cls_weighted", loss_cls, true),
        simple_loss_case!("loss_reg_weighted", loss_reg, true),
    ];
    cases.extend(composite_cases());

    let mut results = Vec::with_capacity(cases.len());
    for (case_idx, (name, case)) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        for s in 0..states_per_loss {
            let state = sample_state(seed ^ ((case_idx as u64) << 32) ^ s as u64);
            case(&state, h, &mut worst)?;
        }
        results.push(GradSuiteResult {
            loss: name,
            states: states_per_loss,
            max_relative_error: worst,
            passed: worst <= tol,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes_at_tolerance() {
        let results = run_gradient_suite(5, 1e-4, 1e-4, 0).unwrap();
        assert_eq!(results.len(), 8);
        for r in &results {
            assert!(
                r.passed,
                "{}: max relative error {}",
                r.loss, r.max_relative_error
            );
        }
    }
}
