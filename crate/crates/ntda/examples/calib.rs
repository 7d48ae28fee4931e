//! Scratch: grid calibration for the desk-scale defaults.

use ntda::metrics::evaluate;
use ntda::sweep::DataSpec;
use ntda::trainer::{train, Phase, TrainConfig};

fn run(cfg: &TrainConfig, data: &DataSpec, seeds: u64) -> (f64, f64, f64, f64, f64) {
    let mut acc = 0.0;
    let mut sel_p = 0.0;
    let mut sel_r = 0.0;
    let mut d_warm = 0.0;
    let mut d_final = 0.0;
    for seed in 0..seeds {
        let pair = DataSpec {
            seed: data.seed + 100 * seed,
            ..data.clone()
        }
        .make_domain_pair()
        .unwrap();
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let out = train(&cfg, &pair.source, pair.target.features()).unwrap();
        let report = evaluate(&out.model, &pair.target, Some(&pair.source), &cfg).unwrap();
        acc += report.target_accuracy;
        sel_p += report.selection_precision.unwrap_or(f64::NAN);
        sel_r += report.selection_recall.unwrap_or(f64::NAN);
        d_warm += out
            .records
            .iter()
            .filter(|r| r.phase == Phase::Warmup)
            .last()
            .and_then(|r| r.mean_target_discriminator)
            .unwrap_or(f64::NAN);
        d_final += out
            .records
            .last()
            .and_then(|r| r.mean_target_discriminator)
            .unwrap_or(f64::NAN);
    }
    let n = seeds as f64;
    (acc / n, sel_p / n, sel_r / n, d_warm / n, d_final / n)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lrs: Vec<f64> = args
        .get(1)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.01, 0.05, 0.1]);
    let seps: Vec<f64> = args
        .get(2)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![4.0, 6.0, 8.0]);
    let warm: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let adapt: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seeds: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3);
    let momentum: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let embed: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(64);

    for &lr in &lrs {
        for &sep in &seps {
            let data = DataSpec {
                class_sep: sep,
                ..DataSpec::default()
            };
            let mode = if std::env::var("ALTERNATE").is_ok() {
                ntda::trainer::UpdateMode::Alternating
            } else {
                ntda::trainer::UpdateMode::Simultaneous
            };
            let base = TrainConfig {
                learning_rate: lr,
                warmup_epochs: warm,
                train_epochs: adapt,
                momentum,
                embed_dim: embed,
                batch_size: batch,
                update_mode: mode,
                ..TrainConfig::default()
            };
            let ntda = run(&base, &data, seeds);
            let wo_caa = run(
                &TrainConfig {
                    lambda2: 0.0,
                    ..base.clone()
                },
                &data,
                seeds,
            );
            let wo_unr = run(
                &TrainConfig {
                    noise_removal: false,
                    ..base.clone()
                },
                &data,
                seeds,
            );
            let src = run(&base.source_only(), &data, seeds);
            println!(
                "lr {lr:<5} sep {sep:<4} | acc: ntda {:.3} woCAA {:.3} woUNR {:.3} src {:.3} | gap {:+.3} | sel P {:.3} R {:.3} | D {:.5}->{:.5}",
                ntda.0, wo_caa.0, wo_unr.0, src.0,
                ntda.0 - src.0,
                ntda.1, ntda.2, ntda.3, ntda.4
            );
        }
    }
}
