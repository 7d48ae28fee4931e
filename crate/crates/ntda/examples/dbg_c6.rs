//! Scratch: noise-level drop comparison (criterion-6 shape) and seed
//! robustness around the chosen defaults.

use ntda::metrics::evaluate;
use ntda::sweep::DataSpec;
use ntda::trainer::{train, TrainConfig};

fn mean_acc(cfg: &TrainConfig, data: &DataSpec, level: f64, seeds: &[u64]) -> f64 {
    let mut acc = 0.0;
    for &seed in seeds {
        let pair = DataSpec {
            p_noise: level,
            seed: data.seed + 100 * seed,
            ..data.clone()
        }
        .make_domain_pair()
        .unwrap();
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let out = train(&cfg, &pair.source, pair.target.features()).unwrap();
        let report = evaluate(&out.model, &pair.target, Some(&pair.source), &cfg).unwrap();
        acc += report.target_accuracy;
    }
    acc / seeds.len() as f64
}

fn main() {
    let data = DataSpec {
        class_sep: 4.8,
        ..DataSpec::default()
    };
    let base = TrainConfig {
        warmup_epochs: 10,
        train_epochs: 12,
        batch_size: 128,
        momentum: 0.5,
        ..TrainConfig::default()
    };
    let seeds = [0u64, 1, 2];
    for (name, cfg) in [("ntda", base.clone()), ("source_only", base.source_only())] {
        let a0 = mean_acc(&cfg, &data, 0.0, &seeds);
        let a2 = mean_acc(&cfg, &data, 0.2, &seeds);
        let a4 = mean_acc(&cfg, &data, 0.4, &seeds);
        println!(
            "{name:12} p0 {a0:.4} p0.2 {a2:.4} p0.4 {a4:.4} drop(0->0.4) {:+.4}",
            a0 - a4
        );
    }
}
