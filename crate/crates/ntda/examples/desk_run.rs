//! Runs the default desk-scale experiment end to end and prints a compact
//! comparison of the full method against its ablations and the source-only
//! baseline, plus the noise-level sweep rows.
//!
//!     cargo run --release -p ntda --example desk_run

use ntda::metrics::evaluate;
use ntda::sweep::DataSpec;
use ntda::trainer::{train, Phase, TrainConfig};

fn main() {
    let data_cfg = DataSpec::default();
    let base = TrainConfig::default();

    let variants: [(&str, TrainConfig); 4] = [
        ("ntda", base.clone()),
        (
            "no_caa",
            TrainConfig {
                lambda2: 0.0,
                ..base.clone()
            },
        ),
        (
            "no_unr",
            TrainConfig {
                noise_removal: false,
                ..base.clone()
            },
        ),
        ("source_only", base.source_only()),
    ];

    println!("== variants at p_noise = {} ==", data_cfg.p_noise);
    for (name, cfg) in &variants {
        let mut accs = Vec::new();
        let mut sels = Vec::new();
        let mut d_drop = Vec::new();
        for seed in 0..3u64 {
            let pair = DataSpec {
                seed: data_cfg.seed + 100 * seed,
                ..data_cfg.clone()
            }
            .make_domain_pair()
            .unwrap();
            let cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let out = train(&cfg, &pair.source, pair.target.features()).unwrap();
            let report = evaluate(&out.model, &pair.target, Some(&pair.source), &cfg).unwrap();
            accs.push(report.target_accuracy);
            if let (Some(p), Some(r)) = (report.selection_precision, report.selection_recall) {
                sels.push((p, r));
            }
            let warm_d = out
                .records
                .iter()
                .filter(|r| r.phase == Phase::Warmup)
                .last()
                .and_then(|r| r.mean_target_discriminator);
            let final_d = out
                .records
                .last()
                .and_then(|r| r.mean_target_discriminator);
            if let (Some(w), Some(f)) = (warm_d, final_d) {
                d_drop.push((w, f));
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{name:12} acc per seed {accs:.3?} mean {mean:.4}");
        if !sels.is_empty() {
            println!("{:12} selection (P, R) {sels:.3?}", "");
        }
        if !d_drop.is_empty() {
            println!("{:12} target D (post-warmup, final) {d_drop:.3?}", "");
        }
    }

    println!("== noise-level sweep (mixed) ==");
    for level in [0.0, 0.2, 0.4] {
        for (name, cfg) in [("ntda", base.clone()), ("source_only", base.source_only())] {
            let mut accs = Vec::new();
            for seed in 0..3u64 {
                let pair = DataSpec {
                    p_noise: level,
                    seed: data_cfg.seed + 100 * seed,
                    ..data_cfg.clone()
                }
                .make_domain_pair()
                .unwrap();
                let cfg = TrainConfig { seed, ..cfg.clone() };
                let out = train(&cfg, &pair.source, pair.target.features()).unwrap();
                let report = evaluate(&out.model, &pair.target, Some(&pair.source), &cfg).unwrap();
                accs.push(report.target_accuracy);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("p={level:.1} {name:12} mean acc {mean:.4}  per seed {accs:.3?}");
        }
    }
}
