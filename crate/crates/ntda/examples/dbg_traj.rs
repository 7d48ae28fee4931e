//! Scratch: loss/geometry trajectory for one run.

use ntda::metrics::evaluate;
use ntda::sweep::DataSpec;
use ntda::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let sep: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let warm: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let adapt: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);

    let data_cfg = DataSpec {
        class_sep: sep,
        ..DataSpec::default()
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        warmup_epochs: warm,
        train_epochs: adapt,
        ..TrainConfig::default()
    };
    let pair = data_cfg.make_domain_pair().unwrap();
    let out = train(&cfg, &pair.source, pair.target.features()).unwrap();
    for r in &out.records {
        println!(
            "epoch {:3} {:?} cls {:.4} reg {:.4} retained {:.3} D {:?} advf {:?}",
            r.epoch,
            r.phase,
            r.mean_loss_cls,
            r.mean_loss_reg,
            r.retained_fraction,
            r.mean_target_discriminator.map(|d| (d * 1000.0).round() / 1000.0),
            r.mean_loss_adv_f.map(|d| (d * 100.0).round() / 100.0),
        );
    }
    let report = evaluate(&out.model, &pair.target, Some(&pair.source), &cfg).unwrap();
    println!(
        "acc {:.4} selP {:?} selR {:?}",
        report.target_accuracy, report.selection_precision, report.selection_recall
    );
}
