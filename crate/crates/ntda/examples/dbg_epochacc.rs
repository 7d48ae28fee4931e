//! Scratch: per-epoch target accuracy during adaptation.

use ntda::metrics::evaluate;
use ntda::sweep::DataSpec;
use ntda::trainer::{train_with_observer, Phase, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let sep: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let adapt: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let momentum: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let lambda2: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let data_cfg = DataSpec {
        class_sep: sep,
        ..DataSpec::default()
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        warmup_epochs: 10,
        train_epochs: adapt,
        momentum,
        lambda2,
        ..TrainConfig::default()
    };
    let pair = data_cfg.make_domain_pair().unwrap();
    train_with_observer(&cfg, &pair.source, pair.target.features(), |model, record| {
        let report = evaluate(model, &pair.target, None, &cfg)?;
        let proto = model.prototypes.prototypes();
        let mut min_pp = f64::INFINITY;
        for i in 0..proto.rows() {
            for j in (i + 1)..proto.rows() {
                let d: f64 = proto
                    .row(i)
                    .iter()
                    .zip(proto.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min_pp = min_pp.min(d.sqrt());
            }
        }
        println!(
            "epoch {:3} {:?} acc {:.3} cls {:.3} reg {:.3} retained {:.2} D {:?} min_proto_dist {:.2}",
            record.epoch,
            record.phase == Phase::Adapt,
            report.target_accuracy,
            record.mean_loss_cls,
            record.mean_loss_reg,
            record.retained_fraction,
            record.mean_target_discriminator.map(|d| (d * 100.0).round() / 100.0),
            min_pp,
        );
        Ok(())
    })
    .unwrap();
}
