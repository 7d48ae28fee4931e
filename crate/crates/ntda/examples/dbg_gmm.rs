//! Scratch: per-epoch GMM parameters and selection quality.

use ntda::metrics::selection_prf;
use ntda::sweep::DataSpec;
use ntda::trainer::{train_with_observer, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let adapt: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let momentum: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let lambda2: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let data_cfg = DataSpec {
        class_sep: sep,
        ..DataSpec::default()
    };
    let cfg = TrainConfig {
        warmup_epochs: 10,
        train_epochs: adapt,
        momentum,
        lambda2,
        ..TrainConfig::default()
    };
    let pair = data_cfg.make_domain_pair().unwrap();
    let flags = pair.source.clean_flags().unwrap().to_vec();
    let clean_frac = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    println!("clean fraction {clean_frac:.3}");
    train_with_observer(&cfg, &pair.source, pair.target.features(), |_, record| {
        if let (Some(g), Some(w)) = (&record.gmm, &record.weights) {
            let (p, r) = selection_prf(w, &flags).unwrap();
            println!(
                "epoch {:3} retained {:.2} selP {:.3} selR {:.3} | a ({:.2},{:.2}) mu ({:.3},{:.3}) sig ({:.3},{:.3})",
                record.epoch, record.retained_fraction, p, r,
                g.alpha[0], g.alpha[1], g.mu[0], g.mu[1], g.sigma[0], g.sigma[1],
            );
        }
        Ok(())
    })
    .unwrap();
}
