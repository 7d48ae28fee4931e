//! Scratch: anatomy of selection recall at the final epoch.

use ntda::noisemodel::{posterior_clean, prototype_distances};
use ntda::sweep::DataSpec;
use ntda::trainer::{train, TrainConfig};

fn quantiles(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    [0.05, 0.25, 0.5, 0.75, 0.95, 0.99]
        .iter()
        .map(|q| v[((v.len() - 1) as f64 * q) as usize])
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let embed: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);

    let data_cfg = DataSpec {
        class_sep: sep,
        ..DataSpec::default()
    };
    let cfg = TrainConfig {
        warmup_epochs: 10,
        train_epochs: 10,
        momentum: 0.5,
        embed_dim: embed,
        ..TrainConfig::default()
    };
    let pair = data_cfg.make_domain_pair().unwrap();
    let out = train(&cfg, &pair.source, pair.target.features()).unwrap();
    let flags = pair.source.clean_flags().unwrap();
    let distances = prototype_distances(&out.model, &pair.source).unwrap();
    let gmm = out.records.last().unwrap().gmm.clone().unwrap();

    let clean: Vec<f64> = distances
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(&d, _)| d)
        .collect();
    let noisy: Vec<f64> = distances
        .iter()
        .zip(flags)
        .filter(|(_, &f)| !f)
        .map(|(&d, _)| d)
        .collect();
    println!("clean n={} q {:?}", clean.len(), quantiles(clean.clone()));
    println!("noisy n={} q {:?}", noisy.len(), quantiles(noisy.clone()));
    println!("gmm {gmm:?}");
    let lost = clean
        .iter()
        .filter(|&&d| posterior_clean(d, &gmm) <= 0.5)
        .count();
    let kept_noisy = noisy
        .iter()
        .filter(|&&d| posterior_clean(d, &gmm) > 0.5)
        .count();
    println!(
        "clean lost {}/{} ({:.3}); noisy kept {}/{}",
        lost,
        clean.len(),
        lost as f64 / clean.len() as f64,
        kept_noisy,
        noisy.len()
    );
}
