//! Command-line surface: dataset generation, training, evaluation,
//! noise-level sweeps, embedding export, and the gradient verification suite.
//!
//! Configuration comes from an optional TOML file (`[train]` and `[data]`
//! sections) with per-flag overrides; `--seed` is available everywhere. On
//! failure the process prints a single machine-parseable JSON line to stderr
//! and exits nonzero.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ntda::data::{self, CorruptionKind, DomainDataset};
use ntda::error::{Error, Result};
use ntda::gradcheck::run_gradient_suite;
use ntda::metrics::{evaluate, export_embeddings, MetricsReport};
use ntda::model::ModelState;
use ntda::noisemodel::compute_weights;
use ntda::sweep::{sweep, DataSpec};
use ntda::trainer::{train_with_observer, PrototypeInit, TrainConfig, UpdateMode};

pub const CONFIG_SCHEMA: &str = "ntda-config/1";

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    schema: String,
    train: TrainConfig,
    data: DataSpec,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig {
            schema: CONFIG_SCHEMA.to_string(),
            ..FileConfig::default()
        });
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: FileConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    if !cfg.schema.is_empty() && cfg.schema != CONFIG_SCHEMA {
        return Err(Error::Config(format!(
            "unsupported config schema {:?}, expected {CONFIG_SCHEMA:?}",
            cfg.schema
        )));
    }
    Ok(cfg)
}

fn parse_kind(s: &str) -> std::result::Result<CorruptionKind, String> {
    s.parse::<CorruptionKind>().map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "ntda",
    version,
    about = "Noise-tolerant domain adaptation on synthetic vector data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corrupted-source / clean-target dataset pair
    Generate(GenerateArgs),
    /// Train on a source dataset and unlabeled target features
    Train(TrainArgs),
    /// Evaluate a saved model against a labeled dataset
    Eval(EvalArgs),
    /// Run the noise-level sweep against the source-only baseline
    Sweep(SweepArgs),
    /// Export embedding-space coordinates for offline projection
    ExportEmbeddings(ExportArgs),
    /// Verify every analytic gradient against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving source.csv/.json and target.csv/.json
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the data seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    class_sep: Option<f64>,
    #[arg(long)]
    rotation_degrees: Option<f64>,
    #[arg(long)]
    translation_norm: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    /// none | label | feature | mixed
    #[arg(long, value_parser = parse_kind)]
    corruption: Option<CorruptionKind>,
    #[arg(long)]
    p_noise: Option<f64>,
    /// Label redraws exclude the original class
    #[arg(long)]
    exclude_original: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source dataset CSV (sidecar JSON expected next to it)
    #[arg(long)]
    source: PathBuf,
    /// Target dataset CSV; its labels are used for evaluation only
    #[arg(long)]
    target: PathBuf,
    /// Directory receiving model.json, records.jsonl and report.json
    #[arg(long)]
    out_dir: PathBuf,
    /// Write model_epoch_<k>.json every N epochs (0 = final model only)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Disable unsupervised noise removal (ablation)
    #[arg(long)]
    no_noise_removal: bool,
    /// simultaneous | alternating
    #[arg(long)]
    update_mode: Option<String>,
    /// classmeans | gaussian
    #[arg(long)]
    prototype_init: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Labeled dataset to classify (typically the target)
    #[arg(long)]
    dataset: PathBuf,
    /// Source dataset with clean flags, for selection metrics
    #[arg(long)]
    source: Option<PathBuf>,
    /// Also write the report JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path; rows are flushed as they complete
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.2, 0.4])]
    levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_values_t = vec![CorruptionKind::Mixed])]
    kinds: Vec<CorruptionKind>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Overrides the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the data seed
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weighting threshold used for the source weight column
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random states per loss
    #[arg(long, default_value_t = 100)]
    states: usize,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        let line = serde_json::json!({ "error": e.to_string() });
        eprintln!("{line}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => generate(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::ExportEmbeddings(args) => export_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.data;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.classes {
        cfg.classes = v;
    }
    if let Some(v) = args.per_class {
        cfg.per_class = v;
    }
    if let Some(v) = args.input_dim {
        cfg.input_dim = v;
    }
    if let Some(v) = args.class_sep {
        cfg.class_sep = v;
    }
    if let Some(v) = args.rotation_degrees {
        cfg.rotation_degrees = v;
    }
    if let Some(v) = args.translation_norm {
        cfg.translation_norm = v;
    }
    if let Some(v) = args.scale {
        cfg.scale = v;
    }
    if let Some(v) = args.corruption {
        cfg.corruption = v;
    }
    if let Some(v) = args.p_noise {
        cfg.p_noise = v;
    }
    if args.exclude_original {
        cfg.exclude_original_label = true;
    }

    let pair = cfg.make_domain_pair()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let source_path = args.out_dir.join("source.csv");
    let target_path = args.out_dir.join("target.csv");
    data::save(&source_path, &pair.source, &pair.source_provenance)?;
    data::save(&target_path, &pair.target, &pair.target_provenance)?;
    println!(
        "{}",
        serde_json::json!({
            "source": source_path,
            "target": target_path,
            "source_rows": pair.source.len(),
            "target_rows": pair.target.len(),
        })
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut TrainConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = args.train_epochs {
        cfg.train_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if args.no_noise_removal {
        cfg.noise_removal = false;
    }
    if let Some(mode) = &args.update_mode {
        cfg.update_mode = match mode.as_str() {
            "simultaneous" => UpdateMode::Simultaneous,
            "alternating" => UpdateMode::Alternating,
            other => {
                return Err(Error::Config(format!(
                    "unknown update mode {other:?} (use simultaneous or alternating)"
                )))
            }
        };
    }
    if let Some(init) = &args.prototype_init {
        cfg.prototype_init = match init.as_str() {
            "classmeans" => PrototypeInit::ClassMeans,
            "gaussian" => PrototypeInit::Gaussian,
            other => {
                return Err(Error::Config(format!(
                    "unknown prototype init {other:?} (use classmeans or gaussian)"
                )))
            }
        };
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.train;
    apply_train_overrides(&mut cfg, &args)?;
    // Load both datasets before touching the output directory, so a bad path
    // leaves nothing behind.
    let source = data::load(&args.source)?;
    let target = data::load(&args.target)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let records_path = args.out_dir.join("records.jsonl");
    let mut records_file = std::io::BufWriter::new(std::fs::File::create(&records_path)?);

    let out_dir = args.out_dir.clone();
    let checkpoint_every = args.checkpoint_every;
    let output = train_with_observer(&cfg, &source, target.features(), |model, record| {
        serde_json::to_writer(&mut records_file, record)?;
        records_file.write_all(b"\n")?;
        records_file.flush()?;
        if checkpoint_every > 0 && (record.epoch + 1) % checkpoint_every == 0 {
            model.save(&out_dir.join(format!("model_epoch_{}.json", record.epoch)))?;
        }
        Ok(())
    })?;

    let model_path = args.out_dir.join("model.json");
    output.model.save(&model_path)?;
    let report = evaluate(&output.model, &target, Some(&source), &cfg)?;
    std::fs::write(args.out_dir.join("report.json"), report.to_json()?)?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.train;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let model = ModelState::load(&args.model)?;
    let dataset = data::load(&args.dataset)?;
    let source = args.source.as_deref().map(data::load).transpose()?;
    let report: MetricsReport = evaluate(&model, &dataset, source.as_ref(), &cfg)?;
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json()?)?;
    }
    println!("{}", report.to_json()?);
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut train_cfg = cfg.train;
    let mut data_cfg = cfg.data;
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = args.data_seed {
        data_cfg.seed = v;
    }
    let file = std::fs::File::create(&args.out)?;
    let rows = sweep(
        &train_cfg,
        &data_cfg,
        &args.kinds,
        &args.levels,
        args.repeats,
        file,
    )?;
    println!(
        "{}",
        serde_json::json!({ "out": args.out, "rows": rows.len() })
    );
    Ok(())
}

fn export_cmd(args: ExportArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?.train;
    let eta = args.eta.unwrap_or(cfg.eta);
    let model = ModelState::load(&args.model)?;
    let source: DomainDataset = data::load(&args.source)?;
    let target = data::load(&args.target)?;
    let weights = match compute_weights(&model, &source, eta) {
        Ok((w, _)) => Some(w),
        // A degenerate noise-model fit leaves the weight column empty rather
        // than failing the export.
        Err(Error::DegenerateData(_)) => None,
        Err(e) => return Err(e),
    };
    export_embeddings(&model, &source, weights.as_deref(), &target, &args.out)?;
    println!(
        "{}",
        serde_json::json!({ "out": args.out, "rows": source.len() + target.len() })
    );
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let results = run_gradient_suite(args.states, args.h, args.tol, args.seed)?;
    let mut all_passed = true;
    for r in &results {
        println!(
            "{}: states={} max_rel_err={:.3e} {}",
            r.loss,
            r.states,
            r.max_relative_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    if !all_passed {
        return Err(Error::OracleFailure(format!(
            "gradient checks failed at tol {}",
            args.tol
        )));
    }
    Ok(())
}
