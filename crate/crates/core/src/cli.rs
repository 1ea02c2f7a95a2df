//! Command-line surface: `train`, `generate`, `evaluate`, `ablate`, and
//! `export-embeddings`.
//!
//! Every command reads its inputs, writes its declared outputs under the
//! configured locations, and never mutates an input file. All outputs are
//! deterministic under fixed seeds. Exit codes: 0 success, 2 for
//! configuration/schema/parse problems, 1 for everything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::corpus::{load_jsonl, load_jsonl_with, write_jsonl, Corpus, LabelMap, Source};
use crate::diagnostics::convergence_curve;
use crate::embedding::EmbeddingSpec;
use crate::evaluation::{avg_toxicity, train_downstream, DownstreamConfig, ToxicityOracle};
use crate::rng::derive_seed;
use crate::trainer::{generate_augmentation, RunSummary, SeedConfig, TrainMode, Trainer};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "toxigan",
    version,
    about = "Class-conditional adversarial text generation for augmenting scarce classes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train per-class generators against the shared discriminator.
    Train(TrainArgs),
    /// Sample labeled augmentation text from a trained checkpoint.
    Generate(GenerateArgs),
    /// Compare downstream classifiers trained with and without augmentation.
    Evaluate(EvaluateArgs),
    /// Run every training mode under shared seeds and data splits.
    Ablate(AblateArgs),
    /// Export embedding vectors with source and label columns.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides run.output_dir.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides run.max_epoch.
    #[arg(long)]
    pub max_epoch: Option<usize>,
    /// Overrides run.mode (full, no_ballast, no_toxicity_step, joint).
    #[arg(long)]
    pub mode: Option<String>,
    /// Resume from this checkpoint instead of pretraining from scratch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-class sample counts, e.g. "1=50,2=20" or "insult=50". Empty
    /// produces a header-only file.
    #[arg(long, default_value = "")]
    pub budget: String,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Real training JSONL (defines vocabulary and label space).
    #[arg(long)]
    pub train: PathBuf,
    /// Augmentation JSONL to append for the augmented rows.
    #[arg(long)]
    pub aug: Option<PathBuf>,
    /// Held-out test JSONL.
    #[arg(long)]
    pub test: PathBuf,
    /// Raw label string for neutral text.
    #[arg(long, default_value = "neutral")]
    pub neutral_label: String,
    /// Raw label strings for toxic classes, in class-id order.
    #[arg(long = "toxic-label", required = true)]
    pub toxic_labels: Vec<String>,
    /// Downstream training seeds, comma separated.
    #[arg(long, default_value = "1,2,3,4,5")]
    pub seeds: String,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 99)]
    pub embed_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub downstream_hidden: usize,
    #[arg(long, default_value_t = 40)]
    pub downstream_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub downstream_lr: f64,
    #[arg(long, default_value_t = 64)]
    pub downstream_batch: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// TOML configuration file; its mode setting is ignored in favor of the
    /// full sweep.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides run.output_dir.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Training seeds, comma separated; defaults to evaluate.seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Overrides run.max_epoch.
    #[arg(long)]
    pub max_epoch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Checkpoint supplying vocabulary, label space, and embedding backend.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL files to embed; rows keep each example's source and label.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Entry point for the binary: parses `std::env::args`, runs the command,
/// and maps errors to exit codes.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(args),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "full" => Ok(TrainMode::Full),
        "no_ballast" => Ok(TrainMode::NoBallast),
        "no_toxicity_step" => Ok(TrainMode::NoToxicityStep),
        "joint" => Ok(TrainMode::Joint),
        other => Err(Error::Config(format!(
            "unknown mode {other:?}; expected full, no_ballast, no_toxicity_step, or joint"
        ))),
    }
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        seeds.push(
            part.parse::<u64>()
                .map_err(|_| Error::Config(format!("invalid seed {part:?} in seed list")))?,
        );
    }
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

fn load_config(path: &Path, args_output: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = args_output {
        cfg.run.output_dir = dir.clone();
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, &args.output_dir)?;
    if let Some(max_epoch) = args.max_epoch {
        cfg.run.max_epoch = max_epoch;
    }
    if let Some(mode) = &args.mode {
        cfg.run.mode = parse_mode(mode)?;
    }
    cfg.validate()?;

    let out_dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    // The effective config (all defaults materialized) is persisted before
    // any work so a run is reproducible from its artifacts alone.
    std::fs::write(out_dir.join("effective_config.toml"), cfg.to_toml_string()?)?;

    let bundle = cfg.build_dataset()?;
    let train_cfg = cfg.train_config(&bundle.train)?;
    let provider = cfg.build_provider(&bundle.train)?;
    log::info!(
        "training: {} examples, {} classes, mode {:?}, {} epochs",
        bundle.train.examples().len(),
        bundle.train.labels().k(),
        train_cfg.mode,
        train_cfg.max_epoch
    );

    let mut trainer = Trainer::new(train_cfg, bundle.train, bundle.val, provider)?;
    if let Some(resume) = &args.resume {
        trainer.resume_from(load_checkpoint(resume)?)?;
        log::info!("resumed from {} at epoch {:?}", resume.display(), trainer.current_epoch());
    }
    let summary = trainer.run()?;

    trainer.log().write_csv(&out_dir.join("train_log.csv"))?;
    std::fs::write(
        out_dir.join("curves.csv"),
        convergence_curve(trainer.log()).to_csv_string(),
    )?;
    write_summary(&out_dir, &summary, &bundle.budget)?;
    log::info!(
        "done: {} epochs, {} provider calls, {} pool refinements, best epoch {:?}",
        summary.epochs_run,
        summary.provider_calls,
        summary.ballast_refinements,
        summary.best_epoch
    );
    Ok(())
}

fn write_summary(
    out_dir: &Path,
    summary: &RunSummary,
    budget: &BTreeMap<u32, usize>,
) -> Result<()> {
    let doc = serde_json::json!({
        "summary": summary,
        "augmentation_budget": budget,
    });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::State(format!("summary serialization failed: {e}")))?;
    std::fs::write(out_dir.join("summary.json"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Parses "1=50,2=20" / "insult=50" into per-class counts; label names are
/// resolved against the checkpoint's label space.
fn parse_budget_spec(
    spec: &str,
    labels: &crate::corpus::LabelSpace,
) -> Result<BTreeMap<u32, usize>> {
    let mut budget = BTreeMap::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (class_str, count_str) = part.split_once('=').ok_or_else(|| {
            Error::Config(format!("budget entry {part:?} is not of the form class=count"))
        })?;
        let class_str = class_str.trim();
        let class = match class_str.parse::<u32>() {
            Ok(id) => id,
            Err(_) => labels.id_of(class_str).ok_or_else(|| {
                Error::Config(format!("budget names unknown class {class_str:?}"))
            })?,
        };
        let count = count_str.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!("budget count {count_str:?} is not a number"))
        })?;
        if budget.insert(class, count).is_some() {
            return Err(Error::Config(format!("budget lists class {class} twice")));
        }
    }
    Ok(budget)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let labels = Arc::new(ck.labels.clone());
    let vocab = Arc::new(ck.vocab.clone());
    let budget = parse_budget_spec(&args.budget, &labels)?;
    let corpus = generate_augmentation(&ck.generators, &labels, &vocab, &budget, args.seed)?;

    let canonical: Vec<String> =
        budget.iter().map(|(class, n)| format!("{class}={n}")).collect();
    let header = format!(
        "generated augmentation\ncheckpoint: {} sha256={}\nepoch: {}\nseed: {}\nbudget: {}",
        args.checkpoint.display(),
        file_sha256(&args.checkpoint)?,
        ck.epoch,
        args.seed,
        canonical.join(",")
    );
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_jsonl(&args.out, &corpus, Some(&header))?;
    log::info!("wrote {} generated examples to {}", corpus.examples().len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct MethodRow {
    method: &'static str,
    seed: String,
    accuracy: f64,
    macro_f1: f64,
    hate_f1: f64,
}

fn evaluate_method(
    method: &'static str,
    train: &Corpus,
    test: &Corpus,
    backend: &Arc<dyn crate::embedding::EmbeddingBackend>,
    cfg: &DownstreamConfig,
    seeds: &[u64],
    rows: &mut Vec<MethodRow>,
) -> Result<()> {
    let mut acc_sum = 0.0;
    let mut macro_sum = 0.0;
    let mut hate_sum = 0.0;
    for &seed in seeds {
        let report = train_downstream(train, test, backend, cfg, seed)?;
        acc_sum += report.accuracy;
        macro_sum += report.macro_f1;
        hate_sum += report.hate_f1;
        rows.push(MethodRow {
            method,
            seed: seed.to_string(),
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            hate_f1: report.hate_f1,
        });
    }
    let n = seeds.len() as f64;
    rows.push(MethodRow {
        method,
        seed: "mean".into(),
        accuracy: acc_sum / n,
        macro_f1: macro_sum / n,
        hate_f1: hate_sum / n,
    });
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let seeds = parse_seed_list(&args.seeds)?;
    let map = LabelMap {
        neutral: args.neutral_label.clone(),
        toxic: args.toxic_labels.clone(),
    };
    let train = load_jsonl(&args.train, &map)?;
    let test = load_jsonl_with(&args.test, train.labels().clone(), train.vocab().clone())?;
    let backend = EmbeddingSpec::HashedBag { dim: args.embed_dim, seed: args.embed_seed }
        .build(train.vocab())?;
    let cfg = DownstreamConfig {
        hidden: args.downstream_hidden,
        epochs: args.downstream_epochs,
        lr: args.downstream_lr,
        batch_size: args.downstream_batch,
    };

    let mut rows = Vec::new();
    evaluate_method("baseline", &train, &test, &backend, &cfg, &seeds, &mut rows)?;
    if let Some(aug_path) = &args.aug {
        let aug = load_jsonl_with(aug_path, train.labels().clone(), train.vocab().clone())?;
        let merged = train.merged_with(aug.examples())?;
        evaluate_method("augmented", &merged, &test, &backend, &cfg, &seeds, &mut rows)?;
    }

    let mut csv = String::from("method,seed,accuracy,macro_f1,hate_f1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.seed, r.accuracy, r.macro_f1, r.hate_f1
        ));
    }
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, &csv)?;
    log::info!("wrote {} result rows to {}", rows.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Per-run seeds derived from one sweep seed, shared across modes so the
/// comparison differs only in the mode.
fn sweep_seeds(seed: u64) -> SeedConfig {
    SeedConfig {
        model: derive_seed(seed, &[101]),
        sample: derive_seed(seed, &[102]),
        provider: derive_seed(seed, &[103]),
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, &args.output_dir)?;
    if let Some(max_epoch) = args.max_epoch {
        cfg.run.max_epoch = max_epoch;
    }
    cfg.validate()?;
    let seeds = match &args.seeds {
        Some(s) => parse_seed_list(s)?,
        None => cfg.evaluate.seeds.clone(),
    };

    let out_dir = cfg.run.output_dir.clone();
    let log_dir = out_dir.join("ablate");
    std::fs::create_dir_all(&log_dir)?;
    std::fs::write(out_dir.join("effective_config.toml"), cfg.to_toml_string()?)?;

    // One shared dataset: every mode and seed sees the identical split.
    let bundle = cfg.build_dataset()?;
    let oracle = cfg.toxicity_oracle(&bundle.train, bundle.task.as_ref())?;
    let labels = bundle.train.labels().clone();
    let vocab = bundle.train.vocab().clone();

    let mut csv =
        String::from("mode,seed,epochs,provider_calls,ballast_refinements,avg_toxicity\n");
    for mode in [TrainMode::Full, TrainMode::NoBallast, TrainMode::NoToxicityStep] {
        let mode_name = match mode {
            TrainMode::Full => "full",
            TrainMode::NoBallast => "no_ballast",
            TrainMode::NoToxicityStep => "no_toxicity_step",
            TrainMode::Joint => "joint",
        };
        for &seed in &seeds {
            let mut train_cfg = cfg.train_config(&bundle.train)?;
            train_cfg.mode = mode;
            train_cfg.seeds = sweep_seeds(seed);
            train_cfg.checkpoint_dir = None;
            let provider = cfg.build_provider(&bundle.train)?;
            let mut trainer =
                Trainer::new(train_cfg, bundle.train.clone(), bundle.val.clone(), provider)?;
            let summary = trainer.run()?;
            if mode == TrainMode::NoBallast
                && (summary.provider_calls != 0 || summary.ballast_refinements != 0)
            {
                return Err(Error::State(format!(
                    "no_ballast run touched the provider ({} calls, {} refinements)",
                    summary.provider_calls, summary.ballast_refinements
                )));
            }
            trainer
                .log()
                .write_csv(&log_dir.join(format!("{mode_name}_seed{seed}_log.csv")))?;

            let toxicity = match &oracle {
                Some(oracle) => {
                    let budget: BTreeMap<u32, usize> = labels
                        .toxic_ids()
                        .map(|c| (c, cfg.evaluate.samples_per_class))
                        .collect();
                    let sampled = generate_augmentation(
                        trainer.generators(),
                        &labels,
                        &vocab,
                        &budget,
                        derive_seed(seed, &[104]),
                    )?;
                    let mean = avg_toxicity(
                        sampled.examples().iter().map(|ex| &ex.seq),
                        oracle as &dyn ToxicityOracle,
                    )?;
                    format!("{mean}")
                }
                None => String::new(),
            };
            csv.push_str(&format!(
                "{mode_name},{seed},{},{},{},{toxicity}\n",
                summary.epochs_run, summary.provider_calls, summary.ballast_refinements
            ));
            log::info!("ablate: mode {mode_name} seed {seed} done");
        }
    }
    std::fs::write(out_dir.join("ablation.csv"), &csv)?;
    log::info!("wrote {}", out_dir.join("ablation.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

fn source_name(source: Source) -> &'static str {
    match source {
        Source::Real => "real",
        Source::Generated => "generated",
        Source::LlmNeutral => "llm_neutral",
    }
}

pub fn cmd_export_embeddings(args: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let labels = Arc::new(ck.labels.clone());
    let vocab = Arc::new(ck.vocab.clone());
    let backend = ck.embedding.build(&vocab)?;

    let mut header = String::from("source,label");
    for i in 0..backend.dim() {
        header.push_str(&format!(",v{i}"));
    }
    let mut csv = header;
    csv.push('\n');
    let mut rows = 0usize;
    for path in &args.data {
        let corpus = load_jsonl_with(path, labels.clone(), vocab.clone())?;
        for ex in corpus.examples() {
            let vec = backend.embed(&ex.seq)?;
            csv.push_str(source_name(ex.source));
            csv.push(',');
            csv.push_str(labels.name_of(ex.label)?);
            for v in vec.values() {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
            rows += 1;
        }
    }
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, &csv)?;
    log::info!("wrote {rows} embedding rows to {}", args.out.display());
    Ok(())
}
