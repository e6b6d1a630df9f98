//! `ser`: generate a corpus, train with k-fold cross-validation, re-score a
//! saved fold, sweep the ablation grid, or verify gradients.
//!
//! Settings resolve in two layers: a TOML config file (when given) supplies
//! the base, and command-line flags override individual fields.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ser_core::checkpoint;
use ser_core::data::folds::make_folds;
use ser_core::data::generate::{generate, GenerationConfig};
use ser_core::data::io::{read_corpus, write_corpus};
use ser_core::experiment::{EvalCounts, ExperimentConfig};
use ser_core::fusion::FusionMode;
use ser_core::gradcheck::composite_suite;
use ser_core::tasks::{Task, ALL_TASKS};
use ser_core::train::{
    evaluate, run_ablation, run_kfold, speaker_index, TrainedFold,
};

#[derive(Parser)]
#[command(
    name = "ser",
    version,
    about = "Two-stage multi-task speech emotion recognition on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled corpus (wav files plus manifest).
    GenerateData(GenerateArgs),
    /// Train with speaker-disjoint k-fold cross-validation.
    Train(RunArgs),
    /// Re-score a saved fold checkpoint on its split.
    Evaluate(EvaluateArgs),
    /// Train every fusion x task-subset x gate cell and write ablation.csv.
    Ablate(RunArgs),
    /// Compare tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory; receives wav/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    utterances: usize,
    /// Speaker count; must be even (speakers pair up male/female).
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    sample_rate: u32,
}

#[derive(Args)]
struct RunArgs {
    /// Base TOML config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for results.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_downstream: Option<f64>,
    /// Layer fusion: `ari` or `weighted_sum`.
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Auxiliary tasks: `+`-joined names (`gender+speaker+style+asr`),
    /// `all`, or `none`.
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<TaskSet>,
    /// Gated auxiliary attention for the emotion head: `on` or `off`.
    #[arg(long, value_parser = parse_switch)]
    coattn: Option<bool>,
    /// Train-time speed perturbation: `on` or `off`.
    #[arg(long, value_parser = parse_switch)]
    tdsa: Option<bool>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory produced by `ser train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Score the train split instead of the held-out split.
    #[arg(long)]
    train_split: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random draws per composite graph.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Worst relative error allowed.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    match s {
        "ari" => Ok(FusionMode::Ari),
        "weighted_sum" => Ok(FusionMode::WeightedSum),
        other => Err(format!("unknown fusion mode `{other}` (use ari or weighted_sum)")),
    }
}

/// Newtype so clap can carry a task set as a single value.
#[derive(Clone)]
struct TaskSet(BTreeSet<Task>);

fn parse_tasks(s: &str) -> Result<TaskSet, String> {
    match s {
        "none" => return Ok(TaskSet(BTreeSet::new())),
        "all" => return Ok(TaskSet(ALL_TASKS.into_iter().collect())),
        _ => {}
    }
    let mut set = BTreeSet::new();
    for part in s.split('+') {
        let task = ALL_TASKS
            .into_iter()
            .find(|t| t.name() == part)
            .ok_or_else(|| format!("unknown task `{part}` (use gender, speaker, style, asr)"))?;
        set.insert(task);
    }
    Ok(TaskSet(set))
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on or off, got `{other}`")),
    }
}

fn resolve_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_toml(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &args.corpus {
        cfg.corpus = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.stage1_epochs {
        cfg.stage1_epochs = v;
    }
    if let Some(v) = args.stage2_epochs {
        cfg.stage2_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr_encoder {
        cfg.lr_encoder = v;
    }
    if let Some(v) = args.lr_downstream {
        cfg.lr_downstream = v;
    }
    if let Some(v) = args.fusion {
        cfg.model.fusion = v;
    }
    if let Some(v) = &args.tasks {
        cfg.model.tasks = v.0.clone();
    }
    if let Some(v) = args.coattn {
        cfg.model.coattn = v;
    }
    if let Some(v) = args.tdsa {
        cfg.tdsa = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ScoreReport {
    fold: usize,
    split: &'static str,
    ua: f64,
    wa: f64,
    cer: Option<f64>,
    wer: Option<f64>,
    gender_acc: Option<f64>,
    style_acc: Option<f64>,
    speaker_acc: Option<f64>,
}

impl ScoreReport {
    fn from_counts(fold: usize, split: &'static str, eval: &EvalCounts) -> Self {
        ScoreReport {
            fold,
            split,
            ua: eval.ua(),
            wa: eval.wa(),
            cer: EvalCounts::rate(eval.chars),
            wer: EvalCounts::rate(eval.tokens),
            gender_acc: EvalCounts::accuracy(eval.gender),
            style_acc: EvalCounts::accuracy(eval.style),
            speaker_acc: EvalCounts::accuracy(eval.speaker),
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let config = GenerationConfig {
        n_utterances: args.utterances,
        n_speakers: args.speakers,
        sample_rate: args.sample_rate,
        ..GenerationConfig::default()
    };
    let corpus = generate(&config, args.seed)?;
    let manifest = write_corpus(&args.out, &corpus, &config, args.seed)?;
    println!(
        "wrote {} utterances from {} speakers to {}",
        corpus.len(),
        args.speakers,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: RunArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args)?;
    let result = run_kfold(&cfg, &args.out)?;
    for fold in &result.folds {
        println!(
            "fold {}: UA {:.4}  WA {:.4}",
            fold.fold,
            fold.eval.ua(),
            fold.eval.wa()
        );
    }
    println!(
        "pooled: UA {:.4}  WA {:.4}  ({} folds, results in {})",
        result.pooled_ua(),
        result.pooled_wa(),
        result.folds.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::from_toml(&args.run.join("config.toml"))
        .with_context(|| format!("reading run config in {}", args.run.display()))?;
    let corpus = read_corpus(&cfg.corpus)?;
    let plan = make_folds(&corpus, cfg.folds)?;
    if args.fold >= cfg.folds {
        bail!("fold {} out of range; run has {} folds", args.fold, cfg.folds);
    }
    let (train, test) = plan.split(&corpus, args.fold);
    let index = speaker_index(&train);
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_speakers = index.len();
    let params = checkpoint::load(&args.run.join(format!("fold{}", args.fold)).join("params.ckpt"))?;
    let trained = TrainedFold {
        params,
        model_cfg,
        speaker_index: index,
        stage1_losses: vec![],
        stage2_losses: vec![],
    };
    let (split, name): (&[_], _) = if args.train_split {
        (&train, "train")
    } else {
        (&test, "test")
    };
    let eval = evaluate(&trained, split, !args.train_split)?;
    let report = ScoreReport::from_counts(args.fold, name, &eval);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(args: RunArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args)?;
    let outcomes = run_ablation(&cfg, &args.out)?;
    println!(
        "{} cells complete; table in {}",
        outcomes.len(),
        args.out.join("ablation.csv").display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let reports = composite_suite(args.seeds, args.eps)?;
    let mut failed = false;
    for r in &reports {
        let ok = r.worst < args.tol;
        failed |= !ok;
        println!(
            "{} {:<22} worst relative error {:.3e} over {} seeds",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.seeds
        );
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> anyhow::Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData(args) => cmd_generate(args)?,
        Command::Train(args) => cmd_train(args)?,
        Command::Evaluate(args) => cmd_evaluate(args)?,
        Command::Ablate(args) => cmd_ablate(args)?,
        Command::Gradcheck(args) => return cmd_gradcheck(args),
    }
    Ok(ExitCode::SUCCESS)
}
