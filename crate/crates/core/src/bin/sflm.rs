use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sflm::augment::{augment_pair, AugmentKind};
use sflm::data::{load_tsv, load_unlabeled_tsv};
use sflm::losses::HyperParams;
use sflm::model::{init_model, ModelConfig};
use sflm::prompting::{build_prompt, PromptTask, TaskSpec};
use sflm::rng::Streams;
use sflm::synth::{generate_synthetic_task, SynthSpec};
use sflm::tokenizer::{build_vocab, decode, encode, TokenSequence, Vocab};
use sflm::trainer::{
    evaluate, load_task_data, load_with_vocab, pretrain_mlm, run_experiment, run_experiment_with, run_transfer,
    save_checkpoint, CheckpointMeta, ExperimentSpec, Metric, Plan, PretrainConfig, TaskFiles, TransferData,
    TransferPlan,
};

#[derive(Parser)]
#[command(name = "sflm", version, about = "Prompt-based few-shot classification with self-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a corpus and pretrain an encoder with masked LM.
    Pretrain(PretrainArgs),
    /// Few-shot training of one (N, μ, augmentation) cell over several splits.
    Train(TrainArgs),
    /// Run an experiment file (N × μ × augmentation sweeps).
    Sweep {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on labeled source data plus unlabeled target data.
    Transfer(TransferArgs),
    /// Score a checkpoint on a labeled file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "acc")]
        metric: Metric,
    },
    /// Show the weak and strong views of one sentence.
    Augment {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "mask")]
        aug: AugmentKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Vocabulary file; by default one is built from the text and task.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write a synthetic task (task.json, train/test TSVs, corpus).
    GenSynth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model config JSON; `vocab_size` is taken from the corpus.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides on top of the default hyperparameters.
#[derive(Args)]
struct HpArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

impl HpArgs {
    fn apply(&self, mut hp: HyperParams) -> HyperParams {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { hp.$f = v; })* };
        }
        set!(lr, batch_size, tau, lambda1, lambda2, mask_ratio, dropout_rate, steps, eval_interval);
        hp
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    mu: usize,
    #[arg(long, default_value = "mask")]
    aug: AugmentKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    num_splits: usize,
    #[arg(long, default_value = "acc")]
    metric: Metric,
    #[command(flatten)]
    hp: HpArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    source_task: PathBuf,
    #[arg(long)]
    source_train: PathBuf,
    #[arg(long)]
    target_task: PathBuf,
    #[arg(long)]
    target_unlabeled: PathBuf,
    #[arg(long)]
    target_test: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 5)]
    num_splits: usize,
    #[arg(long, default_value_t = 4)]
    mu: usize,
    #[arg(long, default_value = "mask")]
    aug: AugmentKind,
    #[arg(long, default_value = "acc")]
    metric: Metric,
    #[command(flatten)]
    hp: HpArgs,
    #[arg(long)]
    out: PathBuf,
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct PretrainSummary<'a> {
    command: &'static str,
    seed: u64,
    config: &'a ModelConfig,
    pretrain: &'a PretrainConfig,
    vocab_hash: String,
    initial_loss: f64,
    final_loss: f64,
    log_path: &'static str,
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let vocab = build_vocab(&lines, args.min_count)?;
    let mut config = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ModelConfig::desk(vocab.len()),
    };
    config.vocab_size = vocab.len();
    let streams = Streams::new(args.seed);
    let mut model = init_model(&config, &streams)?;
    let corpus: Vec<TokenSequence> = lines.iter().map(|l| encode(l, &vocab)).collect();
    let cfg = PretrainConfig {
        steps: args.steps,
        lr: args.lr,
        batch_size: args.batch_size,
        mask_ratio: args.mask_ratio,
    };
    fs::create_dir_all(&args.out)?;
    let mut log = String::new();
    let report = pretrain_mlm(&mut model, &corpus, &cfg, &streams.child("pretrain"), &mut |step, loss| {
        log.push_str(&format!("{{\"step\":{step},\"loss\":{loss}}}\n"));
        if step % 100 == 0 {
            progress(&format!("step {step}: loss {loss:.4}"));
        }
    })?;
    vocab.save(args.out.join("vocab.txt"))?;
    let meta = CheckpointMeta {
        step: cfg.steps as u64,
        streams: Some(streams),
        split: None,
    };
    save_checkpoint(&model, &vocab, &meta, args.out.join("model.ckpt"))?;
    fs::write(args.out.join("train_log.jsonl"), log)?;
    write_json(
        &args.out.join("report.json"),
        &PretrainSummary {
            command: "pretrain",
            seed: args.seed,
            config: &config,
            pretrain: &cfg,
            vocab_hash: vocab.hash(),
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            log_path: "train_log.jsonl",
        },
    )
}

fn train(args: TrainArgs) -> Result<()> {
    let (model, vocab) = load_with_vocab(&args.checkpoint)?;
    let files = TaskFiles {
        name: None,
        task: args.task,
        train: args.train,
        test: args.test,
    };
    let task = load_task_data(&files, &vocab)?;
    let hp = args.hp.apply(HyperParams {
        n_per_class: args.n,
        mu: args.mu,
        ..HyperParams::default()
    });
    let plan = Plan {
        n: vec![args.n],
        mu: vec![args.mu],
        aug: vec![args.aug],
        num_splits: args.num_splits,
        seed: args.seed,
        hp,
        grid: None,
        metric: args.metric,
    };
    let mut report = run_experiment_with(&model, &vocab, &[task], &plan, Some(&args.out), &mut progress)?;
    report.command = "train".into();
    report.write(&args.out)?;
    print!("{}", sflm::report::to_markdown(&report.table));
    Ok(())
}

fn sweep(experiment: &Path, out: &Path) -> Result<()> {
    let spec = ExperimentSpec::load(experiment)?;
    let report = run_experiment(&spec, Some(out), &mut progress)?;
    print!("{}", sflm::report::to_markdown(&report.table));
    Ok(())
}

fn transfer(args: TransferArgs) -> Result<()> {
    let (model, vocab) = load_with_vocab(&args.checkpoint)?;
    let source_spec = TaskSpec::load(&args.source_task)?;
    let source = sflm::trainer::TaskData {
        name: source_spec.name.clone().unwrap_or_else(|| "source".into()),
        task: PromptTask::new(&source_spec, &vocab)?,
        pool: load_tsv(&args.source_train, source_spec.arity, &source_spec.labels)?,
        test: Vec::new(),
    };
    let target_spec = TaskSpec::load(&args.target_task)?;
    let target_task = PromptTask::new(&target_spec, &vocab)?;
    let target_unlabeled = load_unlabeled_tsv(&args.target_unlabeled, target_spec.arity)
        .context("target data must be unlabeled (one column per input, no label column)")?;
    let target_test = load_tsv(&args.target_test, target_spec.arity, &target_spec.labels)?;
    let target_name = target_spec.name.clone().unwrap_or_else(|| "target".into());
    let plan = TransferPlan {
        per_class: args.per_class,
        num_splits: args.num_splits,
        seed: args.seed,
        hp: args.hp.apply(HyperParams {
            mu: args.mu,
            n_per_class: args.per_class,
            ..HyperParams::default()
        }),
        aug: args.aug,
        metric: args.metric,
    };
    let data = TransferData {
        source: &source,
        target_task: &target_task,
        target_name: &target_name,
        target_unlabeled: &target_unlabeled,
        target_test: &target_test,
    };
    let report = run_transfer(&model, &vocab, &data, &plan, Some(&args.out), &mut progress)?;
    print!("{}", sflm::report::to_markdown(&report.table));
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    metric: Metric,
    value: f64,
    examples: usize,
}

fn eval(checkpoint: &Path, task: &Path, data: &Path, metric: Metric) -> Result<()> {
    let (model, vocab) = load_with_vocab(checkpoint)?;
    let spec = TaskSpec::load(task)?;
    let task = PromptTask::new(&spec, &vocab)?;
    let examples = load_tsv(data, spec.arity, &spec.labels)?;
    let value = evaluate(&model, &vocab, &examples, &task, metric)?;
    println!(
        "{}",
        serde_json::to_string(&EvalOutput {
            metric,
            value,
            examples: examples.len()
        })?
    );
    Ok(())
}

#[derive(Serialize)]
struct AugmentOutput {
    input: String,
    weak: String,
    strong: String,
    weak_prompt: String,
    strong_prompt: String,
    mask_positions: Vec<usize>,
    original: Vec<String>,
}

fn augment(task: &Path, text: &str, aug: AugmentKind, seed: u64, vocab: Option<&Path>) -> Result<()> {
    let spec = TaskSpec::load(task)?;
    if spec.arity != 1 {
        bail!("augment shows single-sentence tasks only");
    }
    let vocab = match vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let mut lines = vec![text.to_string(), spec.template.replace("[MASK]", " ").replace("{x}", " ")];
            lines.extend(spec.label_words.values().cloned());
            build_vocab(&lines, 1)?
        }
    };
    let task = PromptTask::new(&spec, &vocab)?;
    let seq = encode(text, &vocab);
    let pair = augment_pair(&seq, aug, &mut Streams::new(seed).child("augment").rng())?;
    let max_len = usize::MAX;
    let weak_prompt = build_prompt(&[&pair.weak], &task, max_len)?;
    let strong_prompt = build_prompt(&[&pair.strong], &task, max_len)?;
    let out = AugmentOutput {
        input: decode(&seq, &vocab)?,
        weak: decode(&pair.weak, &vocab)?,
        strong: decode(&pair.strong, &vocab)?,
        weak_prompt: decode(&weak_prompt.seq, &vocab)?,
        strong_prompt: decode(&strong_prompt.seq, &vocab)?,
        mask_positions: pair.strong_mask_positions.clone(),
        original: pair
            .strong_original_ids
            .iter()
            .map(|&i| vocab.token(i).unwrap_or("[UNK]").to_string())
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn gen_synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    let task = generate_synthetic_task(&spec)?;
    task.write(out)?;
    write_json(&out.join("spec.json"), &spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Sweep { experiment, out } => sweep(&experiment, &out),
        Command::Transfer(a) => transfer(a),
        Command::Eval {
            checkpoint,
            task,
            data,
            metric,
        } => eval(&checkpoint, &task, &data, metric),
        Command::Augment {
            task,
            text,
            aug,
            seed,
            vocab,
        } => augment(&task, &text, aug, seed, vocab.as_deref()),
        Command::GenSynth { spec, out } => gen_synth(spec.as_deref(), &out),
    }
}

fn fail(msg: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": msg }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail(e.to_string().trim_end().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(message(&e)),
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn message(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}
