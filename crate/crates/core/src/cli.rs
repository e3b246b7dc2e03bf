//! Command-line surface. Every subcommand accepts `--config`, `--seed` and
//! `--out`; exit code 0 on success, 1 on validation errors (including bad
//! flags), 2 on runtime failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::{derive_task_labels, generate_dataset, LabeledDataset, TaskSpec};
use crate::error::{Error, Result};
use crate::experiment::run_ablation;
use crate::gradcheck::{gradient_check, GradCheckConfig};
use crate::metrics::MetricReport;
use crate::params::VocabLayout;
use crate::tokenizer::{
    dump_tokenized, parse_tokenized, tokenize_dataset, TokenizedUser, WindowConfig,
};
use crate::training::{
    evaluate_split, finetune, finetune_start, masked_genre_accuracy, pretrain, FinetuneData,
    FinetuneOptions, PretrainState,
};
use crate::vocab::{
    assemble_users, hex_digest, parse_events, parse_profiles, write_events, write_profiles,
    UserRecord, VocabularyRegistry,
};

pub const EVENTS_FILE: &str = "events.tsv";
pub const PROFILES_FILE: &str = "profiles.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TOKENS_FILE: &str = "tokens.txt";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";

#[derive(Parser, Debug)]
#[command(
    name = "userbert",
    version,
    about = "Self-supervised user representations from behavior logs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Configuration override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted preferences and task labels.
    GenData,
    /// Build the vocabulary registry from an events/profiles directory.
    BuildVocab(DataArgs),
    /// Discretize events into behavioral words with a frozen vocabulary.
    Tokenize(DataArgs),
    /// Masked behavioral-word pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune on a labeled task, from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient check on a tiny 64-bit model.
    GradCheck,
    /// Pretrained-vs-scratch and discretized-vs-per-action comparisons.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding events.tsv, profiles.tsv (and vocab.txt). Defaults to --out.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Vocabulary file; defaults to <data>/vocab.txt.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Token file; defaults to <data>/tokens.txt.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Number of steps (overrides train.pretrain_steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Labels file; defaults to <data>/labels.tsv.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// targeting, attribute or next_genre.
    #[arg(long, default_value = "targeting")]
    task: String,
    /// Pretrained checkpoint.
    #[arg(long, conflicts_with = "from_scratch")]
    checkpoint: Option<PathBuf>,
    /// Start from a randomly initialized encoder.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cap on training labels (overrides train.finetune_labels).
    #[arg(long)]
    max_labels: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Checkpoint to evaluate (required).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task of a fine-tuned checkpoint; defaults to the one it was trained on.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Fine-tuning labels for the pretraining ablation.
    #[arg(long, default_value_t = 200)]
    labels: usize,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.apply("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    ensure_dir(out)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::BuildVocab(a) => build_vocab(&cfg, &a, out),
        Command::Tokenize(a) => tokenize(&cfg, &a, out),
        Command::Pretrain(a) => run_pretrain(&cfg, &a, out),
        Command::Finetune(a) => run_finetune(&cfg, &a, out),
        Command::Evaluate(a) => run_evaluate(&cfg, &a, out),
        Command::GradCheck => run_grad_check(&cfg, out),
        Command::Ablate(a) => run_ablate(&cfg, &a, out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let g = &cfg.generator;
    let schemas = g.schemas()?;
    let (users, profiles) = generate_dataset(g)?;
    let mut events = Vec::new();
    write_events(&mut events, &users, &schemas).map_err(|e| Error::io(out.join(EVENTS_FILE), e))?;
    let mut profile_lines = Vec::new();
    write_profiles(&mut profile_lines, &users, &schemas)
        .map_err(|e| Error::io(out.join(PROFILES_FILE), e))?;
    let mut labels = String::new();
    for name in ["targeting", "attribute", "next_genre"] {
        let task = TaskSpec::from_name(name, g.latent_dim)?;
        labels.push_str(&derive_task_labels(&profiles, &task, g)?.to_text());
    }
    let events = String::from_utf8(events).expect("events are UTF-8");
    let profile_lines = String::from_utf8(profile_lines).expect("profiles are UTF-8");
    write(&out.join(EVENTS_FILE), &events)?;
    write(&out.join(PROFILES_FILE), &profile_lines)?;
    write(&out.join(LABELS_FILE), &labels)?;
    let mut manifest = cfg.to_text();
    let _ = writeln!(
        manifest,
        "# {EVENTS_FILE} sha256 {}",
        hex_digest(events.as_bytes())
    );
    let _ = writeln!(
        manifest,
        "# {PROFILES_FILE} sha256 {}",
        hex_digest(profile_lines.as_bytes())
    );
    let _ = writeln!(
        manifest,
        "# {LABELS_FILE} sha256 {}",
        hex_digest(labels.as_bytes())
    );
    write(&out.join(MANIFEST_FILE), &manifest)?;
    println!(
        "generated {} users ({} events) into {}",
        users.len(),
        events.lines().count(),
        out.display()
    );
    Ok(())
}

fn data_dir<'a>(a: &'a DataArgs, out: &'a Path) -> &'a Path {
    a.data.as_deref().unwrap_or(out)
}

fn vocab_path(a: &DataArgs, out: &Path) -> PathBuf {
    a.vocab
        .clone()
        .unwrap_or_else(|| data_dir(a, out).join(VOCAB_FILE))
}

fn load_users(cfg: &RunConfig, dir: &Path) -> Result<Vec<UserRecord>> {
    let schemas = cfg.generator.schemas()?;
    let events_path = dir.join(EVENTS_FILE);
    let profiles_path = dir.join(PROFILES_FILE);
    let events = parse_events(
        &read(&events_path)?,
        &schemas,
        &events_path.display().to_string(),
    )?;
    let profiles = parse_profiles(
        &read(&profiles_path)?,
        &schemas,
        &profiles_path.display().to_string(),
    )?;
    assemble_users(events, profiles, &schemas)
}

fn windows(cfg: &RunConfig) -> WindowConfig {
    WindowConfig {
        long_window_start: cfg.generator.long_window_start(),
        short_window_start: cfg.generator.short_window_start(),
        tz_offset_secs: cfg.tz_offset_secs,
    }
}

fn build_vocab(cfg: &RunConfig, a: &DataArgs, out: &Path) -> Result<()> {
    let users = load_users(cfg, data_dir(a, out))?;
    let mut registry = VocabularyRegistry::new(cfg.generator.schemas()?);
    registry.ingest(&users)?;
    let path = out.join(VOCAB_FILE);
    registry.persist(&path)?;
    println!(
        "vocabulary digest {} written to {}",
        registry.digest(),
        path.display()
    );
    Ok(())
}

fn tokenize(cfg: &RunConfig, a: &DataArgs, out: &Path) -> Result<()> {
    let users = load_users(cfg, data_dir(a, out))?;
    let mut registry = VocabularyRegistry::restore(&vocab_path(a, out))?;
    let tokens = tokenize_dataset(
        &users,
        &mut registry,
        true,
        &windows(cfg),
        cfg.tokenize_mode,
    )?;
    let path = out.join(TOKENS_FILE);
    write(&path, &dump_tokenized(&tokens))?;
    let words: usize = tokens.iter().map(TokenizedUser::num_words).sum();
    println!(
        "{} users, {words} behavioral words written to {}",
        tokens.len(),
        path.display()
    );
    Ok(())
}

fn load_tokens(
    tokens: &Option<PathBuf>,
    data: &DataArgs,
    out: &Path,
) -> Result<Vec<TokenizedUser>> {
    let path = tokens
        .clone()
        .unwrap_or_else(|| data_dir(data, out).join(TOKENS_FILE));
    parse_tokenized(&read(&path)?)
}

fn run_pretrain(cfg: &RunConfig, a: &PretrainArgs, out: &Path) -> Result<()> {
    let registry = VocabularyRegistry::restore(&vocab_path(&a.data, out))?;
    let tokens = load_tokens(&a.tokens, &a.data, out)?;
    let steps = a.steps.unwrap_or(cfg.train.pretrain_steps);
    let mut state = match &a.resume {
        None => PretrainState::fresh(&cfg.model, &registry, &cfg.train)?,
        Some(p) => {
            let ckpt = Checkpoint::load_for(p, &registry)?;
            let optimizer = ckpt.optimizer.ok_or_else(|| {
                Error::Config(format!("{} has no optimizer state to resume", p.display()))
            })?;
            PretrainState {
                params: ckpt.params,
                optimizer,
                step: ckpt.step,
            }
        }
    };
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_text = match &a.resume {
        Some(_) if log_path.exists() => read(&log_path)?,
        _ => String::new(),
    };
    let every = cfg.train.checkpoint_every;
    let save = |state: &PretrainState, path: &Path| {
        Checkpoint::new(
            cfg.model.clone(),
            &registry,
            state.params.clone(),
            Some(state.optimizer.clone()),
            state.step,
            cfg.train.seed,
        )
        .save(path)
    };
    let log = pretrain(
        &tokens,
        &registry,
        &cfg.model,
        &cfg.train,
        &mut state,
        steps,
        |entry, state| {
            if entry.step % 50 == 0 {
                log::info!("step {} loss {:.4}", entry.step, entry.loss);
            }
            if every > 0 && entry.step % every as u64 == 0 {
                save(
                    state,
                    &out.join(format!("pretrain-step{}.ckpt", entry.step)),
                )?;
            }
            Ok(())
        },
    )?;
    log_text.push_str(&log.to_text());
    write(&log_path, &log_text)?;
    save(&state, &out.join(PRETRAIN_CHECKPOINT))?;
    let losses = log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "pretrained {} steps: loss {first:.4} -> {last:.4}",
            losses.len()
        );
    }
    Ok(())
}

fn load_labels(cfg: &RunConfig, path: &Path, task: &str) -> Result<LabeledDataset> {
    TaskSpec::from_name(task, cfg.generator.latent_dim)?;
    LabeledDataset::from_text(&read(path)?, task, cfg.generator.seed)
}

fn report_epochs(
    report: &mut MetricReport,
    task: &str,
    seed: u64,
    epochs: &[crate::training::EpochReport],
) {
    for e in epochs {
        if e.train_loss.is_finite() {
            report.push(task, "train_loss", e.train_loss, seed, Some(e.epoch));
        }
        report.push(task, "test_loss", e.test_loss, seed, Some(e.epoch));
        for (m, v) in &e.metrics {
            report.push(task, m, *v, seed, Some(e.epoch));
        }
    }
}

fn write_report(report: &MetricReport, out: &Path, stem: &str) -> Result<()> {
    write(&out.join(format!("{stem}.tsv")), &report.to_tsv())?;
    write(&out.join(format!("{stem}.txt")), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn run_finetune(cfg: &RunConfig, a: &FinetuneArgs, out: &Path) -> Result<()> {
    let registry = VocabularyRegistry::restore(&vocab_path(&a.data, out))?;
    let tokens = load_tokens(&a.tokens, &a.data, out)?;
    let labels_path = a
        .labels
        .clone()
        .unwrap_or_else(|| data_dir(&a.data, out).join(LABELS_FILE));
    let labels = load_labels(cfg, &labels_path, &a.task)?;
    let pretrained = match (&a.checkpoint, a.from_scratch) {
        (Some(p), _) => Some(Checkpoint::load_for(p, &registry)?),
        (None, true) => None,
        (None, false) => {
            return Err(Error::Config(
                "finetune needs --checkpoint or --from-scratch".into(),
            ));
        }
    };
    let model = pretrained
        .as_ref()
        .map_or(cfg.model.clone(), |c| c.model.clone());
    let max_labels = a.max_labels.or(cfg.train.finetune_labels);
    let data = FinetuneData::build(&labels, &tokens, &registry, max_labels, cfg.train.seed)?;
    let vocab = VocabLayout::from_registry(&registry);
    let start = finetune_start(
        pretrained.as_ref().map(|c| &c.params),
        &model,
        &vocab,
        cfg.train.seed,
    )?;
    let options = FinetuneOptions {
        epochs: a.epochs.unwrap_or(cfg.train.finetune_epochs),
        eval_train: true,
    };
    let outcome = finetune(start, &data, &model, &cfg.train, options)?;
    let mut ckpt = Checkpoint::new(
        model,
        &registry,
        outcome.params,
        Some(outcome.optimizer),
        options.epochs as u64,
        cfg.train.seed,
    );
    ckpt.meta.insert("task".into(), a.task.clone());
    ckpt.save(&out.join(FINETUNE_CHECKPOINT))?;
    let mut report = MetricReport {
        config_digest: cfg.digest(),
        rows: Vec::new(),
    };
    report_epochs(&mut report, &a.task, cfg.train.seed, &outcome.epochs);
    write_report(&report, out, "finetune_metrics")
}

fn run_evaluate(cfg: &RunConfig, a: &EvaluateArgs, out: &Path) -> Result<()> {
    let ckpt_path = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate requires --checkpoint <path>".into()))?;
    let registry = VocabularyRegistry::restore(&vocab_path(&a.data, out))?;
    let ckpt = Checkpoint::load_for(ckpt_path, &registry)?;
    let tokens = load_tokens(&a.tokens, &a.data, out)?;
    let mut report = MetricReport {
        config_digest: cfg.digest(),
        rows: Vec::new(),
    };
    if ckpt.params.classifier.is_none() {
        let r = masked_genre_accuracy(
            &tokens,
            &tokens,
            &registry,
            &ckpt.params,
            &ckpt.model,
            cfg.train.seed,
        )?;
        report.push(
            "reconstruction",
            "masked_genre_top1",
            r.top1_accuracy,
            cfg.train.seed,
            None,
        );
        report.push(
            "reconstruction",
            "majority_rate",
            r.majority_rate,
            cfg.train.seed,
            None,
        );
        report.push(
            "reconstruction",
            "mean_loss",
            r.mean_loss,
            cfg.train.seed,
            None,
        );
    } else {
        let task = a
            .task
            .clone()
            .or_else(|| ckpt.meta.get("task").cloned())
            .ok_or_else(|| Error::Config("checkpoint has no task; pass --task".into()))?;
        let labels_path = a
            .labels
            .clone()
            .unwrap_or_else(|| data_dir(&a.data, out).join(LABELS_FILE));
        let labels = load_labels(cfg, &labels_path, &task)?;
        let data = FinetuneData::build(&labels, &tokens, &registry, None, cfg.train.seed)?;
        if ckpt.params.num_classes() != Some(data.task.num_classes()) {
            return Err(Error::Config(format!(
                "checkpoint head does not match task `{task}`"
            )));
        }
        let (loss, metrics) = evaluate_split(
            &data.test,
            &data.task,
            &ckpt.params,
            &ckpt.model,
            cfg.train.map_k,
        )?;
        report.push(&task, "test_loss", loss, cfg.train.seed, None);
        for (m, v) in metrics {
            report.push(&task, &m, v, cfg.train.seed, None);
        }
    }
    write_report(&report, out, "eval")
}

fn run_grad_check(cfg: &RunConfig, out: &Path) -> Result<()> {
    let gc = GradCheckConfig {
        seed: cfg.train.seed,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&gc)?;
    let text = report.to_text();
    write(&out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if report.passed() {
        Ok(())
    } else {
        let worst: Vec<String> = report
            .worst(5)
            .iter()
            .map(|c| format!("{}[{}] {:.2e}", c.tensor, c.index, c.rel_error))
            .collect();
        Err(Error::GradientCheck(format!(
            "max relative error {:.3e} exceeds {:e}; worst: {}",
            report.max_rel_error(),
            report.tolerance,
            worst.join(", ")
        )))
    }
}

fn run_ablate(cfg: &RunConfig, a: &AblateArgs, out: &Path) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let report = run_ablation(cfg, &a.seeds, a.labels)?;
    write_report(&report, out, "ablation")
}
