//! End-to-end experiment plumbing: data preparation, the pretraining and
//! discretization ablations, and the popularity baseline comparison.

use crate::config::{RunConfig, TrainConfig};
use crate::datagen::{
    derive_task_labels, generate_dataset, GeneratorConfig, LabeledDataset, LatentProfile, TaskSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{map_at_k, MetricReport, PopularityBaseline};
use crate::params::{ModelConfig, Parameters, VocabLayout};
use crate::tokenizer::{tokenize_dataset, TokenizeMode, TokenizedUser, WindowConfig};
use crate::training::{
    detect_overfitting, finetune, finetune_start, pretrain, EpochReport, FinetuneData,
    FinetuneOptions, OverfitReport, PretrainState, TrainLog,
};
use crate::vocab::{UserRecord, VocabularyRegistry};

/// A generated dataset with its vocabulary and token sequences.
pub struct Prepared {
    pub generator: GeneratorConfig,
    pub users: Vec<UserRecord>,
    pub profiles: Vec<LatentProfile>,
    pub registry: VocabularyRegistry,
    pub windows: WindowConfig,
    pub tokens: Vec<TokenizedUser>,
}

impl Prepared {
    pub fn labels(&self, task: &TaskSpec) -> Result<LabeledDataset> {
        derive_task_labels(&self.profiles, task, &self.generator)
    }

    /// Re-tokenizes the same users under another mode with the frozen vocabulary.
    pub fn retokenize(&self, mode: TokenizeMode) -> Result<Vec<TokenizedUser>> {
        let mut registry = self.registry.clone();
        tokenize_dataset(&self.users, &mut registry, true, &self.windows, mode)
    }
}

/// Generates users, builds the vocabulary over them and tokenizes.
pub fn prepare(
    generator: &GeneratorConfig,
    mode: TokenizeMode,
    tz_offset_secs: i64,
) -> Result<Prepared> {
    let (users, profiles) = generate_dataset(generator)?;
    let mut registry = VocabularyRegistry::new(generator.schemas()?);
    registry.ingest(&users)?;
    let windows = WindowConfig {
        long_window_start: generator.long_window_start(),
        short_window_start: generator.short_window_start(),
        tz_offset_secs,
    };
    let tokens = tokenize_dataset(&users, &mut registry, true, &windows, mode)?;
    Ok(Prepared {
        generator: generator.clone(),
        users,
        profiles,
        registry,
        windows,
        tokens,
    })
}

pub fn prepare_run(config: &RunConfig) -> Result<Prepared> {
    prepare(
        &config.generator,
        config.tokenize_mode,
        config.tz_offset_secs,
    )
}

/// Fresh pretraining for `steps` steps.
pub fn pretrain_fresh(
    tokens: &[TokenizedUser],
    registry: &VocabularyRegistry,
    model: &ModelConfig,
    train: &TrainConfig,
    steps: usize,
) -> Result<(PretrainState, TrainLog)> {
    let mut state = PretrainState::fresh(model, registry, train)?;
    let log = pretrain(tokens, registry, model, train, &mut state, steps, |_, _| {
        Ok(())
    })?;
    Ok((state, log))
}

/// Best value of a metric over epochs 1.. (epoch 0 is the untrained head).
pub fn best_metric(epochs: &[EpochReport], metric: &str) -> f64 {
    epochs
        .iter()
        .skip(1)
        .filter_map(|e| e.metric(metric))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn final_metric(epochs: &[EpochReport], metric: &str) -> f64 {
    epochs
        .last()
        .and_then(|e| e.metric(metric))
        .unwrap_or(f64::NAN)
}

/// Pretrained vs from-scratch fine-tuning on one seed.
#[derive(Debug, Clone)]
pub struct PretrainingComparison {
    pub seed: u64,
    pub pretrained: Vec<EpochReport>,
    pub scratch: Vec<EpochReport>,
    pub overfit: OverfitReport,
}

impl PretrainingComparison {
    pub fn auc_gap(&self) -> f64 {
        best_metric(&self.pretrained, "roc_auc") - best_metric(&self.scratch, "roc_auc")
    }
}

/// Fine-tunes `pretrained` and a fresh encoder on the same `num_labels`
/// training labels of the binary targeting task.
pub fn compare_pretraining(
    prep: &Prepared,
    pretrained: &Parameters<f32>,
    model: &ModelConfig,
    train: &TrainConfig,
    num_labels: usize,
) -> Result<PretrainingComparison> {
    let labels = prep.labels(&TaskSpec::default_targeting(prep.generator.latent_dim))?;
    let data = FinetuneData::build(
        &labels,
        &prep.tokens,
        &prep.registry,
        Some(num_labels),
        train.seed,
    )?;
    let options = FinetuneOptions {
        epochs: train.finetune_epochs,
        eval_train: true,
    };
    let vocab = VocabLayout::from_registry(&prep.registry);
    let with = finetune(
        finetune_start(Some(pretrained), model, &vocab, train.seed)?,
        &data,
        model,
        train,
        options,
    )?;
    let without = finetune(
        finetune_start(None, model, &vocab, train.seed)?,
        &data,
        model,
        train,
        options,
    )?;
    let overfit = detect_overfitting(&without.epochs, 0.0);
    Ok(PretrainingComparison {
        seed: train.seed,
        pretrained: with.epochs,
        scratch: without.epochs,
        overfit,
    })
}

/// Fine-tunes an encoder on the next-genre task and returns per-epoch test mAP.
pub fn next_genre_finetune(
    prep: &Prepared,
    tokens: &[TokenizedUser],
    pretrained: &Parameters<f32>,
    model: &ModelConfig,
    train: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochReport>> {
    let labels = prep.labels(&TaskSpec::from_name(
        "next_genre",
        prep.generator.latent_dim,
    )?)?;
    let data = FinetuneData::build(
        &labels,
        tokens,
        &prep.registry,
        train.finetune_labels,
        train.seed,
    )?;
    let options = FinetuneOptions {
        epochs,
        eval_train: false,
    };
    Ok(finetune(pretrained.clone(), &data, model, train, options)?.epochs)
}

/// mAP@k of the global popularity ranking fitted on training users' purchase
/// histories, scored on the test split of the next-genre task.
pub fn popularity_map(prep: &Prepared, k: usize, seed: u64) -> Result<f64> {
    let labels = prep.labels(&TaskSpec::from_name(
        "next_genre",
        prep.generator.latent_dim,
    )?)?;
    let data = FinetuneData::build(&labels, &prep.tokens, &prep.registry, None, seed)?;
    let genre = prep
        .registry
        .schemas()
        .long_term
        .position("genre")
        .ok_or_else(|| Error::Schema("long-term schema has no genre attribute".into()))?;
    let purchases: Vec<u32> = data
        .train
        .iter()
        .flat_map(|(u, _)| {
            u.long_words
                .iter()
                .flat_map(|w| w.actions.iter().map(|a| a[genre]))
        })
        .collect();
    let baseline = PopularityBaseline::fit(&purchases)?;
    let truths: Vec<Vec<u32>> = data.test.iter().map(|(_, t)| t.clone()).collect();
    Ok(map_at_k(&baseline.rank(&truths), k)?.0)
}

/// The full `ablate` experiment: pretrained vs scratch over `seeds`, then
/// discretized vs per-action and the popularity baseline on the first seed.
pub fn run_ablation(config: &RunConfig, seeds: &[u64], num_labels: usize) -> Result<MetricReport> {
    let mut report = MetricReport {
        config_digest: config.digest(),
        rows: Vec::new(),
    };
    let base = prepare(
        &config.generator,
        TokenizeMode::Discretized,
        config.tz_offset_secs,
    )?;
    let steps = config.train.pretrain_steps;
    let k = config.train.map_k;
    let mut first_pretrained = None;
    for &seed in seeds {
        let train = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let (state, log) =
            pretrain_fresh(&base.tokens, &base.registry, &config.model, &train, steps)?;
        let losses = log.losses();
        report.push(
            "pretrain",
            "loss_first",
            losses.first().copied().unwrap_or(f64::NAN),
            seed,
            None,
        );
        report.push(
            "pretrain",
            "loss_last",
            losses.last().copied().unwrap_or(f64::NAN),
            seed,
            None,
        );
        let cmp = compare_pretraining(&base, &state.params, &config.model, &train, num_labels)?;
        for (arm, epochs) in [
            ("targeting/pretrained", &cmp.pretrained),
            ("targeting/scratch", &cmp.scratch),
        ] {
            for e in epochs.iter() {
                report.push(
                    arm,
                    "roc_auc",
                    e.metric("roc_auc").unwrap_or(f64::NAN),
                    seed,
                    Some(e.epoch),
                );
                report.push(arm, "test_loss", e.test_loss, seed, Some(e.epoch));
                report.push(arm, "train_loss", e.train_loss, seed, Some(e.epoch));
            }
            report.push(
                arm,
                "best_roc_auc",
                best_metric(epochs, "roc_auc"),
                seed,
                None,
            );
        }
        report.push(
            "targeting/scratch",
            "overfitting",
            cmp.overfit.fired as u8 as f64,
            seed,
            None,
        );
        if first_pretrained.is_none() {
            first_pretrained = Some((train, state.params));
        }
    }
    let (train, discretized) = match first_pretrained {
        Some(p) => p,
        None => return Ok(report),
    };
    let epochs = config.train.finetune_epochs;
    let metric = format!("map@{k}");
    let disc = next_genre_finetune(
        &base,
        &base.tokens,
        &discretized,
        &config.model,
        &train,
        epochs,
    )?;
    let per_action_tokens = base.retokenize(TokenizeMode::PerAction)?;
    let (pa_state, _) = pretrain_fresh(
        &per_action_tokens,
        &base.registry,
        &config.model,
        &train,
        steps,
    )?;
    let per_action = next_genre_finetune(
        &base,
        &per_action_tokens,
        &pa_state.params,
        &config.model,
        &train,
        epochs,
    )?;
    let popularity = popularity_map(&base, k, train.seed)?;
    report.push(
        "next_genre/discretized",
        &metric,
        final_metric(&disc, &metric),
        train.seed,
        None,
    );
    report.push(
        "next_genre/per_action",
        &metric,
        final_metric(&per_action, &metric),
        train.seed,
        None,
    );
    report.push(
        "next_genre/popularity",
        &metric,
        popularity,
        train.seed,
        None,
    );
    Ok(report)
}
