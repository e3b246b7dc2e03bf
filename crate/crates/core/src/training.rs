//! Pretraining and fine-tuning loops.
//!
//! Every random draw comes from a counter-based stream keyed by
//! `(seed, purpose, step/example)`, so a run is reproducible from its seed
//! alone and resuming from a checkpoint at step `s` continues the same
//! trajectory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::datagen::{stream_rng, Label, LabeledDataset};
use crate::encoder::{encoder_forward, predict_masked_attributes};
use crate::error::{Error, Result};
use crate::gradients::{classify_sequence_loss, compute_gradients, LossBreakdown, PretrainExample};
use crate::input::{apply_mask_and_targets, assemble_input_sequence, sample_mask_plan};
use crate::metrics::{accuracy, map_at_k, rank_by_score, roc_auc, RankingResult};
use crate::optim::{adam_step, OptimizerState};
use crate::params::{ModelConfig, Parameters, VocabLayout};
use crate::tokenizer::TokenizedUser;
use crate::vocab::{SegmentKind, VocabularyRegistry, UNKNOWN_ID};

const DOMAIN_INIT: u64 = 101;
const DOMAIN_BATCH: u64 = 102;
const DOMAIN_MASK: u64 = 103;
const DOMAIN_DROPOUT: u64 = 104;
const DOMAIN_EVAL_MASK: u64 = 105;
const DOMAIN_HEAD: u64 = 106;
const DOMAIN_SHUFFLE: u64 = 107;
const DOMAIN_FT_DROPOUT: u64 = 108;
const DOMAIN_SUBSET: u64 = 109;

/// Fresh parameters for a seed; the same seed always gives the same encoder.
pub fn init_parameters(
    config: &ModelConfig,
    vocab: &VocabLayout,
    num_classes: Option<usize>,
    seed: u64,
) -> Result<Parameters<f32>> {
    Parameters::init(
        config,
        vocab,
        num_classes,
        &mut stream_rng(seed, DOMAIN_INIT, 0),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    /// `(segment.attribute, loss)` pairs.
    pub components: Vec<(String, f64)>,
    pub lr: f64,
    pub wall_secs: f64,
}

/// Append-only record of a pretraining run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLogEntry {
    /// `step<TAB>loss<TAB>component=value;...`
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{:.6}\t", self.step, self.loss);
        for (name, v) in &self.components {
            let _ = write!(s, "{name}={v:.6};");
        }
        let _ = write!(s, "lr={:e};wall_secs={:.3}", self.lr, self.wall_secs);
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::parse("train log", format!("{m}: `{line}`"));
        let mut fields = line.split('\t');
        let step = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("step"))?;
        let loss = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("loss"))?;
        let mut entry = TrainLogEntry {
            step,
            loss,
            components: Vec::new(),
            lr: 0.0,
            wall_secs: 0.0,
        };
        for kv in fields
            .next()
            .unwrap_or("")
            .split(';')
            .filter(|s| !s.is_empty())
        {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("component"))?;
            let v: f64 = v.parse().map_err(|_| bad("component value"))?;
            match k {
                "lr" => entry.lr = v,
                "wall_secs" => entry.wall_secs = v,
                _ => entry.components.push((k.to_string(), v)),
            }
        }
        Ok(entry)
    }
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

/// Trailing moving average with a window of `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn component_names(registry: &VocabularyRegistry) -> Vec<String> {
    let mut names = Vec::new();
    for kind in [SegmentKind::LongTerm, SegmentKind::ShortTerm] {
        let prefix = match kind {
            SegmentKind::LongTerm => "long",
            _ => "short",
        };
        for n in registry.schemas().get(kind).names() {
            names.push(format!("{prefix}.{n}"));
        }
    }
    names
}

/// Where a pretraining run starts from.
pub struct PretrainState {
    pub params: Parameters<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Number of steps already taken.
    pub step: u64,
}

impl PretrainState {
    pub fn fresh(
        config: &ModelConfig,
        registry: &VocabularyRegistry,
        train: &TrainConfig,
    ) -> Result<Self> {
        let params = init_parameters(
            config,
            &VocabLayout::from_registry(registry),
            None,
            train.seed,
        )?;
        let optimizer = OptimizerState::new(&params, train.adam);
        Ok(PretrainState {
            params,
            optimizer,
            step: 0,
        })
    }
}

/// Users that can be masked (at least one behavioral word).
pub fn eligible_users(users: &[TokenizedUser]) -> Vec<usize> {
    (0..users.len())
        .filter(|&i| users[i].num_words() > 0)
        .collect()
}

/// Builds the masked examples of one pretraining step.
pub fn pretrain_batch(
    users: &[TokenizedUser],
    eligible: &[usize],
    params: &Parameters<f32>,
    config: &ModelConfig,
    train: &TrainConfig,
    step: u64,
) -> Result<(Vec<PretrainExample<f32>>, Vec<ChaCha8Rng>)> {
    let b = train.pretrain_batch.min(eligible.len());
    let picks = index::sample(
        &mut stream_rng(train.seed, DOMAIN_BATCH, step),
        eligible.len(),
        b,
    );
    let mut batch = Vec::with_capacity(b);
    let mut rngs = Vec::with_capacity(b);
    for (slot, pick) in picks.into_iter().enumerate() {
        let counter = step * train.pretrain_batch as u64 + slot as u64;
        let user = &users[eligible[pick]];
        let seq = assemble_input_sequence(user, params, config)?;
        let plan = sample_mask_plan(&seq, &mut stream_rng(train.seed, DOMAIN_MASK, counter))?;
        let (masked, targets) = apply_mask_and_targets(&seq, &plan, params, config)?;
        batch.push(PretrainExample { masked, targets });
        rngs.push(stream_rng(train.seed, DOMAIN_DROPOUT, counter));
    }
    Ok((batch, rngs))
}

/// Runs `steps` pretraining steps from `state`. `on_step` sees every log
/// entry and the state after the update (for checkpointing).
pub fn pretrain(
    users: &[TokenizedUser],
    registry: &VocabularyRegistry,
    config: &ModelConfig,
    train: &TrainConfig,
    state: &mut PretrainState,
    steps: usize,
    mut on_step: impl FnMut(&TrainLogEntry, &PretrainState) -> Result<()>,
) -> Result<TrainLog> {
    let eligible = eligible_users(users);
    if eligible.is_empty() {
        return Err(Error::Config(
            "no user has behavioral words to pretrain on".into(),
        ));
    }
    if state
        .params
        .check_same_shapes(&state.optimizer.first_moment)
        .is_err()
    {
        return Err(Error::Shape(
            "optimizer state does not match parameters".into(),
        ));
    }
    let names = component_names(registry);
    let started = Instant::now();
    let mut log = TrainLog::default();
    for _ in 0..steps {
        let step = state.step;
        let (batch, mut rngs) =
            pretrain_batch(users, &eligible, &state.params, config, train, step)?;
        let (breakdown, grads) =
            compute_gradients(&batch, &state.params, config, &mut rngs, 1.0f32, step)?;
        adam_step(&mut state.params, &grads, &mut state.optimizer)?;
        state.step += 1;
        let entry = TrainLogEntry {
            step: state.step,
            loss: breakdown.total,
            components: names
                .iter()
                .cloned()
                .zip(breakdown.components.iter().copied())
                .collect(),
            lr: train.adam.lr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::debug!("{}", entry.to_line());
        on_step(&entry, state)?;
        log.entries.push(entry);
    }
    Ok(log)
}

/// Masked-genre top-1 accuracy and the matching majority-class oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub positions: usize,
    pub top1_accuracy: f64,
    /// Rate at which always predicting the most frequent genre of each
    /// segment would be a hit on the same positions.
    pub majority_rate: f64,
    /// Mean reconstruction loss over the evaluated sequences.
    pub mean_loss: f64,
}

/// Most frequent value of an attribute counted once per word.
pub fn majority_value(users: &[TokenizedUser], kind: SegmentKind, attribute: usize) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for u in users {
        for w in u.words(kind) {
            let mut ids: Vec<u32> = w.actions.iter().map(|a| a[attribute]).collect();
            ids.sort_unstable();
            ids.dedup();
            for id in ids {
                *counts.entry(id).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(id, _)| id)
}

/// Masks every user of `eval_users` with a fixed evaluation stream and
/// scores top-1 genre predictions: a hit when the argmax genre is in the
/// masked word's genre set. The majority oracle is fitted on `train_users`.
pub fn masked_genre_accuracy(
    eval_users: &[TokenizedUser],
    train_users: &[TokenizedUser],
    registry: &VocabularyRegistry,
    params: &Parameters<f32>,
    config: &ModelConfig,
    seed: u64,
) -> Result<ReconstructionReport> {
    let genre_of = |kind: SegmentKind| {
        registry
            .schemas()
            .get(kind)
            .position("genre")
            .ok_or_else(|| Error::Schema(format!("{kind} schema has no genre attribute")))
    };
    let genre = [
        genre_of(SegmentKind::LongTerm)?,
        genre_of(SegmentKind::ShortTerm)?,
    ];
    let majority = [
        majority_value(train_users, SegmentKind::LongTerm, genre[0]),
        majority_value(train_users, SegmentKind::ShortTerm, genre[1]),
    ];
    let (mut positions, mut hits, mut majority_hits, mut loss_sum, mut seqs) =
        (0usize, 0usize, 0usize, 0.0, 0usize);
    for (i, user) in eval_users.iter().enumerate() {
        if user.num_words() == 0 {
            continue;
        }
        let seq = assemble_input_sequence(user, params, config)?;
        let plan = sample_mask_plan(&seq, &mut stream_rng(seed, DOMAIN_EVAL_MASK, i as u64))?;
        let (masked, targets) = apply_mask_and_targets(&seq, &plan, params, config)?;
        let output = encoder_forward(&masked.embeddings, params, config, None)?;
        let preds = predict_masked_attributes(&output, &targets, params)?;
        for (pos, probs) in targets.positions.iter().zip(&preds) {
            let s = pos.kind.index();
            let truth = &pos.targets[genre[s]];
            let p = &probs[genre[s]];
            let top = (1..p.len()).fold(
                UNKNOWN_ID as usize,
                |best, j| if p[j] > p[best] { j } else { best },
            );
            positions += 1;
            hits += truth.contains(&(top as u32)) as usize;
            majority_hits += majority[s].is_some_and(|m| truth.contains(&m)) as usize;
            for (k, ids) in pos.targets.iter().enumerate() {
                let denom = ids.len() as f64;
                loss_sum -= ids
                    .iter()
                    .map(|&id| (probs[k][id as usize] as f64).ln())
                    .sum::<f64>()
                    / denom;
            }
        }
        seqs += 1;
    }
    if positions == 0 {
        return Err(Error::Config("no maskable users to evaluate".into()));
    }
    Ok(ReconstructionReport {
        positions,
        top1_accuracy: hits as f64 / positions as f64,
        majority_rate: majority_hits as f64 / positions as f64,
        mean_loss: loss_sum / seqs as f64,
    })
}

/// Per-user fine-tuning target as a class set.
#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneTask {
    /// Two classes; target class is the label.
    Binary,
    /// One class per long-term genre id; targets are genre sets.
    NextGenre { num_genres: usize },
}

impl FinetuneTask {
    pub fn num_classes(&self) -> usize {
        match self {
            FinetuneTask::Binary => 2,
            FinetuneTask::NextGenre { num_genres } => *num_genres,
        }
    }
}

/// Users and targets of one fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneData<'a> {
    pub task: FinetuneTask,
    pub train: Vec<(&'a TokenizedUser, Vec<u32>)>,
    pub test: Vec<(&'a TokenizedUser, Vec<u32>)>,
}

impl<'a> FinetuneData<'a> {
    /// Joins labels with tokenized users. Genre labels are mapped through the
    /// frozen registry; unknown genres are dropped and users left with an
    /// empty set are excluded from training (they are still counted as
    /// skipped by mAP). `max_train` subsamples the training split.
    pub fn build(
        labels: &LabeledDataset,
        users: &'a [TokenizedUser],
        registry: &VocabularyRegistry,
        max_train: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let by_id: BTreeMap<&str, &TokenizedUser> =
            users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        let genre_attr = registry.schemas().long_term.position("genre");
        let task = match labels.examples.first().map(|e| &e.label) {
            Some(Label::GenreSet(_)) => {
                let g = genre_attr.ok_or_else(|| {
                    Error::Schema("long-term schema has no genre attribute".into())
                })?;
                FinetuneTask::NextGenre {
                    num_genres: registry.vocab_size_at(SegmentKind::LongTerm, g),
                }
            }
            _ => FinetuneTask::Binary,
        };
        let convert = |i: usize| -> Result<(&'a TokenizedUser, Vec<u32>)> {
            let e = &labels.examples[i];
            let user = by_id.get(e.user_id.as_str()).copied().ok_or_else(|| {
                Error::Config(format!(
                    "labeled user {} has no tokenized sequence",
                    e.user_id
                ))
            })?;
            let targets = match (&e.label, &task) {
                (Label::Binary(b), FinetuneTask::Binary) => vec![*b as u32],
                (Label::GenreSet(g), FinetuneTask::NextGenre { .. }) => {
                    let attr = genre_attr.expect("checked above");
                    let mut ids: Vec<u32> = g
                        .iter()
                        .map(|v| registry.lookup_at(SegmentKind::LongTerm, attr, v))
                        .filter(|&id| id != UNKNOWN_ID)
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids
                }
                _ => {
                    return Err(Error::Config(format!(
                        "label of {} does not match the task",
                        e.user_id
                    )))
                }
            };
            Ok((user, targets))
        };
        let mut train_idx = labels.train.clone();
        if let Some(n) = max_train {
            if n < train_idx.len() {
                train_idx.shuffle(&mut stream_rng(seed, DOMAIN_SUBSET, 0));
                train_idx.truncate(n);
                train_idx.sort_unstable();
            }
        }
        let train = train_idx
            .into_iter()
            .map(convert)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|(_, t)| !t.is_empty())
            .collect::<Vec<_>>();
        let test = labels
            .test
            .iter()
            .map(|&i| convert(i))
            .collect::<Result<Vec<_>>>()?;
        if train.is_empty() {
            return Err(Error::Config("no usable training labels".into()));
        }
        Ok(FinetuneData { task, train, test })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// `(metric, value)`: roc_auc and accuracy, or map@k.
    pub metrics: Vec<(String, f64)>,
}

impl EpochReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Loss and metrics over a split, in eval mode.
pub fn evaluate_split(
    split: &[(&TokenizedUser, Vec<u32>)],
    task: &FinetuneTask,
    params: &Parameters<f32>,
    config: &ModelConfig,
    k: usize,
) -> Result<(f64, Vec<(String, f64)>)> {
    let mut loss = 0.0;
    let mut counted = 0usize;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut rankings = Vec::new();
    for (user, targets) in split {
        let seq = assemble_input_sequence(user, params, config)?;
        if targets.is_empty() {
            rankings.push(RankingResult {
                ranked: Vec::new(),
                truth: Vec::new(),
            });
            continue;
        }
        let (l, probs) = classify_sequence_loss(&seq, targets, params, config, None, None)?;
        loss += l;
        counted += 1;
        match task {
            FinetuneTask::Binary => {
                scores.push(probs[1] as f64);
                labels.push(targets[0] as u8);
            }
            FinetuneTask::NextGenre { .. } => {
                let scored: Vec<(u32, f64)> = (1..probs.len())
                    .map(|j| (j as u32, probs[j] as f64))
                    .collect();
                let mut ranked = rank_by_score(&scored);
                ranked.truncate(k);
                rankings.push(RankingResult {
                    ranked,
                    truth: targets.clone(),
                });
            }
        }
    }
    let metrics = match task {
        FinetuneTask::Binary => vec![
            ("roc_auc".to_string(), roc_auc(&scores, &labels)?),
            ("accuracy".to_string(), accuracy(&scores, &labels, 0.5)?),
        ],
        FinetuneTask::NextGenre { .. } => vec![(format!("map@{k}"), map_at_k(&rankings, k)?.0)],
    };
    Ok((loss / counted.max(1) as f64, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinetuneOptions {
    pub epochs: usize,
    /// Also score the training split each epoch (needed for the
    /// overfitting detector); otherwise `train_loss` is NaN.
    pub eval_train: bool,
}

pub struct FinetuneOutcome {
    pub params: Parameters<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Epoch 0 is the untrained head.
    pub epochs: Vec<EpochReport>,
}

/// Attaches a fresh zero head and trains every parameter end to end, with
/// no masking. Evaluates train and test splits after each epoch.
pub fn finetune(
    mut params: Parameters<f32>,
    data: &FinetuneData<'_>,
    config: &ModelConfig,
    train: &TrainConfig,
    options: FinetuneOptions,
) -> Result<FinetuneOutcome> {
    params.attach_classifier(data.task.num_classes())?;
    let mut optimizer = OptimizerState::new(&params, train.adam);
    let k = train.map_k;
    let report = |epoch: usize, params: &Parameters<f32>| -> Result<EpochReport> {
        let train_loss = if options.eval_train {
            evaluate_split(&data.train, &data.task, params, config, k)?.0
        } else {
            f64::NAN
        };
        let (test_loss, metrics) = evaluate_split(&data.test, &data.task, params, config, k)?;
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.5} test_loss={test_loss:.5} {metrics:?}"
        );
        Ok(EpochReport {
            epoch,
            train_loss,
            test_loss,
            metrics,
        })
    };
    let mut reports = vec![report(0, &params)?];
    let mut step = 0u64;
    for epoch in 1..=options.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream_rng(train.seed, DOMAIN_SHUFFLE, epoch as u64));
        for chunk in order.chunks(train.finetune_batch) {
            let mut grads = params.zeros_like();
            let per = 1.0 / chunk.len() as f32;
            let mut total = LossBreakdown::zeros(0);
            for &i in chunk {
                let (user, targets) = &data.train[i];
                let seq = assemble_input_sequence(user, &params, config)?;
                let mut rng =
                    stream_rng(train.seed, DOMAIN_FT_DROPOUT, step * 1_000_003 + i as u64);
                let (l, _) = classify_sequence_loss(
                    &seq,
                    targets,
                    &params,
                    config,
                    Some(&mut rng),
                    Some((&mut grads, per)),
                )?;
                total.total += l * per as f64;
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "fine-tuning batch {step}: gradient of {name}"
                )));
            }
            adam_step(&mut params, &grads, &mut optimizer)?;
            log::debug!("finetune step {step}: loss {:.5}", total.total);
            step += 1;
        }
        reports.push(report(epoch, &params)?);
    }
    Ok(FinetuneOutcome {
        params,
        optimizer,
        epochs: reports,
    })
}

/// Builds the starting parameters of a fine-tuning run: the pretrained
/// encoder, or a fresh one drawn for `seed`.
pub fn finetune_start(
    pretrained: Option<&Parameters<f32>>,
    config: &ModelConfig,
    vocab: &VocabLayout,
    seed: u64,
) -> Result<Parameters<f32>> {
    match pretrained {
        Some(p) => Ok(p.clone()),
        None => init_parameters(config, vocab, None, seed ^ DOMAIN_HEAD),
    }
}

/// Overfitting signal on per-epoch losses: after the epoch where the test
/// loss is lowest, the train/test gap never shrinks by more than `tolerance`
/// and ends strictly larger than it was at that minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    pub min_epoch: usize,
    pub gaps: Vec<f64>,
    pub fired: bool,
}

pub fn detect_overfitting(epochs: &[EpochReport], tolerance: f64) -> OverfitReport {
    let gaps: Vec<f64> = epochs.iter().map(|e| e.test_loss - e.train_loss).collect();
    let min_epoch = epochs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.test_loss.total_cmp(&b.1.test_loss))
        .map_or(0, |(i, _)| i);
    let after = &gaps[min_epoch.min(gaps.len().saturating_sub(1))..];
    let monotone = after.windows(2).all(|w| w[1] >= w[0] - tolerance);
    let grew = after.len() >= 2 && after[after.len() - 1] > after[0];
    OverfitReport {
        min_epoch,
        gaps,
        fired: monotone && grew,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_roundtrip() {
        let e = TrainLogEntry {
            step: 3,
            loss: 12.5,
            components: vec![("long.genre".into(), 4.75), ("short.shop".into(), 7.75)],
            lr: 1e-4,
            wall_secs: 0.25,
        };
        let line = e.to_line();
        assert!(line.starts_with("3\t12.500000\tlong.genre=4.750000;"));
        assert_eq!(TrainLogEntry::parse(&line).unwrap(), e);
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    fn epoch(e: usize, train: f64, test: f64) -> EpochReport {
        EpochReport {
            epoch: e,
            train_loss: train,
            test_loss: test,
            metrics: Vec::new(),
        }
    }

    #[test]
    fn overfitting_detector() {
        let rising = [
            epoch(0, 0.7, 0.7),
            epoch(1, 0.6, 0.65),
            epoch(2, 0.4, 0.7),
            epoch(3, 0.2, 0.9),
        ];
        assert!(detect_overfitting(&rising, 0.0).fired);
        let healthy = [epoch(0, 0.7, 0.7), epoch(1, 0.6, 0.6), epoch(2, 0.5, 0.5)];
        assert!(!detect_overfitting(&healthy, 0.0).fired);
        let shrinking = [
            epoch(0, 0.7, 0.6),
            epoch(1, 0.5, 0.8),
            epoch(2, 0.5, 0.6),
            epoch(3, 0.4, 0.9),
        ];
        let r = detect_overfitting(&shrinking, 0.0);
        assert_eq!(r.min_epoch, 0);
        assert!(!r.fired);
    }
}
