//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use userbert::datagen::SESSION_GAP_SECS;
use userbert::tokenizer::{BehavioralWord, WindowConfig};
use userbert::vocab::{ActionEvent, SegmentKind};

/// AUC by enumerating every (positive, negative) pair.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn brute_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let mut correct = 0;
    for (s, l) in scores.iter().zip(labels) {
        let predicted = if *s > threshold { 1 } else { 0 };
        if predicted == *l {
            correct += 1;
        }
    }
    correct as f64 / scores.len() as f64
}

/// AP@k from its textbook form: precision@i recomputed from scratch at
/// every relevant rank i <= k.
pub fn brute_ap(ranked: &[u32], truth: &[u32], k: usize) -> f64 {
    let top: Vec<u32> = ranked.iter().take(k).copied().collect();
    let mut sum = 0.0;
    for i in 1..=top.len() {
        if truth.contains(&top[i - 1]) {
            let hits = top[..i].iter().filter(|id| truth.contains(id)).count();
            sum += hits as f64 / i as f64;
        }
    }
    sum / k.min(truth.len()) as f64
}

pub fn random_binary_instance<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..30);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 1;
    labels[1] = 0;
    // Coarse scores so ties are common.
    let scores = (0..n)
        .map(|_| rng.random_range(0..8) as f64 / 4.0)
        .collect();
    (scores, labels)
}

/// A ranking over distinct ids and a non-empty truth set.
pub fn random_ranking_instance<R: Rng>(rng: &mut R) -> (Vec<u32>, Vec<u32>, usize) {
    let pool = rng.random_range(1..25u32);
    let mut ids: Vec<u32> = (1..=pool).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let ranked = ids[..rng.random_range(0..=ids.len())].to_vec();
    let mut truth: Vec<u32> = (1..=pool + 3).filter(|_| rng.random_bool(0.3)).collect();
    if truth.is_empty() {
        truth.push(rng.random_range(1..=pool));
    }
    (ranked, truth, rng.random_range(1..15))
}

pub fn event(kind: SegmentKind, timestamp: i64, tag: usize) -> ActionEvent {
    ActionEvent {
        user_id: "fuzz".into(),
        timestamp,
        segment_kind: kind,
        attribute_values: vec![format!("v{tag}")],
    }
}

/// A sorted stream starting at or after `start` with a mix of short,
/// threshold-adjacent and long gaps.
pub fn fuzz_stream<R: Rng>(rng: &mut R, kind: SegmentKind, start: i64) -> Vec<ActionEvent> {
    let n = rng.random_range(0..40);
    let mut t = start + rng.random_range(0..3 * 86_400);
    (0..n)
        .map(|i| {
            let gap = match rng.random_range(0..5) {
                0 => 0,
                1 => SESSION_GAP_SECS + rng.random_range(-1..=1),
                2 => rng.random_range(1..600),
                3 => rng.random_range(3_600..30 * 3_600),
                _ => rng.random_range(0..4 * 86_400),
            };
            t += gap;
            event(kind, t, i)
        })
        .collect()
}

/// Local 04:00-to-04:00 day index of a timestamp.
pub fn local_day(timestamp: i64, tz_offset_secs: i64) -> i64 {
    (timestamp + tz_offset_secs - 4 * 3_600).div_euclid(86_400)
}

/// Checks that words partition the stream in order and that the grouping
/// rule of the segment holds inside and between words. Returns an error
/// description on the first violation.
pub fn check_partition(
    events: &[ActionEvent],
    words: &[BehavioralWord],
    kind: SegmentKind,
    windows: &WindowConfig,
) -> Result<(), String> {
    let flat: Vec<&ActionEvent> = words.iter().flat_map(|w| &w.actions).collect();
    if flat.len() != events.len() || flat.iter().zip(events).any(|(a, b)| *a != b) {
        return Err("words do not concatenate to the input stream".into());
    }
    if words.iter().any(|w| w.actions.is_empty()) {
        return Err("empty word".into());
    }
    let tz = windows.tz_offset_secs;
    for w in words {
        let first = w.actions[0].timestamp;
        match kind {
            SegmentKind::LongTerm => {
                if w.actions
                    .iter()
                    .any(|a| local_day(a.timestamp, tz) != local_day(first, tz))
                {
                    return Err("long-term word spans two day windows".into());
                }
            }
            _ => {
                if w.actions
                    .windows(2)
                    .any(|p| p[1].timestamp - p[0].timestamp > SESSION_GAP_SECS)
                {
                    return Err("session contains a gap over 30 minutes".into());
                }
                let hours = (first - windows.short_window_start) / 3_600;
                if w.position_index as i64 != hours {
                    return Err(format!("session position {} != {hours}", w.position_index));
                }
            }
        }
    }
    for p in words.windows(2) {
        let (a, b) = (p[0].actions.last().unwrap(), &p[1].actions[0]);
        match kind {
            SegmentKind::LongTerm => {
                if local_day(a.timestamp, tz) == local_day(b.timestamp, tz) {
                    return Err("consecutive long-term words share a day".into());
                }
                if p[1].position_index <= p[0].position_index {
                    return Err("day positions not increasing".into());
                }
            }
            _ => {
                if b.timestamp - a.timestamp <= SESSION_GAP_SECS {
                    return Err("sessions split without a 30 minute gap".into());
                }
            }
        }
    }
    Ok(())
}

/// A run small enough for debug-speed integration tests.
pub fn small_run(num_users: usize) -> userbert::config::RunConfig {
    let mut cfg = userbert::config::RunConfig::default();
    let n = num_users.to_string();
    for (k, v) in [
        ("gen.num_users", n.as_str()),
        ("model.num_layers", "1"),
        ("model.hidden", "16"),
        ("model.heads", "2"),
        ("model.ffn_dim", "32"),
        ("model.attr_dim", "4"),
        ("train.pretrain_batch", "4"),
        ("train.finetune_batch", "16"),
        ("train.lr", "0.001"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg
}
