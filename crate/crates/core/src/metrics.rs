//! Evaluation metrics and the popularity baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Area under the ROC curve in its Mann-Whitney form: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Computed from average ranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum_pos += avg * pos_in_group as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of examples whose thresholded score (`score > threshold` means
/// positive) matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == (l != 0))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// One user's ranked candidates and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Candidate ids, best first.
    pub ranked: Vec<u32>,
    pub truth: Vec<u32>,
}

/// Ranks ids by descending score, ascending id on ties.
pub fn rank_by_score(scores: &[(u32, f64)]) -> Vec<u32> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id).collect()
}

/// Average precision at `k` with normalizer `min(k, |truth|)`.
pub fn average_precision_at_k(ranked: &[u32], truth: &[u32], k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranked.iter().take(k).enumerate() {
        if truth.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / k.min(truth.len()) as f64)
}

/// Mean AP@k over users with a non-empty truth set, plus the number of
/// users skipped for an empty truth set.
pub fn map_at_k(results: &[RankingResult], k: usize) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for r in results {
        match average_precision_at_k(&r.ranked, &r.truth, k) {
            Some(ap) => {
                total += ap;
                counted += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("map@{k}: {skipped} users with an empty truth set were excluded");
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "no user has a non-empty truth set".into(),
        ));
    }
    Ok((total / counted as f64, skipped))
}

/// Global ranking by descending purchase count, ascending id on ties.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityBaseline {
    pub ranking: Vec<u32>,
}

impl PopularityBaseline {
    pub fn fit(train_purchases: &[u32]) -> Result<Self> {
        if train_purchases.is_empty() {
            return Err(Error::Contract(
                "popularity baseline needs purchases".into(),
            ));
        }
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &g in train_purchases {
            *counts.entry(g).or_default() += 1;
        }
        let scored: Vec<(u32, f64)> = counts.into_iter().map(|(g, c)| (g, c as f64)).collect();
        Ok(PopularityBaseline {
            ranking: rank_by_score(&scored),
        })
    }

    /// The same ranking for every user.
    pub fn rank(&self, truths: &[Vec<u32>]) -> Vec<RankingResult> {
        truths
            .iter()
            .map(|t| RankingResult {
                ranked: self.ranking.clone(),
                truth: t.clone(),
            })
            .collect()
    }
}

/// Metric rows of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub config_digest: String,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub epoch: Option<usize>,
}

impl MetricReport {
    pub fn push(&mut self, task: &str, metric: &str, value: f64, seed: u64, epoch: Option<usize>) {
        self.rows.push(MetricRow {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            seed,
            epoch,
        });
    }

    /// `task<TAB>metric<TAB>value<TAB>seed` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let metric = match r.epoch {
                Some(e) => format!("{}@epoch{e}", r.metric),
                None => r.metric.clone(),
            };
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.task, metric, r.value, r.seed);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config digest: {}", self.config_digest);
        let _ = writeln!(
            s,
            "{:<28} {:<24} {:>6} {:>6} {:>12}",
            "task", "metric", "epoch", "seed", "value"
        );
        for r in &self.rows {
            let epoch = r.epoch.map_or("-".to_string(), |e| e.to_string());
            let _ = writeln!(
                s,
                "{:<28} {:<24} {:>6} {:>6} {:>12.6}",
                r.task, r.metric, epoch, r.seed, r.value
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.4; 3], &[1, 1, 1], 0.5).unwrap(), 0.0);
        assert_eq!(
            accuracy(&[0.9, 0.8, 0.2, 0.6], &[1, 1, 0, 0], 0.5).unwrap(),
            0.75
        );
    }

    #[test]
    fn ap_examples() {
        let ranked: Vec<u32> = (1..=10).collect();
        assert_eq!(average_precision_at_k(&ranked, &[1], 10), Some(1.0));
        assert_eq!(average_precision_at_k(&ranked, &[2], 10), Some(0.5));
        let ap = average_precision_at_k(&ranked, &[1, 3], 10).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision_at_k(&ranked, &[], 10), None);
    }

    #[test]
    fn popularity_ranking_and_forced_hit() {
        let base = PopularityBaseline::fit(&[5, 3, 5, 7, 3, 5, 2]).unwrap();
        assert_eq!(base.ranking, vec![5, 3, 2, 7]);
        let results = base.rank(&[vec![5], vec![5], vec![5]]);
        assert!(results.iter().all(|r| r.ranked == base.ranking));
        assert_eq!(map_at_k(&results, 10).unwrap().0, 1.0);
        assert!(PopularityBaseline::fit(&[]).is_err());
    }

    #[test]
    fn empty_truth_users_are_excluded() {
        let results = vec![
            RankingResult {
                ranked: vec![1, 2],
                truth: vec![1],
            },
            RankingResult {
                ranked: vec![1, 2],
                truth: vec![],
            },
        ];
        assert_eq!(map_at_k(&results, 10).unwrap(), (1.0, 1));
    }
}
