//! Reconstruction and classification losses.

use crate::error::{Error, Result};
use crate::float::Scalar;

/// Cross entropy of probabilities against a multi-hot target normalized to
/// a distribution: `-sum_v y_v / |y| * ln p_v`.
pub fn soft_cross_entropy<F: Scalar>(probs: &[F], multi_hot: &[u8]) -> Result<F> {
    if probs.len() != multi_hot.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} target entries",
            probs.len(),
            multi_hot.len()
        )));
    }
    let count = multi_hot.iter().filter(|&&b| b != 0).count();
    if count == 0 {
        return Err(Error::Contract("all-zero multi-hot target".into()));
    }
    let w = F::ONE / F::of(count as f64);
    Ok(-probs
        .iter()
        .zip(multi_hot)
        .filter(|(_, &b)| b != 0)
        .map(|(&p, _)| w * p.ln())
        .sum::<F>())
}

/// Stable log-sum-exp form of [`soft_cross_entropy`] on logits with the
/// target given as a set of ids. Returns the loss and `d loss / d logits`.
pub fn soft_cross_entropy_logits<F: Scalar>(
    logits: &[F],
    target_ids: &[u32],
) -> Result<(F, Vec<F>)> {
    if target_ids.is_empty() {
        return Err(Error::Contract("empty target set".into()));
    }
    if let Some(&id) = target_ids.iter().find(|&&id| id as usize >= logits.len()) {
        return Err(Error::Shape(format!(
            "target id {id} outside {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(logits[0], |a, b| a.max(b));
    let mut probs: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = probs.iter().copied().sum();
    let log_z = max + total.ln();
    probs.iter_mut().for_each(|p| *p /= total);
    let w = F::ONE / F::of(target_ids.len() as f64);
    let mut loss = F::ZERO;
    let mut grad = probs;
    for &id in target_ids {
        loss += w * (log_z - logits[id as usize]);
        grad[id as usize] -= w;
    }
    Ok((loss, grad))
}

/// Independent-sigmoid binary cross entropy summed over the vocabulary.
pub fn sigmoid_bce_logits<F: Scalar>(logits: &[F], target_ids: &[u32]) -> Result<(F, Vec<F>)> {
    if target_ids.is_empty() {
        return Err(Error::Contract("empty target set".into()));
    }
    let mut y = vec![F::ZERO; logits.len()];
    for &id in target_ids {
        *y.get_mut(id as usize).ok_or_else(|| {
            Error::Shape(format!("target id {id} outside {} logits", logits.len()))
        })? = F::ONE;
    }
    let mut loss = F::ZERO;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(&y) {
        // softplus(z) - t z, computed without overflow
        let softplus = z.max(F::ZERO) + (F::ONE + (-z.abs()).exp()).ln();
        loss += softplus - t * z;
        let sig = F::ONE / (F::ONE + (-z).exp());
        grad.push(sig - t);
    }
    Ok((loss, grad))
}

/// Sum over masked positions and their attributes of the soft cross entropy.
///
/// `predictions[i][k]` are probabilities for attribute `k` of masked
/// position `i`; `targets[i][k]` the matching multi-hot vectors.
pub fn masked_multilabel_loss<F: Scalar>(
    predictions: &[Vec<Vec<F>>],
    targets: &[Vec<Vec<u8>>],
) -> Result<F> {
    if predictions.is_empty() {
        return Err(Error::Contract("no masked positions".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predicted positions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = F::ZERO;
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Shape("attribute count mismatch".into()));
        }
        for (pk, tk) in p.iter().zip(t) {
            total += soft_cross_entropy(pk, tk)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let uniform = [0.25f64; 4];
        assert!((soft_cross_entropy(&uniform, &[0, 1, 0, 0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let half = [0.5f64, 0.0, 0.5];
        assert!((soft_cross_entropy(&half, &[1, 0, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let p = [0.9f64, 0.1];
        assert!((soft_cross_entropy(&p, &[1, 0]).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(soft_cross_entropy(&p, &[0, 0]).is_err());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let logits = [0.3f64, -1.2, 2.0, 0.0];
        let max = 2.0f64;
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
        let (loss, grad) = soft_cross_entropy_logits(&logits, &[0, 2]).unwrap();
        let direct = soft_cross_entropy(&probs, &[1, 0, 1, 0]).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
        assert!((grad[1] - probs[1]).abs() < 1e-15);
        assert!((grad[0] - (probs[0] - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn logit_form_is_stable_for_large_logits() {
        let (loss, _) = soft_cross_entropy_logits(&[1000.0f32, 0.0], &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
    }

    #[test]
    fn sigmoid_variant_gradient() {
        let (loss, grad) = sigmoid_bce_logits(&[0.0f64, 0.0], &[1]).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad, vec![0.5, -0.5]);
    }

    #[test]
    fn multilabel_sum() {
        let pos = vec![vec![0.5f64; 2], vec![0.2; 5]];
        let tgt = vec![vec![1u8, 0], vec![0, 0, 1, 0, 0]];
        let one = masked_multilabel_loss(std::slice::from_ref(&pos), std::slice::from_ref(&tgt)).unwrap();
        assert!((one - 10f64.ln()).abs() < 1e-12);
        let two = masked_multilabel_loss(&[pos.clone(), pos], &[tgt.clone(), tgt]).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        assert!(masked_multilabel_loss::<f64>(&[], &[]).is_err());
    }
}
