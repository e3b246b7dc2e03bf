//! Reverse-mode gradients of the masked reconstruction objective and of the
//! classification objective.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{encoder_backward, encoder_forward, head_logits};
use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::input::{backward_input, InputSequence, MaskTarget};
use crate::loss::{sigmoid_bce_logits, soft_cross_entropy_logits};
use crate::params::{ModelConfig, Parameters, ReconstructionLoss};
use crate::tensor::{outer_acc, row_times_matrix_t, Matrix};

/// A masked sequence with its reconstruction targets.
#[derive(Debug, Clone)]
pub struct PretrainExample<F> {
    pub masked: InputSequence<F>,
    pub targets: MaskTarget,
}

/// Loss of one sequence broken down per (segment, attribute); long-term
/// attributes first, then short-term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<f64>,
}

impl LossBreakdown {
    pub fn zeros(n: usize) -> Self {
        LossBreakdown {
            total: 0.0,
            components: vec![0.0; n],
        }
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += scale * other.total;
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            *a += scale * b;
        }
    }
}

fn component_count<F: Scalar>(params: &Parameters<F>) -> usize {
    params.attribute_heads[0].len() + params.attribute_heads[1].len()
}

/// Reconstruction loss of one sequence; when `grads` is given, adds
/// `scale * d loss / d params` into it.
pub fn pretrain_sequence<F: Scalar>(
    example: &PretrainExample<F>,
    params: &Parameters<F>,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
    grads: Option<(&mut Parameters<F>, F)>,
) -> Result<LossBreakdown> {
    if example.targets.positions.is_empty() {
        return Err(Error::Contract(format!(
            "sequence {} has no masked positions",
            example.masked.user_id
        )));
    }
    let output = encoder_forward(&example.masked.embeddings, params, config, rng)?;
    let h = params.hidden();
    let n_long = params.attribute_heads[0].len();
    let mut breakdown = LossBreakdown::zeros(component_count(params));
    let want_grad = grads.is_some();
    let mut d_hidden = if want_grad {
        Matrix::zeros(output.hidden.rows(), h)
    } else {
        Matrix::zeros(0, 0)
    };
    let scale = grads.as_ref().map_or(F::ONE, |(_, s)| *s);
    let mut head_grads: Vec<(usize, usize, Vec<F>, usize)> = Vec::new();

    for pos in &example.targets.positions {
        let s = pos.kind.index();
        if s > 1 {
            return Err(Error::Contract(
                "profile positions cannot be reconstructed".into(),
            ));
        }
        let heads = &params.attribute_heads[s];
        if pos.targets.len() != heads.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} {} heads",
                pos.targets.len(),
                heads.len(),
                pos.kind
            )));
        }
        let hidden_row = output.hidden.row(pos.row);
        for (k, (head, ids)) in heads.iter().zip(&pos.targets).enumerate() {
            let logits = head_logits(hidden_row, head);
            let (loss, mut d_logits) = match config.reconstruction_loss {
                ReconstructionLoss::SoftmaxNormalized => soft_cross_entropy_logits(&logits, ids)?,
                ReconstructionLoss::SigmoidBinary => sigmoid_bce_logits(&logits, ids)?,
            };
            let loss = loss.to_f64();
            breakdown.total += loss;
            breakdown.components[if s == 0 { k } else { n_long + k }] += loss;
            if want_grad {
                d_logits.iter_mut().for_each(|d| *d *= scale);
                let mut d_row = vec![F::ZERO; h];
                row_times_matrix_t(&d_logits, &head.weight, &mut d_row);
                for (a, b) in d_hidden.row_mut(pos.row).iter_mut().zip(&d_row) {
                    *a += *b;
                }
                head_grads.push((s, k, d_logits, pos.row));
            }
        }
    }
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "reconstruction loss of sequence {}",
            example.masked.user_id
        )));
    }
    if let Some((g, _)) = grads {
        for (s, k, d_logits, row) in head_grads {
            let head = &mut g.attribute_heads[s][k];
            outer_acc(output.hidden.row(row), &d_logits, &mut head.weight);
            for (b, d) in head.bias.as_mut_slice().iter_mut().zip(&d_logits) {
                *b += *d;
            }
        }
        let d_input = encoder_backward(&d_hidden, &output, params, g);
        backward_input(&example.masked, &d_input, params, g);
    }
    Ok(breakdown)
}

/// Classification loss on the CLS state against a target class set (a
/// single class for binary/multi-class tasks, several for set targets).
/// Returns the loss and the class probabilities.
pub fn classify_sequence_loss<F: Scalar>(
    seq: &InputSequence<F>,
    target_classes: &[u32],
    params: &Parameters<F>,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
    grads: Option<(&mut Parameters<F>, F)>,
) -> Result<(f64, Vec<F>)> {
    let head = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    let output = encoder_forward(&seq.embeddings, params, config, rng)?;
    let cls = output.hidden.row(0);
    let logits = head_logits(cls, head);
    let (loss, mut d_logits) = soft_cross_entropy_logits(&logits, target_classes)?;
    let probs: Vec<F> = {
        let mut p = logits.clone();
        crate::encoder::softmax_in_place(&mut p);
        p
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "classification loss of {}",
            seq.user_id
        )));
    }
    if let Some((g, scale)) = grads {
        d_logits.iter_mut().for_each(|d| *d *= scale);
        let h = params.hidden();
        let mut d_hidden = Matrix::zeros(output.hidden.rows(), h);
        row_times_matrix_t(&d_logits, &head.weight, d_hidden.row_mut(0));
        let gh = g
            .classifier
            .as_mut()
            .expect("gradient set mirrors parameters");
        outer_acc(cls, &d_logits, &mut gh.weight);
        for (b, d) in gh.bias.as_mut_slice().iter_mut().zip(&d_logits) {
            *b += *d;
        }
        let d_input = encoder_backward(&d_hidden, &output, params, g);
        backward_input(seq, &d_input, params, g);
    }
    Ok((loss.to_f64(), probs))
}

/// Mean reconstruction loss over a batch and its exact gradient.
///
/// `rngs` supplies one dropout stream per example (training mode); pass an
/// empty slice for deterministic evaluation. `scale` multiplies the loss.
pub fn compute_gradients<F: Scalar>(
    batch: &[PretrainExample<F>],
    params: &Parameters<F>,
    config: &ModelConfig,
    rngs: &mut [ChaCha8Rng],
    scale: F,
    batch_id: u64,
) -> Result<(LossBreakdown, Parameters<F>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if !rngs.is_empty() && rngs.len() != batch.len() {
        return Err(Error::Contract(
            "one dropout stream per example required".into(),
        ));
    }
    let mut grads = params.zeros_like();
    let per = scale / F::of(batch.len() as f64);
    let mut total = LossBreakdown::zeros(component_count(params));
    for (i, example) in batch.iter().enumerate() {
        let rng = rngs.get_mut(i);
        let b = pretrain_sequence(example, params, config, rng, Some((&mut grads, per))).map_err(
            |e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("batch {batch_id}: {m}")),
                other => other,
            },
        )?;
        total.add_scaled(&b, per.to_f64());
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "batch {batch_id}: gradient of {name}"
        )));
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::{apply_mask_and_targets, assemble_input_sequence, MaskAction, MaskPlan};
    use crate::testutil::{config, params, user};
    use crate::tokenizer::TokenizedUser;

    fn example(u: &TokenizedUser, p: &Parameters<f64>, rows: &[usize]) -> PretrainExample<f64> {
        let seq = assemble_input_sequence(u, p, &config()).unwrap();
        let plan = MaskPlan {
            selected: rows.iter().map(|&r| (r, MaskAction::Zeroed)).collect(),
        };
        let (masked, targets) = apply_mask_and_targets(&seq, &plan, p, &config()).unwrap();
        PretrainExample { masked, targets }
    }

    fn batch(p: &Parameters<f64>) -> Vec<PretrainExample<f64>> {
        let mut other = user();
        other.long_words.remove(0);
        vec![
            example(&user(), p, &[1, 5]),
            example(&other, p, &[2]),
            example(&user(), p, &[3]),
        ]
    }

    #[test]
    fn zero_heads_give_log_vocab_loss() {
        let mut p = params(1);
        for heads in p.attribute_heads.iter_mut() {
            for h in heads.iter_mut() {
                h.weight.fill(0.0);
                h.bias.fill(0.0);
            }
        }
        // Long word 1 carries genres {3, 7}: the soft target still sees 1/9 per id.
        let ex = example(&user(), &p, &[2]);
        let loss = pretrain_sequence(&ex, &p, &config(), None, None).unwrap();
        assert!((loss.total - (4f64.ln() + 9f64.ln())).abs() < 1e-12);
        assert!((loss.components[1] - 9f64.ln()).abs() < 1e-12);
        let ex = example(&user(), &p, &[1, 4]);
        let loss = pretrain_sequence(&ex, &p, &config(), None, None).unwrap();
        let expected = 4f64.ln() + 9f64.ln() + 5f64.ln() + 3f64.ln() + 4f64.ln();
        assert!((loss.total - expected).abs() < 1e-12);
    }

    #[test]
    fn untouched_rows_get_no_gradient() {
        let p = params(2);
        let ex = example(&user(), &p, &[2]);
        let mut g = p.zeros_like();
        pretrain_sequence(&ex, &p, &config(), None, Some((&mut g, 1.0))).unwrap();
        // Long attribute 1 sees ids 1, 3, 7 and 8, but 7 only inside the
        // zeroed word, so it cannot influence the loss.
        let table = &g.attribute_embeddings[0][1];
        for id in [0, 2, 4, 5, 6, 7] {
            assert!(table.row(id).iter().all(|&x| x == 0.0), "id {id}");
        }
        for id in [1, 3, 8] {
            assert!(table.row(id).iter().any(|&x| x != 0.0), "id {id}");
        }
        // Long positions 0, 2, 5 are the only ones used.
        let pos = &g.position_embeddings[0];
        assert!(pos.row(1).iter().all(|&x| x == 0.0));
        assert!(pos.row(5).iter().any(|&x| x != 0.0));
        assert!(g.profile_embeddings[0].row(0).iter().all(|&x| x == 0.0));
        assert!(g
            .classifier
            .as_ref()
            .unwrap()
            .weight
            .as_slice()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn unmasked_segment_heads_get_no_gradient() {
        let p = params(3);
        let ex = example(&user(), &p, &[1, 3]);
        let mut g = p.zeros_like();
        pretrain_sequence(&ex, &p, &config(), None, Some((&mut g, 1.0))).unwrap();
        for h in &g.attribute_heads[1] {
            assert!(h.weight.as_slice().iter().all(|&x| x == 0.0));
            assert!(h.bias.as_slice().iter().all(|&x| x == 0.0));
        }
        for h in &g.attribute_heads[0] {
            assert!(h.weight.as_slice().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn batch_is_mean_of_sequences() {
        let p = params(4);
        let b = batch(&p);
        let (loss, grads) = compute_gradients(&b, &p, &config(), &mut [], 1.0, 0).unwrap();
        let mut expected = p.zeros_like();
        let mut total = 0.0;
        for ex in &b {
            let mut g = p.zeros_like();
            total += pretrain_sequence(ex, &p, &config(), None, Some((&mut g, 1.0)))
                .unwrap()
                .total;
            expected.add_scaled(&g, 1.0 / 3.0);
        }
        assert!((loss.total - total / 3.0).abs() < 1e-6);
        for (a, e) in grads.flatten().iter().zip(expected.flatten()) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((loss.components.iter().sum::<f64>() - loss.total).abs() < 1e-12);
    }

    #[test]
    fn batch_order_and_scale() {
        let p = params(5);
        let b = batch(&p);
        let reversed: Vec<_> = b.iter().rev().cloned().collect();
        let (la, ga) = compute_gradients(&b, &p, &config(), &mut [], 1.0, 0).unwrap();
        let (lb, gb) = compute_gradients(&reversed, &p, &config(), &mut [], 1.0, 0).unwrap();
        let (lc, gc) = compute_gradients(&b, &p, &config(), &mut [], 2.0, 0).unwrap();
        assert!((la.total - lb.total).abs() < 1e-12);
        assert!((2.0 * la.total - lc.total).abs() < 1e-12);
        for ((a, b), c) in ga.flatten().iter().zip(gb.flatten()).zip(gc.flatten()) {
            assert!((a - b).abs() < 1e-12);
            assert!((2.0 * a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_contract_errors() {
        let p = params(6);
        let b = batch(&p);
        assert!(compute_gradients(&[], &p, &config(), &mut [], 1.0, 0).is_err());
        let mut one = vec![rand::SeedableRng::seed_from_u64(0)];
        assert!(compute_gradients(&b, &p, &config(), &mut one, 1.0, 0).is_err());
        let mut empty = b[0].clone();
        empty.targets.positions.clear();
        assert!(pretrain_sequence(&empty, &p, &config(), None, None).is_err());
    }

    #[test]
    fn classification_gradient_reaches_the_head() {
        let p = params(7);
        let seq = assemble_input_sequence(&user(), &p, &config()).unwrap();
        let mut g = p.zeros_like();
        let (loss, probs) =
            classify_sequence_loss(&seq, &[1], &p, &config(), None, Some((&mut g, 1.0))).unwrap();
        // The fresh head is zero, so both classes are equally likely.
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(probs, vec![0.5, 0.5]);
        let head = g.classifier.as_ref().unwrap();
        assert!((head.bias.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((head.bias.get(0, 1) + 0.5).abs() < 1e-12);
        for h in g.attribute_heads.iter().flatten() {
            assert!(h.weight.as_slice().iter().all(|&x| x == 0.0));
        }
    }
}
