//! Finite-difference verification of the hand-written backward passes.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::datagen::stream_rng;
use crate::error::{Error, Result};
use crate::gradients::{classify_sequence_loss, pretrain_sequence, PretrainExample};
use crate::input::{apply_mask_and_targets, assemble_input_sequence, sample_mask_plan, MaskPlan};
use crate::params::{Linear, ModelConfig, Parameters, TensorFamily, VocabLayout};
use crate::tensor::Matrix;
use crate::tokenizer::{EncodedWord, TokenizedUser};

const DOMAIN_PERTURB: u64 = 201;
const DOMAIN_PLAN: u64 = 202;
const DOMAIN_DROPOUT: u64 = 203;
const DOMAIN_PICK: u64 = 204;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Total number of scalars to check, spread evenly over the families.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let mut model = ModelConfig::tiny();
        // Exercise the dropout backward path too; masks are replayed exactly.
        model.dropout = 0.1;
        GradCheckConfig {
            model,
            samples: 210,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCheck {
    pub tensor: String,
    pub family: TensorFamily,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyStats {
    pub family: TensorFamily,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<ScalarCheck>,
    pub families: Vec<FamilyStats>,
    pub tolerance: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor stops round-off on
/// vanishing gradients from reading as a large relative error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-7;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.families
            .iter()
            .all(|f| f.checked > 0 && f.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.families
            .iter()
            .map(|f| f.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self, n: usize) -> Vec<&ScalarCheck> {
        let mut v: Vec<&ScalarCheck> = self.checks.iter().collect();
        v.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        v.truncate(n);
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scalars checked: {}", self.checks.len());
        let _ = writeln!(s, "tolerance: {:e}", self.tolerance);
        for f in &self.families {
            let _ = writeln!(
                s,
                "{:<22} checked {:>4}  max rel err {:.3e}",
                f.family.as_str(),
                f.checked,
                f.max_rel_error
            );
        }
        let _ = writeln!(s, "worst:");
        for c in self.worst(5) {
            let _ = writeln!(
                s,
                "  {}[{}] analytic {:.6e} numeric {:.6e} rel err {:.3e}",
                c.tensor, c.index, c.analytic, c.numeric, c.rel_error
            );
        }
        let _ = writeln!(s, "result: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

fn word(position: u32, actions: &[&[u32]]) -> EncodedWord {
    EncodedWord {
        position,
        actions: actions.iter().map(|a| a.to_vec()).collect(),
    }
}

/// Vocabulary layout and two users small enough for exhaustive checking:
/// every vocabulary has at most 5 rows and every sequence has 6 tokens.
pub fn tiny_fixture() -> (VocabLayout, Vec<TokenizedUser>) {
    let vocab = VocabLayout {
        long_term: vec![4, 5],
        short_term: vec![3, 5],
        profile: vec![3],
    };
    let users = vec![
        TokenizedUser {
            user_id: "a".into(),
            long_words: vec![word(0, &[&[1, 2], &[3, 4]]), word(2, &[&[2, 2]])],
            short_words: vec![word(1, &[&[1, 3], &[2, 1], &[1, 4]]), word(5, &[&[2, 2]])],
            profile_token_ids: vec![1],
        },
        TokenizedUser {
            user_id: "b".into(),
            long_words: vec![
                word(1, &[&[3, 1]]),
                word(6, &[&[1, 1], &[1, 3]]),
                word(7, &[&[2, 4]]),
            ],
            short_words: vec![word(3, &[&[2, 3], &[1, 3]])],
            profile_token_ids: vec![2],
        },
    ];
    (vocab, users)
}

struct Objective<'a> {
    users: &'a [TokenizedUser],
    plans: Vec<MaskPlan>,
    config: &'a ModelConfig,
    seed: u64,
}

impl Objective<'_> {
    /// Sum of the masked reconstruction losses of every user plus the
    /// classification loss of the first user (class 1).
    fn eval(
        &self,
        params: &Parameters<f64>,
        mut grads: Option<&mut Parameters<f64>>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (i, (user, plan)) in self.users.iter().zip(&self.plans).enumerate() {
            let seq = assemble_input_sequence(user, params, self.config)?;
            let (masked, targets) = apply_mask_and_targets(&seq, plan, params, self.config)?;
            let example = PretrainExample { masked, targets };
            let mut rng = stream_rng(self.seed, DOMAIN_DROPOUT, i as u64);
            let g = grads.as_mut().map(|g| (&mut **g, 1.0));
            total += pretrain_sequence(&example, params, self.config, Some(&mut rng), g)?.total;
        }
        let seq = assemble_input_sequence(&self.users[0], params, self.config)?;
        let mut rng = stream_rng(self.seed, DOMAIN_DROPOUT, self.users.len() as u64);
        let g = grads.as_mut().map(|g| (&mut **g, 1.0));
        total += classify_sequence_loss(&seq, &[1], params, self.config, Some(&mut rng), g)?.0;
        Ok(total)
    }
}

/// Compares analytic gradients with central differences on the tiny fixture.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (vocab, users) = tiny_fixture();
    let mut init_rng = stream_rng(cfg.seed, DOMAIN_PERTURB, 0);
    let mut params = Parameters::<f64>::init(&cfg.model, &vocab, None, &mut init_rng)?;
    // Move away from the symmetric initialization (unit gains, zero biases,
    // zero classifier) so every term of the backward pass is exercised.
    params.classifier = Some(Linear {
        weight: Matrix::zeros(cfg.model.hidden, 2),
        bias: Matrix::zeros(1, 2),
    });
    params.for_each_mut(|_, _, m| {
        for x in m.as_mut_slice() {
            *x += init_rng.random_range(-0.3..0.3);
        }
    });

    let mut plan_rng = stream_rng(cfg.seed, DOMAIN_PLAN, 0);
    let plans = users
        .iter()
        .map(|u| {
            let seq = assemble_input_sequence(u, &params, &cfg.model)?;
            sample_mask_plan(&seq, &mut plan_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let objective = Objective {
        users: &users,
        plans,
        config: &cfg.model,
        seed: cfg.seed,
    };
    let mut grads = params.zeros_like();
    objective.eval(&params, Some(&mut grads))?;

    // (tensor index, name, family, length) in canonical order.
    let mut tensors = Vec::new();
    params.for_each(|name, family, m| tensors.push((name.to_string(), family, m.len())));
    let grad_values: Vec<Vec<f64>> = grads
        .tensors()
        .iter()
        .map(|m| m.as_slice().to_vec())
        .collect();

    let per_family = cfg.samples.div_ceil(TensorFamily::ALL.len());
    let mut pick_rng = stream_rng(cfg.seed, DOMAIN_PICK, 0);
    let mut checks = Vec::new();
    for family in TensorFamily::ALL {
        let mut pool: Vec<(usize, usize)> = Vec::new();
        for (t, (_, f, len)) in tensors.iter().enumerate() {
            if *f == family {
                pool.extend((0..*len).map(|e| (t, e)));
            }
        }
        if pool.is_empty() {
            return Err(Error::GradientCheck(format!(
                "no {} tensors to check",
                family.as_str()
            )));
        }
        // Three quarters of the picks land on scalars the loss actually
        // touches; the rest are uniform (and catch spurious nonzero gradients).
        let (touched, _): (Vec<_>, Vec<_>) =
            pool.iter().partition(|&&(t, e)| grad_values[t][e] != 0.0);
        let want_touched = (per_family * 3 / 4).min(touched.len());
        let mut picks: Vec<(usize, usize)> =
            index::sample(&mut pick_rng, touched.len(), want_touched)
                .into_iter()
                .map(|i| touched[i])
                .collect();
        let rest = (per_family - want_touched).min(pool.len());
        picks.extend(
            index::sample(&mut pick_rng, pool.len(), rest)
                .into_iter()
                .map(|i| pool[i]),
        );
        for (t, e) in picks {
            let original = params.tensors()[t].as_slice()[e];
            params.tensors_mut()[t].as_mut_slice()[e] = original + cfg.step;
            let plus = objective.eval(&params, None)?;
            params.tensors_mut()[t].as_mut_slice()[e] = original - cfg.step;
            let minus = objective.eval(&params, None)?;
            params.tensors_mut()[t].as_mut_slice()[e] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = grad_values[t][e];
            checks.push(ScalarCheck {
                tensor: tensors[t].0.clone(),
                family,
                index: e,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let families = TensorFamily::ALL
        .iter()
        .map(|&family| {
            let mine: Vec<&ScalarCheck> = checks.iter().filter(|c| c.family == family).collect();
            FamilyStats {
                family,
                checked: mine.len(),
                max_rel_error: mine.iter().map(|c| c.rel_error).fold(0.0, f64::max),
            }
        })
        .collect();
    Ok(GradCheckReport {
        checks,
        families,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn tiny_fixture_respects_limits() {
        let (vocab, users) = tiny_fixture();
        assert!(vocab
            .long_term
            .iter()
            .chain(&vocab.short_term)
            .chain(&vocab.profile)
            .all(|&n| n <= 5));
        for u in &users {
            assert_eq!(1 + u.num_words() + u.profile_token_ids.len(), 6);
        }
    }

    #[test]
    fn default_check_passes() {
        let report = gradient_check(&GradCheckConfig::default()).unwrap();
        assert!(report.checks.len() >= 200);
        assert!(report.passed(), "{}", report.to_text());
    }
}
