//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub first_moment: Parameters<F>,
    pub second_moment: Parameters<F>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &Parameters<F>, config: AdamConfig) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            config,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &Parameters<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    params.check_same_shapes(grads)?;
    params
        .check_same_shapes(&state.first_moment)
        .map_err(|e| Error::Shape(format!("optimizer state: {e}")))?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = F::of(c.beta1);
    let b2 = F::of(c.beta2);
    let one_minus_b1 = F::of(1.0 - c.beta1);
    let one_minus_b2 = F::of(1.0 - c.beta2);
    let correction1 = F::of(1.0 - c.beta1.powi(t));
    let correction2 = F::of(1.0 - c.beta2.powi(t));
    let lr = F::of(c.lr);
    let eps = F::of(c.eps);
    let ms = state.first_moment.tensors_mut();
    let vs = state.second_moment.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(ms)
        .zip(vs)
    {
        let it = p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice());
        for (((p, &g), m), v) in it {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelConfig, VocabLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> Parameters<f64> {
        let layout = VocabLayout {
            long_term: vec![3, 4],
            short_term: vec![3],
            profile: vec![2],
        };
        Parameters::init(
            &ModelConfig::tiny(),
            &layout,
            Some(2),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.for_each_mut(|_, _, m| m.fill(-0.37));
        let mut state = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut state).unwrap();
        for (a, b) in p.flatten().iter().zip(before.flatten()) {
            // m_hat / sqrt(v_hat) = sign(g); eps shifts the ratio by ~eps/|g|.
            let expected = 1e-4 * 0.37 / (0.37 + 1e-8);
            assert!(((a - b) - expected).abs() <= 1e-6 * expected);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut state = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn deterministic_updates() {
        let mut g = params().zeros_like();
        g.for_each_mut(|_, _, m| {
            for (i, x) in m.as_mut_slice().iter_mut().enumerate() {
                *x = (i as f64 * 0.7).sin();
            }
        });
        let run = || {
            let mut p = params();
            let mut s = OptimizerState::new(&p, AdamConfig::default());
            for _ in 0..3 {
                adam_step(&mut p, &g, &mut s).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.for_each_mut(|_, _, m| m.fill(1.5));
        let mut s = OptimizerState::new(
            &p,
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
        );
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.classifier = None;
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }
}
