//! Small fixtures shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ModelConfig, Parameters, VocabLayout};
use crate::tokenizer::{EncodedWord, TokenizedUser};

pub fn config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        num_layers: 2,
        dropout: 0.0,
        attr_dim: 3,
        max_long_positions: 256,
        max_short_positions: 64,
        ..ModelConfig::default()
    }
}

pub fn layout() -> VocabLayout {
    VocabLayout {
        long_term: vec![4, 9],
        short_term: vec![5, 3, 4],
        profile: vec![3, 4],
    }
}

pub fn params(seed: u64) -> Parameters<f64> {
    Parameters::init(
        &config(),
        &layout(),
        Some(2),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

pub fn word(position: u32, actions: &[&[u32]]) -> EncodedWord {
    EncodedWord {
        position,
        actions: actions.iter().map(|a| a.to_vec()).collect(),
    }
}

pub fn user() -> TokenizedUser {
    TokenizedUser {
        user_id: "u".into(),
        long_words: vec![
            word(0, &[&[1, 3]]),
            word(2, &[&[2, 3], &[2, 7]]),
            word(5, &[&[3, 8], &[1, 1], &[3, 8]]),
        ],
        short_words: vec![word(0, &[&[1, 2, 3]]), word(4, &[&[4, 1, 1], &[2, 2, 2]])],
        profile_token_ids: vec![1, 2],
    }
}
