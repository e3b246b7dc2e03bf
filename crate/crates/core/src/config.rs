//! Flat `key = value` configuration shared by every command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::params::{ModelConfig, ReconstructionLoss};
use crate::tokenizer::TokenizeMode;
use crate::vocab::hex_digest;

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("{origin}:{}", n + 1), "expected `key = value`"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_vocab_list(key: &str, value: &str) -> Result<Vec<(String, usize)>> {
    value
        .split(',')
        .map(|item| {
            let (n, c) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("`{key}` entries look like name:size")))?;
            Ok((n.trim().to_string(), parse_value(key, c.trim())?))
        })
        .collect()
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub finetune_epochs: usize,
    /// Cap on fine-tuning training examples, taken from the 80% split.
    pub finetune_labels: Option<usize>,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    pub map_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_steps: 5_000,
            pretrain_batch: 16,
            finetune_batch: 128,
            finetune_epochs: 10,
            finetune_labels: None,
            adam: AdamConfig::default(),
            checkpoint_every: 1_000,
            map_k: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenize_mode: TokenizeMode,
    pub tz_offset_secs: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tokenize_mode: TokenizeMode::Discretized,
            tz_offset_secs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_all(&parse_kv(&text, &path.display().to_string())?)?;
        Ok(cfg)
    }

    pub fn apply_all(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// Sets one key; the seed key updates both generator and training seeds.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.generator;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => {
                let s = parse_value(key, value)?;
                g.seed = s;
                t.seed = s;
            }
            "gen.num_users" => g.num_users = parse_value(key, value)?,
            "gen.long_term_days" => g.long_term_days = parse_value(key, value)?,
            "gen.short_term_days" => g.short_term_days = parse_value(key, value)?,
            "gen.long_term_vocab" => g.long_term_vocab = parse_vocab_list(key, value)?,
            "gen.short_term_vocab" => g.short_term_vocab = parse_vocab_list(key, value)?,
            "gen.latent_dim" => g.latent_dim = parse_value(key, value)?,
            "gen.actions_per_day" => g.actions_per_day = parse_value(key, value)?,
            "gen.sessions_per_day" => g.sessions_per_day = parse_value(key, value)?,
            "gen.mean_session_length" => g.mean_session_length = parse_value(key, value)?,
            "gen.max_within_session_gap" => g.max_within_session_gap = parse_value(key, value)?,
            "gen.preference_sharpness" => g.preference_sharpness = parse_value(key, value)?,
            "gen.popularity_skew" => g.popularity_skew = parse_value(key, value)?,
            "gen.theme_stickiness" => g.theme_stickiness = parse_value(key, value)?,
            "gen.start_timestamp" => g.start_timestamp = parse_value(key, value)?,
            "gen.age_edges" => g.age_edges = parse_list(key, value)?,
            "gen.label_noise" => g.label_noise = parse_value(key, value)?,
            "model.num_layers" => m.num_layers = parse_value(key, value)?,
            "model.hidden" => m.hidden = parse_value(key, value)?,
            "model.heads" => m.heads = parse_value(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse_value(key, value)?,
            "model.dropout" => m.dropout = parse_value(key, value)?,
            "model.attr_dim" => m.attr_dim = parse_value(key, value)?,
            "model.max_long_positions" => m.max_long_positions = parse_value(key, value)?,
            "model.max_short_positions" => m.max_short_positions = parse_value(key, value)?,
            "model.max_long_words" => m.max_long_words = parse_value(key, value)?,
            "model.max_short_words" => m.max_short_words = parse_value(key, value)?,
            "model.mask_keep_position" => m.mask_keep_position = parse_bool(key, value)?,
            "model.reconstruction_loss" => {
                m.reconstruction_loss = match value {
                    "softmax" => ReconstructionLoss::SoftmaxNormalized,
                    "sigmoid" => ReconstructionLoss::SigmoidBinary,
                    _ => return Err(Error::Config(format!("`{key}` is softmax or sigmoid"))),
                }
            }
            "model.layer_norm_eps" => m.layer_norm_eps = parse_value(key, value)?,
            "train.pretrain_steps" => t.pretrain_steps = parse_value(key, value)?,
            "train.pretrain_batch" => t.pretrain_batch = parse_value(key, value)?,
            "train.finetune_batch" => t.finetune_batch = parse_value(key, value)?,
            "train.finetune_epochs" => t.finetune_epochs = parse_value(key, value)?,
            "train.finetune_labels" => {
                t.finetune_labels = if value == "all" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "train.lr" => t.adam.lr = parse_value(key, value)?,
            "train.beta1" => t.adam.beta1 = parse_value(key, value)?,
            "train.beta2" => t.adam.beta2 = parse_value(key, value)?,
            "train.eps" => t.adam.eps = parse_value(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            "train.map_k" => t.map_k = parse_value(key, value)?,
            "tokenize.mode" => self.tokenize_mode = value.parse()?,
            "tokenize.tz_offset_secs" => self.tz_offset_secs = parse_value(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if t.pretrain_batch == 0 || t.finetune_batch == 0 || t.map_k == 0 {
            return Err(Error::Config(
                "batch sizes and map_k must be positive".into(),
            ));
        }
        if !(t.adam.lr >= 0.0
            && (0.0..1.0).contains(&t.adam.beta1)
            && (0.0..1.0).contains(&t.adam.beta2))
        {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for line in self.generator.to_manifest().lines() {
            if let Some(rest) = line.strip_prefix("seed = ") {
                let _ = writeln!(s, "seed = {rest}");
            } else {
                let _ = writeln!(s, "gen.{line}");
            }
        }
        s.push_str(&model_to_text(&self.model));
        let t = &self.train;
        let _ = writeln!(s, "train.pretrain_steps = {}", t.pretrain_steps);
        let _ = writeln!(s, "train.pretrain_batch = {}", t.pretrain_batch);
        let _ = writeln!(s, "train.finetune_batch = {}", t.finetune_batch);
        let _ = writeln!(s, "train.finetune_epochs = {}", t.finetune_epochs);
        let labels = t
            .finetune_labels
            .map_or("all".to_string(), |n| n.to_string());
        let _ = writeln!(s, "train.finetune_labels = {labels}");
        let _ = writeln!(s, "train.lr = {}", t.adam.lr);
        let _ = writeln!(s, "train.beta1 = {}", t.adam.beta1);
        let _ = writeln!(s, "train.beta2 = {}", t.adam.beta2);
        let _ = writeln!(s, "train.eps = {}", t.adam.eps);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "train.map_k = {}", t.map_k);
        let mode = match self.tokenize_mode {
            TokenizeMode::Discretized => "discretized",
            TokenizeMode::PerAction => "per_action",
        };
        let _ = writeln!(s, "tokenize.mode = {mode}");
        let _ = writeln!(s, "tokenize.tz_offset_secs = {}", self.tz_offset_secs);
        s
    }

    pub fn digest(&self) -> String {
        hex_digest(self.to_text().as_bytes())[..16].to_string()
    }
}

pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model.num_layers = {}", m.num_layers);
    let _ = writeln!(s, "model.hidden = {}", m.hidden);
    let _ = writeln!(s, "model.heads = {}", m.heads);
    let _ = writeln!(s, "model.ffn_dim = {}", m.ffn_dim);
    let _ = writeln!(s, "model.dropout = {}", m.dropout);
    let _ = writeln!(s, "model.attr_dim = {}", m.attr_dim);
    let _ = writeln!(s, "model.max_long_positions = {}", m.max_long_positions);
    let _ = writeln!(s, "model.max_short_positions = {}", m.max_short_positions);
    let _ = writeln!(s, "model.max_long_words = {}", m.max_long_words);
    let _ = writeln!(s, "model.max_short_words = {}", m.max_short_words);
    let _ = writeln!(s, "model.mask_keep_position = {}", m.mask_keep_position);
    let loss = match m.reconstruction_loss {
        ReconstructionLoss::SoftmaxNormalized => "softmax",
        ReconstructionLoss::SigmoidBinary => "sigmoid",
    };
    let _ = writeln!(s, "model.reconstruction_loss = {loss}");
    let _ = writeln!(s, "model.layer_norm_eps = {:e}", m.layer_norm_eps);
    s
}

/// Reads the `model.*` keys of a key-value map into a model config.
pub fn model_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in kv.iter().filter(|(k, _)| k.starts_with("model.")) {
        cfg.apply(k, v)?;
    }
    cfg.model.validate()?;
    Ok(cfg.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.apply("seed", "7").unwrap();
        cfg.apply("model.hidden", "64").unwrap();
        cfg.apply("train.finetune_labels", "200").unwrap();
        cfg.apply("model.mask_keep_position", "true").unwrap();
        let back = {
            let mut c = RunConfig::default();
            c.apply_all(&parse_kv(&cfg.to_text(), "t").unwrap())
                .unwrap();
            c
        };
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("model.width", "3").is_err());
        assert!(cfg.apply("model.hidden", "wide").is_err());
        assert!(parse_kv("just words", "t").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_kv("# header\n\nmodel.heads = 2 # trailing\n", "t").unwrap();
        assert_eq!(kv.get("model.heads").map(String::as_str), Some("2"));
    }
}
