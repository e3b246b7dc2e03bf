//! Deterministic synthetic user behavior with planted latent structure.
//!
//! Every user draws a latent vector `z`. Each categorical attribute has a
//! fixed factor matrix and a Zipf-like popularity prior; a user's preference
//! over attribute values is `softmax(sharpness * F z / sqrt(d) + prior)`.
//! Long-term purchases arrive day by day (Poisson), short-term browsing comes
//! in sessions separated by more than 30 minutes of inactivity.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::error::{Error, Result};
use crate::vocab::{
    bucket_label, ActionEvent, AttributeSchema, SchemaSet, SegmentKind, UserRecord,
};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SESSION_GAP_SECS: i64 = 1_800;

/// Attribute lists with full-scale vocabulary sizes for the two behavior segments.
pub const LONG_TERM_ATTRIBUTES: [(&str, usize); 6] = [
    ("action_type", 2),
    ("channel", 742),
    ("expense_range", 17),
    ("shop", 85_124),
    ("genre", 11_438),
    ("hour", 24),
];
pub const SHORT_TERM_ATTRIBUTES: [(&str, usize); 4] = [
    ("action_type", 3),
    ("shop", 40_804),
    ("genre", 10_386),
    ("device_type", 2),
];

pub const DEFAULT_AGE_EDGES: [f64; 6] = [18.0, 25.0, 35.0, 45.0, 55.0, 65.0];

/// `ceil(full / divisor)`, at least 2.
pub fn scaled_capacity(full: usize, divisor: usize) -> usize {
    full.div_ceil(divisor).max(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub long_term_days: u32,
    pub short_term_days: u32,
    pub long_term_vocab: Vec<(String, usize)>,
    pub short_term_vocab: Vec<(String, usize)>,
    pub latent_dim: usize,
    /// Mean long-term actions per day.
    pub actions_per_day: f64,
    /// Mean sessions per day in the short-term window.
    pub sessions_per_day: f64,
    pub mean_session_length: f64,
    /// Upper bound for within-session gaps, never above 30 minutes.
    pub max_within_session_gap: i64,
    pub preference_sharpness: f64,
    pub popularity_skew: f64,
    /// Probability that an action repeats its word's theme genre.
    pub theme_stickiness: f64,
    pub start_timestamp: i64,
    pub age_edges: Vec<f64>,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let scale = |attrs: &[(&str, usize)]| {
            attrs
                .iter()
                .map(|(n, v)| (n.to_string(), scaled_capacity(*v, 100)))
                .collect()
        };
        GeneratorConfig {
            num_users: 2_000,
            long_term_days: 90,
            short_term_days: 7,
            long_term_vocab: scale(&LONG_TERM_ATTRIBUTES),
            short_term_vocab: scale(&SHORT_TERM_ATTRIBUTES),
            latent_dim: 8,
            actions_per_day: 0.3,
            sessions_per_day: 1.0,
            mean_session_length: 4.0,
            max_within_session_gap: SESSION_GAP_SECS,
            preference_sharpness: 3.0,
            popularity_skew: 0.5,
            theme_stickiness: 0.6,
            // 2024-01-01T00:00:00Z
            start_timestamp: 1_704_067_200,
            age_edges: DEFAULT_AGE_EDGES.to_vec(),
            label_noise: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_users == 0 || self.latent_dim == 0 {
            return bad("num_users and latent_dim must be positive");
        }
        if self.long_term_days == 0 || self.short_term_days == 0 {
            return bad("window lengths must be positive");
        }
        if self.short_term_days > self.long_term_days {
            return bad("short_term_days must not exceed long_term_days");
        }
        for (name, v) in self.long_term_vocab.iter().chain(&self.short_term_vocab) {
            if *v == 0 {
                return Err(Error::Config(format!("zero vocab size for `{name}`")));
            }
        }
        for required in ["genre"] {
            if !self.long_term_vocab.iter().any(|(n, _)| n == required) {
                return Err(Error::Config(format!(
                    "long-term schema needs `{required}`"
                )));
            }
        }
        if !(self.actions_per_day > 0.0 && self.sessions_per_day > 0.0) {
            return bad("event rates must be positive");
        }
        if self.mean_session_length < 1.0 {
            return bad("mean_session_length must be >= 1");
        }
        if !(1..=SESSION_GAP_SECS).contains(&self.max_within_session_gap) {
            return bad("max_within_session_gap must lie in 1..=1800");
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.theme_stickiness) {
            return bad("theme_stickiness must lie in [0, 1]");
        }
        if self.start_timestamp < 0 {
            return bad("start_timestamp must be >= 0");
        }
        Ok(())
    }

    pub fn schemas(&self) -> Result<SchemaSet> {
        Ok(SchemaSet {
            long_term: AttributeSchema::new(SegmentKind::LongTerm, self.long_term_vocab.clone())?,
            short_term: AttributeSchema::new(
                SegmentKind::ShortTerm,
                self.short_term_vocab.clone(),
            )?,
            profile: AttributeSchema::new(
                SegmentKind::UserProfile,
                vec![
                    ("gender".to_string(), 2),
                    ("age".to_string(), self.age_edges.len() + 1),
                ],
            )?,
        })
    }

    pub fn long_window_start(&self) -> i64 {
        self.start_timestamp
    }

    pub fn long_window_end(&self) -> i64 {
        self.start_timestamp + self.long_term_days as i64 * SECONDS_PER_DAY
    }

    /// The short-term window covers the most recent days of the long-term window.
    pub fn short_window_start(&self) -> i64 {
        self.long_window_end() - self.short_term_days as i64 * SECONDS_PER_DAY
    }

    /// Flat `key = value` rendering, used for manifests.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let vocab = |v: &[(String, usize)]| {
            v.iter()
                .map(|(n, c)| format!("{n}:{c}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "num_users = {}", self.num_users);
        let _ = writeln!(s, "long_term_days = {}", self.long_term_days);
        let _ = writeln!(s, "short_term_days = {}", self.short_term_days);
        let _ = writeln!(s, "long_term_vocab = {}", vocab(&self.long_term_vocab));
        let _ = writeln!(s, "short_term_vocab = {}", vocab(&self.short_term_vocab));
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "actions_per_day = {}", self.actions_per_day);
        let _ = writeln!(s, "sessions_per_day = {}", self.sessions_per_day);
        let _ = writeln!(s, "mean_session_length = {}", self.mean_session_length);
        let _ = writeln!(
            s,
            "max_within_session_gap = {}",
            self.max_within_session_gap
        );
        let _ = writeln!(s, "preference_sharpness = {}", self.preference_sharpness);
        let _ = writeln!(s, "popularity_skew = {}", self.popularity_skew);
        let _ = writeln!(s, "theme_stickiness = {}", self.theme_stickiness);
        let _ = writeln!(s, "start_timestamp = {}", self.start_timestamp);
        let edges: Vec<String> = self.age_edges.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(s, "age_edges = {}", edges.join(","));
        let _ = writeln!(s, "label_noise = {}", self.label_noise);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// Counter-based stream: the same (seed, domain, index) always yields the
/// same sequence, independent of generation order.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const DOMAIN_FACTORS: u64 = 1;
const DOMAIN_USERS: u64 = 2;
const DOMAIN_LABELS: u64 = 3;
const DOMAIN_SPLIT: u64 = 4;

/// Planted per-user ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentProfile {
    pub user_id: String,
    pub latent: Vec<f64>,
    /// Preference over values of each long-term attribute, schema order.
    pub long_term_preferences: Vec<Vec<f64>>,
    /// Preference over values of each short-term attribute, schema order.
    pub short_term_preferences: Vec<Vec<f64>>,
    /// Preference over the 24 hours of the day for long-term actions.
    pub hour_preference: Vec<f64>,
    /// Number of short-term sessions generated for the user.
    pub session_count: usize,
}

impl LatentProfile {
    pub fn genre_preference(&self, config: &GeneratorConfig) -> &[f64] {
        let i = config
            .long_term_vocab
            .iter()
            .position(|(n, _)| n == "genre")
            .expect("validated config has a genre attribute");
        &self.long_term_preferences[i]
    }
}

struct Factors {
    long: Vec<FactorTable>,
    short: Vec<FactorTable>,
    hour: FactorTable,
}

struct FactorTable {
    weights: Vec<Vec<f64>>,
    prior: Vec<f64>,
}

impl FactorTable {
    fn new(rng: &mut ChaCha8Rng, values: usize, dim: usize, skew: f64) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let weights = (0..values)
            .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
            .collect();
        let prior = (0..values).map(|v| -skew * ((v + 1) as f64).ln()).collect();
        FactorTable { weights, prior }
    }

    fn preference(&self, z: &[f64], sharpness: f64) -> Vec<f64> {
        let scale = sharpness / (z.len() as f64).sqrt();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.prior)
            .map(|(w, p)| scale * w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + p)
            .collect();
        softmax(&logits)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn value_name(attribute: &str, index: usize) -> String {
    format!("{attribute}_{index}")
}

fn build_factors(config: &GeneratorConfig) -> Factors {
    let mut rng = stream_rng(config.seed, DOMAIN_FACTORS, 0);
    let d = config.latent_dim;
    let skew = config.popularity_skew;
    let long = config
        .long_term_vocab
        .iter()
        .map(|(_, v)| FactorTable::new(&mut rng, *v, d, skew))
        .collect();
    let short = config
        .short_term_vocab
        .iter()
        .map(|(_, v)| FactorTable::new(&mut rng, *v, d, skew))
        .collect();
    let hour = FactorTable::new(&mut rng, 24, d, 0.0);
    Factors { long, short, hour }
}

pub fn user_id_for(index: usize) -> String {
    format!("u{index:06}")
}

/// Generates `config.num_users` users together with their planted profiles.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<(Vec<UserRecord>, Vec<LatentProfile>)> {
    config.validate()?;
    let factors = build_factors(config);
    let mut users = Vec::with_capacity(config.num_users);
    let mut profiles = Vec::with_capacity(config.num_users);
    for index in 0..config.num_users {
        let (u, p) = generate_user(config, &factors, index);
        users.push(u);
        profiles.push(p);
    }
    Ok((users, profiles))
}

fn generate_user(
    config: &GeneratorConfig,
    factors: &Factors,
    index: usize,
) -> (UserRecord, LatentProfile) {
    let mut rng = stream_rng(config.seed, DOMAIN_USERS, index as u64);
    let user_id = user_id_for(index);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z: Vec<f64> = (0..config.latent_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let sharp = config.preference_sharpness;

    let long_prefs: Vec<Vec<f64>> = factors
        .long
        .iter()
        .map(|f| f.preference(&z, sharp))
        .collect();
    let short_prefs: Vec<Vec<f64>> = factors
        .short
        .iter()
        .map(|f| f.preference(&z, sharp))
        .collect();
    let hour_pref = factors.hour.preference(&z, sharp);

    let long_events = long_term_events(config, &user_id, &long_prefs, &hour_pref, &mut rng);
    let (short_events, session_count) = short_term_events(config, &user_id, &short_prefs, &mut rng);

    let gender_score = z[config.latent_dim - 1] + 0.5 * normal.sample(&mut rng);
    let gender = if gender_score > 0.0 {
        "gender_1"
    } else {
        "gender_0"
    };
    let age_dim = config.latent_dim.saturating_sub(2);
    let age = (40.0 + 12.0 * z[age_dim] + 5.0 * normal.sample(&mut rng)).clamp(15.0, 80.0);
    let profile_attributes = vec![
        gender.to_string(),
        bucket_label(age.floor(), &config.age_edges),
    ];

    let user = UserRecord {
        user_id: user_id.clone(),
        long_term_events: long_events,
        short_term_events: short_events,
        profile_attributes,
    };
    let profile = LatentProfile {
        user_id,
        latent: z,
        long_term_preferences: long_prefs,
        short_term_preferences: short_prefs,
        hour_preference: hour_pref,
        session_count,
    };
    (user, profile)
}

/// Draws one action's attribute values. `theme` pins `genre` with
/// probability `theme_stickiness`.
fn draw_values<R: Rng>(
    attrs: &[(String, usize)],
    prefs: &[Vec<f64>],
    theme: Option<(usize, usize)>,
    stickiness: f64,
    fixed: &[(usize, usize)],
    rng: &mut R,
) -> Vec<String> {
    attrs
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            if let Some(&(_, v)) = fixed.iter().find(|(a, _)| *a == i) {
                return value_name(name, v);
            }
            let v = match theme {
                Some((a, v)) if a == i && rng.random::<f64>() < stickiness => v,
                _ => sample_categorical(&prefs[i], rng),
            };
            value_name(name, v)
        })
        .collect()
}

fn long_term_events<R: Rng>(
    config: &GeneratorConfig,
    user_id: &str,
    prefs: &[Vec<f64>],
    hour_pref: &[f64],
    rng: &mut R,
) -> Vec<ActionEvent> {
    let attrs = &config.long_term_vocab;
    let genre = attrs.iter().position(|(n, _)| n == "genre");
    let hour_attr = attrs.iter().position(|(n, _)| n == "hour");
    let arrivals = Poisson::new(config.actions_per_day).expect("positive rate");
    let mut events = Vec::new();
    for day in 0..config.long_term_days as i64 {
        let n = arrivals.sample(rng) as usize;
        if n == 0 {
            continue;
        }
        let theme = genre.map(|g| (g, sample_categorical(&prefs[g], rng)));
        let mut day_events = Vec::with_capacity(n);
        for _ in 0..n {
            let hour = sample_categorical(hour_pref, rng);
            let second = rng.random_range(0..3_600i64);
            let timestamp =
                config.start_timestamp + day * SECONDS_PER_DAY + hour as i64 * 3_600 + second;
            let fixed: Vec<(usize, usize)> = hour_attr
                .map(|h| (h, hour * attrs[h].1 / 24))
                .into_iter()
                .collect();
            let values = draw_values(attrs, prefs, theme, config.theme_stickiness, &fixed, rng);
            day_events.push(ActionEvent {
                user_id: user_id.to_string(),
                timestamp,
                segment_kind: SegmentKind::LongTerm,
                attribute_values: values,
            });
        }
        day_events.sort_by_key(|e| e.timestamp);
        events.extend(day_events);
    }
    events
}

fn short_term_events<R: Rng>(
    config: &GeneratorConfig,
    user_id: &str,
    prefs: &[Vec<f64>],
    rng: &mut R,
) -> (Vec<ActionEvent>, usize) {
    let attrs = &config.short_term_vocab;
    let genre = attrs.iter().position(|(n, _)| n == "genre");
    let device = attrs.iter().position(|(n, _)| n == "device_type");
    let gap = Exp::new(config.sessions_per_day / SECONDS_PER_DAY as f64).expect("positive rate");
    let extra_len = Poisson::new(config.mean_session_length - 1.0).ok();
    let end = config.long_window_end();
    let mut t = config.short_window_start() + gap.sample(rng) as i64;
    let mut events = Vec::new();
    let mut sessions = 0;
    while t < end {
        sessions += 1;
        let len = 1 + extra_len.map_or(0, |p| p.sample(rng) as usize);
        let theme = genre.map(|g| (g, sample_categorical(&prefs[g], rng)));
        let fixed: Vec<(usize, usize)> = device
            .map(|d| (d, sample_categorical(&prefs[d], rng)))
            .into_iter()
            .collect();
        for k in 0..len {
            if k > 0 {
                t += rng.random_range(1..=config.max_within_session_gap);
            }
            let values = draw_values(attrs, prefs, theme, config.theme_stickiness, &fixed, rng);
            events.push(ActionEvent {
                user_id: user_id.to_string(),
                timestamp: t,
                segment_kind: SegmentKind::ShortTerm,
                attribute_values: values,
            });
        }
        t += SESSION_GAP_SECS + 1 + gap.sample(rng) as i64;
    }
    (events, sessions)
}

/// Downstream task definitions over the planted latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    /// Label 1 iff `weights . z > threshold`; a `None` threshold means the
    /// empirical median of the scores.
    BinaryTargeting {
        weights: Vec<f64>,
        threshold: Option<f64>,
    },
    /// Label 1 iff `z[latent_dim_index] > 0`.
    AttributePrediction { latent_dim_index: usize },
    /// Ground truth is the set of genres purchased during a future window.
    NextGenre { holdout_days: u32 },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::BinaryTargeting { .. } => "targeting",
            TaskSpec::AttributePrediction { .. } => "attribute",
            TaskSpec::NextGenre { .. } => "next_genre",
        }
    }

    /// Default targeting task: equal weights on the first half of the latent dims.
    pub fn default_targeting(latent_dim: usize) -> Self {
        let k = (latent_dim / 2).max(1);
        let w = 1.0 / (k as f64).sqrt();
        let weights = (0..latent_dim)
            .map(|i| if i < k { w } else { 0.0 })
            .collect();
        TaskSpec::BinaryTargeting {
            weights,
            threshold: None,
        }
    }

    pub fn from_name(name: &str, latent_dim: usize) -> Result<Self> {
        match name {
            "targeting" => Ok(Self::default_targeting(latent_dim)),
            "attribute" => Ok(TaskSpec::AttributePrediction {
                latent_dim_index: 0,
            }),
            "next_genre" => Ok(TaskSpec::NextGenre { holdout_days: 30 }),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected targeting, attribute or next_genre)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Binary(u8),
    /// Raw genre values.
    GenreSet(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub user_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: String,
    pub examples: Vec<LabeledExample>,
    /// Indices into `examples`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl LabeledDataset {
    pub fn positive_rate(&self) -> f64 {
        let pos = self
            .examples
            .iter()
            .filter(|e| e.label == Label::Binary(1))
            .count();
        pos as f64 / self.examples.len().max(1) as f64
    }

    /// Writes `user_id<TAB>task<TAB>label(s)` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.examples {
            let label = match &e.label {
                Label::Binary(b) => b.to_string(),
                Label::GenreSet(g) => g.join(","),
            };
            let _ = writeln!(s, "{}\t{}\t{}", e.user_id, self.task, label);
        }
        s
    }

    /// Parses the lines of one task from a labels file and re-derives the
    /// deterministic split.
    pub fn from_text(text: &str, task: &str, seed: u64) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    format!("labels:{}", n + 1),
                    "expected 3 fields",
                ));
            }
            if fields[1] != task {
                continue;
            }
            let label = if task == "next_genre" {
                Label::GenreSet(
                    fields[2]
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect(),
                )
            } else {
                match fields[2] {
                    "0" => Label::Binary(0),
                    "1" => Label::Binary(1),
                    other => {
                        return Err(Error::parse(
                            format!("labels:{}", n + 1),
                            format!("binary label `{other}`"),
                        ))
                    }
                }
            };
            examples.push(LabeledExample {
                user_id: fields[0].to_string(),
                label,
            });
        }
        if examples.is_empty() {
            return Err(Error::Config(format!("no labels for task `{task}`")));
        }
        let (train, test) = split_80_20(examples.len(), seed);
        Ok(LabeledDataset {
            task: task.to_string(),
            examples,
            train,
            test,
        })
    }
}

/// Seeded 80/20 train/test split over `n` indices.
pub fn split_80_20(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, DOMAIN_SPLIT, 0));
    let cut = (n * 4).div_ceil(5);
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Derives labels for every profile; label noise and holdout draws come
/// from their own per-user streams.
pub fn derive_task_labels(
    profiles: &[LatentProfile],
    task: &TaskSpec,
    config: &GeneratorConfig,
) -> Result<LabeledDataset> {
    if profiles.is_empty() {
        return Err(Error::Config("no profiles to label".into()));
    }
    let domain = DOMAIN_LABELS + 16 * task_code(task);
    let noisy = |index: usize, label: bool| -> Label {
        let mut rng = stream_rng(config.seed, domain, index as u64);
        let flip = rng.random::<f64>() < config.label_noise;
        Label::Binary((label ^ flip) as u8)
    };
    let examples: Vec<LabeledExample> = match task {
        TaskSpec::BinaryTargeting { weights, threshold } => {
            if weights.len() != config.latent_dim {
                return Err(Error::Config(format!(
                    "targeting weights have {} entries, latent_dim is {}",
                    weights.len(),
                    config.latent_dim
                )));
            }
            let scores: Vec<f64> = profiles
                .iter()
                .map(|p| p.latent.iter().zip(weights).map(|(a, b)| a * b).sum())
                .collect();
            let cut = threshold.unwrap_or_else(|| median(&scores));
            profiles
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(i, (p, &s))| LabeledExample {
                    user_id: p.user_id.clone(),
                    label: noisy(i, s > cut),
                })
                .collect()
        }
        TaskSpec::AttributePrediction { latent_dim_index } => {
            if *latent_dim_index >= config.latent_dim {
                return Err(Error::Config(format!(
                    "latent_dim_index {latent_dim_index} out of range"
                )));
            }
            profiles
                .iter()
                .enumerate()
                .map(|(i, p)| LabeledExample {
                    user_id: p.user_id.clone(),
                    label: noisy(i, p.latent[*latent_dim_index] > 0.0),
                })
                .collect()
        }
        TaskSpec::NextGenre { holdout_days } => {
            let arrivals =
                Poisson::new(config.actions_per_day * *holdout_days as f64).map_err(|_| {
                    Error::Config("holdout window needs a positive purchase rate".into())
                })?;
            profiles
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = stream_rng(config.seed, domain, i as u64);
                    let prefs = p.genre_preference(config);
                    let n = arrivals.sample(&mut rng) as usize;
                    let mut ids: Vec<usize> = (0..n)
                        .map(|_| sample_categorical(prefs, &mut rng))
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    LabeledExample {
                        user_id: p.user_id.clone(),
                        label: Label::GenreSet(
                            ids.into_iter().map(|g| value_name("genre", g)).collect(),
                        ),
                    }
                })
                .collect()
        }
    };
    let (train, test) = split_80_20(examples.len(), config.seed);
    Ok(LabeledDataset {
        task: task.name().to_string(),
        examples,
        train,
        test,
    })
}

fn task_code(task: &TaskSpec) -> u64 {
    match task {
        TaskSpec::BinaryTargeting { .. } => 1,
        TaskSpec::AttributePrediction { .. } => 2,
        TaskSpec::NextGenre { .. } => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_users: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_users,
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn scaled_defaults() {
        let c = GeneratorConfig::default();
        let get = |v: &[(String, usize)], n: &str| v.iter().find(|(a, _)| a == n).unwrap().1;
        assert_eq!(get(&c.long_term_vocab, "shop"), 852);
        assert_eq!(get(&c.long_term_vocab, "genre"), 115);
        assert_eq!(get(&c.long_term_vocab, "action_type"), 2);
        assert_eq!(get(&c.short_term_vocab, "shop"), 409);
    }

    #[test]
    fn counts_and_sortedness() {
        let c = small(100);
        let (users, profiles) = generate_dataset(&c).unwrap();
        assert_eq!(users.len(), 100);
        assert_eq!(profiles.len(), 100);
        for (u, p) in users.iter().zip(&profiles) {
            assert_eq!(u.user_id, p.user_id);
            assert!(u
                .long_term_events
                .windows(2)
                .all(|w| w[0].timestamp <= w[1].timestamp));
            assert!(u
                .short_term_events
                .windows(2)
                .all(|w| w[0].timestamp <= w[1].timestamp));
            for e in &u.long_term_events {
                assert!(e.timestamp >= c.long_window_start() && e.timestamp < c.long_window_end());
            }
            for prefs in p
                .long_term_preferences
                .iter()
                .chain(&p.short_term_preferences)
            {
                assert!(prefs.iter().all(|&x| x >= 0.0));
                assert!((prefs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sessions_are_separated_by_more_than_thirty_minutes() {
        let (users, profiles) = generate_dataset(&small(50)).unwrap();
        for (u, p) in users.iter().zip(&profiles) {
            let splits = u
                .short_term_events
                .windows(2)
                .filter(|w| w[1].timestamp - w[0].timestamp > SESSION_GAP_SECS)
                .count();
            let expected = if u.short_term_events.is_empty() {
                0
            } else {
                splits + 1
            };
            assert_eq!(expected, p.session_count);
        }
    }

    #[test]
    fn zero_vocab_is_a_config_error() {
        let mut c = small(1);
        c.long_term_vocab[1].1 = 0;
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
    }

    #[test]
    fn median_threshold_balances_labels() {
        let mut c = small(10_000);
        c.label_noise = 0.0;
        c.long_term_days = 7;
        c.short_term_days = 1;
        let (_, profiles) = generate_dataset(&c).unwrap();
        let labels =
            derive_task_labels(&profiles, &TaskSpec::default_targeting(c.latent_dim), &c).unwrap();
        assert!((labels.positive_rate() - 0.5).abs() <= 0.02);
        assert_eq!(labels.train.len(), 8_000);
        assert_eq!(labels.test.len(), 2_000);
    }

    #[test]
    fn noiseless_labels_are_a_function_of_the_latent() {
        let mut c = small(200);
        c.label_noise = 0.0;
        let (_, profiles) = generate_dataset(&c).unwrap();
        let task = TaskSpec::BinaryTargeting {
            weights: vec![1.0; c.latent_dim],
            threshold: Some(0.0),
        };
        let labels = derive_task_labels(&profiles, &task, &c).unwrap();
        for (p, e) in profiles.iter().zip(&labels.examples) {
            let s: f64 = p.latent.iter().sum();
            assert_eq!(e.label, Label::Binary((s > 0.0) as u8));
        }
    }

    #[test]
    fn degenerate_genre_vocab_forces_truth_set() {
        let mut c = small(30);
        for (n, v) in c.long_term_vocab.iter_mut() {
            if n == "genre" {
                *v = 1;
            }
        }
        let (_, profiles) = generate_dataset(&c).unwrap();
        let labels =
            derive_task_labels(&profiles, &TaskSpec::NextGenre { holdout_days: 60 }, &c).unwrap();
        for e in &labels.examples {
            match &e.label {
                Label::GenreSet(g) => assert_eq!(g, &vec!["genre_0".to_string()]),
                _ => panic!("expected a genre set"),
            }
        }
    }

    #[test]
    fn labels_text_roundtrip() {
        let c = small(40);
        let (_, profiles) = generate_dataset(&c).unwrap();
        for task in ["targeting", "next_genre"] {
            let spec = TaskSpec::from_name(task, c.latent_dim).unwrap();
            let labels = derive_task_labels(&profiles, &spec, &c).unwrap();
            let back = LabeledDataset::from_text(&labels.to_text(), task, c.seed).unwrap();
            assert_eq!(back, labels);
        }
        assert!(TaskSpec::from_name("churn", 8).is_err());
    }
}
