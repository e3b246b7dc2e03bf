//! Discretizes per-user action streams into behavioral words.
//!
//! Long-term actions are grouped into 24-hour windows running from 04:00 to
//! 04:00 (in a configurable reference offset); short-term actions are split
//! into sessions wherever two consecutive actions are more than 30 minutes
//! apart.

use std::fmt::Write as _;

use crate::datagen::{SECONDS_PER_DAY, SESSION_GAP_SECS};
use crate::error::{Error, Result};
use crate::vocab::{ActionEvent, SegmentKind, UserRecord, VocabularyRegistry};

pub const DAY_BOUNDARY_SECS: i64 = 4 * 3_600;
pub const TOKENS_HEADER: &str = "USERBERT-TOKENS v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Start of the long-term training window (UTC seconds).
    pub long_window_start: i64,
    /// Start of the short-term window (UTC seconds).
    pub short_window_start: i64,
    /// Offset of the reference timezone in seconds east of UTC.
    pub tz_offset_secs: i64,
}

impl WindowConfig {
    /// Uses the earliest long- and short-term timestamps of the dataset.
    pub fn infer(users: &[UserRecord]) -> Self {
        let min_of = |kind| {
            users
                .iter()
                .flat_map(|u| u.events(kind).first())
                .map(|e| e.timestamp)
                .min()
                .unwrap_or(0)
        };
        WindowConfig {
            long_window_start: min_of(SegmentKind::LongTerm),
            short_window_start: min_of(SegmentKind::ShortTerm),
            tz_offset_secs: 0,
        }
    }

    /// The 04:00 boundary at or before the long-term window start.
    pub fn day_anchor(&self) -> i64 {
        let local = self.long_window_start + self.tz_offset_secs - DAY_BOUNDARY_SECS;
        local.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY + DAY_BOUNDARY_SECS
            - self.tz_offset_secs
    }

    fn day_index(&self, timestamp: i64) -> Result<u32> {
        let anchor = self.day_anchor();
        if timestamp < anchor {
            return Err(Error::Contract(format!(
                "long-term timestamp {timestamp} precedes the window anchor {anchor}"
            )));
        }
        Ok(((timestamp - anchor) / SECONDS_PER_DAY) as u32)
    }

    fn hour_index(&self, timestamp: i64) -> Result<u32> {
        if timestamp < self.short_window_start {
            return Err(Error::Contract(format!(
                "short-term timestamp {timestamp} precedes the window start {}",
                self.short_window_start
            )));
        }
        Ok(((timestamp - self.short_window_start) / 3_600) as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehavioralWord {
    pub segment_kind: SegmentKind,
    pub actions: Vec<ActionEvent>,
    pub position_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizeMode {
    Discretized,
    /// One word per action (the no-discretization ablation).
    PerAction,
}

impl std::str::FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discretized" => Ok(TokenizeMode::Discretized),
            "per_action" => Ok(TokenizeMode::PerAction),
            other => Err(Error::Config(format!("unknown tokenize mode `{other}`"))),
        }
    }
}

fn check_input(events: &[ActionEvent], kind: SegmentKind) -> Result<()> {
    if let Some(e) = events.iter().find(|e| e.segment_kind != kind) {
        return Err(Error::Contract(format!(
            "expected {kind} events, found {} for user {}",
            e.segment_kind, e.user_id
        )));
    }
    if let Some(w) = events.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Contract(format!(
            "events not sorted by timestamp ({} after {})",
            w[1].timestamp, w[0].timestamp
        )));
    }
    Ok(())
}

/// Groups long-term events by 04:00-to-04:00 window; empty days emit no word.
pub fn segment_long_term(
    events: &[ActionEvent],
    windows: &WindowConfig,
) -> Result<Vec<BehavioralWord>> {
    check_input(events, SegmentKind::LongTerm)?;
    let mut words: Vec<BehavioralWord> = Vec::new();
    for e in events {
        let day = windows.day_index(e.timestamp)?;
        match words.last_mut() {
            Some(w) if w.position_index == day => w.actions.push(e.clone()),
            _ => words.push(BehavioralWord {
                segment_kind: SegmentKind::LongTerm,
                actions: vec![e.clone()],
                position_index: day,
            }),
        }
    }
    Ok(words)
}

/// Splits short-term events at gaps strictly longer than 30 minutes.
pub fn segment_short_term(
    events: &[ActionEvent],
    windows: &WindowConfig,
) -> Result<Vec<BehavioralWord>> {
    check_input(events, SegmentKind::ShortTerm)?;
    let mut words: Vec<BehavioralWord> = Vec::new();
    let mut last_ts = None;
    for e in events {
        let continues = last_ts.is_some_and(|t: i64| e.timestamp - t <= SESSION_GAP_SECS);
        match words.last_mut() {
            Some(w) if continues => w.actions.push(e.clone()),
            _ => words.push(BehavioralWord {
                segment_kind: SegmentKind::ShortTerm,
                actions: vec![e.clone()],
                position_index: windows.hour_index(e.timestamp)?,
            }),
        }
        last_ts = Some(e.timestamp);
    }
    Ok(words)
}

/// One word per event, positions computed as in discretized mode.
pub fn segment_per_action(
    events: &[ActionEvent],
    kind: SegmentKind,
    windows: &WindowConfig,
) -> Result<Vec<BehavioralWord>> {
    check_input(events, kind)?;
    events
        .iter()
        .map(|e| {
            let position_index = match kind {
                SegmentKind::LongTerm => windows.day_index(e.timestamp)?,
                _ => windows.hour_index(e.timestamp)?,
            };
            Ok(BehavioralWord {
                segment_kind: kind,
                actions: vec![e.clone()],
                position_index,
            })
        })
        .collect()
}

/// A behavioral word with attribute values resolved to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedWord {
    pub position: u32,
    /// One id tuple per action, in schema attribute order.
    pub actions: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedUser {
    pub user_id: String,
    pub long_words: Vec<EncodedWord>,
    pub short_words: Vec<EncodedWord>,
    pub profile_token_ids: Vec<u32>,
}

impl TokenizedUser {
    pub fn words(&self, kind: SegmentKind) -> &[EncodedWord] {
        match kind {
            SegmentKind::LongTerm => &self.long_words,
            SegmentKind::ShortTerm => &self.short_words,
            SegmentKind::UserProfile => &[],
        }
    }

    pub fn num_words(&self) -> usize {
        self.long_words.len() + self.short_words.len()
    }
}

fn encode_words(
    words: Vec<BehavioralWord>,
    registry: &mut VocabularyRegistry,
    frozen: bool,
) -> Result<Vec<EncodedWord>> {
    words
        .into_iter()
        .map(|w| {
            let kind = w.segment_kind;
            let arity = registry.schemas().get(kind).len();
            let actions = w
                .actions
                .iter()
                .map(|a| {
                    if a.attribute_values.len() != arity {
                        return Err(Error::Schema(format!(
                            "{kind} action of user {} has {} values, schema has {arity}",
                            a.user_id,
                            a.attribute_values.len()
                        )));
                    }
                    Ok(a.attribute_values
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            if frozen {
                                registry.lookup_at(kind, i, v)
                            } else {
                                registry.intern_at(kind, i, v)
                            }
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            Ok(EncodedWord {
                position: w.position_index,
                actions,
            })
        })
        .collect()
}

/// Tokenizes one user's streams into raw words for both behavior segments.
pub fn segment_user(
    user: &UserRecord,
    windows: &WindowConfig,
    mode: TokenizeMode,
) -> Result<(Vec<BehavioralWord>, Vec<BehavioralWord>)> {
    match mode {
        TokenizeMode::Discretized => Ok((
            segment_long_term(&user.long_term_events, windows)?,
            segment_short_term(&user.short_term_events, windows)?,
        )),
        TokenizeMode::PerAction => Ok((
            segment_per_action(&user.long_term_events, SegmentKind::LongTerm, windows)?,
            segment_per_action(&user.short_term_events, SegmentKind::ShortTerm, windows)?,
        )),
    }
}

/// Tokenizes and encodes all users; output is ordered by user id.
pub fn tokenize_dataset(
    users: &[UserRecord],
    registry: &mut VocabularyRegistry,
    frozen: bool,
    windows: &WindowConfig,
    mode: TokenizeMode,
) -> Result<Vec<TokenizedUser>> {
    let mut order: Vec<&UserRecord> = users.iter().collect();
    order.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let profile_arity = registry.schemas().profile.len();
    order
        .into_iter()
        .map(|user| {
            let (long, short) = segment_user(user, windows, mode)?;
            if user.profile_attributes.len() != profile_arity {
                return Err(Error::Schema(format!(
                    "user {} has {} profile values, schema has {profile_arity}",
                    user.user_id,
                    user.profile_attributes.len()
                )));
            }
            let profile_token_ids = user
                .profile_attributes
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if frozen {
                        registry.lookup_at(SegmentKind::UserProfile, i, v)
                    } else {
                        registry.intern_at(SegmentKind::UserProfile, i, v)
                    }
                })
                .collect();
            Ok(TokenizedUser {
                user_id: user.user_id.clone(),
                long_words: encode_words(long, registry, frozen)?,
                short_words: encode_words(short, registry, frozen)?,
                profile_token_ids,
            })
        })
        .collect()
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// Line format: `user_id<TAB>segment<TAB>position<TAB>id,id|id,id`.
pub fn dump_tokenized(users: &[TokenizedUser]) -> String {
    let mut s = String::new();
    s.push_str(TOKENS_HEADER);
    s.push('\n');
    for u in users {
        for kind in [SegmentKind::LongTerm, SegmentKind::ShortTerm] {
            for w in u.words(kind) {
                let groups: Vec<String> = w.actions.iter().map(|a| join_ids(a)).collect();
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}",
                    u.user_id,
                    kind,
                    w.position,
                    groups.join("|")
                );
            }
        }
        let _ = writeln!(
            s,
            "{}\t{}\t0\t{}",
            u.user_id,
            SegmentKind::UserProfile,
            join_ids(&u.profile_token_ids)
        );
    }
    s
}

pub fn parse_tokenized(text: &str) -> Result<Vec<TokenizedUser>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != TOKENS_HEADER {
        return Err(Error::Version {
            path: "<tokens>".into(),
            expected: TOKENS_HEADER.into(),
            found: header.chars().take(64).collect(),
        });
    }
    let parse_ids = |s: &str, loc: &str| -> Result<Vec<u32>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| Error::parse(loc, format!("bad id `{x}`")))
            })
            .collect()
    };
    let mut users: Vec<TokenizedUser> = Vec::new();
    for (n, line) in lines.enumerate() {
        let loc = format!("tokens:{}", n + 2);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(&loc, "expected 4 tab-separated fields"));
        }
        if users.last().is_none_or(|u| u.user_id != f[0]) {
            users.push(TokenizedUser {
                user_id: f[0].to_string(),
                long_words: Vec::new(),
                short_words: Vec::new(),
                profile_token_ids: Vec::new(),
            });
        }
        let user = users.last_mut().expect("pushed above");
        let kind: SegmentKind = f[1].parse()?;
        let position: u32 = f[2]
            .parse()
            .map_err(|_| Error::parse(&loc, "bad position"))?;
        match kind {
            SegmentKind::UserProfile => user.profile_token_ids = parse_ids(f[3], &loc)?,
            _ => {
                let actions = f[3]
                    .split('|')
                    .map(|g| parse_ids(g, &loc))
                    .collect::<Result<Vec<_>>>()?;
                let word = EncodedWord { position, actions };
                if kind == SegmentKind::LongTerm {
                    user.long_words.push(word);
                } else {
                    user.short_words.push(word);
                }
            }
        }
    }
    Ok(users)
}
