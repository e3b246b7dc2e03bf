//! Event data model, attribute schemas and the interning vocabulary registry.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved id for values never interned.
pub const UNKNOWN_ID: u32 = 0;

pub const VOCAB_HEADER: &str = "USERBERT-VOCAB v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentKind {
    LongTerm,
    ShortTerm,
    UserProfile,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 3] = [
        SegmentKind::LongTerm,
        SegmentKind::ShortTerm,
        SegmentKind::UserProfile,
    ];

    /// Index used for segment embeddings.
    pub fn index(self) -> usize {
        match self {
            SegmentKind::LongTerm => 0,
            SegmentKind::ShortTerm => 1,
            SegmentKind::UserProfile => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::LongTerm => "LongTerm",
            SegmentKind::ShortTerm => "ShortTerm",
            SegmentKind::UserProfile => "UserProfile",
        }
    }

    pub fn is_behavioral(self) -> bool {
        !matches!(self, SegmentKind::UserProfile)
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LongTerm" => Ok(SegmentKind::LongTerm),
            "ShortTerm" => Ok(SegmentKind::ShortTerm),
            "UserProfile" => Ok(SegmentKind::UserProfile),
            other => Err(Error::Schema(format!("unknown segment kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    pub segment_kind: SegmentKind,
    attributes: Vec<(String, usize)>,
}

impl AttributeSchema {
    pub fn new(segment_kind: SegmentKind, attributes: Vec<(String, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, capacity) in &attributes {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate attribute `{name}` in {segment_kind} schema"
                )));
            }
            if *capacity == 0 {
                return Err(Error::Schema(format!(
                    "attribute `{name}` declares zero vocabulary capacity"
                )));
            }
            validate_token(name, "attribute name")?;
        }
        Ok(AttributeSchema {
            segment_kind,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(n, _)| n.as_str())
    }

    pub fn attributes(&self) -> &[(String, usize)] {
        &self.attributes
    }

    pub fn capacity(&self, index: usize) -> usize {
        self.attributes[index].1
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|(n, _)| n == name)
    }
}

/// The three schemas of a run, in segment order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaSet {
    pub long_term: AttributeSchema,
    pub short_term: AttributeSchema,
    pub profile: AttributeSchema,
}

impl SchemaSet {
    pub fn get(&self, kind: SegmentKind) -> &AttributeSchema {
        match kind {
            SegmentKind::LongTerm => &self.long_term,
            SegmentKind::ShortTerm => &self.short_term,
            SegmentKind::UserProfile => &self.profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionEvent {
    pub user_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub segment_kind: SegmentKind,
    pub attribute_values: Vec<String>,
}

impl ActionEvent {
    pub fn validate(&self, schemas: &SchemaSet) -> Result<()> {
        if !self.segment_kind.is_behavioral() {
            return Err(Error::Schema(
                "action events must be LongTerm or ShortTerm".into(),
            ));
        }
        if self.timestamp < 0 {
            return Err(Error::Schema(format!(
                "negative timestamp {} for user {}",
                self.timestamp, self.user_id
            )));
        }
        let expected = schemas.get(self.segment_kind).len();
        if self.attribute_values.len() != expected {
            return Err(Error::Schema(format!(
                "{} event carries {} attribute values, schema has {expected}",
                self.segment_kind,
                self.attribute_values.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserRecord {
    pub user_id: String,
    pub long_term_events: Vec<ActionEvent>,
    pub short_term_events: Vec<ActionEvent>,
    pub profile_attributes: Vec<String>,
}

impl UserRecord {
    pub fn events(&self, kind: SegmentKind) -> &[ActionEvent] {
        match kind {
            SegmentKind::LongTerm => &self.long_term_events,
            SegmentKind::ShortTerm => &self.short_term_events,
            SegmentKind::UserProfile => &[],
        }
    }
}

/// Buckets a continuous value by ascending edges: `v < edges[0]` is bucket 0,
/// `edges[i-1] <= v < edges[i]` is bucket `i`, and so on.
pub fn bucketize(value: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| value >= e).count()
}

/// Categorical label for an age bucket under the given edges, e.g. `25-34`.
pub fn bucket_label(value: f64, edges: &[f64]) -> String {
    let b = bucketize(value, edges);
    match (b.checked_sub(1).map(|i| edges[i]), edges.get(b)) {
        (None, Some(hi)) => format!("lt{hi}"),
        (Some(lo), Some(hi)) => format!("{lo}-{}", hi - 1.0),
        (Some(lo), None) => format!("ge{lo}"),
        (None, None) => "all".to_string(),
    }
}

/// Bidirectional raw value <-> id maps for every attribute of every segment.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyRegistry {
    schemas: SchemaSet,
    maps: [Vec<IndexMap<String, u32>>; 3],
}

impl VocabularyRegistry {
    pub fn new(schemas: SchemaSet) -> Self {
        let maps = SegmentKind::ALL.map(|k| vec![IndexMap::new(); schemas.get(k).len()]);
        VocabularyRegistry { schemas, maps }
    }

    pub fn schemas(&self) -> &SchemaSet {
        &self.schemas
    }

    fn attribute_index(&self, kind: SegmentKind, attribute: &str) -> Result<usize> {
        self.schemas.get(kind).position(attribute).ok_or_else(|| {
            Error::Schema(format!(
                "unknown attribute `{attribute}` for segment {kind}"
            ))
        })
    }

    pub fn intern_value(&mut self, kind: SegmentKind, attribute: &str, raw: &str) -> Result<u32> {
        let index = self.attribute_index(kind, attribute)?;
        Ok(self.intern_at(kind, index, raw))
    }

    pub fn intern_at(&mut self, kind: SegmentKind, index: usize, raw: &str) -> u32 {
        let map = &mut self.maps[kind.index()][index];
        if let Some(&id) = map.get(raw) {
            return id;
        }
        let id = map.len() as u32 + 1;
        map.insert(raw.to_string(), id);
        id
    }

    pub fn lookup_at(&self, kind: SegmentKind, index: usize, raw: &str) -> u32 {
        self.maps[kind.index()][index]
            .get(raw)
            .copied()
            .unwrap_or(UNKNOWN_ID)
    }

    /// Frozen lookups map unseen values to [`UNKNOWN_ID`]; unfrozen lookups intern.
    pub fn resolve(
        &mut self,
        kind: SegmentKind,
        attribute: &str,
        raw: &str,
        frozen: bool,
    ) -> Result<u32> {
        let index = self.attribute_index(kind, attribute)?;
        if frozen {
            Ok(self.lookup_at(kind, index, raw))
        } else {
            Ok(self.intern_at(kind, index, raw))
        }
    }

    pub fn raw_value(&self, kind: SegmentKind, index: usize, id: u32) -> Option<&str> {
        let i = (id as usize).checked_sub(1)?;
        self.maps[kind.index()][index]
            .get_index(i)
            .map(|(k, _)| k.as_str())
    }

    pub fn vocab_size(&self, kind: SegmentKind, attribute: &str) -> Result<usize> {
        Ok(self.vocab_size_at(kind, self.attribute_index(kind, attribute)?))
    }

    pub fn vocab_size_at(&self, kind: SegmentKind, index: usize) -> usize {
        self.maps[kind.index()][index].len() + 1
    }

    /// Vocabulary sizes of a segment in schema order.
    pub fn vocab_sizes(&self, kind: SegmentKind) -> Vec<usize> {
        (0..self.schemas.get(kind).len())
            .map(|i| self.vocab_size_at(kind, i))
            .collect()
    }

    /// Interns every attribute value of the given users.
    pub fn ingest(&mut self, users: &[UserRecord]) -> Result<()> {
        for user in users {
            for kind in [SegmentKind::LongTerm, SegmentKind::ShortTerm] {
                for event in user.events(kind) {
                    event.validate(&self.schemas)?;
                    for (i, v) in event.attribute_values.iter().enumerate() {
                        self.intern_at(kind, i, v);
                    }
                }
            }
            if user.profile_attributes.len() != self.schemas.profile.len() {
                return Err(Error::Schema(format!(
                    "user {} has {} profile values, schema has {}",
                    user.user_id,
                    user.profile_attributes.len(),
                    self.schemas.profile.len()
                )));
            }
            for (i, v) in user.profile_attributes.iter().enumerate() {
                self.intern_at(SegmentKind::UserProfile, i, v);
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for kind in SegmentKind::ALL {
            for (name, capacity) in self.schemas.get(kind).attributes() {
                out.push_str(&format!("@attr\t{kind}\t{name}\t{capacity}\n"));
            }
        }
        for kind in SegmentKind::ALL {
            for (i, (name, _)) in self.schemas.get(kind).attributes().iter().enumerate() {
                for (raw, id) in &self.maps[kind.index()][i] {
                    out.push_str(&format!("{kind}\t{name}\t{raw}\t{id}\n"));
                }
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != VOCAB_HEADER {
            return Err(Error::Version {
                path: origin.to_path_buf(),
                expected: VOCAB_HEADER.into(),
                found: header.chars().take(64).collect(),
            });
        }
        let mut declared: BTreeMap<SegmentKind, Vec<(String, usize)>> = BTreeMap::new();
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let loc = || format!("{}:{}", origin.display(), n + 2);
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(loc(), "expected 4 tab-separated fields"));
            }
            if fields[0] == "@attr" {
                let kind: SegmentKind = fields[1].parse()?;
                let capacity = fields[3]
                    .parse()
                    .map_err(|_| Error::parse(loc(), "bad attribute capacity"))?;
                declared
                    .entry(kind)
                    .or_default()
                    .push((fields[2].to_string(), capacity));
            } else {
                let kind: SegmentKind = fields[0].parse()?;
                let id: u32 = fields[3]
                    .parse()
                    .map_err(|_| Error::parse(loc(), "bad id"))?;
                entries.push((
                    kind,
                    fields[1].to_string(),
                    fields[2].to_string(),
                    id,
                    loc(),
                ));
            }
        }
        let mut take = |k| AttributeSchema::new(k, declared.remove(&k).unwrap_or_default());
        let schemas = SchemaSet {
            long_term: take(SegmentKind::LongTerm)?,
            short_term: take(SegmentKind::ShortTerm)?,
            profile: take(SegmentKind::UserProfile)?,
        };
        let mut registry = VocabularyRegistry::new(schemas);
        for (kind, attribute, raw, id, loc) in entries {
            let index = registry.attribute_index(kind, &attribute)?;
            let assigned = registry.intern_at(kind, index, &raw);
            if assigned != id {
                return Err(Error::parse(
                    loc,
                    format!("ids must be contiguous from 1; expected {assigned}, found {id}"),
                ));
            }
        }
        Ok(registry)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| {
            Error::parse(path.display().to_string(), "vocabulary file is not UTF-8")
        })?;
        Self::from_text(&text, path)
    }

    /// SHA-256 of the persisted form, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn validate_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r', ';', '=']) {
        return Err(Error::Schema(format!(
            "{what} `{}` is empty or contains a reserved character",
            s.escape_debug()
        )));
    }
    Ok(())
}

fn format_pairs<'a>(names: impl Iterator<Item = &'a str>, values: &[String]) -> String {
    names
        .zip(values)
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_pairs(field: &str, schema: &AttributeSchema, loc: &str) -> Result<Vec<String>> {
    let mut values = vec![None; schema.len()];
    if !field.is_empty() {
        for pair in field.split(';') {
            let (name, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::parse(loc, format!("malformed pair `{pair}`")))?;
            let i = schema.position(name).ok_or_else(|| {
                Error::Schema(format!(
                    "{loc}: unknown attribute `{name}` for {}",
                    schema.segment_kind
                ))
            })?;
            if values[i].replace(value.to_string()).is_some() {
                return Err(Error::parse(loc, format!("attribute `{name}` repeated")));
            }
        }
    }
    values
        .into_iter()
        .zip(schema.names())
        .map(|(v, n)| v.ok_or_else(|| Error::Schema(format!("{loc}: missing attribute `{n}`"))))
        .collect()
}

/// Writes events as `user_id<TAB>timestamp<TAB>segment_kind<TAB>a=v;...` lines.
pub fn write_events<W: Write>(
    out: &mut W,
    users: &[UserRecord],
    schemas: &SchemaSet,
) -> std::io::Result<()> {
    for user in users {
        for kind in [SegmentKind::LongTerm, SegmentKind::ShortTerm] {
            for e in user.events(kind) {
                let pairs = format_pairs(schemas.get(kind).names(), &e.attribute_values);
                writeln!(out, "{}\t{}\t{}\t{}", e.user_id, e.timestamp, kind, pairs)?;
            }
        }
    }
    Ok(())
}

/// Writes profiles as `user_id<TAB>a=v;...` lines.
pub fn write_profiles<W: Write>(
    out: &mut W,
    users: &[UserRecord],
    schemas: &SchemaSet,
) -> std::io::Result<()> {
    for user in users {
        let pairs = format_pairs(schemas.profile.names(), &user.profile_attributes);
        writeln!(out, "{}\t{}", user.user_id, pairs)?;
    }
    Ok(())
}

pub fn parse_events(text: &str, schemas: &SchemaSet, origin: &str) -> Result<Vec<ActionEvent>> {
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let loc = format!("{origin}:{}", n + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(&loc, "expected 4 tab-separated fields"));
        }
        let timestamp: i64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(&loc, format!("bad timestamp `{}`", fields[1])))?;
        let segment_kind: SegmentKind = fields[2].parse()?;
        if !segment_kind.is_behavioral() {
            return Err(Error::parse(
                &loc,
                "event segment must be LongTerm or ShortTerm",
            ));
        }
        let event = ActionEvent {
            user_id: fields[0].to_string(),
            timestamp,
            segment_kind,
            attribute_values: parse_pairs(fields[3], schemas.get(segment_kind), &loc)?,
        };
        event.validate(schemas)?;
        events.push(event);
    }
    Ok(events)
}

pub fn parse_profiles(
    text: &str,
    schemas: &SchemaSet,
    origin: &str,
) -> Result<Vec<(String, Vec<String>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let loc = format!("{origin}:{}", n + 1);
            let (user, pairs) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&loc, "expected user_id<TAB>pairs"))?;
            Ok((
                user.to_string(),
                parse_pairs(pairs, &schemas.profile, &loc)?,
            ))
        })
        .collect()
}

/// Groups events and profiles into users, sorted by user id; events sorted
/// by timestamp with input order as the tiebreak.
pub fn assemble_users(
    events: Vec<ActionEvent>,
    profiles: Vec<(String, Vec<String>)>,
    schemas: &SchemaSet,
) -> Result<Vec<UserRecord>> {
    let mut users: BTreeMap<String, UserRecord> = BTreeMap::new();
    for (user_id, values) in profiles {
        if values.len() != schemas.profile.len() {
            return Err(Error::Schema(format!("bad profile arity for {user_id}")));
        }
        let entry = users.entry(user_id.clone()).or_default();
        entry.user_id = user_id;
        entry.profile_attributes = values;
    }
    for event in events {
        let entry = users.entry(event.user_id.clone()).or_default();
        entry.user_id = event.user_id.clone();
        match event.segment_kind {
            SegmentKind::LongTerm => entry.long_term_events.push(event),
            SegmentKind::ShortTerm => entry.short_term_events.push(event),
            SegmentKind::UserProfile => unreachable!("validated on parse"),
        }
    }
    let mut out = Vec::with_capacity(users.len());
    for (_, mut user) in users {
        if user.profile_attributes.is_empty() && !schemas.profile.is_empty() {
            return Err(Error::Schema(format!(
                "user {} has no profile line",
                user.user_id
            )));
        }
        user.long_term_events.sort_by_key(|e| e.timestamp);
        user.short_term_events.sort_by_key(|e| e.timestamp);
        out.push(user);
    }
    Ok(out)
}
