//! Structured interaction logs: loading, validation, and preprocessing.
//!
//! Input is three line-delimited record files (`users`, `items`, `events`),
//! one JSON object per line; lines starting with `#` are header/comment lines
//! and are skipped. Field names are part of the file contract.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_INTERACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeBand {
    Teen,
    YoungAdult,
    Adult,
    MiddleAged,
    Senior,
}

impl fmt::Display for AgeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AgeBand::Teen => "teen",
            AgeBand::YoungAdult => "young_adult",
            AgeBand::Adult => "adult",
            AgeBand::MiddleAged => "middle_aged",
            AgeBand::Senior => "senior",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Other,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Other => "other",
        };
        f.write_str(s)
    }
}

/// Interaction kind. `Like` and later are "deep" engagement actions.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash,
)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    View,
    Click,
    Like,
    Save,
    Comment,
    Share,
    Follow,
    Purchase,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::View,
        Action::Click,
        Action::Like,
        Action::Save,
        Action::Comment,
        Action::Share,
        Action::Follow,
        Action::Purchase,
    ];

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|a| *a == self).unwrap()
    }

    pub fn verb(self) -> &'static str {
        crate::templates::ACTION_VERBS[self.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub age_band: AgeBand,
    pub gender: Gender,
    pub city_tier: u8,
    pub interest_tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub body: String,
    pub tags: BTreeSet<String>,
    pub stats: BTreeMap<Action, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    pub action: Action,
    pub timestamp: i64,
    pub dwell: f64,
}

/// Immutable after construction; safe for concurrent reads.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    users: BTreeMap<String, UserRecord>,
    items: BTreeMap<String, ItemRecord>,
    events_by_user: BTreeMap<String, Vec<InteractionEvent>>,
    popularity: BTreeMap<String, u64>,
}

impl Corpus {
    pub fn new(
        users: Vec<UserRecord>,
        items: Vec<ItemRecord>,
        events: Vec<InteractionEvent>,
    ) -> Result<Self> {
        let mut user_map = BTreeMap::new();
        for u in users {
            validate_id(&u.user_id)?;
            if user_map.insert(u.user_id.clone(), u).is_some() {
                return Err(Error::Data("duplicate user_id".into()));
            }
        }
        let mut item_map = BTreeMap::new();
        for i in items {
            validate_id(&i.item_id)?;
            for (_, &count) in &i.stats {
                // u64 counts are nonnegative by type; kept for clarity with
                // formats that may switch to signed integers.
                let _ = count;
            }
            if item_map.insert(i.item_id.clone(), i).is_some() {
                return Err(Error::Data("duplicate item_id".into()));
            }
        }
        let mut events_by_user: BTreeMap<String, Vec<InteractionEvent>> = BTreeMap::new();
        for e in &events {
            if !user_map.contains_key(&e.user_id) {
                return Err(Error::Data(format!(
                    "event references unknown user_id {:?}",
                    e.user_id
                )));
            }
            if !item_map.contains_key(&e.item_id) {
                return Err(Error::Data(format!(
                    "event references unknown item_id {:?}",
                    e.item_id
                )));
            }
            if e.timestamp < 0 {
                return Err(Error::Data(format!(
                    "negative timestamp {} for user {:?}",
                    e.timestamp, e.user_id
                )));
            }
            if !(e.dwell >= 0.0) {
                return Err(Error::Data(format!(
                    "negative or non-finite dwell for user {:?}",
                    e.user_id
                )));
            }
        }
        for e in events {
            events_by_user.entry(e.user_id.clone()).or_default().push(e);
        }
        let mut corpus = Corpus {
            users: user_map,
            items: item_map,
            events_by_user,
            popularity: BTreeMap::new(),
        };
        corpus.recompute_popularity();
        Ok(corpus)
    }

    fn recompute_popularity(&mut self) {
        let mut pop: BTreeMap<String, u64> = BTreeMap::new();
        for item_id in self.items.keys() {
            pop.insert(item_id.clone(), 0);
        }
        for events in self.events_by_user.values() {
            for e in events {
                *pop.entry(e.item_id.clone()).or_insert(0) += 1;
            }
        }
        self.popularity = pop;
    }

    pub fn users(&self) -> &BTreeMap<String, UserRecord> {
        &self.users
    }

    pub fn items(&self) -> &BTreeMap<String, ItemRecord> {
        &self.items
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemRecord> {
        self.items.get(item_id)
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.get(user_id)
    }

    pub fn events_of(&self, user_id: &str) -> &[InteractionEvent] {
        self.events_by_user
            .get(user_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn events_by_user(&self) -> &BTreeMap<String, Vec<InteractionEvent>> {
        &self.events_by_user
    }

    pub fn num_events(&self) -> usize {
        self.events_by_user.values().map(Vec::len).sum()
    }

    /// Total interaction count per item, over the current event set.
    pub fn popularity(&self) -> &BTreeMap<String, u64> {
        &self.popularity
    }
}

/// Ids double as token payloads, so they must be single, printable words.
fn validate_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(Error::Data(format!(
            "invalid id {id:?}: ids must be nonempty and use only [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}

/// Whitelist cleaning: keep ASCII letters, digits, spaces and `.,:;-'`,
/// then collapse whitespace runs and trim. Idempotent.
pub fn clean_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | ',' | ':' | ';' | '-' | '\'') {
                c
            } else {
                ' '
            }
        })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_record_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: T = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Load and cross-validate the three record files.
pub fn load_corpus(users_path: &Path, items_path: &Path, events_path: &Path) -> Result<Corpus> {
    let users: Vec<UserRecord> = read_record_lines(users_path)?;
    let items: Vec<ItemRecord> = read_record_lines(items_path)?;
    let events: Vec<InteractionEvent> = read_record_lines(events_path)?;
    Corpus::new(users, items, events)
}

/// Apply the preprocessing rules: drop users with fewer than
/// `min_interactions` events, sort each user's events by timestamp (stable,
/// so equal timestamps keep input order), and clean all text fields.
pub fn preprocess(corpus: &Corpus, min_interactions: usize) -> Corpus {
    let mut items = BTreeMap::new();
    for (id, item) in &corpus.items {
        let mut cleaned = item.clone();
        cleaned.title = clean_text(&item.title);
        cleaned.body = clean_text(&item.body);
        cleaned.tags = item
            .tags
            .iter()
            .map(|t| clean_text(t))
            .filter(|t| !t.is_empty())
            .collect();
        items.insert(id.clone(), cleaned);
    }

    let mut users = BTreeMap::new();
    let mut events_by_user = BTreeMap::new();
    for (id, user) in &corpus.users {
        let events = corpus.events_of(id);
        if events.len() < min_interactions {
            continue;
        }
        let mut cleaned = user.clone();
        cleaned.interest_tags = user
            .interest_tags
            .iter()
            .map(|t| clean_text(t))
            .filter(|t| !t.is_empty())
            .collect();
        users.insert(id.clone(), cleaned);

        let mut sorted = events.to_vec();
        sorted.sort_by_key(|e| e.timestamp);
        events_by_user.insert(id.clone(), sorted);
    }

    let mut out = Corpus {
        users,
        items,
        events_by_user,
        popularity: BTreeMap::new(),
    };
    out.recompute_popularity();
    out
}

/// Partition sorted events at `cut` (inclusive on the history side).
/// Returns `None` when the history side would be empty; such samples are
/// skipped upstream.
pub fn split_history(
    events: &[InteractionEvent],
    cut: i64,
) -> Option<(Vec<InteractionEvent>, Vec<InteractionEvent>)> {
    let split_at = events.partition_point(|e| e.timestamp <= cut);
    if split_at == 0 {
        return None;
    }
    Some((events[..split_at].to_vec(), events[split_at..].to_vec()))
}
