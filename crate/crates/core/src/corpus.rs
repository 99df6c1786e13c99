//! The behavioral corpus: user, item and review tables ingested from
//! line-delimited JSON files, with chronological per-user sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ids::{ItemId, UserId};
use crate::io::{read_lines, write_atomic, RecordError};

pub const USERS_FILE: &str = "users.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const REVIEWS_FILE: &str = "reviews.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: review references unknown {missing}")]
    DanglingReference {
        path: PathBuf,
        line: usize,
        missing: String,
    },
    #[error("corpus contains no interactions")]
    EmptyCorpus,
    #[error("user {0} has fewer than two interactions")]
    SequenceTooShort(UserId),
    #[error(transparent)]
    Io(#[from] RecordError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item: ItemId,
    pub title: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMeta {
    pub user: UserId,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Immutable after construction; every sequence is sorted by timestamp with
/// ties kept in input order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    users: BTreeMap<UserId, UserMeta>,
    items: BTreeMap<ItemId, ItemMeta>,
    sequences: BTreeMap<UserId, Vec<Interaction>>,
}

impl Corpus {
    /// Assembles a corpus from in-memory tables, enforcing the same rules as
    /// [`ingest`].
    pub fn from_parts(
        users: Vec<UserMeta>,
        items: Vec<ItemMeta>,
        interactions: Vec<Interaction>,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (idx, user) in users.into_iter().enumerate() {
            let id = user.user.clone();
            if corpus.users.insert(id.clone(), user).is_some() {
                return Err(malformed(Path::new("<users>"), idx + 1, format!("duplicate user_id {id}")));
            }
        }
        for (idx, item) in items.into_iter().enumerate() {
            let id = item.item.clone();
            if corpus.items.insert(id.clone(), item).is_some() {
                return Err(malformed(Path::new("<items>"), idx + 1, format!("duplicate item_id {id}")));
            }
        }
        for (idx, interaction) in interactions.into_iter().enumerate() {
            corpus.push_interaction(Path::new("<reviews>"), idx + 1, interaction)?;
        }
        corpus.finish()
    }

    fn push_interaction(
        &mut self,
        path: &Path,
        line: usize,
        interaction: Interaction,
    ) -> Result<(), CorpusError> {
        if !self.users.contains_key(&interaction.user) {
            return Err(CorpusError::DanglingReference {
                path: path.to_path_buf(),
                line,
                missing: format!("user_id {}", interaction.user),
            });
        }
        if !self.items.contains_key(&interaction.item) {
            return Err(CorpusError::DanglingReference {
                path: path.to_path_buf(),
                line,
                missing: format!("item_id {}", interaction.item),
            });
        }
        if interaction.timestamp < 0 {
            return Err(malformed(path, line, "timestamp must be non-negative".into()));
        }
        if let Some(r) = interaction.rating {
            if !(0.0..=5.0).contains(&r) {
                return Err(malformed(path, line, format!("rating {r} outside [0, 5]")));
            }
        }
        self.sequences
            .entry(interaction.user.clone())
            .or_default()
            .push(interaction);
        Ok(())
    }

    fn finish(mut self) -> Result<Self, CorpusError> {
        if self.sequences.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        for seq in self.sequences.values_mut() {
            // stable: equal timestamps keep input order
            seq.sort_by_key(|i| i.timestamp);
        }
        Ok(self)
    }

    pub fn users(&self) -> &BTreeMap<UserId, UserMeta> {
        &self.users
    }

    pub fn items(&self) -> &BTreeMap<ItemId, ItemMeta> {
        &self.items
    }

    pub fn sequences(&self) -> &BTreeMap<UserId, Vec<Interaction>> {
        &self.sequences
    }

    pub fn user(&self, id: &UserId) -> Option<&UserMeta> {
        self.users.get(id)
    }

    pub fn item(&self, id: &ItemId) -> Option<&ItemMeta> {
        self.items.get(id)
    }

    pub fn sequence(&self, user: &UserId) -> &[Interaction] {
        self.sequences.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.values().map(Vec::len).sum()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.sequences.values().flatten()
    }

    /// Latest interaction timestamp, or 0 for a corpus without sequences.
    pub fn max_timestamp(&self) -> i64 {
        self.interactions().map(|i| i.timestamp).max().unwrap_or(0)
    }

    /// Number of distinct users who interacted with `item`.
    pub fn item_popularity(&self, item: &ItemId) -> usize {
        self.sequences
            .values()
            .filter(|seq| seq.iter().any(|i| &i.item == item))
            .count()
    }

    /// Writes the three tables back out in the ingest schema.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        let mut users = String::new();
        for meta in self.users.values() {
            let mut obj = Map::new();
            obj.insert("user_id".into(), Value::String(meta.user.to_string()));
            for (k, v) in &meta.attributes {
                obj.insert(k.clone(), Value::String(v.clone()));
            }
            users.push_str(&Value::Object(obj).to_string());
            users.push('\n');
        }
        let mut items = String::new();
        for meta in self.items.values() {
            let mut obj = Map::new();
            obj.insert("item_id".into(), Value::String(meta.item.to_string()));
            obj.insert("title".into(), Value::String(meta.title.clone()));
            for (k, v) in &meta.attributes {
                obj.insert(k.clone(), Value::String(v.clone()));
            }
            items.push_str(&Value::Object(obj).to_string());
            items.push('\n');
        }
        let mut reviews = String::new();
        for interaction in self.interactions() {
            let mut obj = Map::new();
            obj.insert("user_id".into(), Value::String(interaction.user.to_string()));
            obj.insert("item_id".into(), Value::String(interaction.item.to_string()));
            obj.insert("timestamp".into(), Value::from(interaction.timestamp));
            if let Some(r) = interaction.rating {
                obj.insert("rating".into(), Value::from(r));
            }
            if let Some(t) = &interaction.review_text {
                obj.insert("review_text".into(), Value::String(t.clone()));
            }
            reviews.push_str(&Value::Object(obj).to_string());
            reviews.push('\n');
        }
        for (name, body) in [(USERS_FILE, users), (ITEMS_FILE, items), (REVIEWS_FILE, reviews)] {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes()).map_err(|e| RecordError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, CorpusError> {
        ingest(&dir.join(USERS_FILE), &dir.join(ITEMS_FILE), &dir.join(REVIEWS_FILE))
    }
}

fn malformed(path: &Path, line: usize, reason: String) -> CorpusError {
    CorpusError::MalformedRecord {
        path: path.to_path_buf(),
        line,
        reason,
    }
}

fn parse_object(path: &Path, line: usize, text: &str) -> Result<Map<String, Value>, CorpusError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(malformed(path, line, "expected a JSON object".into())),
        Err(e) => Err(malformed(path, line, e.to_string())),
    }
}

fn take_string(
    path: &Path,
    line: usize,
    obj: &mut Map<String, Value>,
    key: &str,
) -> Result<String, CorpusError> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(malformed(path, line, format!("`{key}` must be a string"))),
        None => Err(malformed(path, line, format!("missing `{key}`"))),
    }
}

/// Non-string attribute values are kept as their compact JSON text.
fn attributes(obj: Map<String, Value>) -> BTreeMap<String, String> {
    obj.into_iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(k, v)| match v {
            Value::String(s) => (k, s),
            other => (k, other.to_string()),
        })
        .collect()
}

/// Loads the three tables into a corpus. Reviews must reference known users
/// and items; sequences come back sorted chronologically.
pub fn ingest(user_file: &Path, item_file: &Path, review_file: &Path) -> Result<Corpus, CorpusError> {
    let mut users = Vec::new();
    for (line, text) in read_lines(user_file)? {
        let mut obj = parse_object(user_file, line, &text)?;
        let id = take_string(user_file, line, &mut obj, "user_id")?;
        let user = UserId::new(id).map_err(|e| malformed(user_file, line, e.to_string()))?;
        users.push((line, UserMeta { user, attributes: attributes(obj) }));
    }
    let mut items = Vec::new();
    for (line, text) in read_lines(item_file)? {
        let mut obj = parse_object(item_file, line, &text)?;
        let id = take_string(item_file, line, &mut obj, "item_id")?;
        let item = ItemId::new(id).map_err(|e| malformed(item_file, line, e.to_string()))?;
        let title = take_string(item_file, line, &mut obj, "title")?;
        items.push((line, ItemMeta { item, title, attributes: attributes(obj) }));
    }

    let mut corpus = Corpus::default();
    for (line, user) in users {
        let id = user.user.clone();
        if corpus.users.insert(id.clone(), user).is_some() {
            return Err(malformed(user_file, line, format!("duplicate user_id {id}")));
        }
    }
    for (line, item) in items {
        let id = item.item.clone();
        if corpus.items.insert(id.clone(), item).is_some() {
            return Err(malformed(item_file, line, format!("duplicate item_id {id}")));
        }
    }

    for (line, text) in read_lines(review_file)? {
        let mut obj = parse_object(review_file, line, &text)?;
        let user = UserId::new(take_string(review_file, line, &mut obj, "user_id")?)
            .map_err(|e| malformed(review_file, line, e.to_string()))?;
        let item = ItemId::new(take_string(review_file, line, &mut obj, "item_id")?)
            .map_err(|e| malformed(review_file, line, e.to_string()))?;
        let timestamp = match obj.remove("timestamp") {
            Some(Value::Number(n)) => n
                .as_i64()
                .ok_or_else(|| malformed(review_file, line, "`timestamp` must be an integer".into()))?,
            Some(_) => return Err(malformed(review_file, line, "`timestamp` must be an integer".into())),
            None => return Err(malformed(review_file, line, "missing `timestamp`".into())),
        };
        let rating = match obj.remove("rating") {
            None | Some(Value::Null) => None,
            Some(Value::Number(n)) => n.as_f64(),
            Some(_) => return Err(malformed(review_file, line, "`rating` must be a number".into())),
        };
        let review_text = match obj.remove("review_text") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(malformed(review_file, line, "`review_text` must be a string".into())),
        };
        corpus.push_interaction(
            review_file,
            line,
            Interaction { user, item, timestamp, rating, review_text },
        )?;
    }
    corpus.finish()
}

/// Splits off the last interaction as ground truth. The history ends strictly
/// before the user's first interaction with the ground-truth item.
pub fn holdout_split(corpus: &Corpus, user: &UserId) -> Result<(Vec<Interaction>, ItemId), CorpusError> {
    let seq = corpus.sequence(user);
    if seq.len() < 2 {
        return Err(CorpusError::SequenceTooShort(user.clone()));
    }
    let ground_truth = seq[seq.len() - 1].item.clone();
    let cut = seq
        .iter()
        .position(|i| i.item == ground_truth)
        .expect("ground truth occurs in its own sequence");
    Ok((seq[..cut].to_vec(), ground_truth))
}

/// Drops the sequences of every user in `test_users`. User metadata stays.
pub fn exclude_test_users(corpus: &Corpus, test_users: &BTreeSet<UserId>) -> Corpus {
    let mut out = corpus.clone();
    out.sequences.retain(|user, _| !test_users.contains(user));
    out
}
