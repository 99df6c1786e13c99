//! Offline translation of collaborative neighbor sets into natural-language
//! evidence, cached so that online tool calls are plain lookups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::gateway::{ChatGateway, ChatMessage, ChatRequest, GatewayError, Sampling};
use crate::graph::{GraphError, InteractionGraph, ScoredNeighbor, Similarity, DEFAULT_NEIGHBORS};
use crate::ids::{ItemId, UserId};
use crate::io::{read_jsonl, write_jsonl, RecordError};
use crate::render;
use crate::template::{TemplateError, TemplateName, TemplateSet};

/// Evidence text for an anchor with no collaborative neighbors.
pub const NO_NEIGHBORS_TEXT: &str = "no collaborative neighbors found";
/// Tool response when the cache has no entry and on-demand verbalization is off.
pub const CACHE_MISS_TEXT: &str = "no precomputed collaborative evidence available";

pub const DEFAULT_POOL_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CfTool {
    #[serde(rename = "ItemCF")]
    ItemCf,
    #[serde(rename = "UserCF")]
    UserCf,
}

impl CfTool {
    pub fn as_str(self) -> &'static str {
        match self {
            CfTool::ItemCf => "ItemCF",
            CfTool::UserCf => "UserCF",
        }
    }

    /// Argument key the tool expects in a call.
    pub fn argument_key(self) -> &'static str {
        match self {
            CfTool::ItemCf => "item_id",
            CfTool::UserCf => "user_id",
        }
    }
}

impl fmt::Display for CfTool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cache key. The variant fixes both the tool and the anchor kind.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvidenceKey {
    Item(ItemId),
    User(UserId),
}

impl EvidenceKey {
    pub fn tool(&self) -> CfTool {
        match self {
            EvidenceKey::Item(_) => CfTool::ItemCf,
            EvidenceKey::User(_) => CfTool::UserCf,
        }
    }

    pub fn anchor(&self) -> &str {
        match self {
            EvidenceKey::Item(id) => id.as_str(),
            EvidenceKey::User(id) => id.as_str(),
        }
    }

    pub fn from_parts(tool: CfTool, anchor: &str) -> Result<Self, crate::ids::EmptyIdError> {
        Ok(match tool {
            CfTool::ItemCf => EvidenceKey::Item(ItemId::new(anchor)?),
            CfTool::UserCf => EvidenceKey::User(UserId::new(anchor)?),
        })
    }

    /// Every anchor the graph can answer for: all items, then all users.
    pub fn all(graph: &InteractionGraph) -> Vec<EvidenceKey> {
        graph
            .item_adj()
            .keys()
            .cloned()
            .map(EvidenceKey::Item)
            .chain(graph.user_adj().keys().cloned().map(EvidenceKey::User))
            .collect()
    }
}

impl fmt::Display for EvidenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.tool(), self.anchor())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    pub key: EvidenceKey,
    pub text: String,
    /// Item-CF: the neighbor items. User-CF: the neighbor item pool shown to
    /// the summarizer.
    pub source_neighbors: Vec<ScoredNeighbor<String>>,
    pub created_at: i64,
}

impl Evidence {
    /// Corpus item ids named on `Representative Items:` lines that are not
    /// among the source neighbors.
    pub fn stray_representatives(&self, corpus: &Corpus) -> Vec<String> {
        let sources: BTreeSet<&str> = self.source_neighbors.iter().map(|n| n.id.as_str()).collect();
        let mut stray = Vec::new();
        for line in self.text.lines() {
            let Some((_, tail)) = line.split_once("Representative Items:") else {
                continue;
            };
            for token in tail.split(|c: char| c == ',' || c == ';' || c.is_whitespace()) {
                let token = token.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '-');
                if token.is_empty() || sources.contains(token) {
                    continue;
                }
                if let Ok(id) = ItemId::new(token) {
                    if corpus.item(&id).is_some() && !stray.iter().any(|s| s == token) {
                        stray.push(token.to_string());
                    }
                }
            }
        }
        stray
    }
}

#[derive(Serialize, Deserialize)]
struct EvidenceRecord {
    tool: CfTool,
    anchor: String,
    created_at: i64,
    source_neighbors: Vec<ScoredNeighbor<String>>,
    text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] RecordError),
    #[error("cache file {path}: {reason}")]
    Invalid { path: String, reason: String },
}

/// Result of a cache lookup. A miss is an ordinary outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup<'a> {
    Hit(&'a Evidence),
    CacheMiss,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvidenceCache {
    entries: BTreeMap<EvidenceKey, Evidence>,
}

impl EvidenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &EvidenceKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn lookup(&self, key: &EvidenceKey) -> Lookup<'_> {
        match self.entries.get(key) {
            Some(e) => Lookup::Hit(e),
            None => Lookup::CacheMiss,
        }
    }

    /// Replaces any existing entry for the same key.
    pub fn insert(&mut self, evidence: Evidence) {
        self.entries.insert(evidence.key.clone(), evidence);
    }

    pub fn entries(&self) -> impl Iterator<Item = &Evidence> {
        self.entries.values()
    }

    /// Records sorted by key, one per line.
    pub fn save(&self, path: &Path) -> Result<(), CacheError> {
        let records: Vec<EvidenceRecord> = self
            .entries
            .values()
            .map(|e| EvidenceRecord {
                tool: e.key.tool(),
                anchor: e.key.anchor().to_string(),
                created_at: e.created_at,
                source_neighbors: e.source_neighbors.clone(),
                text: e.text.clone(),
            })
            .collect();
        Ok(write_jsonl(path, &records)?)
    }

    pub fn load(path: &Path) -> Result<Self, CacheError> {
        let records: Vec<EvidenceRecord> = read_jsonl(path)?;
        let mut cache = Self::new();
        for r in records {
            let invalid = |reason: String| CacheError::Invalid { path: path.display().to_string(), reason };
            let key = EvidenceKey::from_parts(r.tool, &r.anchor).map_err(|e| invalid(e.to_string()))?;
            if r.text.is_empty() {
                return Err(invalid(format!("empty evidence text for {key}")));
            }
            if cache.contains(&key) {
                return Err(invalid(format!("duplicate entry for {key}")));
            }
            cache.insert(Evidence { key, text: r.text, source_neighbors: r.source_neighbors, created_at: r.created_at });
        }
        Ok(cache)
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn load_or_empty(path: &Path) -> Result<Self, CacheError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }
}

/// What a tool call does when its key is absent from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    #[default]
    Fallback,
    Verbalize,
}

#[derive(Debug, thiserror::Error)]
pub enum VerbalizeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("reply has no <Answer>...</Answer> envelope")]
    MissingAnswerTags,
    #[error("reply has an empty <Answer> envelope")]
    EmptyAnswer,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub struct Verbalizer<'a> {
    graph: &'a InteractionGraph,
    corpus: &'a Corpus,
    templates: &'a TemplateSet,
    pub k_items: usize,
    pub k_users: usize,
    /// Maximum number of pool items shown to the User-CF summarizer.
    pub pool_limit: usize,
    pub similarity: Similarity,
    pub sampling: Sampling,
    /// Stamp written into new evidence. Defaults to the corpus' latest
    /// timestamp so repeated runs are byte-identical.
    pub created_at: i64,
}

impl<'a> Verbalizer<'a> {
    pub fn new(graph: &'a InteractionGraph, corpus: &'a Corpus, templates: &'a TemplateSet) -> Self {
        Self {
            graph,
            corpus,
            templates,
            k_items: DEFAULT_NEIGHBORS,
            k_users: DEFAULT_NEIGHBORS,
            pool_limit: DEFAULT_POOL_LIMIT,
            similarity: Similarity::Count,
            sampling: Sampling::default(),
            created_at: corpus.max_timestamp(),
        }
    }

    pub fn graph(&self) -> &InteractionGraph {
        self.graph
    }

    fn fallback(&self, key: EvidenceKey) -> Evidence {
        Evidence { key, text: NO_NEIGHBORS_TEXT.into(), source_neighbors: Vec::new(), created_at: self.created_at }
    }

    fn ask(&self, key: EvidenceKey, system: String, user: String, sources: Vec<ScoredNeighbor<String>>, gateway: &dyn ChatGateway) -> Result<Evidence, VerbalizeError> {
        let label = match key.tool() {
            CfTool::ItemCf => "verbalize:item",
            CfTool::UserCf => "verbalize:user",
        };
        let request = ChatRequest::new(label, vec![ChatMessage::system(system), ChatMessage::user(user)], self.sampling);
        let reply = gateway.complete(&request)?;
        let body = render::last_enveloped(&reply.content, "<Answer>", "</Answer>").ok_or(VerbalizeError::MissingAnswerTags)?;
        if body.is_empty() {
            return Err(VerbalizeError::EmptyAnswer);
        }
        Ok(Evidence { key, text: body.to_string(), source_neighbors: sources, created_at: self.created_at })
    }

    pub fn verbalize_item(&self, anchor: &ItemId, gateway: &dyn ChatGateway) -> Result<Evidence, VerbalizeError> {
        let neighbors = self.graph.item_cf_neighbors_by(anchor, self.k_items, self.similarity)?;
        let key = EvidenceKey::Item(anchor.clone());
        if neighbors.is_empty() {
            return Ok(self.fallback(key));
        }
        let key_def = self.templates.render(TemplateName::ItemKeyDefinition, &[])?;
        let target = render::item_line(anchor, self.corpus.item(anchor));
        let collaborative = render::item_lines(self.corpus, neighbors.iter().map(|n| &n.id));
        let system = self.templates.render(TemplateName::ItemCfSystem, &[])?;
        let user = self.templates.render(
            TemplateName::ItemCfUser,
            &[("item_key_definition", &key_def), ("target_item", &target), ("collaborative_items", &collaborative)],
        )?;
        let sources = neighbors.into_iter().map(|n| ScoredNeighbor { id: n.id.as_str().to_string(), score: n.score }).collect();
        self.ask(key, system, user, sources, gateway)
    }

    pub fn verbalize_user(&self, anchor: &UserId, gateway: &dyn ChatGateway) -> Result<Evidence, VerbalizeError> {
        let mut pool = self.graph.neighbor_item_pool_by(anchor, self.k_users, self.similarity)?;
        pool.truncate(self.pool_limit);
        let key = EvidenceKey::User(anchor.clone());
        if pool.is_empty() {
            return Ok(self.fallback(key));
        }
        let key_def = self.templates.render(TemplateName::ItemKeyDefinition, &[])?;
        let collaborative = render::item_lines(self.corpus, pool.iter().map(|n| &n.id));
        let system = self.templates.render(TemplateName::UserCfSystem, &[])?;
        let user = self.templates.render(
            TemplateName::UserCfUser,
            &[("item_key_definition", &key_def), ("collaborative_items", &collaborative)],
        )?;
        let sources = pool.into_iter().map(|n| ScoredNeighbor { id: n.id.as_str().to_string(), score: n.score }).collect();
        self.ask(key, system, user, sources, gateway)
    }

    pub fn verbalize(&self, key: &EvidenceKey, gateway: &dyn ChatGateway) -> Result<Evidence, VerbalizeError> {
        match key {
            EvidenceKey::Item(id) => self.verbalize_item(id, gateway),
            EvidenceKey::User(id) => self.verbalize_user(id, gateway),
        }
    }

    /// Fills `cache` for every key in `scope` that is not already present.
    /// Gateway calls run on up to `parallel` threads; inserts happen on the
    /// calling thread in key order. Failures are reported per key and do not
    /// stop the remaining keys.
    pub fn warm_cache(&self, cache: &mut EvidenceCache, scope: &[EvidenceKey], gateway: &dyn ChatGateway, parallel: usize) -> WarmReport {
        let mut wanted: Vec<&EvidenceKey> = scope.iter().collect();
        wanted.sort();
        wanted.dedup();
        let todo: Vec<&EvidenceKey> = wanted.iter().copied().filter(|k| !cache.contains(k)).collect();
        let mut report = WarmReport { requested: wanted.len(), already_present: wanted.len() - todo.len(), ..Default::default() };

        let run = || todo.par_iter().map(|k| ((*k).clone(), self.verbalize(k, gateway))).collect::<Vec<_>>();
        let results = match rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        };
        for (key, result) in results {
            match result {
                Ok(evidence) => {
                    let stray = evidence.stray_representatives(self.corpus);
                    if !stray.is_empty() {
                        log::warn!("{key}: representative ids outside the neighbor set: {}", stray.join(", "));
                    }
                    cache.insert(evidence);
                    report.created += 1;
                }
                Err(err) => report.failures.push(WarmFailure { key: key.to_string(), error: err.to_string() }),
            }
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmFailure {
    pub key: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmReport {
    pub requested: usize,
    pub already_present: usize,
    pub created: usize,
    pub failures: Vec<WarmFailure>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Interaction, ItemMeta, UserMeta};
    use crate::gateway::mock::{FnGateway, ScriptedGateway};
    use crate::gateway::{Counted, GatewayErrorKind};

    fn corpus(edges: &[(&str, &str)]) -> Corpus {
        let mut users = BTreeSet::new();
        let mut items = BTreeSet::new();
        let mut interactions = Vec::new();
        for (t, (u, i)) in edges.iter().enumerate() {
            users.insert(u.to_string());
            items.insert(i.to_string());
            interactions.push(Interaction {
                user: UserId::new(*u).unwrap(),
                item: ItemId::new(*i).unwrap(),
                timestamp: 1000 + t as i64,
                rating: Some(4.0),
                review_text: None,
            });
        }
        let users = users.into_iter().map(|u| UserMeta { user: UserId::new(u).unwrap(), attributes: Default::default() }).collect();
        let items = items
            .into_iter()
            .map(|i| ItemMeta { item: ItemId::new(i.clone()).unwrap(), title: format!("Title {i}"), attributes: Default::default() })
            .collect();
        Corpus::from_parts(users, items, interactions).unwrap()
    }

    fn sample() -> Corpus {
        corpus(&[("u1", "a"), ("u1", "b"), ("u2", "a"), ("u2", "c"), ("u3", "d"), ("u4", "e"), ("u4", "d"), ("u5", "z")])
    }

    fn answer(body: &str) -> String {
        format!("thinking...\n<Answer>{body}</Answer>")
    }

    #[test]
    fn item_without_neighbors_gets_fallback_without_calls() {
        let c = sample();
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = Counted::new(ScriptedGateway::new(Vec::<String>::new()));
        let v = Verbalizer::new(&g, &c, &t);
        let e = v.verbalize_item(&ItemId::new("z").unwrap(), &gw).unwrap();
        assert_eq!(e.text, NO_NEIGHBORS_TEXT);
        assert!(e.source_neighbors.is_empty());
        let e = v.verbalize_user(&UserId::new("u5").unwrap(), &gw).unwrap();
        assert_eq!(e.text, NO_NEIGHBORS_TEXT);
        assert_eq!(gw.calls(), 0);
    }

    #[test]
    fn answer_body_is_extracted() {
        let c = sample();
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = ScriptedGateway::new([answer("Category 1: Space opera"), answer("Category 1: Mixed")]);
        let v = Verbalizer::new(&g, &c, &t);
        let e = v.verbalize_item(&ItemId::new("a").unwrap(), &gw).unwrap();
        assert_eq!(e.text, "Category 1: Space opera");
        let ids: Vec<&str> = e.source_neighbors.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        let e = v.verbalize_user(&UserId::new("u1").unwrap(), &gw).unwrap();
        assert_eq!(e.text, "Category 1: Mixed");
        assert_eq!(e.source_neighbors[0].id, "c");

        let reqs = gw.requests();
        assert_eq!(reqs[0].label, "verbalize:item");
        assert!(reqs[0].messages[0].content.contains("collaborative filtering result summarization agent"));
        assert!(reqs[0].messages[1].content.contains("# Target Item\nitem_id: a, title: Title a"));
        assert!(reqs[0].messages[1].content.contains("item_id: b, title: Title b\nitem_id: c"));
        assert!(reqs[1].messages[0].content.contains("preference items"));
    }

    #[test]
    fn missing_answer_tags_is_an_error() {
        let c = sample();
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = ScriptedGateway::new(["Category 1: no envelope"]);
        let v = Verbalizer::new(&g, &c, &t);
        assert!(matches!(v.verbalize_item(&ItemId::new("a").unwrap(), &gw), Err(VerbalizeError::MissingAnswerTags)));
    }

    #[test]
    fn unknown_anchor_is_reported() {
        let c = sample();
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = ScriptedGateway::new(Vec::<String>::new());
        let v = Verbalizer::new(&g, &c, &t);
        assert!(matches!(
            v.verbalize_item(&ItemId::new("nope").unwrap(), &gw),
            Err(VerbalizeError::Graph(GraphError::UnknownItem(_)))
        ));
    }

    #[test]
    fn warm_cache_calls_once_per_user_and_is_idempotent() {
        let c = corpus(&[("u1", "a"), ("u1", "b"), ("u2", "a"), ("u2", "c"), ("u3", "b"), ("u3", "d"), ("u4", "c"), ("u4", "e"), ("u5", "d"), ("u5", "a")]);
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = Counted::new(FnGateway::new(|_r: &ChatRequest| Ok(answer("Category 1: x"))));
        let v = Verbalizer::new(&g, &c, &t);
        let users: Vec<EvidenceKey> = g.user_adj().keys().cloned().map(EvidenceKey::User).collect();
        assert_eq!(users.len(), 5);
        let mut cache = EvidenceCache::new();
        let report = v.warm_cache(&mut cache, &users, &gw, 2);
        assert_eq!(gw.calls(), 5);
        assert_eq!(report.created, 5);
        let again = v.warm_cache(&mut cache, &users, &gw, 2);
        assert_eq!(gw.calls(), 5);
        assert_eq!(again.already_present, 5);
        assert_eq!(again.created, 0);
    }

    #[test]
    fn partial_failure_keeps_successes() {
        let c = sample();
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = FnGateway::new(|r: &ChatRequest| {
            if r.messages[1].content.contains("# Target Item\nitem_id: b") {
                Err(GatewayError::new(GatewayErrorKind::Rejected, "boom"))
            } else {
                Ok(answer("Category 1: ok"))
            }
        });
        let v = Verbalizer::new(&g, &c, &t);
        let keys: Vec<EvidenceKey> = ["a", "b", "c"].iter().map(|i| EvidenceKey::Item(ItemId::new(*i).unwrap())).collect();
        let mut cache = EvidenceCache::new();
        let report = v.warm_cache(&mut cache, &keys, &gw, 3);
        assert_eq!(cache.len(), 2);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].key, "ItemCF(b)");
        assert_eq!(cache.lookup(&keys[1]), Lookup::CacheMiss);
    }

    #[test]
    fn full_warm_hits_every_anchor_and_survives_reload() {
        let c = sample();
        let g = InteractionGraph::build(&c).unwrap();
        let t = TemplateSet::builtin();
        let gw = FnGateway::new(|r: &ChatRequest| Ok(answer(&format!("Category 1: {}", r.messages[1].content.len()))));
        let v = Verbalizer::new(&g, &c, &t);
        let all = EvidenceKey::all(&g);
        let mut cache = EvidenceCache::new();
        let report = v.warm_cache(&mut cache, &all, &gw, 4);
        assert!(report.failures.is_empty());
        for key in &all {
            assert!(matches!(cache.lookup(key), Lookup::Hit(e) if &e.key == key));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache.save(&path).unwrap();
        let loaded = EvidenceCache::load(&path).unwrap();
        assert_eq!(loaded, cache);
        let first = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn stray_representatives_are_detected() {
        let c = sample();
        let e = Evidence {
            key: EvidenceKey::Item(ItemId::new("a").unwrap()),
            text: "Category 1: x\nRepresentative Items: b, d\nRepresentative Items: unknown".into(),
            source_neighbors: vec![ScoredNeighbor { id: "b".into(), score: 1 }],
            created_at: 0,
        };
        assert_eq!(e.stray_representatives(&c), ["d"]);
    }
}
