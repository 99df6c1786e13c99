//! User-item bipartite interaction graph and the two collaborative
//! traversals behind the CF tools (Item→User→Item, User→Item→User).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::ids::{ItemId, UserId};
use crate::io::{read_lines, write_atomic, RecordError};

pub const DEFAULT_NEIGHBORS: usize = 10;

const GRAPH_FORMAT: &str = "trajrec-graph";
const GRAPH_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("cannot build a graph from an empty corpus")]
    EmptyCorpus,
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("graph file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] RecordError),
}

/// A neighbor with its co-occurrence count (always at least 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredNeighbor<Id> {
    pub id: Id,
    pub score: u32,
}

/// Ranking statistic for neighbor queries. The reported `score` is the raw
/// co-occurrence count in both modes; `Jaccard` only changes the order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Count,
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionGraph {
    user_adj: BTreeMap<UserId, BTreeSet<ItemId>>,
    item_adj: BTreeMap<ItemId, BTreeSet<UserId>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    users: usize,
    items: usize,
    edges: usize,
}

impl InteractionGraph {
    /// One edge per distinct (user, item) pair.
    pub fn build(corpus: &Corpus) -> Result<Self, GraphError> {
        if corpus.interaction_count() == 0 {
            return Err(GraphError::EmptyCorpus);
        }
        Ok(Self::from_edges(
            corpus.interactions().map(|i| (i.user.clone(), i.item.clone())),
        ))
    }

    pub fn from_edges(edges: impl IntoIterator<Item = (UserId, ItemId)>) -> Self {
        let mut graph = InteractionGraph::default();
        for (user, item) in edges {
            graph.add_edge(user, item);
        }
        graph
    }

    pub fn add_edge(&mut self, user: UserId, item: ItemId) {
        self.item_adj.entry(item.clone()).or_default().insert(user.clone());
        self.user_adj.entry(user).or_default().insert(item);
    }

    pub fn user_adj(&self) -> &BTreeMap<UserId, BTreeSet<ItemId>> {
        &self.user_adj
    }

    pub fn item_adj(&self) -> &BTreeMap<ItemId, BTreeSet<UserId>> {
        &self.item_adj
    }

    pub fn items_of(&self, user: &UserId) -> Option<&BTreeSet<ItemId>> {
        self.user_adj.get(user)
    }

    pub fn users_of(&self, item: &ItemId) -> Option<&BTreeSet<UserId>> {
        self.item_adj.get(item)
    }

    pub fn edge_count(&self) -> usize {
        self.user_adj.values().map(BTreeSet::len).sum()
    }

    pub fn item_cf_neighbors(&self, anchor: &ItemId, k: usize) -> Result<Vec<ScoredNeighbor<ItemId>>, GraphError> {
        self.item_cf_neighbors_by(anchor, k, Similarity::Count)
    }

    /// Items sharing at least one user with `anchor`, best first.
    pub fn item_cf_neighbors_by(
        &self,
        anchor: &ItemId,
        k: usize,
        similarity: Similarity,
    ) -> Result<Vec<ScoredNeighbor<ItemId>>, GraphError> {
        let users = self
            .item_adj
            .get(anchor)
            .ok_or_else(|| GraphError::UnknownItem(anchor.clone()))?;
        let mut counts: BTreeMap<&ItemId, u32> = BTreeMap::new();
        for user in users {
            for item in &self.user_adj[user] {
                if item != anchor {
                    *counts.entry(item).or_default() += 1;
                }
            }
        }
        let degree = |id: &ItemId| self.item_adj[id].len();
        Ok(top_k(counts, users.len(), degree, similarity, k))
    }

    pub fn user_cf_neighbors(&self, anchor: &UserId, k: usize) -> Result<Vec<ScoredNeighbor<UserId>>, GraphError> {
        self.user_cf_neighbors_by(anchor, k, Similarity::Count)
    }

    /// Users sharing at least one item with `anchor`, best first.
    pub fn user_cf_neighbors_by(
        &self,
        anchor: &UserId,
        k: usize,
        similarity: Similarity,
    ) -> Result<Vec<ScoredNeighbor<UserId>>, GraphError> {
        let items = self
            .user_adj
            .get(anchor)
            .ok_or_else(|| GraphError::UnknownUser(anchor.clone()))?;
        let mut counts: BTreeMap<&UserId, u32> = BTreeMap::new();
        for item in items {
            for user in &self.item_adj[item] {
                if user != anchor {
                    *counts.entry(user).or_default() += 1;
                }
            }
        }
        let degree = |id: &UserId| self.user_adj[id].len();
        Ok(top_k(counts, items.len(), degree, similarity, k))
    }

    /// Items consumed by the `k_users` most similar users that `anchor` has
    /// not interacted with, ordered by how many of those users hold each item.
    pub fn neighbor_item_pool(&self, anchor: &UserId, k_users: usize) -> Result<Vec<ScoredNeighbor<ItemId>>, GraphError> {
        self.neighbor_item_pool_by(anchor, k_users, Similarity::Count)
    }

    /// As [`Self::neighbor_item_pool`], with peers picked by `similarity`.
    pub fn neighbor_item_pool_by(
        &self,
        anchor: &UserId,
        k_users: usize,
        similarity: Similarity,
    ) -> Result<Vec<ScoredNeighbor<ItemId>>, GraphError> {
        let neighbors = self.user_cf_neighbors_by(anchor, k_users, similarity)?;
        let own = &self.user_adj[anchor];
        let mut counts: BTreeMap<&ItemId, u32> = BTreeMap::new();
        for neighbor in &neighbors {
            for item in &self.user_adj[&neighbor.id] {
                if !own.contains(item) {
                    *counts.entry(item).or_default() += 1;
                }
            }
        }
        let mut pool: Vec<ScoredNeighbor<ItemId>> = counts
            .into_iter()
            .map(|(id, score)| ScoredNeighbor { id: id.clone(), score })
            .collect();
        pool.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        Ok(pool)
    }

    /// Header line with counts, then one `[user, [items…]]` line per user in
    /// id order. Item adjacency is rebuilt on load.
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let header = Header {
            format: GRAPH_FORMAT.into(),
            version: GRAPH_VERSION,
            users: self.user_adj.len(),
            items: self.item_adj.len(),
            edges: self.edge_count(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (user, items) in &self.user_adj {
            out.push_str(&serde_json::to_string(&(user, items)).expect("adjacency serializes"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes()).map_err(|e| RecordError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let lines = read_lines(path)?;
        let mut lines = lines.into_iter();
        let (line, text) = lines.next().ok_or(GraphError::Format { line: 1, reason: "missing header".into() })?;
        let header: Header = serde_json::from_str(&text).map_err(|e| GraphError::Format { line, reason: e.to_string() })?;
        if header.format != GRAPH_FORMAT || header.version != GRAPH_VERSION {
            return Err(GraphError::Format {
                line,
                reason: format!("unsupported graph format {} v{}", header.format, header.version),
            });
        }
        let mut graph = InteractionGraph::default();
        for (line, text) in lines {
            let (user, items): (UserId, Vec<ItemId>) =
                serde_json::from_str(&text).map_err(|e| GraphError::Format { line, reason: e.to_string() })?;
            for item in items {
                graph.add_edge(user.clone(), item);
            }
        }
        if graph.user_adj.len() != header.users
            || graph.item_adj.len() != header.items
            || graph.edge_count() != header.edges
        {
            return Err(GraphError::Format {
                line: 1,
                reason: "header counts do not match adjacency lists".into(),
            });
        }
        Ok(graph)
    }
}

/// Orders by descending statistic, then ascending id.
fn top_k<Id: Ord + Clone>(
    counts: BTreeMap<&Id, u32>,
    anchor_degree: usize,
    degree: impl Fn(&Id) -> usize,
    similarity: Similarity,
    k: usize,
) -> Vec<ScoredNeighbor<Id>> {
    let mut scored: Vec<(ScoredNeighbor<Id>, u64)> = counts
        .into_iter()
        .map(|(id, score)| {
            // union size for Jaccard = |A| + |B| - |A∩B|
            let union = (anchor_degree + degree(id)) as u64 - score as u64;
            (ScoredNeighbor { id: id.clone(), score }, union)
        })
        .collect();
    scored.sort_by(|(a, ua), (b, ub)| {
        let primary = match similarity {
            Similarity::Count => b.score.cmp(&a.score),
            // a/ua vs b/ub compared exactly by cross-multiplication
            Similarity::Jaccard => (b.score as u64 * ua).cmp(&(a.score as u64 * ub)),
        };
        match primary {
            Ordering::Equal => b.score.cmp(&a.score).then_with(|| a.id.cmp(&b.id)),
            other => other,
        }
    });
    scored.truncate(k);
    scored.into_iter().map(|(n, _)| n).collect()
}
