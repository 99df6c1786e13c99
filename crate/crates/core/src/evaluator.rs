//! Sampled evaluation: 20-candidate instances, HR@k, HR_avg and oracle
//! best-of-k.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{holdout_split, Corpus, CorpusError, Interaction};
use crate::ids::{ItemId, UserId};

pub const CANDIDATE_COUNT: usize = 20;
pub const HIT_CUTOFFS: [usize; 3] = [1, 3, 5];
pub const BEST_OF_KS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Classic,
    ColdStartUser,
    ColdStartItem,
    EvoLong,
    EvoShort,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::Classic, Scenario::ColdStartUser, Scenario::ColdStartItem, Scenario::EvoLong, Scenario::EvoShort];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Classic => "classic",
            Scenario::ColdStartUser => "cold_start_user",
            Scenario::ColdStartItem => "cold_start_item",
            Scenario::EvoLong => "evo_long",
            Scenario::EvoShort => "evo_short",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

/// Selection filters for the non-classic scenarios. History lengths are
/// measured after truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioThresholds {
    /// ColdStartUser: history shorter than this.
    pub cold_user_history: usize,
    /// ColdStartItem: ground truth consumed by fewer users than this.
    pub cold_item_popularity: usize,
    /// EvoLong: history at least this long. EvoShort covers
    /// `cold_user_history..evo_long_history`.
    pub evo_long_history: usize,
}

impl Default for ScenarioThresholds {
    fn default() -> Self {
        Self { cold_user_history: 5, cold_item_popularity: 5, evo_long_history: 20 }
    }
}

impl ScenarioThresholds {
    pub fn admits(&self, corpus: &Corpus, scenario: Scenario, history: &[Interaction], ground_truth: &ItemId) -> bool {
        let n = history.len();
        match scenario {
            Scenario::Classic => true,
            Scenario::ColdStartUser => n < self.cold_user_history,
            Scenario::ColdStartItem => corpus.item_popularity(ground_truth) < self.cold_item_popularity,
            Scenario::EvoLong => n >= self.evo_long_history,
            Scenario::EvoShort => n >= self.cold_user_history && n < self.evo_long_history,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub user: UserId,
    pub history: Vec<Interaction>,
    pub candidates: Vec<ItemId>,
    pub ground_truth: ItemId,
    pub scenario: Scenario,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("user {user} has only {available} items eligible as negatives, {needed} needed")]
    NotEnoughItems { user: UserId, needed: usize, available: usize },
    #[error("cannot evaluate an empty set of rankings")]
    EmptyInput,
    #[error("instance {index} has {available} samples, best-of-{needed} needs more")]
    InsufficientSamples { index: usize, needed: usize, available: usize },
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Per-user stream derived from the run seed, so instances do not depend on
/// the order users are processed in.
pub fn user_seed(seed: u64, user: &UserId) -> u64 {
    seed ^ fnv1a(user.as_str().as_bytes())
}

/// Holds out the final item, samples 19 negatives uniformly from items the
/// user never touched and shuffles the 20 candidates.
pub fn build_instance(corpus: &Corpus, user: &UserId, scenario: Scenario, seed: u64) -> Result<EvalInstance, EvalError> {
    let (history, ground_truth) = holdout_split(corpus, user)?;
    let touched: BTreeSet<&ItemId> = corpus.sequence(user).iter().map(|i| &i.item).collect();
    let eligible: Vec<&ItemId> = corpus.items().keys().filter(|i| !touched.contains(i)).collect();
    let needed = CANDIDATE_COUNT - 1;
    if eligible.len() < needed {
        return Err(EvalError::NotEnoughItems { user: user.clone(), needed, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed(seed, user));
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), needed);
    let mut candidates: Vec<ItemId> = picked.into_iter().map(|i| eligible[i].clone()).collect();
    candidates.push(ground_truth.clone());
    candidates.shuffle(&mut rng);
    Ok(EvalInstance {
        id: format!("{scenario}-{user}"),
        user: user.clone(),
        history,
        candidates,
        ground_truth,
        scenario,
    })
}

/// Instances for every user admitted by `scenario`, in user order. Users
/// that cannot be split or lack negatives are skipped with a log line.
pub fn build_instances(
    corpus: &Corpus,
    scenario: Scenario,
    thresholds: &ScenarioThresholds,
    seed: u64,
    exclude: &BTreeSet<UserId>,
) -> Vec<EvalInstance> {
    let mut out = Vec::new();
    for user in corpus.sequences().keys() {
        if exclude.contains(user) {
            continue;
        }
        match build_instance(corpus, user, scenario, seed) {
            Ok(inst) if thresholds.admits(corpus, scenario, &inst.history, &inst.ground_truth) => out.push(inst),
            Ok(_) => {}
            Err(err) => log::info!("skipping user {user}: {err}"),
        }
    }
    out
}

pub fn hit_at_k(ranking: &[ItemId], ground_truth: &ItemId, k: usize) -> bool {
    ranking.iter().take(k).any(|i| i == ground_truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Exact hit counts per cutoff.
    pub hits: BTreeMap<usize, usize>,
    pub per_k: BTreeMap<usize, f64>,
    pub hr_avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
}

impl EvalReport {
    fn from_positions(positions: &[Option<usize>]) -> Result<Self, EvalError> {
        if positions.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        let n = positions.len();
        let hits: BTreeMap<usize, usize> = HIT_CUTOFFS
            .iter()
            .map(|&k| (k, positions.iter().filter(|p| matches!(p, Some(i) if *i < k)).count()))
            .collect();
        let per_k = hits.iter().map(|(&k, &h)| (k, h as f64 / n as f64)).collect();
        let total: usize = hits.values().sum();
        let hr_avg = total as f64 / (HIT_CUTOFFS.len() * n) as f64;
        Ok(Self { n, hits, per_k, hr_avg, scenario: None })
    }

    /// HR_avg as an exact fraction (total hits, cutoffs × n).
    pub fn hr_avg_ratio(&self) -> (usize, usize) {
        (self.hits.values().sum(), HIT_CUTOFFS.len() * self.n)
    }

    pub fn with_scenario(mut self, scenario: Option<Scenario>) -> Self {
        self.scenario = scenario;
        self
    }
}

fn position(ranking: &[ItemId], ground_truth: &ItemId) -> Option<usize> {
    ranking.iter().position(|i| i == ground_truth)
}

/// One entry per instance: (ranking, ground truth).
pub fn evaluate(rankings: &[(&[ItemId], &ItemId)]) -> Result<EvalReport, EvalError> {
    let positions: Vec<Option<usize>> = rankings.iter().map(|(r, gt)| position(r, gt)).collect();
    EvalReport::from_positions(&positions)
}

/// For each `k` in `ks`, scores every instance by the best of its first `k`
/// samples (lowest ground-truth index). One entry per instance:
/// (samples, ground truth).
pub fn best_of_k(samples: &[(&[Vec<ItemId>], &ItemId)], ks: &[usize]) -> Result<BTreeMap<usize, EvalReport>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let need = ks.iter().copied().max().unwrap_or(0);
    for (index, (s, _)) in samples.iter().enumerate() {
        if s.len() < need {
            return Err(EvalError::InsufficientSamples { index, needed: need, available: s.len() });
        }
    }
    ks.iter()
        .map(|&k| {
            let positions: Vec<Option<usize>> = samples
                .iter()
                .map(|(s, gt)| s.iter().take(k).filter_map(|r| position(r, gt)).min())
                .collect();
            EvalReport::from_positions(&positions).map(|r| (k, r))
        })
        .collect()
}
