//! Rollout rewards (format plus tiered outcome, in exact thirds) and the
//! difficulty bucketing used to compose the RL instance set.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{sample_group, ChatGateway, ChatMessage, ChatRequest, GatewayError, Sampling};
use crate::ids::ItemId;
use crate::orchestrator::decode_tool_block;
use crate::template::{TemplateError, TemplateName, TemplateSet};
use crate::trajectory::{self, ParsedTrajectory};

pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const DEFAULT_RL_TARGET: usize = 500;
pub const DEFAULT_RATIO: [u32; 3] = [3, 4, 3];

/// An exact multiple of one third.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Thirds(pub i32);

impl Thirds {
    pub const ZERO: Thirds = Thirds(0);
    pub const ONE: Thirds = Thirds(3);
    pub const MINUS_ONE: Thirds = Thirds(-3);

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 3.0
    }
}

impl Add for Thirds {
    type Output = Thirds;
    fn add(self, rhs: Thirds) -> Thirds {
        Thirds(self.0 + rhs.0)
    }
}

impl fmt::Display for Thirds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 3 == 0 {
            write!(f, "{}", self.0 / 3)
        } else {
            write!(f, "{}/3", self.0)
        }
    }
}

impl FromStr for Thirds {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("`{s}` is not a multiple of 1/3");
        match s.trim().split_once('/') {
            Some((num, "3")) => num.trim().parse().map(Thirds).map_err(|_| bad()),
            Some(_) => Err(bad()),
            None => s.trim().parse::<i32>().map(|n| Thirds(n * 3)).map_err(|_| bad()),
        }
    }
}

impl Serialize for Thirds {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Thirds {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: Thirds,
    pub r_out: Thirds,
    pub total: Thirds,
}

fn well_formed(parsed: &ParsedTrajectory) -> bool {
    ["plan", "reflection", "recommend"].iter().all(|t| parsed.has_section(t))
        && parsed
            .sections
            .iter()
            .flat_map(|s| &s.tool_exchanges)
            .all(|ex| decode_tool_block(&ex.call).is_ok())
}

/// +1 when the text parses, has plan, reflection and recommend sections and
/// every tool call is valid JSON naming a known tool; otherwise -1.
pub fn format_reward(text: &str) -> Thirds {
    match trajectory::parse(text) {
        Ok(parsed) if well_formed(&parsed) => Thirds::ONE,
        _ => Thirds::MINUS_ONE,
    }
}

/// 1 for the ground truth on top, 2/3 at ranks 2-3, 1/3 at ranks 4-5,
/// 0 otherwise.
pub fn outcome_reward(ranking: &[ItemId], ground_truth: &ItemId) -> Thirds {
    match ranking.iter().position(|id| id == ground_truth) {
        Some(0) => Thirds(3),
        Some(1 | 2) => Thirds(2),
        Some(3 | 4) => Thirds(1),
        _ => Thirds::ZERO,
    }
}

pub fn composite_reward(text: &str, ground_truth: &ItemId) -> RewardBreakdown {
    let parsed = trajectory::parse(text).ok();
    let r_fmt = match &parsed {
        Some(p) if well_formed(p) => Thirds::ONE,
        _ => Thirds::MINUS_ONE,
    };
    let r_out = parsed.map_or(Thirds::ZERO, |p| outcome_reward(&p.ranking, ground_truth));
    RewardBreakdown { r_fmt, r_out, total: r_fmt + r_out }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyBucket {
    Easy,
    Medium,
    Hard,
}

impl DifficultyBucket {
    pub const ALL: [DifficultyBucket; 3] = [DifficultyBucket::Easy, DifficultyBucket::Medium, DifficultyBucket::Hard];
}

impl fmt::Display for DifficultyBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyBucket::Easy => "easy",
            DifficultyBucket::Medium => "medium",
            DifficultyBucket::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucketed {
    Bucket(DifficultyBucket),
    /// Never or always solved: no learning signal.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewardError {
    #[error("success count {count} out of range 0..={g}")]
    CountOutOfRange { count: usize, g: usize },
    #[error("group size must be positive")]
    EmptyGroup,
    #[error("bucket {bucket} needs {needed} instances but has {available}")]
    InsufficientBucket { bucket: DifficultyBucket, needed: usize, available: usize },
    #[error("ratio {0:?} sums to zero")]
    ZeroRatio([u32; 3]),
}

/// 1-2 successes are hard, 3-5 medium, 6 or more easy. 0 and `g` are
/// excluded.
pub fn bucket(success_count: usize, g: usize) -> Result<Bucketed, RewardError> {
    if g == 0 {
        return Err(RewardError::EmptyGroup);
    }
    if success_count > g {
        return Err(RewardError::CountOutOfRange { count: success_count, g });
    }
    Ok(match success_count {
        0 => Bucketed::Excluded,
        c if c == g => Bucketed::Excluded,
        1 | 2 => Bucketed::Bucket(DifficultyBucket::Hard),
        3..=5 => Bucketed::Bucket(DifficultyBucket::Medium),
        _ => Bucketed::Bucket(DifficultyBucket::Easy),
    })
}

/// Per-bucket quotas summing to `target`, split by largest remainder. Ties
/// go to the earlier bucket (easy, medium, hard).
pub fn quotas(target: usize, ratio: [u32; 3]) -> Result<[usize; 3], RewardError> {
    let sum: u64 = ratio.iter().map(|&r| u64::from(r)).sum();
    if sum == 0 {
        return Err(RewardError::ZeroRatio(ratio));
    }
    let target = target as u64;
    let mut out = [0usize; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        let share = target * u64::from(ratio[i]);
        out[i] = (share / sum) as usize;
        rems[i] = share % sum;
    }
    let mut left = target as usize - out.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&i| std::cmp::Reverse(rems[i]));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    Ok(out)
}

/// Seeded sample without replacement of each bucket's quota, concatenated
/// easy, medium, hard. Each sample keeps its bucket's input order.
pub fn compose_rl_set<T: Clone>(
    buckets: &BTreeMap<DifficultyBucket, Vec<T>>,
    target_total: usize,
    ratio: [u32; 3],
    seed: u64,
) -> Result<Vec<T>, RewardError> {
    let quotas = quotas(target_total, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target_total);
    for (bucket, needed) in DifficultyBucket::ALL.into_iter().zip(quotas) {
        let pool = buckets.get(&bucket).map(Vec::as_slice).unwrap_or_default();
        if pool.len() < needed {
            return Err(RewardError::InsufficientBucket { bucket, needed, available: pool.len() });
        }
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), needed).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{} of {g} rollouts failed; first: {}", failures.len(), failures[0].1)]
    Failed { g: usize, failures: Vec<(usize, GatewayError)> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollouts {
    pub count: usize,
    pub replies: Vec<String>,
}

/// Top-1 hit, the success criterion for bucketing.
pub fn is_success(reply: &str, ground_truth: &ItemId) -> bool {
    trajectory::parse(reply).is_ok_and(|p| p.ranking.first() == Some(ground_truth))
}

/// Samples `g` policy completions for one instance prompt and counts top-1
/// hits. Any failed sample fails the whole group.
pub fn success_count(
    templates: &TemplateSet,
    policy_prompt: &str,
    ground_truth: &ItemId,
    g: usize,
    gateway: &dyn ChatGateway,
    sampling: Sampling,
) -> Result<Rollouts, RolloutError> {
    let system = templates.render(TemplateName::IntegratedSystem, &[])?;
    let messages = vec![ChatMessage::system(system), ChatMessage::user(policy_prompt)];
    let request = ChatRequest::new("rollout", messages, sampling);
    let results = sample_group(gateway, &request, g)?;
    let mut replies = Vec::with_capacity(g);
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(reply) => replies.push(reply.content),
            Err(e) => failures.push((i, e)),
        }
    }
    if !failures.is_empty() {
        return Err(RolloutError::Failed { g, failures });
    }
    let count = replies.iter().filter(|r| is_success(r, ground_truth)).count();
    Ok(Rollouts { count, replies })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    #[test]
    fn thirds_text_round_trips() {
        for n in -6..=6 {
            let t = Thirds(n);
            assert_eq!(t.to_string().parse::<Thirds>().unwrap(), t);
        }
        assert_eq!(Thirds(5).to_string(), "5/3");
        assert_eq!(Thirds(-3).to_string(), "-1");
        assert!("1/2".parse::<Thirds>().is_err());
        assert_eq!(serde_json::to_string(&Thirds(2)).unwrap(), "\"2/3\"");
    }

    #[test]
    fn outcome_tiers() {
        let ranking: Vec<ItemId> = (0..8).map(|i| id(&format!("i{i}"))).collect();
        let tiers: Vec<i32> = (0..8).map(|i| outcome_reward(&ranking, &id(&format!("i{i}"))).0).collect();
        assert_eq!(tiers, [3, 2, 2, 1, 1, 0, 0, 0]);
        assert_eq!(outcome_reward(&[], &id("x")), Thirds::ZERO);
    }

    #[test]
    fn bucket_table() {
        let got: Vec<Bucketed> = (0..=8).map(|c| bucket(c, 8).unwrap()).collect();
        use Bucketed::*;
        use DifficultyBucket::*;
        assert_eq!(
            got,
            [
                Excluded,
                Bucket(Hard),
                Bucket(Hard),
                Bucket(Medium),
                Bucket(Medium),
                Bucket(Medium),
                Bucket(Easy),
                Bucket(Easy),
                Excluded
            ]
        );
        assert_eq!(bucket(9, 8), Err(RewardError::CountOutOfRange { count: 9, g: 8 }));
        assert_eq!(bucket(0, 0), Err(RewardError::EmptyGroup));
    }

    #[test]
    fn largest_remainder_quotas() {
        assert_eq!(quotas(500, DEFAULT_RATIO).unwrap(), [150, 200, 150]);
        assert_eq!(quotas(10, DEFAULT_RATIO).unwrap(), [3, 4, 3]);
        assert_eq!(quotas(11, DEFAULT_RATIO).unwrap(), [3, 5, 3]);
        assert_eq!(quotas(2, [1, 1, 1]).unwrap(), [1, 1, 0]);
        assert!(quotas(5, [0, 0, 0]).is_err());
    }

    #[test]
    fn compose_is_seeded_and_checks_sizes() {
        let buckets: BTreeMap<_, _> =
            DifficultyBucket::ALL.into_iter().map(|b| (b, (0..10).map(|i| format!("{b}{i}")).collect())).collect();
        let a = compose_rl_set(&buckets, 10, DEFAULT_RATIO, 7).unwrap();
        assert_eq!(a, compose_rl_set(&buckets, 10, DEFAULT_RATIO, 7).unwrap());
        assert_eq!(a.iter().filter(|s| s.starts_with("easy")).count(), 3);
        assert_eq!(a.iter().filter(|s| s.starts_with("medium")).count(), 4);
        assert!(a[..3].iter().all(|s| s.starts_with("easy")));
        let err = compose_rl_set(&buckets, 40, DEFAULT_RATIO, 7).unwrap_err();
        assert_eq!(err, RewardError::InsufficientBucket { bucket: DifficultyBucket::Easy, needed: 12, available: 10 });
    }
}
