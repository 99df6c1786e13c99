//! Stage functions shared by the command line and the Python bindings.
//! Each takes loaded inputs and returns records; file handling stays with
//! the caller.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstractor::{Abstractor, HybridHistory};
use crate::corpus::Corpus;
use crate::evaluator::{self, EvalError, EvalInstance, EvalReport, Scenario, BEST_OF_KS};
use crate::gateway::{ChatGateway, Sampling};
use crate::ids::ItemId;
use crate::orchestrator::{instance_prompt, PhaseError, SessionError, SessionLog, Teacher, TeacherScript};
use crate::render;
use crate::rewards::{self, bucket, Bucketed, DifficultyBucket, RewardBreakdown, RewardError, Thirds};
use crate::template::TemplateSet;
use crate::trajectory::{self, FilterReport};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("no instance with id `{0}`")]
    UnknownInstance(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("could not build thread pool: {0}")]
    ThreadPool(String),
}

/// Where teacher replies come from.
#[derive(Clone, Copy)]
pub enum Backend<'a> {
    /// Deterministic script, bound to each instance in turn.
    Script(&'a TeacherScript),
    Gateway(&'a dyn ChatGateway),
}

impl Backend<'_> {
    /// Runs `f` with a gateway suited to `instance`.
    pub fn with<R>(&self, instance: Option<&EvalInstance>, f: impl FnOnce(&dyn ChatGateway) -> R) -> R {
        match self {
            Backend::Script(script) => f(&script.bind(instance)),
            Backend::Gateway(gw) => f(*gw),
        }
    }
}

pub fn thread_pool(parallel: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))
}

/// Runs `samples` teacher sessions per instance, `parallel` at a time.
/// Results come back instance-major in input order. Sample `s` of a run
/// seeded `seed` uses sampling seed `seed + s` when `seed` is set.
pub fn run_teacher(
    teacher: &Teacher<'_>,
    instances: &[EvalInstance],
    backend: Backend<'_>,
    samples: usize,
    seed: Option<u64>,
    parallel: usize,
) -> Result<Vec<Result<SessionLog, SessionError>>, PipelineError> {
    let jobs: Vec<(&EvalInstance, usize)> =
        instances.iter().flat_map(|inst| (0..samples).map(move |s| (inst, s))).collect();
    let pool = thread_pool(parallel)?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(inst, s)| {
                let mut config = teacher.config;
                config.sampling.seed = seed.map(|base| base.wrapping_add(s as u64));
                let sampled = (*teacher).with_config(config);
                backend.with(Some(inst), |gw| sampled.run(inst, gw))
            })
            .collect()
    }))
}

/// Keeps sessions whose serialized trajectory ranks the ground truth first.
pub fn filter_sessions(logs: &[SessionLog]) -> FilterReport {
    let texts: Vec<String> = logs.iter().map(trajectory::serialize).collect();
    let pairs: Vec<(&str, &ItemId)> = texts.iter().zip(logs).map(|(t, l)| (t.as_str(), &l.ground_truth)).collect();
    trajectory::outcome_filter(&pairs)
}

/// A free-standing trajectory, e.g. a policy rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub instance_id: String,
    pub text: String,
}

/// Input line for reward scoring: a bare trajectory or a whole session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreInput {
    Trajectory(TrajectoryRecord),
    Session(Box<SessionLog>),
}

impl ScoreInput {
    pub fn into_record(self) -> TrajectoryRecord {
        match self {
            ScoreInput::Trajectory(t) => t,
            ScoreInput::Session(log) => {
                TrajectoryRecord { instance_id: log.instance_id.clone(), text: trajectory::serialize(&log) }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub instance_id: String,
    pub r_fmt: Thirds,
    pub r_out: Thirds,
    pub total: Thirds,
}

fn index(instances: &[EvalInstance]) -> BTreeMap<&str, &EvalInstance> {
    instances.iter().map(|i| (i.id.as_str(), i)).collect()
}

pub fn score_trajectories(
    records: &[TrajectoryRecord],
    instances: &[EvalInstance],
) -> Result<Vec<ScoredTrajectory>, PipelineError> {
    let by_id = index(instances);
    records
        .iter()
        .map(|r| {
            let inst = by_id.get(r.instance_id.as_str()).ok_or_else(|| PipelineError::UnknownInstance(r.instance_id.clone()))?;
            let RewardBreakdown { r_fmt, r_out, total } = rewards::composite_reward(&r.text, &inst.ground_truth);
            Ok(ScoredTrajectory { instance_id: r.instance_id.clone(), r_fmt, r_out, total })
        })
        .collect()
}

/// The prompt a single-model policy answers: the instance prompt over the
/// hybrid history, abstracting long histories first.
pub fn policy_prompt(
    templates: &TemplateSet,
    corpus: &Corpus,
    instance: &EvalInstance,
    window: std::num::NonZeroUsize,
    sampling: Sampling,
    gateway: &dyn ChatGateway,
) -> Result<String, PhaseError> {
    let hybrid = if instance.history.len() > window.get() {
        let mut abstractor = Abstractor::new(templates, window);
        abstractor.sampling = sampling;
        let info = render::user_info(&instance.user, corpus.user(&instance.user));
        abstractor.abstract_for(corpus, &info, &instance.history, gateway)?
    } else {
        HybridHistory { long_term_summary: String::new(), recent_raw: instance.history.clone(), window_size_m: window.get() }
    };
    Ok(instance_prompt(templates, corpus, instance, &hybrid)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub instance_id: String,
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSummary {
    /// Instance ids per bucket, in rollout order.
    pub buckets: BTreeMap<DifficultyBucket, Vec<String>>,
    pub excluded: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

/// Buckets each instance by its number of top-1 hits among its rollouts.
pub fn bucket_rollouts(rollouts: &[RolloutRecord], instances: &[EvalInstance]) -> Result<BucketSummary, PipelineError> {
    let by_id = index(instances);
    let mut summary = BucketSummary::default();
    for r in rollouts {
        let inst = by_id.get(r.instance_id.as_str()).ok_or_else(|| PipelineError::UnknownInstance(r.instance_id.clone()))?;
        let count = r.replies.iter().filter(|reply| rewards::is_success(reply, &inst.ground_truth)).count();
        summary.counts.insert(r.instance_id.clone(), count);
        match bucket(count, r.replies.len())? {
            Bucketed::Bucket(b) => summary.buckets.entry(b).or_default().push(r.instance_id.clone()),
            Bucketed::Excluded => summary.excluded.push(r.instance_id.clone()),
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Scored on each instance's first session.
    pub report: EvalReport,
    /// Oracle best-of-k over repeated sessions, for every k the samples
    /// allow.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub best_of_k: BTreeMap<usize, EvalReport>,
    /// Instances without any session.
    pub missing: Vec<String>,
}

pub fn evaluate_sessions(logs: &[SessionLog], instances: &[EvalInstance]) -> Result<EvalSummary, PipelineError> {
    let known: BTreeSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    if let Some(stray) = logs.iter().find(|l| !known.contains(l.instance_id.as_str())) {
        return Err(PipelineError::UnknownInstance(stray.instance_id.clone()));
    }
    let mut samples: BTreeMap<&str, Vec<Vec<ItemId>>> = BTreeMap::new();
    for l in logs {
        samples.entry(l.instance_id.as_str()).or_default().push(l.final_ranking.clone());
    }
    let mut missing = Vec::new();
    let mut scored: Vec<(&[Vec<ItemId>], &ItemId)> = Vec::new();
    let mut scenarios: BTreeSet<Scenario> = BTreeSet::new();
    for inst in instances {
        match samples.get(inst.id.as_str()) {
            Some(s) => {
                scored.push((s.as_slice(), &inst.ground_truth));
                scenarios.insert(inst.scenario);
            }
            None => missing.push(inst.id.clone()),
        }
    }
    let firsts: Vec<(&[ItemId], &ItemId)> = scored.iter().map(|(s, gt)| (s[0].as_slice(), *gt)).collect();
    let scenario = if scenarios.len() == 1 { scenarios.first().copied() } else { None };
    let report = evaluator::evaluate(&firsts)?.with_scenario(scenario);
    let fewest = scored.iter().map(|(s, _)| s.len()).min().unwrap_or(0);
    let ks: Vec<usize> = BEST_OF_KS.iter().copied().filter(|&k| k <= fewest).collect();
    let best_of_k = if fewest > 1 {
        evaluator::best_of_k(&scored, &ks)?.into_iter().map(|(k, r)| (k, r.with_scenario(scenario))).collect()
    } else {
        BTreeMap::new()
    };
    Ok(EvalSummary { report, best_of_k, missing })
}

/// Plain-text table of a summary.
pub fn report_table(summary: &EvalSummary) -> String {
    let mut out = String::new();
    let scenario = summary.report.scenario.map_or("mixed", Scenario::as_str);
    out.push_str(&format!("scenario {scenario}, n = {}\n", summary.report.n));
    out.push_str("k'     HR@1    HR@3    HR@5    HR_avg\n");
    let mut row = |label: String, r: &EvalReport| {
        out.push_str(&format!(
            "{label:<6} {:.4}  {:.4}  {:.4}  {:.4}\n",
            r.per_k[&1], r.per_k[&3], r.per_k[&5], r.hr_avg
        ));
    };
    row("-".into(), &summary.report);
    for (k, r) in &summary.best_of_k {
        row(k.to_string(), r);
    }
    if !summary.best_of_k.is_empty() {
        out.push_str("(k' rows: oracle best-of-k)\n");
    }
    if !summary.missing.is_empty() {
        out.push_str(&format!("{} instances had no session\n", summary.missing.len()));
    }
    out
}
