use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use trajrec_core::config::PipelineConfig;
use trajrec_core::corpus::{self, Corpus};
use trajrec_core::evaluator::{self, EvalInstance, Scenario};
use trajrec_core::gateway::{ChatGateway, HttpGateway};
use trajrec_core::graph::InteractionGraph;
use trajrec_core::io::{read_jsonl, write_atomic, write_jsonl};
use trajrec_core::orchestrator::{CfTools, OnMiss, SessionLog, Teacher, TeacherScript};
use trajrec_core::pipeline::{self, Backend, RolloutRecord, ScoreInput, TrajectoryRecord};
use trajrec_core::rewards::{self, DifficultyBucket};
use trajrec_core::template::TemplateSet;
use trajrec_core::trajectory::{self, SftRecord};
use trajrec_core::verbalizer::{EvidenceCache, EvidenceKey, Verbalizer};
use trajrec_core::UserId;

#[derive(Parser)]
#[command(name = "trajrec", version, about = "Teacher pipeline and distillation data tools for agentic recommendation")]
struct Cli {
    /// Pipeline config (TOML). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent instances and in-flight model requests.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Deterministic scripted teacher, no network.
    Mock,
    /// OpenAI-compatible chat completions endpoint from the config.
    Http,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    /// Teacher script for the mock backend (JSON); defaults to an oracle
    /// script that passes reflection.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    All,
    Items,
    Users,
}

#[derive(Subcommand)]
enum Command {
    /// Load the user, item and review tables into a corpus directory.
    Ingest {
        #[arg(long)]
        users: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        reviews: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the user-item graph.
    BuildGraph {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute CF evidence text for graph anchors.
    Verbalize {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
        /// Only anchors these instances can reach: their users, history
        /// items and candidates.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Keep anchors already in the cache instead of regenerating them.
        #[arg(long)]
        only_missing: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Sample evaluation instances (ground truth plus 19 negatives).
    MakeInstances {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "classic")]
        scenario: Scenario,
        /// File with one user id per line to leave out.
        #[arg(long)]
        exclude_users: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run teacher sessions over instances.
    RunTeacher {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sessions per instance, for best-of-k evaluation.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        limit: Option<usize>,
        /// Verbalize cache misses on demand instead of returning the
        /// fallback text.
        #[arg(long)]
        verbalize_misses: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Keep sessions whose top-ranked item is the ground truth.
    Filter {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write SFT records (system, user, assistant) for sessions.
    ExportSft {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trajectories or sessions with format and outcome rewards.
    ScoreRewards {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bucket instances by rollout success and compose the RL set.
    BucketRl {
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Sample the rollouts first (group size from the config) and
        /// write them to --rollouts.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Hit-rate report for sessions.
    Evaluate {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::BuildGraph { .. } => "build-graph",
            Command::Verbalize { .. } => "verbalize",
            Command::MakeInstances { .. } => "make-instances",
            Command::RunTeacher { .. } => "run-teacher",
            Command::Filter { .. } => "filter",
            Command::ExportSft { .. } => "export-sft",
            Command::ScoreRewards { .. } => "score-rewards",
            Command::BucketRl { .. } => "bucket-rl",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
struct RlRecord {
    bucket: DifficultyBucket,
    success_count: usize,
    instance: EvalInstance,
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    instance_id: &'a str,
    stage: &'a str,
    error: String,
}

struct Env {
    config: PipelineConfig,
    templates: TemplateSet,
}

impl Env {
    fn load(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(p) = cli.parallel {
            if p == 0 {
                bail!("--parallel must be positive");
            }
            config.parallel = p;
            config.gateway.max_parallel = p;
        }
        config.validate()?;
        let templates = config.templates()?;
        Ok(Self { config, templates })
    }

    fn corpus(&self, flag: &Option<PathBuf>) -> Result<Corpus> {
        let dir = flag.as_ref().unwrap_or(&self.config.paths.corpus);
        Corpus::read_dir(dir).with_context(|| format!("loading corpus from {}", dir.display()))
    }

    fn graph(&self, flag: &Option<PathBuf>) -> Result<InteractionGraph> {
        let path = flag.as_ref().unwrap_or(&self.config.paths.graph);
        InteractionGraph::load(path).with_context(|| format!("loading graph from {}", path.display()))
    }

    fn verbalizer<'a>(&'a self, graph: &'a InteractionGraph, corpus: &'a Corpus) -> Verbalizer<'a> {
        let tools = &self.config.tools;
        let mut v = Verbalizer::new(graph, corpus, &self.templates);
        v.k_items = tools.k_items;
        v.k_users = tools.k_users;
        v.pool_limit = tools.pool_limit;
        v.similarity = tools.similarity;
        v.sampling = self.config.sampling.sampling(Some(self.config.seed));
        v
    }

    fn output(&self, flag: &Option<PathBuf>, name: &str) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.config.paths.outputs.join(name))
    }
}

/// Owns whatever the chosen backend needs to live for the command.
enum Model {
    Script(TeacherScript),
    Http(HttpGateway),
}

impl Model {
    fn new(args: &BackendArgs, config: &PipelineConfig) -> Result<Self> {
        match args.backend {
            BackendKind::Mock => {
                let script = match &args.script {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                        serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?
                    }
                    None => TeacherScript::default(),
                };
                Ok(Model::Script(script))
            }
            BackendKind::Http => {
                if args.script.is_some() {
                    bail!("--script only applies to --backend mock");
                }
                Ok(Model::Http(HttpGateway::new(&config.gateway)))
            }
        }
    }

    fn backend(&self) -> Backend<'_> {
        match self {
            Model::Script(s) => Backend::Script(s),
            Model::Http(g) => Backend::Gateway(g),
        }
    }
}

fn read_instances(path: &Path) -> Result<Vec<EvalInstance>> {
    Ok(read_jsonl(path)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let env = Env::load(&cli)?;
    let cfg = &env.config;
    log::info!(
        "{}: seed {} parallel {} config {}",
        cli.command.name(),
        cfg.seed,
        cfg.parallel,
        serde_json::to_string(cfg).unwrap_or_default()
    );
    match &cli.command {
        Command::Ingest { users, items, reviews, out } => {
            let corpus = corpus::ingest(users, items, reviews)?;
            let out = out.as_ref().unwrap_or(&cfg.paths.corpus);
            corpus.write_dir(out)?;
            println!(
                "ingested {} users, {} items, {} interactions",
                corpus.users().len(),
                corpus.items().len(),
                corpus.interaction_count()
            );
        }
        Command::BuildGraph { corpus, out } => {
            let corpus = env.corpus(corpus)?;
            let graph = InteractionGraph::build(&corpus)?;
            let out = out.as_ref().unwrap_or(&cfg.paths.graph);
            ensure_parent(out)?;
            graph.save(out)?;
            println!("graph: {} users, {} items, {} edges", graph.user_adj().len(), graph.item_adj().len(), graph.edge_count());
        }
        Command::Verbalize { corpus, graph, out, scope, instances, only_missing, backend } => {
            let corpus = env.corpus(corpus)?;
            let graph = env.graph(graph)?;
            let out = out.as_ref().unwrap_or(&cfg.paths.cache);
            let mut cache = EvidenceCache::load_or_empty(out)?;
            let mut keys = EvidenceKey::all(&graph);
            if let Some(path) = instances {
                let reachable = reachable_keys(&read_instances(path)?);
                keys.retain(|k| reachable.contains(k));
            }
            keys.retain(|k| match scope {
                Scope::All => true,
                Scope::Items => matches!(k, EvidenceKey::Item(_)),
                Scope::Users => matches!(k, EvidenceKey::User(_)),
            });
            let verbalizer = env.verbalizer(&graph, &corpus);
            let model = Model::new(backend, cfg)?;
            let report = model.backend().with(None, |gw| {
                if *only_missing {
                    return verbalizer.warm_cache(&mut cache, &keys, gw, cfg.parallel);
                }
                // regenerate into a scratch cache so failed keys keep their old text
                let mut fresh = EvidenceCache::new();
                let report = verbalizer.warm_cache(&mut fresh, &keys, gw, cfg.parallel);
                for e in fresh.entries() {
                    cache.insert(e.clone());
                }
                report
            });
            ensure_parent(out)?;
            cache.save(out)?;
            for f in &report.failures {
                log::error!("{}: {}", f.key, f.error);
            }
            println!(
                "evidence: {} requested, {} present, {} created, {} failed",
                report.requested,
                report.already_present,
                report.created,
                report.failures.len()
            );
            if !report.failures.is_empty() {
                bail!("{} evidence entries failed; rerun to retry them", report.failures.len());
            }
        }
        Command::MakeInstances { corpus, scenario, exclude_users, limit, out } => {
            let corpus = env.corpus(corpus)?;
            let exclude: BTreeSet<UserId> = match exclude_users {
                Some(path) => std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(UserId::new)
                    .collect::<Result<_, _>>()?,
                None => BTreeSet::new(),
            };
            let mut instances = evaluator::build_instances(&corpus, *scenario, &cfg.scenarios, cfg.seed, &exclude);
            if let Some(n) = limit {
                instances.truncate(*n);
            }
            let out = env.output(out, &format!("instances-{}.jsonl", scenario.as_str()));
            ensure_parent(&out)?;
            write_jsonl(&out, &instances)?;
            println!("instances: {} ({})", instances.len(), scenario.as_str());
        }
        Command::RunTeacher { corpus, graph, cache, instances, out, samples, limit, verbalize_misses, backend } => {
            if *samples == 0 {
                bail!("--samples must be positive");
            }
            let corpus = env.corpus(corpus)?;
            let graph = env.graph(graph)?;
            let cache_path = cache.as_ref().unwrap_or(&cfg.paths.cache);
            let cache = EvidenceCache::load_or_empty(cache_path)?;
            if cache.is_empty() {
                log::warn!("evidence cache {} is empty; tools will answer with fallback text", cache_path.display());
            }
            let instances_path = instances.clone().unwrap_or_else(|| cfg.paths.outputs.join("instances-classic.jsonl"));
            let mut all = read_instances(&instances_path)?;
            if let Some(n) = limit {
                all.truncate(*n);
            }
            let out = env.output(out, "sessions.jsonl");
            let mut done: BTreeMap<String, Vec<SessionLog>> = BTreeMap::new();
            if out.exists() {
                for log in read_jsonl::<SessionLog>(&out)? {
                    done.entry(log.instance_id.clone()).or_default().push(log);
                }
            }
            let todo: Vec<EvalInstance> =
                all.iter().filter(|i| done.get(&i.id).map_or(0, Vec::len) < *samples).cloned().collect();
            if todo.len() < all.len() {
                log::info!("resuming: {} of {} instances already done", all.len() - todo.len(), all.len());
            }

            let model = Model::new(backend, cfg)?;
            let verbalizer = env.verbalizer(&graph, &corpus);
            let miss_script;
            let miss_gateway: &dyn ChatGateway = match &model {
                Model::Script(s) => {
                    miss_script = s.bind(None);
                    &miss_script
                }
                Model::Http(g) => g,
            };
            let mut tools = CfTools::new(&graph, &cache);
            if *verbalize_misses {
                tools.on_miss = OnMiss::Verbalize(&verbalizer, miss_gateway);
            }
            let teacher = Teacher::new(&env.templates, &corpus, &tools).with_config(cfg.teacher());
            let results = pipeline::run_teacher(&teacher, &todo, model.backend(), *samples, Some(cfg.seed), cfg.parallel)?;

            let mut failures = Vec::new();
            let mut fresh: BTreeMap<String, Vec<SessionLog>> = BTreeMap::new();
            for result in results {
                match result {
                    Ok(log) => fresh.entry(log.instance_id.clone()).or_default().push(log),
                    Err(e) => {
                        log::error!("{e}");
                        failures.push(e);
                    }
                }
            }
            let mut logs = Vec::new();
            for inst in &all {
                match fresh.remove(&inst.id) {
                    Some(new) => logs.extend(new),
                    None => logs.extend(done.remove(&inst.id).unwrap_or_default()),
                }
            }
            ensure_parent(&out)?;
            write_jsonl(&out, &logs)?;
            let failure_path = out.with_extension("failures.jsonl");
            let records: Vec<FailureRecord> = failures
                .iter()
                .map(|e| FailureRecord { instance_id: &e.instance, stage: &e.stage, error: e.source.to_string() })
                .collect();
            if records.is_empty() {
                if failure_path.exists() {
                    std::fs::remove_file(&failure_path)?;
                }
            } else {
                write_jsonl(&failure_path, &records)?;
            }
            println!("sessions ok {} / {}", logs.len(), all.len() * samples);
            if logs.is_empty() && !all.is_empty() {
                bail!("every session failed; see {}", failure_path.display());
            }
        }
        Command::Filter { sessions, out } => {
            let logs: Vec<SessionLog> = read_jsonl(sessions)?;
            let report = pipeline::filter_sessions(&logs);
            let kept: Vec<&SessionLog> = report.kept.iter().map(|&i| &logs[i]).collect();
            ensure_parent(out)?;
            write_jsonl(out, &kept)?;
            if report.unparsable > 0 {
                log::warn!("{} sessions did not serialize to a parsable trajectory", report.unparsable);
            }
            println!("kept {} / {}", report.kept.len(), report.total);
        }
        Command::ExportSft { sessions, out } => {
            let logs: Vec<SessionLog> = read_jsonl(sessions)?;
            let records: Vec<SftRecord> =
                logs.iter().map(|l| trajectory::sft_record(&env.templates, l)).collect::<Result<_, _>>()?;
            ensure_parent(out)?;
            let n = trajectory::export_sft(&records, out)?;
            println!("exported {n}");
        }
        Command::ScoreRewards { trajectories, instances, out } => {
            let inputs: Vec<ScoreInput> = read_jsonl(trajectories)?;
            let records: Vec<TrajectoryRecord> = inputs.into_iter().map(ScoreInput::into_record).collect();
            let scored = pipeline::score_trajectories(&records, &read_instances(instances)?)?;
            ensure_parent(out)?;
            write_jsonl(out, &scored)?;
            let well_formed = scored.iter().filter(|s| s.r_fmt == rewards::Thirds::ONE).count();
            println!("scored {} ({} well formed)", scored.len(), well_formed);
        }
        Command::BucketRl { rollouts, instances, target, out, sample, corpus, backend } => {
            let instances = read_instances(instances)?;
            if *sample {
                let corpus = env.corpus(corpus)?;
                let model = Model::new(backend, cfg)?;
                let records = sample_rollouts(&env, &corpus, &instances, model.backend())?;
                ensure_parent(rollouts)?;
                write_jsonl(rollouts, &records)?;
            }
            let records: Vec<RolloutRecord> = read_jsonl(rollouts)?;
            let summary = pipeline::bucket_rollouts(&records, &instances)?;
            let by_id: BTreeMap<&str, &EvalInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
            let buckets: BTreeMap<DifficultyBucket, Vec<RlRecord>> = summary
                .buckets
                .iter()
                .map(|(b, ids)| {
                    let recs = ids
                        .iter()
                        .map(|id| RlRecord { bucket: *b, success_count: summary.counts[id], instance: by_id[id.as_str()].clone() })
                        .collect();
                    (*b, recs)
                })
                .collect();
            for b in DifficultyBucket::ALL {
                log::info!("bucket {b}: {}", buckets.get(&b).map_or(0, Vec::len));
            }
            log::info!("excluded (0 or all successes): {}", summary.excluded.len());
            let target = target.unwrap_or(cfg.rl.target_total);
            let set = rewards::compose_rl_set(&buckets, target, cfg.rl.ratio, cfg.seed)?;
            ensure_parent(out)?;
            write_jsonl(out, &set)?;
            println!("rl set {} (excluded {})", set.len(), summary.excluded.len());
        }
        Command::Evaluate { sessions, instances, out } => {
            let logs: Vec<SessionLog> = read_jsonl(sessions)?;
            let summary = pipeline::evaluate_sessions(&logs, &read_instances(instances)?)?;
            ensure_parent(out)?;
            let mut line = serde_json::to_string(&summary)?;
            line.push('\n');
            write_atomic(out, line.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", pipeline::report_table(&summary));
        }
    }
    Ok(())
}

fn reachable_keys(instances: &[EvalInstance]) -> BTreeSet<EvidenceKey> {
    let mut keys = BTreeSet::new();
    for inst in instances {
        keys.insert(EvidenceKey::User(inst.user.clone()));
        keys.extend(inst.history.iter().map(|i| EvidenceKey::Item(i.item.clone())));
        keys.extend(inst.candidates.iter().map(|c| EvidenceKey::Item(c.clone())));
    }
    keys
}

fn sample_rollouts(env: &Env, corpus: &Corpus, instances: &[EvalInstance], backend: Backend<'_>) -> Result<Vec<RolloutRecord>> {
    let cfg = &env.config;
    let sampling = cfg.sampling.sampling(Some(cfg.seed));
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let rollouts = backend.with(Some(inst), |gw| -> Result<_> {
            let prompt = pipeline::policy_prompt(&env.templates, corpus, inst, cfg.window(), sampling, gw)?;
            Ok(rewards::success_count(&env.templates, &prompt, &inst.ground_truth, cfg.sampling.group_size, gw, sampling)?)
        })?;
        out.push(RolloutRecord { instance_id: inst.id.clone(), replies: rollouts.replies });
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
