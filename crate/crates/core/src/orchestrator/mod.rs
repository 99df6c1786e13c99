//! The teacher workflow: plan, execute the planned analysis agents (with CF
//! tool calls), reflect, correct flagged agents once, rank.

mod script;
mod tools;

use std::fmt;
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::abstractor::{AbstractError, Abstractor, HybridHistory, DEFAULT_WINDOW};
use crate::corpus::Corpus;
use crate::evaluator::EvalInstance;
use crate::gateway::{ChatGateway, ChatMessage, ChatRequest, GatewayError, Sampling};
use crate::ids::{ItemId, UserId};
use crate::render;
use crate::template::{TemplateError, TemplateName, TemplateSet};
use crate::trajectory::strip_structural_tags;

pub use script::{ProblemSpec, RankingPolicy, ReflectionScript, ScriptedTeacher, TeacherScript};
pub use tools::{decode_tool_block, decode_tool_block_lenient, CfTools, OnMiss, ToolBox, ToolCall, ToolError};

pub const DEFAULT_MAX_TOOL_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubtaskKind {
    #[serde(rename = "User_Profile_Summary")]
    UserProfileSummary,
    #[serde(rename = "Historical_Interest_Analysis")]
    HistoricalInterestAnalysis,
    #[serde(rename = "Recent_Interest_Analysis")]
    RecentInterestAnalysis,
    #[serde(rename = "Interest_Divergence_Reasoning")]
    InterestDivergenceReasoning,
}

impl SubtaskKind {
    pub const ALL: [SubtaskKind; 4] = [
        SubtaskKind::UserProfileSummary,
        SubtaskKind::HistoricalInterestAnalysis,
        SubtaskKind::RecentInterestAnalysis,
        SubtaskKind::InterestDivergenceReasoning,
    ];

    /// Name used by the planner and reflector.
    pub fn agent_name(self) -> &'static str {
        match self {
            SubtaskKind::UserProfileSummary => "User_Profile_Summary",
            SubtaskKind::HistoricalInterestAnalysis => "Historical_Interest_Analysis",
            SubtaskKind::RecentInterestAnalysis => "Recent_Interest_Analysis",
            SubtaskKind::InterestDivergenceReasoning => "Interest_Divergence_Reasoning",
        }
    }

    /// Section tag in serialized trajectories.
    pub fn tag(self) -> &'static str {
        match self {
            SubtaskKind::UserProfileSummary => "user_profile",
            SubtaskKind::HistoricalInterestAnalysis => "historical_analysis",
            SubtaskKind::RecentInterestAnalysis => "recent_analysis",
            SubtaskKind::InterestDivergenceReasoning => "interest_divergence",
        }
    }

    pub fn from_agent_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.agent_name() == name)
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    fn template(self) -> TemplateName {
        match self {
            SubtaskKind::UserProfileSummary => TemplateName::UserProfileSummary,
            SubtaskKind::HistoricalInterestAnalysis => TemplateName::HistoricalInterestAnalysis,
            SubtaskKind::RecentInterestAnalysis => TemplateName::RecentInterestAnalysis,
            SubtaskKind::InterestDivergenceReasoning => TemplateName::InterestDivergenceReasoning,
        }
    }
}

impl fmt::Display for SubtaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.agent_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    UserProfile,
    HistoricalAnalysis,
    RecentAnalysis,
    InterestDivergence,
    Reflection,
    Correction(SubtaskKind),
    Recommend,
}

impl Phase {
    pub fn subtask(kind: SubtaskKind) -> Self {
        match kind {
            SubtaskKind::UserProfileSummary => Phase::UserProfile,
            SubtaskKind::HistoricalInterestAnalysis => Phase::HistoricalAnalysis,
            SubtaskKind::RecentInterestAnalysis => Phase::RecentAnalysis,
            SubtaskKind::InterestDivergenceReasoning => Phase::InterestDivergence,
        }
    }

    /// The analysis agent behind a subtask or correction phase.
    pub fn kind(self) -> Option<SubtaskKind> {
        match self {
            Phase::UserProfile => Some(SubtaskKind::UserProfileSummary),
            Phase::HistoricalAnalysis => Some(SubtaskKind::HistoricalInterestAnalysis),
            Phase::RecentAnalysis => Some(SubtaskKind::RecentInterestAnalysis),
            Phase::InterestDivergence => Some(SubtaskKind::InterestDivergenceReasoning),
            Phase::Correction(kind) => Some(kind),
            Phase::Plan | Phase::Reflection | Phase::Recommend => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Phase::Plan => "plan",
            Phase::Reflection => "reflection",
            Phase::Recommend => "recommend",
            other => other.kind().expect("subtask phase").tag(),
        }
    }

    pub fn allows_tools(self) -> bool {
        !matches!(self, Phase::Plan | Phase::Reflection)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Correction(kind) => write!(f, "correction({kind})"),
            other => f.write_str(other.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEvent {
    pub call: ToolCall,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub thinking: String,
    #[serde(default)]
    pub tool_events: Vec<ToolEvent>,
    /// The final `<JSON>` body.
    pub payload: String,
    /// Raw model replies, one per round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLog {
    pub instance_id: String,
    pub user: UserId,
    pub candidates: Vec<ItemId>,
    /// Carried for filtering and scoring; never shown to the model.
    pub ground_truth: ItemId,
    /// The rendered instance prompt every agent received.
    pub prompt: String,
    pub phases: Vec<PhaseRecord>,
    pub final_ranking: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub order: Vec<SubtaskKind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub agent: SubtaskKind,
    pub suggestion: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectionVerdict {
    pub correct: bool,
    pub problems: Vec<Problem>,
}

#[derive(Debug, thiserror::Error)]
pub enum PhaseError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Abstract(#[from] AbstractError),
    #[error("tool call parse error: {0}")]
    ToolParse(String),
    #[error("tool argument error: {0}")]
    ToolArgument(String),
    #[error("plan parse error: {0}")]
    PlanParse(String),
    #[error("subtask parse error: {0}")]
    SubtaskParse(String),
    #[error("reflection parse error: {0}")]
    ReflectionParse(String),
    #[error("rank parse error: {0}")]
    RankParse(String),
}

impl From<ToolError> for PhaseError {
    fn from(e: ToolError) -> Self {
        match e {
            ToolError::Parse(m) => PhaseError::ToolParse(m),
            ToolError::Argument(m) => PhaseError::ToolArgument(m),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("session {instance} failed in {stage}: {source}")]
pub struct SessionError {
    pub instance: String,
    /// `preprocess` or a phase name.
    pub stage: String,
    #[source]
    pub source: PhaseError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub max_tool_rounds: usize,
    pub rank_tools: bool,
    pub sampling: Sampling,
    pub window: NonZeroUsize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            max_tool_rounds: DEFAULT_MAX_TOOL_ROUNDS,
            rank_tools: true,
            sampling: Sampling::default(),
            window: NonZeroUsize::new(DEFAULT_WINDOW).expect("non-zero"),
        }
    }
}

/// Everything the agents of one session see.
#[derive(Debug, Clone)]
pub struct Context {
    pub user: UserId,
    pub candidates: Vec<ItemId>,
    pub prompt: String,
    pub phases: Vec<PhaseRecord>,
}

impl Context {
    pub fn new(user: UserId, candidates: Vec<ItemId>, prompt: impl Into<String>) -> Self {
        Self { user, candidates, prompt: prompt.into(), phases: Vec::new() }
    }

    /// Latest output of each analysis agent, in first-execution order.
    fn latest_outputs(&self) -> Vec<(SubtaskKind, &PhaseRecord)> {
        let mut out: Vec<(SubtaskKind, &PhaseRecord)> = Vec::new();
        for record in &self.phases {
            if let Some(kind) = record.phase.kind() {
                match out.iter_mut().find(|(k, _)| *k == kind) {
                    Some(slot) => slot.1 = record,
                    None => out.push((kind, record)),
                }
            }
        }
        out
    }

    fn outputs_summary(&self) -> String {
        self.latest_outputs()
            .into_iter()
            .map(|(kind, r)| format!("## {kind}\n{}", r.payload))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn outputs_in_full(&self) -> String {
        self.latest_outputs()
            .into_iter()
            .map(|(kind, r)| {
                let mut s = format!("## {kind}\nThinking: {}\n", r.thinking);
                for e in &r.tool_events {
                    s.push_str(&format!("Tool call: {}\nTool response: {}\n", e.call.to_json(), e.response));
                }
                s.push_str(&format!("Output: {}", r.payload));
                s
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Renders the per-instance prompt shared by all agents.
pub fn instance_prompt(
    templates: &TemplateSet,
    corpus: &Corpus,
    instance: &EvalInstance,
    hybrid: &HybridHistory,
) -> Result<String, TemplateError> {
    let user_information = render::user_info(&instance.user, corpus.user(&instance.user));
    let summary = if hybrid.long_term_summary.is_empty() { "None" } else { hybrid.long_term_summary.as_str() };
    let recent = if hybrid.recent_raw.is_empty() {
        "None".to_string()
    } else {
        render::interaction_lines(&hybrid.recent_raw, corpus)
    };
    let key_def = templates.render(TemplateName::ItemKeyDefinition, &[])?;
    let candidates = render::item_lines(corpus, &instance.candidates);
    templates.render(
        TemplateName::InstanceUser,
        &[
            ("user_information", &user_information),
            ("long_term_summary", summary),
            ("item_key_definition", &key_def),
            ("recent_behavior", &recent),
            ("candidates", &candidates),
        ],
    )
}

/// Keeps candidate ids in model order, drops foreign ids and repeats, then
/// appends any candidate the model left out in original order.
pub fn repair_ranking(proposed: &[ItemId], candidates: &[ItemId]) -> Vec<ItemId> {
    let mut out: Vec<ItemId> = Vec::with_capacity(candidates.len());
    for id in proposed {
        if candidates.contains(id) && !out.contains(id) {
            out.push(id.clone());
        }
    }
    for id in candidates {
        if !out.contains(id) {
            out.push(id.clone());
        }
    }
    out
}

/// All `<tag>…</tag>` bodies in order of appearance.
pub(crate) fn tag_bodies<'a>(text: &'a str, tag: &str) -> Vec<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(&open) {
        let after = &rest[start + open.len()..];
        match after.find(&close) {
            Some(end) => {
                out.push(&after[..end]);
                rest = &after[end + close.len()..];
            }
            None => break,
        }
    }
    out
}

fn remove_blocks(text: &str, tag: &str) -> String {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find(&open) {
        match rest[start..].find(&close) {
            Some(end) => {
                out.push_str(&rest[..start]);
                rest = &rest[start + end + close.len()..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

/// Reasoning text of a reply: its `<think>` (or `<Thinking>`) blocks, or failing that the
/// reply with tool and payload blocks removed.
pub fn reply_thinking(reply: &str) -> String {
    let mut blocks = tag_bodies(reply, "think");
    blocks.extend(tag_bodies(reply, "Thinking"));
    let text = if blocks.is_empty() {
        let mut t = reply.to_string();
        for tag in ["tool_call", "tool_response", "JSON"] {
            t = remove_blocks(&t, tag);
        }
        t.trim().to_string()
    } else {
        blocks.join("\n")
    };
    strip_structural_tags(&text)
}

pub fn reply_payload(reply: &str) -> Option<&str> {
    render::last_enveloped(reply, "<JSON>", "</JSON>")
}

pub fn tool_response_message(text: &str) -> String {
    format!("<tool_response>{}</tool_response>", serde_json::json!({ "result": text }))
}

fn parse_plan(payload: &str) -> Result<Plan, String> {
    let names: Vec<String> = serde_json::from_str(payload).map_err(|e| format!("not a JSON list of names: {e}"))?;
    if names.is_empty() {
        return Err("plan selects no agents".into());
    }
    let mut order = Vec::new();
    for name in &names {
        let kind = SubtaskKind::from_agent_name(name.trim()).ok_or_else(|| format!("unknown agent `{name}`"))?;
        if order.contains(&kind) {
            return Err(format!("agent `{name}` listed twice"));
        }
        order.push(kind);
    }
    Ok(Plan { order })
}

fn parse_verdict(payload: &str) -> Result<ReflectionVerdict, String> {
    let value: Value = serde_json::from_str(payload).map_err(|e| format!("not JSON: {e}"))?;
    let obj = value.as_object().ok_or("verdict is not an object")?;
    let correct = match obj.get("correct") {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("yes") => true,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("no") => false,
        other => return Err(format!("`correct` must be \"yes\" or \"no\", got {other:?}")),
    };
    let mut problems = Vec::new();
    if let Some(list) = obj.get("problematic_agent") {
        let list = list.as_array().ok_or("`problematic_agent` is not a list")?;
        for entry in list {
            let name = entry.get("agent_name").and_then(Value::as_str).ok_or("problem without `agent_name`")?;
            let agent = SubtaskKind::from_agent_name(name.trim()).ok_or_else(|| format!("unknown agent `{name}`"))?;
            let suggestion = entry.get("suggestion").and_then(Value::as_str).unwrap_or_default().to_string();
            problems.push(Problem { agent, suggestion });
        }
    }
    match (correct, problems.is_empty()) {
        (true, false) => Err("verdict passes but lists problems".into()),
        (false, true) => Err("verdict fails without naming a problematic agent".into()),
        _ => Ok(ReflectionVerdict { correct, problems }),
    }
}

fn parse_ranking(payload: &str, candidates: &[ItemId]) -> Result<Vec<ItemId>, String> {
    let values: Vec<Value> = serde_json::from_str(payload).map_err(|e| format!("not a JSON list: {e}"))?;
    let mut ids = Vec::with_capacity(values.len());
    for v in values {
        let text = match v {
            Value::String(s) => s.trim().to_string(),
            Value::Number(n) => n.to_string(),
            other => return Err(format!("ranking entry {other} is not an id")),
        };
        if let Ok(id) = ItemId::new(text) {
            ids.push(id);
        }
    }
    if !ids.iter().any(|id| candidates.contains(id)) {
        return Err("ranking names none of the candidates".into());
    }
    Ok(ids)
}

struct Exchange<T> {
    value: T,
    record: PhaseRecord,
}

#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    templates: &'a TemplateSet,
    corpus: &'a Corpus,
    tools: &'a dyn ToolBox,
    pub config: TeacherConfig,
}

impl<'a> Teacher<'a> {
    pub fn new(templates: &'a TemplateSet, corpus: &'a Corpus, tools: &'a dyn ToolBox) -> Self {
        Self { templates, corpus, tools, config: TeacherConfig::default() }
    }

    pub fn with_config(mut self, config: TeacherConfig) -> Self {
        self.config = config;
        self
    }

    /// One agent conversation. Tool rounds run while the reply carries
    /// `<tool_call>` blocks and no `<JSON>` payload; `reasks` extra attempts
    /// are granted when the payload is missing or rejected by `parse`.
    #[allow(clippy::too_many_arguments)]
    fn converse<T>(
        &self,
        phase: Phase,
        label: String,
        system: String,
        user: String,
        tools: bool,
        reasks: usize,
        gateway: &dyn ChatGateway,
        parse: impl Fn(&str) -> Result<T, String>,
        parse_error: fn(String) -> PhaseError,
    ) -> Result<Exchange<T>, PhaseError> {
        let mut messages = vec![ChatMessage::system(system), ChatMessage::user(user)];
        let mut replies = Vec::new();
        let mut thinking = Vec::new();
        let mut events = Vec::new();
        let mut rounds = 0;
        let mut reasks_left = reasks;
        loop {
            let request = ChatRequest::new(label.clone(), messages.clone(), self.config.sampling);
            let reply = gateway.complete(&request)?.content;
            let think = reply_thinking(&reply);
            if !think.is_empty() {
                thinking.push(think);
            }
            replies.push(reply.clone());
            let failure = match reply_payload(&reply) {
                Some(payload) => match parse(payload) {
                    Ok(value) => {
                        let record = PhaseRecord {
                            phase,
                            thinking: thinking.join("\n"),
                            tool_events: events,
                            payload: strip_structural_tags(payload),
                            replies,
                        };
                        return Ok(Exchange { value, record });
                    }
                    Err(reason) => reason,
                },
                None => {
                    let blocks = tag_bodies(&reply, "tool_call");
                    if tools && !blocks.is_empty() {
                        let mut calls = Vec::new();
                        for body in blocks {
                            calls.extend(decode_tool_block_lenient(body)?);
                        }
                        if rounds < self.config.max_tool_rounds {
                            rounds += 1;
                            messages.push(ChatMessage::assistant(reply));
                            for call in calls {
                                let response = strip_structural_tags(&self.tools.call(&call));
                                messages.push(ChatMessage::tool(tool_response_message(&response)));
                                events.push(ToolEvent { call, response });
                            }
                            continue;
                        }
                        format!("still calling tools after {} rounds", self.config.max_tool_rounds)
                    } else {
                        "no <JSON> payload".to_string()
                    }
                }
            };
            if reasks_left == 0 {
                return Err(parse_error(failure));
            }
            reasks_left -= 1;
            log::debug!("{label}: re-asking after parse failure: {failure}");
            let reask = self.templates.render(TemplateName::Reask, &[("reason", &failure)])?;
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(reask));
        }
    }

    fn system(&self, parts: &[(TemplateName, &[(&str, &str)])]) -> Result<String, TemplateError> {
        let rendered: Result<Vec<String>, _> = parts.iter().map(|(n, v)| self.templates.render(*n, v)).collect();
        Ok(rendered?.join("\n"))
    }

    pub fn plan(&self, ctx: &Context, gateway: &dyn ChatGateway) -> Result<(Plan, PhaseRecord), PhaseError> {
        let system = self.system(&[(TemplateName::Planner, &[]), (TemplateName::PlannerOutput, &[])])?;
        let ex = self.converse(
            Phase::Plan,
            "plan".into(),
            system,
            ctx.prompt.clone(),
            false,
            1,
            gateway,
            parse_plan,
            PhaseError::PlanParse,
        )?;
        Ok((ex.value, ex.record))
    }

    /// Runs one analysis agent. With `suggestion` set this is a correction
    /// and the reflector's feedback is appended to the prompt.
    pub fn execute_subtask(
        &self,
        kind: SubtaskKind,
        ctx: &Context,
        suggestion: Option<&str>,
        gateway: &dyn ChatGateway,
    ) -> Result<PhaseRecord, PhaseError> {
        let system =
            self.system(&[(kind.template(), &[]), (TemplateName::ToolProtocol, &[]), (TemplateName::SubtaskOutput, &[])])?;
        let mut user = ctx.prompt.clone();
        let outputs = ctx.outputs_summary();
        if !outputs.is_empty() {
            user.push_str(&self.templates.render(TemplateName::PrecedingOutputs, &[("outputs", &outputs)])?);
        }
        let (phase, label) = match suggestion {
            Some(s) => {
                user.push_str(&self.templates.render(TemplateName::Correction, &[("suggestion", s)])?);
                (Phase::Correction(kind), format!("correction:{kind}"))
            }
            None => (Phase::subtask(kind), format!("subtask:{kind}")),
        };
        let ex = self.converse(phase, label, system, user, true, 0, gateway, |_| Ok(()), PhaseError::SubtaskParse)?;
        Ok(ex.record)
    }

    pub fn reflect(&self, ctx: &Context, gateway: &dyn ChatGateway) -> Result<(ReflectionVerdict, PhaseRecord), PhaseError> {
        let executed: Vec<&str> = ctx.latest_outputs().iter().map(|(k, _)| k.agent_name()).collect();
        let names = executed.join(", ");
        let system =
            self.system(&[(TemplateName::Reflection, &[]), (TemplateName::ReflectionOutput, &[("agent_names", &names)])])?;
        let mut user = ctx.prompt.clone();
        user.push_str(&self.templates.render(TemplateName::PrecedingOutputs, &[("outputs", &ctx.outputs_in_full())])?);
        let ex = self.converse(
            Phase::Reflection,
            "reflect".into(),
            system,
            user,
            false,
            0,
            gateway,
            parse_verdict,
            PhaseError::ReflectionParse,
        )?;
        Ok((ex.value, ex.record))
    }

    /// Final ranking, repaired into a permutation of the candidates.
    pub fn rank(&self, ctx: &Context, gateway: &dyn ChatGateway) -> Result<(Vec<ItemId>, PhaseRecord), PhaseError> {
        let count = ctx.candidates.len().to_string();
        let mut parts: Vec<(TemplateName, &[(&str, &str)])> = vec![(TemplateName::Ranking, &[])];
        if self.config.rank_tools {
            parts.push((TemplateName::ToolProtocol, &[]));
        }
        let output_vars = [("candidate_count", count.as_str())];
        parts.push((TemplateName::RankingOutput, &output_vars));
        let system = self.system(&parts)?;
        let mut user = ctx.prompt.clone();
        let outputs = ctx.outputs_summary();
        if !outputs.is_empty() {
            user.push_str(&self.templates.render(TemplateName::PrecedingOutputs, &[("outputs", &outputs)])?);
        }
        let ex = self.converse(
            Phase::Recommend,
            "rank".into(),
            system,
            user,
            self.config.rank_tools,
            1,
            gateway,
            |p| parse_ranking(p, &ctx.candidates),
            PhaseError::RankParse,
        )?;
        Ok((repair_ranking(&ex.value, &ctx.candidates), ex.record))
    }

    /// Runs the workflow on an already rendered prompt.
    pub fn run_context(&self, mut ctx: Context, instance_id: &str, ground_truth: &ItemId, gateway: &dyn ChatGateway) -> Result<SessionLog, SessionError> {
        let fail = |stage: String| {
            let instance = instance_id.to_string();
            move |source: PhaseError| SessionError { instance, stage, source }
        };
        let (plan, record) = self.plan(&ctx, gateway).map_err(fail("plan".into()))?;
        ctx.phases.push(record);
        for &kind in &plan.order {
            let record = self.execute_subtask(kind, &ctx, None, gateway).map_err(fail(Phase::subtask(kind).to_string()))?;
            ctx.phases.push(record);
        }
        let (verdict, record) = self.reflect(&ctx, gateway).map_err(fail("reflection".into()))?;
        ctx.phases.push(record);
        if !verdict.correct {
            let mut flagged: Vec<(SubtaskKind, Vec<&str>)> = Vec::new();
            for p in &verdict.problems {
                if !plan.order.contains(&p.agent) {
                    log::warn!("{instance_id}: reflector flagged unplanned agent {}", p.agent);
                    continue;
                }
                match flagged.iter_mut().find(|(k, _)| *k == p.agent) {
                    Some((_, s)) => s.push(&p.suggestion),
                    None => flagged.push((p.agent, vec![&p.suggestion])),
                }
            }
            for (kind, suggestions) in flagged {
                let suggestion = suggestions.join("\n");
                let record = self
                    .execute_subtask(kind, &ctx, Some(&suggestion), gateway)
                    .map_err(fail(Phase::Correction(kind).to_string()))?;
                ctx.phases.push(record);
            }
        }
        let (ranking, record) = self.rank(&ctx, gateway).map_err(fail("recommend".into()))?;
        ctx.phases.push(record);
        Ok(SessionLog {
            instance_id: instance_id.to_string(),
            user: ctx.user,
            candidates: ctx.candidates,
            ground_truth: ground_truth.clone(),
            prompt: ctx.prompt,
            phases: ctx.phases,
            final_ranking: ranking,
        })
    }

    /// Abstracts the instance history, renders the prompt and runs the
    /// workflow.
    pub fn run(&self, instance: &EvalInstance, gateway: &dyn ChatGateway) -> Result<SessionLog, SessionError> {
        let preprocess = |source: PhaseError| SessionError {
            instance: instance.id.clone(),
            stage: "preprocess".into(),
            source,
        };
        let hybrid = if instance.history.len() > self.config.window.get() {
            let mut abstractor = Abstractor::new(self.templates, self.config.window);
            abstractor.sampling = self.config.sampling;
            let info = render::user_info(&instance.user, self.corpus.user(&instance.user));
            abstractor
                .abstract_for(self.corpus, &info, &instance.history, gateway)
                .map_err(|e| preprocess(e.into()))?
        } else {
            HybridHistory {
                long_term_summary: String::new(),
                recent_raw: instance.history.clone(),
                window_size_m: self.config.window.get(),
            }
        };
        let prompt = instance_prompt(self.templates, self.corpus, instance, &hybrid).map_err(|e| preprocess(e.into()))?;
        let ctx = Context::new(instance.user.clone(), instance.candidates.clone(), prompt);
        self.run_context(ctx, &instance.id, &instance.ground_truth, gateway)
    }
}

#[cfg(test)]
mod tests;
