//! A deterministic stand-in for the teacher model, driven by a small JSON
//! script. Replies are chosen from the request label, so one script covers
//! summarization, verbalization and every workflow phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SubtaskKind, ToolCall};
use crate::evaluator::EvalInstance;
use crate::gateway::{ChatGateway, ChatReply, ChatRequest, GatewayError, GatewayErrorKind, Role};
use crate::ids::ItemId;
use crate::verbalizer::CfTool;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub agent_name: SubtaskKind,
    pub suggestion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionScript {
    #[default]
    Pass,
    Fail(Vec<ProblemSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingPolicy {
    /// Ground truth first, then the other candidates in order.
    #[default]
    Oracle,
    CandidateOrder,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherScript {
    pub plan: Vec<SubtaskKind>,
    /// Agents that make one tool call before answering.
    pub tool_use: BTreeMap<SubtaskKind, CfTool>,
    pub rank_tool: Option<CfTool>,
    pub reflection: ReflectionScript,
    pub ranking: RankingPolicy,
    pub verbalize_answer: String,
    pub summary: String,
    /// Policy rollouts: sample `i` ranks the ground truth first iff
    /// `rollout_hits[i % len]`. Empty means follow `ranking`.
    pub rollout_hits: Vec<bool>,
}

impl Default for TeacherScript {
    fn default() -> Self {
        Self {
            plan: SubtaskKind::ALL.to_vec(),
            tool_use: BTreeMap::from([
                (SubtaskKind::HistoricalInterestAnalysis, CfTool::ItemCf),
                (SubtaskKind::InterestDivergenceReasoning, CfTool::UserCf),
            ]),
            rank_tool: None,
            reflection: ReflectionScript::Pass,
            ranking: RankingPolicy::Oracle,
            verbalize_answer: "Category 1: Shared favourites\nCategory Summary: Items read by the same audience.".into(),
            summary: "Earlier reading concentrated on a few recurring genres.".into(),
            rollout_hits: Vec::new(),
        }
    }
}

impl TeacherScript {
    pub fn bind<'a>(&'a self, instance: Option<&'a EvalInstance>) -> ScriptedTeacher<'a> {
        ScriptedTeacher { script: self, instance }
    }
}

/// A [`TeacherScript`] bound to the instance its session runs on.
pub struct ScriptedTeacher<'a> {
    script: &'a TeacherScript,
    instance: Option<&'a EvalInstance>,
}

fn json_list<T: Serialize>(items: &[T]) -> String {
    serde_json::to_string(items).expect("serializable list")
}

fn has_tool_results(request: &ChatRequest) -> bool {
    request.messages.iter().any(|m| m.role == Role::Tool)
}

impl ScriptedTeacher<'_> {
    fn instance(&self, label: &str) -> Result<&EvalInstance, GatewayError> {
        self.instance.ok_or_else(|| {
            GatewayError::new(GatewayErrorKind::Rejected, format!("script needs an instance to answer `{label}`"))
        })
    }

    fn tool_reply(&self, tool: CfTool, inst: &EvalInstance) -> String {
        let call = match tool {
            CfTool::UserCf => ToolCall::user_cf(&inst.user),
            CfTool::ItemCf => {
                let anchor = inst.history.last().map(|i| &i.item).unwrap_or(&inst.candidates[0]);
                ToolCall::item_cf(anchor)
            }
        };
        format!("<think>Collaborative evidence would help here.</think>\n<tool_call>\n{}\n</tool_call>", call.to_json())
    }

    fn ranking(&self, inst: &EvalInstance) -> Vec<ItemId> {
        match self.script.ranking {
            RankingPolicy::CandidateOrder => inst.candidates.clone(),
            RankingPolicy::Reverse => inst.candidates.iter().rev().cloned().collect(),
            RankingPolicy::Oracle => std::iter::once(inst.ground_truth.clone())
                .chain(inst.candidates.iter().filter(|c| **c != inst.ground_truth).cloned())
                .collect(),
        }
    }

    /// A complete single-model trajectory, as a fine-tuned student would
    /// write it.
    fn rollout(&self, inst: &EvalInstance, sample: usize) -> String {
        let mut ranking = self.ranking(inst);
        if !self.script.rollout_hits.is_empty() {
            let hit = self.script.rollout_hits[sample % self.script.rollout_hits.len()];
            ranking = std::iter::once(inst.ground_truth.clone())
                .chain(inst.candidates.iter().filter(|c| **c != inst.ground_truth).cloned())
                .collect();
            if !hit {
                ranking.rotate_left(1);
            }
        }
        let plan: Vec<&str> = self.script.plan.iter().map(|k| k.agent_name()).collect();
        let mut out = format!("<plan>\n<think>Choosing the analysis agents.</think>\n<JSON>{}</JSON>\n</plan>\n", json_list(&plan));
        for kind in &self.script.plan {
            let finding = format!("{kind} finding for user {}", inst.user);
            out.push_str(&format!("<{0}>\n<think>Analysing.</think>\n<JSON>{1}</JSON>\n</{0}>\n", kind.tag(), json_list(&[finding])));
        }
        out.push_str("<reflection>\n<think>Checking.</think>\n<JSON>{\"correct\": \"yes\"}</JSON>\n</reflection>\n");
        out.push_str(&format!("<recommend>\n<think>Ranking.</think>\n<JSON>{}</JSON>\n</recommend>", json_list(&ranking)));
        out
    }

    fn respond(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let (label, sample) = request.label.split_once('#').unwrap_or((&request.label, "0"));
        let sample: usize = sample.parse().unwrap_or(0);
        let (head, agent) = label.split_once(':').unwrap_or((label, ""));
        match head {
            "summarize" => Ok(format!("<think>Condensing this window.</think>\n<SUMMARY>{}</SUMMARY>", self.script.summary)),
            "verbalize" => Ok(format!("<think>Grouping the neighbors.</think>\n<Answer>\n{}\n</Answer>", self.script.verbalize_answer)),
            "plan" => {
                let names: Vec<&str> = self.script.plan.iter().map(|k| k.agent_name()).collect();
                Ok(format!("<think>Choosing the analysis agents.</think>\n<JSON>{}</JSON>", json_list(&names)))
            }
            "subtask" | "correction" => {
                let inst = self.instance(label)?;
                let kind = SubtaskKind::from_agent_name(agent).ok_or_else(|| {
                    GatewayError::new(GatewayErrorKind::Rejected, format!("script has no agent `{agent}`"))
                })?;
                if let Some(&tool) = self.script.tool_use.get(&kind) {
                    if !has_tool_results(request) {
                        return Ok(self.tool_reply(tool, inst));
                    }
                }
                let verb = if head == "correction" { "Revised" } else { "Initial" };
                let finding = format!("{verb} {} finding for user {}", kind.agent_name(), inst.user);
                Ok(format!("<think>{verb} analysis by {kind}.</think>\n<JSON>{}</JSON>", json_list(&[finding])))
            }
            "reflect" => {
                let verdict = match &self.script.reflection {
                    ReflectionScript::Pass => serde_json::json!({ "correct": "yes" }),
                    ReflectionScript::Fail(problems) => {
                        serde_json::json!({ "correct": "no", "problematic_agent": problems })
                    }
                };
                Ok(format!("<think>Checking consistency, rationality and completeness.</think>\n<JSON>{verdict}</JSON>"))
            }
            "rank" => {
                let inst = self.instance(label)?;
                if let Some(tool) = self.script.rank_tool {
                    if !has_tool_results(request) {
                        return Ok(self.tool_reply(tool, inst));
                    }
                }
                let ranking = self.ranking(inst);
                Ok(format!("<think>Balancing long and short term interests.</think>\n<JSON>{}</JSON>", json_list(&ranking)))
            }
            "rollout" => Ok(self.rollout(self.instance(label)?, sample)),
            _ => Err(GatewayError::new(GatewayErrorKind::Rejected, format!("script cannot answer `{label}`"))),
        }
    }
}

impl ChatGateway for ScriptedTeacher<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        request.validate()?;
        self.respond(request).map(ChatReply::text)
    }
}
