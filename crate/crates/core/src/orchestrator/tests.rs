use std::sync::Mutex;

use super::*;
use crate::corpus::{Interaction, ItemMeta, UserMeta};
use crate::evaluator::Scenario;
use crate::gateway::mock::{FnGateway, ScriptedGateway};
use crate::gateway::{Counted, GatewayErrorKind, Role};

fn id(s: &str) -> ItemId {
    ItemId::new(s).unwrap()
}

fn corpus() -> Corpus {
    let users = ["u1", "u2"]
        .into_iter()
        .map(|u| UserMeta { user: UserId::new(u).unwrap(), attributes: Default::default() })
        .collect();
    let items = (1..=6)
        .map(|n| ItemMeta { item: id(&format!("i{n}")), title: format!("Title {n}"), attributes: Default::default() })
        .collect();
    let interactions = [("u1", "i1", 10), ("u1", "i2", 20), ("u1", "i3", 30), ("u2", "i1", 15), ("u2", "i4", 25)]
        .into_iter()
        .map(|(u, i, t)| Interaction {
            user: UserId::new(u).unwrap(),
            item: id(i),
            timestamp: t,
            rating: Some(4.0),
            review_text: Some("fine".into()),
        })
        .collect();
    Corpus::from_parts(users, items, interactions).unwrap()
}

fn instance(corpus: &Corpus) -> EvalInstance {
    let user = UserId::new("u1").unwrap();
    let history = corpus.sequence(&user)[..2].to_vec();
    EvalInstance {
        id: "classic-u1".into(),
        user,
        history,
        candidates: vec![id("i4"), id("i3"), id("i5"), id("i6")],
        ground_truth: id("i3"),
        scenario: Scenario::Classic,
    }
}

fn echo_tools(call: &ToolCall) -> String {
    format!("evidence for {}", call.anchor())
}

fn ctx() -> Context {
    Context::new(UserId::new("u1").unwrap(), vec![id("a"), id("b"), id("c")], "PROMPT")
}

fn json(body: &str) -> String {
    format!("<think>t</think><JSON>{body}</JSON>")
}

#[test]
fn plan_parses_known_agents_in_order() {
    let plan = parse_plan(r#"["Recent_Interest_Analysis", "User_Profile_Summary"]"#).unwrap();
    assert_eq!(plan.order, [SubtaskKind::RecentInterestAnalysis, SubtaskKind::UserProfileSummary]);
    assert!(parse_plan("[]").is_err());
    assert!(parse_plan(r#"["Mood_Agent"]"#).is_err());
    assert!(parse_plan(r#"["User_Profile_Summary", "User_Profile_Summary"]"#).is_err());
    assert!(parse_plan("not json").is_err());
}

#[test]
fn plan_reasks_once() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let gw = ScriptedGateway::new([json(r#"["Nope"]"#), json(r#"["Historical_Interest_Analysis"]"#)]);
    let (plan, record) = teacher.plan(&ctx(), &gw).unwrap();
    assert_eq!(plan.order, [SubtaskKind::HistoricalInterestAnalysis]);
    assert_eq!(record.replies.len(), 2);
    let second = &gw.requests()[1];
    assert_eq!(second.messages.len(), 4);
    assert!(second.last(Role::User).unwrap().content.contains("Nope"));

    let gw = ScriptedGateway::new([json("[]"), "no payload at all".to_string()]);
    let err = teacher.plan(&ctx(), &gw).unwrap_err();
    assert!(matches!(err, PhaseError::PlanParse(_)), "{err}");
}

#[test]
fn subtask_runs_every_call_of_a_reply() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let calls = r#"<think>need neighbors</think><tool_call>
{"name": "ItemCF", "arguments": {"item_id": "i1"}}
{"name": "ItemCF", "arguments": {"item_id": "i2"}}
{"name": "UserCF", "arguments": {"user_id": "u1"}}
</tool_call>"#;
    let gw = ScriptedGateway::new([calls.to_string(), json(r#"["likes i1"]"#)]);
    let record = teacher.execute_subtask(SubtaskKind::HistoricalInterestAnalysis, &ctx(), None, &gw).unwrap();
    assert_eq!(record.phase, Phase::HistoricalAnalysis);
    let anchors: Vec<&str> = record.tool_events.iter().map(|e| e.call.anchor()).collect();
    assert_eq!(anchors, ["i1", "i2", "u1"]);
    assert_eq!(record.tool_events[2].response, "evidence for u1");
    assert_eq!(record.thinking, "need neighbors\nt");
    let second = &gw.requests()[1];
    let tool_msgs: Vec<&ChatMessage> = second.messages.iter().filter(|m| m.role == Role::Tool).collect();
    assert_eq!(tool_msgs.len(), 3);
    assert_eq!(tool_msgs[0].content, r#"<tool_response>{"result":"evidence for i1"}</tool_response>"#);
}

#[test]
fn subtask_accepts_unescaped_argument_strings() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let call = r#"<Thinking>check peers</Thinking><tool_call>{"name": "UserCF", "arguments": "{"user_id": "u1"}"}</tool_call>"#;
    let gw = ScriptedGateway::new([call.to_string(), json(r#"["x"]"#)]);
    let record = teacher.execute_subtask(SubtaskKind::InterestDivergenceReasoning, &ctx(), None, &gw).unwrap();
    assert_eq!(record.tool_events[0].call, ToolCall::user_cf(&UserId::new("u1").unwrap()));
    assert!(record.thinking.starts_with("check peers"));
}

#[test]
fn subtask_gives_up_after_max_tool_rounds() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let call = r#"<tool_call>{"name": "ItemCF", "arguments": {"item_id": "i1"}}</tool_call>"#;
    let gw = Counted::new(ScriptedGateway::new(vec![call; 10]));
    let err = teacher.execute_subtask(SubtaskKind::UserProfileSummary, &ctx(), None, &gw).unwrap_err();
    assert!(matches!(err, PhaseError::SubtaskParse(_)), "{err}");
    assert_eq!(gw.calls(), DEFAULT_MAX_TOOL_ROUNDS + 1);

    let gw = ScriptedGateway::new([r#"<tool_call>{"name": "FooCF"}</tool_call>"#]);
    let err = teacher.execute_subtask(SubtaskKind::UserProfileSummary, &ctx(), None, &gw).unwrap_err();
    assert!(matches!(err, PhaseError::ToolParse(_)), "{err}");
}

#[test]
fn verdicts() {
    let pass = parse_verdict(r#"{"correct": "yes"}"#).unwrap();
    assert!(pass.correct && pass.problems.is_empty());
    let fail = parse_verdict(
        r#"{"correct": "no", "problematic_agent": [{"agent_name": "Interest_Divergence_Reasoning", "suggestion": "use peers"}]}"#,
    )
    .unwrap();
    assert!(!fail.correct);
    assert_eq!(fail.problems, [Problem { agent: SubtaskKind::InterestDivergenceReasoning, suggestion: "use peers".into() }]);
    assert!(parse_verdict(r#"{"correct": "no"}"#).is_err());
    assert!(parse_verdict(r#"{"correct": "maybe"}"#).is_err());
    assert!(parse_verdict(r#"{"correct": "yes", "problematic_agent": [{"agent_name": "User_Profile_Summary"}]}"#).is_err());
    assert!(parse_verdict(r#"{"correct": "no", "problematic_agent": [{"agent_name": "Ghost"}]}"#).is_err());
}

#[test]
fn ranking_is_repaired_into_a_permutation() {
    let cands = [id("a"), id("b"), id("c"), id("d")];
    let proposed = [id("c"), id("zz"), id("c"), id("a")];
    assert_eq!(repair_ranking(&proposed, &cands), [id("c"), id("a"), id("b"), id("d")]);
    assert_eq!(parse_ranking(r#"["b", 7]"#, &cands).unwrap(), [id("b"), id("7")]);
    assert!(parse_ranking(r#"["x", "y"]"#, &cands).is_err());
    assert!(parse_ranking(r#"{"a": 1}"#, &cands).is_err());
}

#[test]
fn rank_reasks_then_repairs() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let gw = ScriptedGateway::new([json(r#"["q"]"#), json(r#"["c", "c", "a"]"#)]);
    let (ranking, record) = teacher.rank(&ctx(), &gw).unwrap();
    assert_eq!(ranking, [id("c"), id("a"), id("b")]);
    assert_eq!(record.phase, Phase::Recommend);
}

fn phases(log: &SessionLog) -> Vec<Phase> {
    log.phases.iter().map(|p| p.phase).collect()
}

#[test]
fn scripted_session_passes_reflection() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let inst = instance(&corpus);
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let script = TeacherScript::default();
    let gw = Counted::new(script.bind(Some(&inst)));
    let log = teacher.run(&inst, &gw).unwrap();
    assert_eq!(
        phases(&log),
        [
            Phase::Plan,
            Phase::UserProfile,
            Phase::HistoricalAnalysis,
            Phase::RecentAnalysis,
            Phase::InterestDivergence,
            Phase::Reflection,
            Phase::Recommend
        ]
    );
    assert_eq!(log.final_ranking[0], inst.ground_truth);
    assert_eq!(log.final_ranking.len(), inst.candidates.len());
    // plan + 4 agents + 2 tool rounds + reflection + rank
    assert_eq!(gw.calls(), 9);
    assert_eq!(log.phases[2].tool_events[0].call.anchor(), "i2");
    assert!(!log.prompt.contains(inst.ground_truth.as_str()) || inst.candidates.contains(&inst.ground_truth));
}

#[test]
fn failed_reflection_triggers_exactly_one_correction_round() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let inst = instance(&corpus);
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let script = TeacherScript {
        reflection: ReflectionScript::Fail(vec![
            ProblemSpec { agent_name: SubtaskKind::InterestDivergenceReasoning, suggestion: "use peers".into() },
            ProblemSpec { agent_name: SubtaskKind::InterestDivergenceReasoning, suggestion: "cite items".into() },
        ]),
        ..Default::default()
    };
    let seen = Mutex::new(Vec::new());
    let bound = script.bind(Some(&inst));
    let gw = FnGateway::new(|req: &ChatRequest| {
        seen.lock().unwrap().push(req.clone());
        bound.complete(req).map(|r| r.content)
    });
    let log = teacher.run(&inst, &gw).unwrap();
    let corrections: Vec<Phase> = phases(&log).into_iter().filter(|p| matches!(p, Phase::Correction(_))).collect();
    assert_eq!(corrections, [Phase::Correction(SubtaskKind::InterestDivergenceReasoning)]);
    assert_eq!(log.phases.last().unwrap().phase, Phase::Recommend);
    assert_eq!(log.phases.iter().filter(|p| p.phase == Phase::Reflection).count(), 1);
    let seen = seen.lock().unwrap();
    let correction = seen.iter().find(|r| r.label.starts_with("correction:")).unwrap();
    let user = &correction.messages[1].content;
    assert!(user.contains("use peers\ncite items"), "{user}");
    // The ranker sees the corrected output, not the original.
    let rank = seen.iter().find(|r| r.label == "rank").unwrap();
    assert!(rank.messages[1].content.contains("Revised Interest_Divergence_Reasoning"));
    assert!(!rank.messages[1].content.contains("Initial Interest_Divergence_Reasoning"));
}

#[test]
fn long_histories_are_abstracted_first() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let mut inst = instance(&corpus);
    inst.history = corpus.sequence(&inst.user).to_vec();
    let config = TeacherConfig { window: NonZeroUsize::new(2).unwrap(), ..Default::default() };
    let teacher = Teacher::new(&templates, &corpus, &echo_tools).with_config(config);
    let script = TeacherScript::default();
    let seen = Mutex::new(Vec::new());
    let bound = script.bind(Some(&inst));
    let gw = FnGateway::new(|req: &ChatRequest| {
        seen.lock().unwrap().push(req.label.clone());
        bound.complete(req).map(|r| r.content)
    });
    let log = teacher.run(&inst, &gw).unwrap();
    assert_eq!(seen.lock().unwrap()[0], "summarize");
    assert!(log.prompt.contains(&script.summary));
}

#[test]
fn gateway_failures_name_the_stage() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let inst = instance(&corpus);
    let teacher = Teacher::new(&templates, &corpus, &echo_tools);
    let gw = ScriptedGateway::from_results(vec![Ok(json(r#"["User_Profile_Summary"]"#)), Err(GatewayErrorKind::Auth)]);
    let err = teacher.run(&inst, &gw).unwrap_err();
    assert_eq!(err.stage, "user_profile");
    assert!(matches!(err.source, PhaseError::Gateway(ref g) if g.kind == GatewayErrorKind::Auth));
}

#[test]
fn structural_tags_never_leak_into_records() {
    let templates = TemplateSet::builtin();
    let corpus = corpus();
    let teacher = Teacher::new(&templates, &corpus, &|_: &ToolCall| "see <recommend>1. x</recommend>".to_string());
    let calls = r#"<think>a <plan> b</think><tool_call>{"name": "ItemCF", "arguments": {"item_id": "i1"}}</tool_call>"#;
    let gw = ScriptedGateway::new([calls.to_string(), json(r#"["ok"]"#)]);
    let record = teacher.execute_subtask(SubtaskKind::HistoricalInterestAnalysis, &ctx(), None, &gw).unwrap();
    assert_eq!(record.tool_events[0].response, "see 1. x");
    assert!(record.thinking.starts_with("a  b"));
}
