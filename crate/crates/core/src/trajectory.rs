//! Linear tagged form of a teacher session, its strict parser, the top-1
//! outcome filter and SFT export.
//!
//! Grammar (whitespace and other free text between top-level sections is
//! ignored):
//!
//! ```text
//! trajectory := section* recommend
//! section    := <tag> (leaf | text)* </tag>
//! leaf       := <think>…</think> | <Thinking>…</Thinking> | <JSON>…</JSON>
//!             | <tool_call>…</tool_call> | <tool_response>…</tool_response>
//! ```
//!
//! Section tags are `plan`, the four analysis tags, `reflection` and
//! `recommend`. Leaves never contain structural tags. Tool blocks are only
//! allowed in analysis and `recommend` sections and every `tool_response`
//! follows a `tool_call` of the same section. `recommend` occurs exactly once
//! and closes the trajectory.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::ItemId;
use crate::io::{write_jsonl, RecordError};
use crate::orchestrator::{decode_tool_block, Phase, SessionLog, SubtaskKind, ToolEvent};
use crate::template::{TemplateError, TemplateName, TemplateSet};

pub const SECTION_TAGS: [&str; 7] = [
    "plan",
    "user_profile",
    "historical_analysis",
    "recent_analysis",
    "interest_divergence",
    "reflection",
    "recommend",
];

pub const LEAF_TAGS: [&str; 5] = ["think", "Thinking", "JSON", "tool_call", "tool_response"];

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(/?)([A-Za-z_]+)>").expect("valid regex"))
}

fn is_structural(name: &str) -> bool {
    SECTION_TAGS.contains(&name) || LEAF_TAGS.contains(&name)
}

/// Tag-shaped names the grammar reserves: anything lowercase that is not a
/// known tag is an error outside leaves.
fn looks_like_tag(name: &str) -> bool {
    name.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// Removes every structural tag token so the text can sit inside a leaf.
/// Repeats until stable, since removal can splice a new tag together.
pub fn strip_structural_tags(text: &str) -> String {
    let mut current = text.to_string();
    loop {
        let next = tag_re()
            .replace_all(&current, |c: &regex::Captures| {
                if is_structural(&c[2]) {
                    String::new()
                } else {
                    c[0].to_string()
                }
            })
            .into_owned();
        if next == current {
            return current;
        }
        current = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagErrorKind {
    Unclosed,
    Unknown,
    Misnested,
    DuplicateRecommend,
    MissingRecommend,
    /// `recommend` yields no item ids.
    EmptyRanking,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} at byte {offset}: {detail}")]
pub struct TagError {
    pub kind: TagErrorKind,
    pub offset: usize,
    pub detail: String,
}

impl TagError {
    fn new(kind: TagErrorKind, offset: usize, detail: impl Into<String>) -> Self {
        Self { kind, offset, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolExchange {
    /// Raw `<tool_call>` body.
    pub call: String,
    /// Raw `<tool_response>` bodies that followed it.
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSection {
    pub tag: String,
    /// Think-block bodies joined with newlines.
    pub thinking: String,
    /// Free text outside leaves, trimmed.
    pub text: String,
    pub tool_exchanges: Vec<ToolExchange>,
    /// Body of the last `<JSON>` leaf.
    pub payload: Option<String>,
    /// Everything between the section's tags.
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolDecodeError(pub String);

impl ParsedSection {
    /// Decodes the tool exchanges into call/response pairs. Each call in a
    /// block must have exactly one response.
    pub fn tool_events(&self) -> Result<Vec<ToolEvent>, ToolDecodeError> {
        let mut out = Vec::new();
        for ex in &self.tool_exchanges {
            let calls = decode_tool_block(&ex.call).map_err(|e| ToolDecodeError(e.to_string()))?;
            if calls.len() != ex.responses.len() {
                return Err(ToolDecodeError(format!("{} calls but {} responses", calls.len(), ex.responses.len())));
            }
            for (call, raw) in calls.into_iter().zip(&ex.responses) {
                let response = decode_tool_response(raw).ok_or_else(|| ToolDecodeError(format!("bad response {raw}")))?;
                out.push(ToolEvent { call, response });
            }
        }
        Ok(out)
    }
}

fn decode_tool_response(raw: &str) -> Option<String> {
    match serde_json::from_str::<Value>(raw.trim()).ok()? {
        Value::Object(obj) => obj.get("result").and_then(Value::as_str).map(str::to_string),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrajectory {
    pub sections: Vec<ParsedSection>,
    pub ranking: Vec<ItemId>,
}

impl ParsedTrajectory {
    pub fn has_section(&self, tag: &str) -> bool {
        self.sections.iter().any(|s| s.tag == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token<'a> {
    Open(&'a str),
    Close(&'a str),
    Unknown(&'a str),
    Text(&'a str),
}

fn lex(text: &str) -> Vec<(usize, Token<'_>)> {
    let mut out = Vec::new();
    let mut last = 0;
    for c in tag_re().captures_iter(text) {
        let whole = c.get(0).expect("group 0");
        let name = c.get(2).expect("group 2").as_str();
        let token = if is_structural(name) {
            if c[1].is_empty() {
                Token::Open(name)
            } else {
                Token::Close(name)
            }
        } else if looks_like_tag(name) {
            Token::Unknown(whole.as_str())
        } else {
            continue;
        };
        if whole.start() > last {
            out.push((last, Token::Text(&text[last..whole.start()])));
        }
        out.push((whole.start(), token));
        last = whole.end();
    }
    if last < text.len() {
        out.push((last, Token::Text(&text[last..])));
    }
    out
}

/// Slice of `text` between two token offsets, used to recover leaf bodies
/// including any non-structural tags they contain.
fn span(text: &str, start: usize, end: usize) -> &str {
    &text[start..end]
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[\s,;])(\d+)[.)][ \t]+").expect("valid regex"))
}

/// Ids from a `1. a, 2. b` or one-per-line numbered list. Each entry ends at
/// the next comma or newline; ellipses are skipped.
pub fn numbered_list(text: &str) -> Vec<ItemId> {
    let mut out = Vec::new();
    for m in numbered_re().captures_iter(text) {
        let rest = &text[m.get(0).expect("group 0").end()..];
        let entry = rest.split([',', '\n', ';']).next().unwrap_or("").trim();
        if entry.is_empty() || entry.chars().all(|c| c == '.' || c == '…') {
            continue;
        }
        if let Ok(id) = ItemId::new(entry) {
            out.push(id);
        }
    }
    out
}

fn json_ranking(payload: &str) -> Option<Vec<ItemId>> {
    let values: Vec<Value> = serde_json::from_str(payload.trim()).ok()?;
    values
        .into_iter()
        .map(|v| match v {
            Value::String(s) => ItemId::new(s.trim()).ok(),
            Value::Number(n) => ItemId::new(n.to_string()).ok(),
            _ => None,
        })
        .collect()
}

fn tools_allowed(tag: &str) -> bool {
    tag == "recommend" || SubtaskKind::from_tag(tag).is_some()
}

/// Strict parse; see the module docs for the grammar.
pub fn parse(text: &str) -> Result<ParsedTrajectory, TagError> {
    use TagErrorKind::*;
    let tokens = lex(text);
    let mut sections: Vec<ParsedSection> = Vec::new();
    let mut i = 0;
    let mut seen_recommend = false;
    while i < tokens.len() {
        let (offset, token) = tokens[i];
        match token {
            Token::Text(_) => i += 1,
            Token::Unknown(t) => return Err(TagError::new(Unknown, offset, format!("unknown tag {t}"))),
            Token::Close(name) => return Err(TagError::new(Misnested, offset, format!("</{name}> without opener"))),
            Token::Open(name) if !SECTION_TAGS.contains(&name) => {
                return Err(TagError::new(Misnested, offset, format!("<{name}> outside a section")))
            }
            Token::Open(name) => {
                if seen_recommend {
                    let kind = if name == "recommend" { DuplicateRecommend } else { Misnested };
                    return Err(TagError::new(kind, offset, format!("<{name}> after <recommend>")));
                }
                let body_start = offset + name.len() + 2;
                let (section, next) = parse_section(text, &tokens, i + 1, name, body_start)?;
                seen_recommend |= name == "recommend";
                sections.push(section);
                i = next;
            }
        }
    }
    let Some(recommend) = sections.last().filter(|s| s.tag == "recommend") else {
        return Err(TagError::new(MissingRecommend, text.len(), "no <recommend> section"));
    };
    let ranking = match &recommend.payload {
        Some(p) => json_ranking(p).unwrap_or_default(),
        None => numbered_list(&recommend.text),
    };
    if ranking.is_empty() {
        return Err(TagError::new(EmptyRanking, text.len(), "<recommend> names no items"));
    }
    Ok(ParsedTrajectory { sections, ranking })
}

fn parse_section(
    text: &str,
    tokens: &[(usize, Token<'_>)],
    mut i: usize,
    tag: &str,
    body_start: usize,
) -> Result<(ParsedSection, usize), TagError> {
    use TagErrorKind::*;
    let mut thinking: Vec<&str> = Vec::new();
    let mut free = String::new();
    let mut exchanges: Vec<ToolExchange> = Vec::new();
    let mut payload = None;
    while i < tokens.len() {
        let (offset, token) = tokens[i];
        match token {
            Token::Text(t) => {
                free.push_str(t);
                i += 1;
            }
            Token::Unknown(t) => return Err(TagError::new(Unknown, offset, format!("unknown tag {t} in <{tag}>"))),
            Token::Close(name) if name == tag => {
                let section = ParsedSection {
                    tag: tag.to_string(),
                    thinking: thinking.join("\n"),
                    text: free.trim().to_string(),
                    tool_exchanges: exchanges,
                    payload,
                    body: span(text, body_start, offset).to_string(),
                };
                return Ok((section, i + 1));
            }
            Token::Close(name) => {
                return Err(TagError::new(Misnested, offset, format!("</{name}> inside <{tag}>")));
            }
            Token::Open(name) if SECTION_TAGS.contains(&name) => {
                return Err(TagError::new(Misnested, offset, format!("<{name}> inside <{tag}>")));
            }
            Token::Open(leaf) => {
                let leaf_start = offset + leaf.len() + 2;
                let mut j = i + 1;
                let leaf_end = loop {
                    match tokens.get(j) {
                        None => return Err(TagError::new(Unclosed, offset, format!("<{leaf}> never closed"))),
                        Some(&(end, Token::Close(name))) if name == leaf => break end,
                        Some(&(at, Token::Open(name) | Token::Close(name))) => {
                            return Err(TagError::new(Misnested, at, format!("<{name}> inside <{leaf}>")));
                        }
                        Some(_) => j += 1,
                    }
                };
                let body = span(text, leaf_start, leaf_end);
                match leaf {
                    "think" | "Thinking" => thinking.push(body),
                    "JSON" => payload = Some(body.to_string()),
                    "tool_call" | "tool_response" if !tools_allowed(tag) => {
                        return Err(TagError::new(Misnested, offset, format!("<{leaf}> not allowed in <{tag}>")));
                    }
                    "tool_call" => exchanges.push(ToolExchange { call: body.to_string(), responses: Vec::new() }),
                    "tool_response" => match exchanges.last_mut() {
                        Some(ex) => ex.responses.push(body.to_string()),
                        None => {
                            return Err(TagError::new(Misnested, offset, "<tool_response> before any <tool_call>"));
                        }
                    },
                    _ => unreachable!("leaf tags are exhaustive"),
                }
                i = j + 1;
            }
        }
    }
    Err(TagError::new(Unclosed, body_start, format!("<{tag}> never closed")))
}

fn push_tool_events(out: &mut String, events: &[ToolEvent]) {
    for e in events {
        out.push_str("<tool_call>\n");
        out.push_str(&e.call.to_json());
        out.push_str("\n</tool_call>\n<tool_response>\n");
        out.push_str(&serde_json::json!({ "result": e.response }).to_string());
        out.push_str("\n</tool_response>\n");
    }
}

/// Linear tagged text of a session. Corrections reuse their agent's tag and
/// the ranking is written as a numbered list.
pub fn serialize(log: &SessionLog) -> String {
    let mut out = String::new();
    for (idx, record) in log.phases.iter().enumerate() {
        if idx > 0 {
            out.push('\n');
        }
        let tag = record.phase.tag();
        out.push_str(&format!("<{tag}>\n<think>{}</think>\n", record.thinking));
        push_tool_events(&mut out, &record.tool_events);
        if record.phase == Phase::Recommend {
            for (rank, id) in log.final_ranking.iter().enumerate() {
                out.push_str(&format!("{}. {id}\n", rank + 1));
            }
        } else {
            out.push_str(&format!("<JSON>{}</JSON>\n", record.payload));
        }
        out.push_str(&format!("</{tag}>"));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Indices of kept trajectories, in input order.
    pub kept: Vec<usize>,
    pub total: usize,
    pub unparsable: usize,
}

/// Keeps trajectories whose top-ranked item is the ground truth.
/// Unparsable texts are dropped and counted.
pub fn outcome_filter(trajectories: &[(&str, &ItemId)]) -> FilterReport {
    let mut report = FilterReport { total: trajectories.len(), ..Default::default() };
    for (idx, (text, gt)) in trajectories.iter().enumerate() {
        match parse(text) {
            Ok(parsed) if parsed.ranking.first() == Some(*gt) => report.kept.push(idx),
            Ok(_) => {}
            Err(err) => {
                log::debug!("trajectory {idx} dropped: {err}");
                report.unparsable += 1;
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

pub fn sft_record(templates: &TemplateSet, log: &SessionLog) -> Result<SftRecord, TemplateError> {
    Ok(SftRecord {
        system: templates.render(TemplateName::IntegratedSystem, &[])?,
        user: log.prompt.clone(),
        assistant: serialize(log),
    })
}

/// Writes one record per line and returns the number written.
pub fn export_sft(records: &[SftRecord], out: &Path) -> Result<usize, RecordError> {
    write_jsonl(out, records)?;
    Ok(records.len())
}
