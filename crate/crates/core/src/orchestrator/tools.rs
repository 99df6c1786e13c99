//! Tool calls written by the model inside `<tool_call>` blocks, and the CF
//! tools that answer them.

use std::collections::BTreeMap;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::ChatGateway;
use crate::graph::InteractionGraph;
use crate::ids::{ItemId, UserId};
use crate::verbalizer::{CfTool, EvidenceCache, EvidenceKey, Lookup, Verbalizer, CACHE_MISS_TEXT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: CfTool,
    pub arguments: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn item_cf(item: &ItemId) -> Self {
        Self { name: CfTool::ItemCf, arguments: BTreeMap::from([("item_id".into(), item.to_string())]) }
    }

    pub fn user_cf(user: &UserId) -> Self {
        Self { name: CfTool::UserCf, arguments: BTreeMap::from([("user_id".into(), user.to_string())]) }
    }

    /// The anchor id named by the call's single argument.
    pub fn anchor(&self) -> &str {
        self.arguments.get(self.name.argument_key()).map(String::as_str).unwrap_or("")
    }

    /// Compact JSON, the form written into trajectories.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tool call serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToolError {
    #[error("malformed tool call: {0}")]
    Parse(String),
    #[error("bad tool arguments: {0}")]
    Argument(String),
}

fn tool_name(v: Option<&Value>) -> Result<CfTool, ToolError> {
    match v.and_then(Value::as_str) {
        Some("ItemCF") => Ok(CfTool::ItemCf),
        Some("UserCF") => Ok(CfTool::UserCf),
        Some(other) => Err(ToolError::Parse(format!("unknown tool `{other}`"))),
        None => Err(ToolError::Parse("call has no string `name`".into())),
    }
}

fn argument_map(tool: CfTool, args: &serde_json::Map<String, Value>) -> Result<BTreeMap<String, String>, ToolError> {
    let key = tool.argument_key();
    if args.len() != 1 || !args.contains_key(key) {
        let keys: Vec<&str> = args.keys().map(String::as_str).collect();
        return Err(ToolError::Argument(format!("{tool} expects exactly `{key}`, got {keys:?}")));
    }
    let value = match &args[key] {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => return Err(ToolError::Argument(format!("`{key}` must be a string, got {other}"))),
    };
    if value.is_empty() {
        return Err(ToolError::Argument(format!("`{key}` is empty")));
    }
    Ok(BTreeMap::from([(key.to_string(), value)]))
}

fn decode_call(value: &Value, out: &mut Vec<ToolCall>) -> Result<(), ToolError> {
    let obj = value.as_object().ok_or_else(|| ToolError::Parse(format!("expected an object, got {value}")))?;
    let name = tool_name(obj.get("name"))?;
    let arguments = match obj.get("arguments") {
        Some(Value::Object(map)) => vec![argument_map(name, map)?],
        // Some models emit the arguments object as a JSON string.
        Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
            Ok(Value::Object(map)) => vec![argument_map(name, &map)?],
            _ => return Err(ToolError::Parse(format!("arguments string is not a JSON object: {s}"))),
        },
        // One call per element, as in `"arguments": [{"item_id": ..}, ..]`.
        Some(Value::Array(items)) if !items.is_empty() => items
            .iter()
            .map(|v| match v {
                Value::Object(map) => argument_map(name, map),
                other => Err(ToolError::Parse(format!("argument list element is not an object: {other}"))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => return Err(ToolError::Argument(format!("unsupported arguments value {other}"))),
        None => return Err(ToolError::Argument(format!("{name} call has no arguments"))),
    };
    out.extend(arguments.into_iter().map(|arguments| ToolCall { name, arguments }));
    Ok(())
}

/// Decodes one `<tool_call>` body: one or more JSON call objects (or arrays
/// of them) separated by whitespace.
pub fn decode_tool_block(body: &str) -> Result<Vec<ToolCall>, ToolError> {
    let mut calls = Vec::new();
    for value in serde_json::Deserializer::from_str(body).into_iter::<Value>() {
        let value = value.map_err(|e| ToolError::Parse(e.to_string()))?;
        match &value {
            Value::Array(items) => {
                for item in items {
                    decode_call(item, &mut calls)?;
                }
            }
            _ => decode_call(&value, &mut calls)?,
        }
    }
    if calls.is_empty() {
        return Err(ToolError::Parse("empty tool call block".into()));
    }
    Ok(calls)
}

fn call_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""name"\s*:\s*"(ItemCF|UserCF)""#).expect("valid regex"))
}

fn call_arg_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""(item_id|user_id)"\s*:\s*"?([^"\s,}\]]+)"#).expect("valid regex"))
}

/// Like [`decode_tool_block`], but when the block is not valid JSON the
/// calls are recovered from their `"name"` and id fields. Models often
/// quote the arguments object without escaping its inner quotes.
pub fn decode_tool_block_lenient(body: &str) -> Result<Vec<ToolCall>, ToolError> {
    let strict = match decode_tool_block(body) {
        Ok(calls) => return Ok(calls),
        Err(e @ ToolError::Argument(_)) => return Err(e),
        Err(e) => e,
    };
    let names: Vec<_> = call_name_re().captures_iter(body).collect();
    let mut calls = Vec::new();
    for (i, cap) in names.iter().enumerate() {
        let name = if &cap[1] == "ItemCF" { CfTool::ItemCf } else { CfTool::UserCf };
        let start = cap.get(0).expect("group 0").end();
        let end = names.get(i + 1).map_or(body.len(), |c| c.get(0).expect("group 0").start());
        let mut found = false;
        for arg in call_arg_re().captures_iter(&body[start..end]) {
            if &arg[1] != name.argument_key() {
                return Err(ToolError::Argument(format!("{name} expects `{}`, got `{}`", name.argument_key(), &arg[1])));
            }
            calls.push(ToolCall { name, arguments: BTreeMap::from([(arg[1].to_string(), arg[2].to_string())]) });
            found = true;
        }
        if !found {
            return Err(ToolError::Argument(format!("{name} call has no {}", name.argument_key())));
        }
    }
    if calls.is_empty() {
        return Err(strict);
    }
    Ok(calls)
}

/// Answers tool calls with evidence text. Failures are reported as text so
/// a bad argument never aborts a session.
pub trait ToolBox: Send + Sync {
    fn call(&self, call: &ToolCall) -> String;
}

pub enum OnMiss<'a> {
    Fallback,
    Verbalize(&'a Verbalizer<'a>, &'a dyn ChatGateway),
}

/// Serves UserCF/ItemCF from the precomputed evidence cache.
pub struct CfTools<'a> {
    pub graph: &'a InteractionGraph,
    pub cache: &'a EvidenceCache,
    pub on_miss: OnMiss<'a>,
}

impl<'a> CfTools<'a> {
    pub fn new(graph: &'a InteractionGraph, cache: &'a EvidenceCache) -> Self {
        Self { graph, cache, on_miss: OnMiss::Fallback }
    }
}

impl ToolBox for CfTools<'_> {
    fn call(&self, call: &ToolCall) -> String {
        let anchor = call.anchor();
        let Ok(key) = EvidenceKey::from_parts(call.name, anchor) else {
            return format!("tool error: missing {}", call.name.argument_key());
        };
        let known = match &key {
            EvidenceKey::Item(id) => self.graph.users_of(id).is_some(),
            EvidenceKey::User(id) => self.graph.items_of(id).is_some(),
        };
        if !known {
            return format!("tool error: unknown {} {anchor}", call.name.argument_key());
        }
        match self.cache.lookup(&key) {
            Lookup::Hit(evidence) => evidence.text.clone(),
            Lookup::CacheMiss => match &self.on_miss {
                OnMiss::Fallback => CACHE_MISS_TEXT.to_string(),
                OnMiss::Verbalize(verbalizer, gateway) => match verbalizer.verbalize(&key, *gateway) {
                    Ok(evidence) => evidence.text,
                    Err(err) => format!("tool error: {err}"),
                },
            },
        }
    }
}

impl<F> ToolBox for F
where
    F: Fn(&ToolCall) -> String + Send + Sync,
{
    fn call(&self, call: &ToolCall) -> String {
        self(call)
    }
}
