//! Plain-text renderings of corpus records for prompts.

use chrono::DateTime;

use crate::corpus::{Corpus, Interaction, ItemMeta, UserMeta};
use crate::ids::{ItemId, UserId};

pub const REVIEW_EXCERPT_CHARS: usize = 300;

/// `item_id: X, title: T, <attr>: <value>, ...` with attributes in key order.
/// Items without metadata render as their id alone.
pub fn item_line(id: &ItemId, meta: Option<&ItemMeta>) -> String {
    let mut out = format!("item_id: {id}");
    if let Some(meta) = meta {
        out.push_str(", title: ");
        out.push_str(&meta.title);
        for (k, v) in &meta.attributes {
            out.push_str(&format!(", {k}: {v}"));
        }
    }
    out
}

pub fn item_lines<'a>(corpus: &Corpus, ids: impl IntoIterator<Item = &'a ItemId>) -> String {
    ids.into_iter()
        .map(|id| item_line(id, corpus.item(id)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn user_info(id: &UserId, meta: Option<&UserMeta>) -> String {
    let mut out = format!("user_id: {id}");
    if let Some(meta) = meta {
        for (k, v) in &meta.attributes {
            out.push_str(&format!(", {k}: {v}"));
        }
    }
    out
}

/// Hour-resolution UTC timestamp such as `2017-03-05-10AM`.
pub fn review_time(timestamp: i64) -> String {
    match DateTime::from_timestamp(timestamp, 0) {
        Some(t) => t.format("%Y-%m-%d-%I%p").to_string(),
        None => timestamp.to_string(),
    }
}

pub fn excerpt(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((cut, _)) => format!("{}...", &text[..cut]),
        None => text.to_string(),
    }
}

/// One behavior line: time, id, title, rating and a review excerpt.
pub fn interaction_line(interaction: &Interaction, corpus: &Corpus) -> String {
    let mut out = format!("Review time: {} item_id: {}", review_time(interaction.timestamp), interaction.item);
    if let Some(meta) = corpus.item(&interaction.item) {
        out.push_str(" title: ");
        out.push_str(&meta.title);
    }
    if let Some(rating) = interaction.rating {
        out.push_str(&format!(" rating: {rating}"));
    }
    if let Some(text) = interaction.review_text.as_deref().filter(|t| !t.is_empty()) {
        let text = excerpt(text, REVIEW_EXCERPT_CHARS).replace('\n', " ");
        out.push_str(&format!(" user review text: \"{text}\""));
    }
    out
}

pub fn interaction_lines(history: &[Interaction], corpus: &Corpus) -> String {
    history.iter().map(|i| interaction_line(i, corpus)).collect::<Vec<_>>().join("\n")
}

/// Body of the last `<open>...</close>` envelope in `text`, trimmed.
pub fn last_enveloped<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let end = text.rfind(close)?;
    let start = text[..end].rfind(open)? + open.len();
    Some(text[start..end].trim())
}
