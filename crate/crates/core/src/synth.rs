//! Seeded generators of synthetic session logs and of tag-level corruptions
//! of their serialized form. Used by the property tests and the acceptance
//! suite.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::ids::{ItemId, UserId};
use crate::orchestrator::{Phase, PhaseRecord, SessionLog, SubtaskKind, ToolCall, ToolEvent};
use crate::trajectory::{LEAF_TAGS, SECTION_TAGS};

const WORDS: &[&str] = &[
    "user", "reads", "space", "opera", "mystery", "a < b", "5 > 3", "<Answer>", "<br>", "\"quoted\"", "naïve", "表", "{x}",
    "1.", "tab\there", "x/y", "</b>", "\\", "-", "ok",
];

fn text(rng: &mut impl Rng, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str([" ", " ", "  ", "\n", " \n "][rng.random_range(0..5)]);
        }
        out.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    out
}

fn item(rng: &mut impl Rng) -> ItemId {
    ItemId::new(format!("i{}", rng.random_range(0..10_000))).expect("non-empty")
}

fn payload(rng: &mut impl Rng) -> String {
    let findings: Vec<String> = (0..rng.random_range(1..4)).map(|_| text(rng, 6)).collect();
    let mut json = serde_json::to_string(&findings).expect("strings serialize");
    if rng.random_bool(0.3) {
        json = serde_json::to_string_pretty(&findings).expect("strings serialize");
    }
    json
}

fn tool_events(rng: &mut impl Rng, user: &UserId, max: usize) -> Vec<ToolEvent> {
    (0..rng.random_range(0..=max))
        .map(|_| {
            let call = if rng.random_bool(0.5) { ToolCall::item_cf(&item(rng)) } else { ToolCall::user_cf(user) };
            ToolEvent { call, response: text(rng, 12) }
        })
        .collect()
}

fn record(rng: &mut impl Rng, phase: Phase, user: &UserId) -> PhaseRecord {
    let tools = if phase.allows_tools() { tool_events(rng, user, 3) } else { Vec::new() };
    let mut thinking = text(rng, 15);
    if rng.random_bool(0.2) {
        thinking = format!("\n  {thinking} \n");
    }
    PhaseRecord { phase, thinking, tool_events: tools, payload: payload(rng), replies: Vec::new() }
}

/// A structurally valid session: plan, a non-empty subset of agents,
/// reflection, optional corrections, ranking over 20 distinct candidates.
pub fn session_log(rng: &mut impl Rng) -> SessionLog {
    let user = UserId::new(format!("u{}", rng.random_range(0..1000))).expect("non-empty");
    let mut candidates: Vec<ItemId> = Vec::new();
    while candidates.len() < 20 {
        let id = item(rng);
        if !candidates.contains(&id) {
            candidates.push(id);
        }
    }
    let ground_truth = candidates[rng.random_range(0..20)].clone();
    let mut plan = SubtaskKind::ALL.to_vec();
    plan.shuffle(rng);
    plan.truncate(rng.random_range(1..=4));

    let mut phases = vec![record(rng, Phase::Plan, &user)];
    phases.extend(plan.iter().map(|&k| record(rng, Phase::subtask(k), &user)));
    phases.push(record(rng, Phase::Reflection, &user));
    if rng.random_bool(0.4) {
        for &k in &plan {
            if rng.random_bool(0.5) {
                phases.push(record(rng, Phase::Correction(k), &user));
            }
        }
    }
    let mut rank = record(rng, Phase::Recommend, &user);
    let mut ranking = candidates.clone();
    ranking.shuffle(rng);
    rank.payload = serde_json::to_string(&ranking).expect("ids serialize");
    phases.push(rank);
    SessionLog {
        instance_id: format!("synthetic-{user}"),
        user,
        candidates,
        ground_truth,
        prompt: text(rng, 20),
        phases,
        final_ranking: ranking,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    DropCloser,
    SwapCloser,
    StrayCloser,
    DuplicateRecommend,
    DropRecommend,
    UnknownTag,
    NestSection,
}

impl Mutation {
    pub const ALL: [Mutation; 7] = [
        Mutation::DropCloser,
        Mutation::SwapCloser,
        Mutation::StrayCloser,
        Mutation::DuplicateRecommend,
        Mutation::DropRecommend,
        Mutation::UnknownTag,
        Mutation::NestSection,
    ];
}

/// Byte ranges and names of every structural closing tag.
fn closers(text: &str) -> Vec<(usize, usize, &str)> {
    let re = regex::Regex::new(r"</([A-Za-z_]+)>").expect("valid regex");
    re.captures_iter(text)
        .filter_map(|c| {
            let name = c.get(1)?.as_str();
            let whole = c.get(0)?;
            (SECTION_TAGS.contains(&name) || LEAF_TAGS.contains(&name)).then_some((whole.start(), whole.end(), name))
        })
        .collect()
}

/// Byte offsets where one top-level section ends and the next begins.
fn section_boundaries(text: &str) -> Vec<usize> {
    let mut out = vec![0];
    for (_, end, name) in closers(text) {
        if SECTION_TAGS.contains(&name) {
            out.push(end);
        }
    }
    out
}

/// Applies one corruption that the strict grammar must reject. `text` must
/// be a valid serialized trajectory.
pub fn mutate(text: &str, mutation: Mutation, rng: &mut impl Rng) -> String {
    let cl = closers(text);
    let recommend_start = text.rfind("<recommend>").expect("valid trajectory has <recommend>");
    match mutation {
        Mutation::DropCloser => {
            let (s, e, _) = cl[rng.random_range(0..cl.len())];
            format!("{}{}", &text[..s], &text[e..])
        }
        Mutation::SwapCloser => {
            let (s, e, name) = cl[rng.random_range(0..cl.len())];
            let all: Vec<&str> = SECTION_TAGS.iter().chain(LEAF_TAGS.iter()).copied().filter(|t| *t != name).collect();
            let other = all[rng.random_range(0..all.len())];
            format!("{}</{other}>{}", &text[..s], &text[e..])
        }
        Mutation::StrayCloser => {
            let at = *section_boundaries(text).choose(rng).expect("at least one boundary");
            let tag = SECTION_TAGS[rng.random_range(0..SECTION_TAGS.len())];
            format!("{}</{tag}>{}", &text[..at], &text[at..])
        }
        Mutation::DuplicateRecommend => format!("{text}\n{}", &text[recommend_start..]),
        Mutation::DropRecommend => text[..recommend_start].to_string(),
        Mutation::UnknownTag => {
            let at = *section_boundaries(text).choose(rng).expect("at least one boundary");
            format!("{}<scratchpad>{}", &text[..at], &text[at..])
        }
        Mutation::NestSection => {
            let opener = text.find('>').expect("first opener") + 1;
            let tag = SECTION_TAGS[rng.random_range(0..SECTION_TAGS.len())];
            format!("{}<{tag}></{tag}>{}", &text[..opener], &text[opener..])
        }
    }
}
