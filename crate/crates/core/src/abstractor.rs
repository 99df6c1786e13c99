//! Long-sequence preprocessing: older behavior is folded into a running
//! summary chunk by chunk, the final chunk is kept raw.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Interaction};
use crate::gateway::{ChatGateway, ChatMessage, ChatRequest, GatewayError, Sampling};
use crate::render;
use crate::template::{TemplateError, TemplateName, TemplateSet};

pub const DEFAULT_WINDOW: usize = 10;

/// Placeholder for the previous summary on the first fold step.
pub const NO_PREVIOUS_SUMMARY: &str = "None";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridHistory {
    /// Empty when the whole history fits in one window.
    pub long_term_summary: String,
    pub recent_raw: Vec<Interaction>,
    pub window_size_m: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum AbstractError {
    #[error("cannot abstract an empty history")]
    EmptyHistory,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("summary reply for chunk {chunk} has no <SUMMARY>...</SUMMARY> envelope")]
    MissingSummaryTags { chunk: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Consecutive groups of `m`; the last group holds the remainder.
pub fn chunk<T>(history: &[T], m: NonZeroUsize) -> Vec<&[T]> {
    history.chunks(m.get()).collect()
}

/// Inputs shared by every summarize call for one user.
pub struct Abstractor<'a> {
    templates: &'a TemplateSet,
    pub m: NonZeroUsize,
    pub sampling: Sampling,
}

impl<'a> Abstractor<'a> {
    pub fn new(templates: &'a TemplateSet, m: NonZeroUsize) -> Self {
        Self { templates, m, sampling: Sampling::default() }
    }

    /// `render` turns one interaction into a behavior line.
    pub fn abstract_history(
        &self,
        user_information: &str,
        history: &[Interaction],
        gateway: &dyn ChatGateway,
        render: &dyn Fn(&Interaction) -> String,
    ) -> Result<HybridHistory, AbstractError> {
        if history.is_empty() {
            return Err(AbstractError::EmptyHistory);
        }
        let chunks = chunk(history, self.m);
        let (last, earlier) = chunks.split_last().expect("non-empty history has a chunk");
        let system = self.templates.render(TemplateName::PreprocessSystem, &[])?;
        let mut summary = String::new();
        for (idx, group) in earlier.iter().enumerate() {
            let behaviors = group.iter().map(render).collect::<Vec<_>>().join("\n");
            let previous = if idx == 0 { NO_PREVIOUS_SUMMARY } else { summary.as_str() };
            let user = self.templates.render(
                TemplateName::PreprocessUser,
                &[("user_information", user_information), ("previous_summary", previous), ("behaviors", &behaviors)],
            )?;
            let request = ChatRequest::new(
                "summarize",
                vec![ChatMessage::system(system.clone()), ChatMessage::user(user)],
                self.sampling,
            );
            let reply = gateway.complete(&request)?;
            summary = render::last_enveloped(&reply.content, "<SUMMARY>", "</SUMMARY>")
                .ok_or(AbstractError::MissingSummaryTags { chunk: idx })?
                .to_string();
        }
        Ok(HybridHistory { long_term_summary: summary, recent_raw: last.to_vec(), window_size_m: self.m.get() })
    }

    /// [`Self::abstract_history`] with the standard behavior-line rendering.
    pub fn abstract_for(
        &self,
        corpus: &Corpus,
        user_information: &str,
        history: &[Interaction],
        gateway: &dyn ChatGateway,
    ) -> Result<HybridHistory, AbstractError> {
        self.abstract_history(user_information, history, gateway, &|i| render::interaction_line(i, corpus))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::ScriptedGateway;
    use crate::gateway::Counted;
    use crate::ids::{ItemId, UserId};

    fn m(n: usize) -> NonZeroUsize {
        NonZeroUsize::new(n).unwrap()
    }

    fn history(n: usize) -> Vec<Interaction> {
        (0..n)
            .map(|i| Interaction {
                user: UserId::new("u").unwrap(),
                item: ItemId::new(format!("i{i}")).unwrap(),
                timestamp: i as i64,
                rating: None,
                review_text: None,
            })
            .collect()
    }

    fn line(i: &Interaction) -> String {
        i.item.to_string()
    }

    #[test]
    fn chunk_sizes() {
        let sizes = |n: usize, k: usize| chunk(&history(n), m(k)).iter().map(|c| c.len()).collect::<Vec<_>>();
        assert_eq!(sizes(7, 3), [3, 3, 1]);
        assert_eq!(sizes(3, 5), [3]);
        assert_eq!(sizes(6, 3), [3, 3]);
    }

    #[test]
    fn short_history_needs_no_calls() {
        let t = TemplateSet::builtin();
        let gw = Counted::new(ScriptedGateway::new(Vec::<String>::new()));
        let h = history(2);
        let out = Abstractor::new(&t, m(5)).abstract_history("u", &h, &gw, &line).unwrap();
        assert_eq!(gw.calls(), 0);
        assert_eq!(out.long_term_summary, "");
        assert_eq!(out.recent_raw, h);
    }

    #[test]
    fn ten_items_window_three_folds_three_times() {
        let t = TemplateSet::builtin();
        let gw = ScriptedGateway::new(["<SUMMARY>s1</SUMMARY>", "x <SUMMARY>s2</SUMMARY>", "<SUMMARY> s3 </SUMMARY>"]);
        let h = history(10);
        let out = Abstractor::new(&t, m(3)).abstract_history("user_id: u", &h, &gw, &line).unwrap();
        assert_eq!(out.long_term_summary, "s3");
        assert_eq!(out.recent_raw, &h[9..]);
        let reqs = gw.requests();
        assert_eq!(reqs.len(), 3);
        assert!(reqs[0].messages[1].content.contains("# Previous Summary\nNone\n"));
        assert!(reqs[0].messages[1].content.ends_with("i0\ni1\ni2"));
        assert!(reqs[1].messages[1].content.contains("# Previous Summary\ns1\n"));
        assert!(reqs[2].messages[1].content.contains("# Previous Summary\ns2\n"));
        assert!(reqs[0].messages[0].content.contains("long behavioral sequence summary agent"));
    }

    #[test]
    fn missing_summary_envelope() {
        let t = TemplateSet::builtin();
        let gw = ScriptedGateway::new(["<SUMMARY>ok</SUMMARY>", "no tags"]);
        let err = Abstractor::new(&t, m(1)).abstract_history("u", &history(3), &gw, &line).unwrap_err();
        assert!(matches!(err, AbstractError::MissingSummaryTags { chunk: 1 }));
    }

    #[test]
    fn empty_history_is_rejected() {
        let t = TemplateSet::builtin();
        let gw = ScriptedGateway::new(Vec::<String>::new());
        assert!(matches!(
            Abstractor::new(&t, m(3)).abstract_history("u", &[], &gw, &line),
            Err(AbstractError::EmptyHistory)
        ));
    }
}
