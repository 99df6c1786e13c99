//! Teacher pipeline for agentic recommendation: interaction corpus,
//! collaborative-filtering graph tools, offline evidence verbalization,
//! long-history abstraction, a plan/execute/reflect orchestrator over a
//! chat-completion gateway, the tagged trajectory codec, reward shaping and
//! sampled hit-rate evaluation.

pub mod abstractor;
pub mod config;
pub mod corpus;
pub mod evaluator;
pub mod gateway;
pub mod graph;
pub mod ids;
pub mod io;
pub mod orchestrator;
pub mod pipeline;
pub mod render;
pub mod rewards;
pub mod synth;
pub mod template;
pub mod trajectory;
pub mod verbalizer;

pub use corpus::{Corpus, CorpusError, Interaction, ItemMeta, UserMeta};
pub use ids::{ItemId, UserId};
