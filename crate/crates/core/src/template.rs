//! Prompt templates shipped as data files with `{placeholder}` substitution.
//!
//! A placeholder is `{name}` where `name` matches `[a-z_][a-z0-9_]*`; any
//! other brace (JSON examples inside prompts, for instance) is literal text.
//! Substituted values are not re-scanned.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;

pub const DEFAULT_DATASET: &str = "goodreads";

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` references `{{{var}}}` but no value was supplied")]
    MissingVar { template: String, var: String },
    #[error("template file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self { name: name.into(), text: text.into() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Names of all placeholders, in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for cap in placeholder_re().captures_iter(&self.text) {
            let name = cap.get(1).expect("group 1").as_str();
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
        seen
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for cap in placeholder_re().captures_iter(&self.text) {
            let whole = cap.get(0).expect("group 0");
            let name = cap.get(1).expect("group 1").as_str();
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingVar {
                    template: self.name.clone(),
                    var: name.to_string(),
                })?;
            out.push_str(&self.text[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

macro_rules! template_names {
    ($($variant:ident => $file:literal),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum TemplateName {
            $($variant),+
        }

        impl TemplateName {
            pub const ALL: &'static [TemplateName] = &[$(TemplateName::$variant),+];

            pub fn file_name(self) -> &'static str {
                match self {
                    $(TemplateName::$variant => concat!($file, ".txt")),+
                }
            }

            fn builtin_text(self) -> &'static str {
                match self {
                    $(TemplateName::$variant => include_str!(concat!("../templates/", $file, ".txt"))),+
                }
            }
        }
    };
}

template_names! {
    Planner => "planner",
    PlannerOutput => "planner_output",
    UserProfileSummary => "user_profile_summary",
    HistoricalInterestAnalysis => "historical_interest_analysis",
    RecentInterestAnalysis => "recent_interest_analysis",
    InterestDivergenceReasoning => "interest_divergence_reasoning",
    SubtaskOutput => "subtask_output",
    ToolProtocol => "tool_protocol",
    Reflection => "reflection",
    ReflectionOutput => "reflection_output",
    Ranking => "ranking",
    RankingOutput => "ranking_output",
    PrecedingOutputs => "preceding_outputs",
    Correction => "correction",
    Reask => "reask",
    InstanceUser => "instance_user",
    ItemKeyDefinition => "item_key_definition",
    ItemCfSystem => "item_cf_system",
    ItemCfUser => "item_cf_user",
    UserCfSystem => "user_cf_system",
    UserCfUser => "user_cf_user",
    PreprocessSystem => "preprocess_system",
    PreprocessUser => "preprocess_user",
    IntegratedSystem => "integrated_system",
}

/// The full set of prompts used by the pipeline. `dataset` is substituted
/// into every template that mentions `{dataset}`.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, Template>,
    dataset: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .iter()
            .map(|&name| (name, Template::new(name.file_name(), name.builtin_text().trim_end_matches('\n'))))
            .collect();
        Self { templates, dataset: DEFAULT_DATASET.into() }
    }

    /// Loads every template from `dir`; a missing file is an error.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for &name in TemplateName::ALL {
            let path = dir.join(name.file_name());
            let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io { path: path.clone(), source })?;
            templates.insert(name, Template::new(name.file_name(), text.trim_end_matches('\n')));
        }
        Ok(Self { templates, dataset: DEFAULT_DATASET.into() })
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = dataset.into();
        self
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn get(&self, name: TemplateName) -> &Template {
        &self.templates[&name]
    }

    pub fn render(&self, name: TemplateName, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut all: Vec<(&str, &str)> = Vec::with_capacity(vars.len() + 1);
        all.extend_from_slice(vars);
        all.push(("dataset", &self.dataset));
        self.get(name).render(&all)
    }

    /// Writes the built-in set to `dir` so it can be edited and loaded back.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, template) in &self.templates {
            let mut text = template.text.clone();
            text.push('\n');
            fs::write(dir.join(name.file_name()), text)?;
        }
        Ok(())
    }
}
