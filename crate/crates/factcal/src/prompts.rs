//! Named prompt templates with `{placeholder}` bindings. The defaults ship
//! as plain-text files in the crate's `prompts/` directory and are compiled
//! in; a config-supplied directory can override any of them per file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}` has unbound placeholder `{{{placeholder}}}`")]
    UnboundPlaceholder { template: String, placeholder: String },
    #[error("cannot read template override `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every prompt the toolkit sends. Each name maps to one `.txt` file (and an
/// optional `.examples.txt` file of few-shot blocks separated by `---` lines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    /// Decompose a response into atomic facts.
    FactExtraction,
    /// Pull the load-bearing factors out of one fact.
    FactorExtraction,
    /// Correct the wrong factors of one fact against reference knowledge.
    FactCorrection,
    /// Verbalized confidence in one fact.
    FactConfidence,
    /// Verbalized confidence in a whole response.
    ResponseConfidence,
    /// Pairwise original-versus-revised fact comparison.
    Judge,
    /// True/False probe whose first-token logprobs feed the logit estimator.
    TruthProbe,
    /// Yes/No check whether a sampled regeneration supports a fact.
    SupportCheck,
    /// SUPPORTED/NOT_SUPPORTED correctness grading of one fact.
    CorrectnessJudge,
    /// Unit-interval relevance grading of one fact.
    RelevanceJudge,
}

impl TemplateName {
    pub const ALL: [TemplateName; 10] = [
        TemplateName::FactExtraction,
        TemplateName::FactorExtraction,
        TemplateName::FactCorrection,
        TemplateName::FactConfidence,
        TemplateName::ResponseConfidence,
        TemplateName::Judge,
        TemplateName::TruthProbe,
        TemplateName::SupportCheck,
        TemplateName::CorrectnessJudge,
        TemplateName::RelevanceJudge,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            Self::FactExtraction => "fact_extraction",
            Self::FactorExtraction => "factor_extraction",
            Self::FactCorrection => "fact_correction",
            Self::FactConfidence => "fact_confidence",
            Self::ResponseConfidence => "response_confidence",
            Self::Judge => "judge",
            Self::TruthProbe => "truth_probe",
            Self::SupportCheck => "support_check",
            Self::CorrectnessJudge => "correctness_judge",
            Self::RelevanceJudge => "relevance_judge",
        }
    }
}

/// One template: a body with `{placeholder}` slots plus optional few-shot
/// blocks that fill the body's `{examples}` slot.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
    pub few_shot: Vec<String>,
}

impl PromptTemplate {
    /// Substitutes every `{placeholder}` in the body in a single pass.
    /// `{examples}` is bound implicitly from the few-shot blocks. Rendering
    /// is a pure function of the template and bindings, and fails if any
    /// placeholder in the body is left unbound.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let examples = self.few_shot.join("\n---\n");
        let mut map: HashMap<&str, &str> = bindings.iter().copied().collect();
        map.entry("examples").or_insert(examples.as_str());

        let placeholder = Regex::new(r"\{([a-z_]+)\}").expect("placeholder pattern compiles");
        let mut missing: Option<String> = None;
        let rendered = placeholder.replace_all(&self.body, |caps: &regex::Captures<'_>| {
            let key = caps.get(1).expect("capture group").as_str();
            match map.get(key) {
                Some(value) => (*value).to_string(),
                None => {
                    missing.get_or_insert_with(|| key.to_string());
                    String::new()
                }
            }
        });
        if let Some(placeholder) = missing {
            return Err(PromptError::UnboundPlaceholder {
                template: self.name.file_stem().to_string(),
                placeholder,
            });
        }
        Ok(rendered.into_owned())
    }
}

macro_rules! builtin_body {
    ($stem:literal) => {
        include_str!(concat!("../prompts/", $stem, ".txt"))
    };
}

fn builtin_body(name: TemplateName) -> &'static str {
    match name {
        TemplateName::FactExtraction => builtin_body!("fact_extraction"),
        TemplateName::FactorExtraction => builtin_body!("factor_extraction"),
        TemplateName::FactCorrection => builtin_body!("fact_correction"),
        TemplateName::FactConfidence => builtin_body!("fact_confidence"),
        TemplateName::ResponseConfidence => builtin_body!("response_confidence"),
        TemplateName::Judge => builtin_body!("judge"),
        TemplateName::TruthProbe => builtin_body!("truth_probe"),
        TemplateName::SupportCheck => builtin_body!("support_check"),
        TemplateName::CorrectnessJudge => builtin_body!("correctness_judge"),
        TemplateName::RelevanceJudge => builtin_body!("relevance_judge"),
    }
}

fn builtin_examples(name: TemplateName) -> &'static str {
    match name {
        TemplateName::FactExtraction => include_str!("../prompts/fact_extraction.examples.txt"),
        TemplateName::FactorExtraction => include_str!("../prompts/factor_extraction.examples.txt"),
        TemplateName::FactCorrection => include_str!("../prompts/fact_correction.examples.txt"),
        TemplateName::FactConfidence => include_str!("../prompts/fact_confidence.examples.txt"),
        TemplateName::ResponseConfidence => {
            include_str!("../prompts/response_confidence.examples.txt")
        }
        _ => "",
    }
}

fn split_examples(text: &str) -> Vec<String> {
    if text.trim().is_empty() {
        return Vec::new();
    }
    text.split("\n---\n")
        .map(|block| block.trim_matches('\n').to_string())
        .filter(|block| !block.trim().is_empty())
        .collect()
}

/// The full set of templates a run uses.
pub struct TemplateSet {
    templates: HashMap<TemplateName, PromptTemplate>,
}

impl TemplateSet {
    /// The compiled-in defaults.
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|name| {
                (
                    name,
                    PromptTemplate {
                        name,
                        body: builtin_body(name).to_string(),
                        few_shot: split_examples(builtin_examples(name)),
                    },
                )
            })
            .collect();
        Self { templates }
    }

    /// The defaults, with any `<stem>.txt` / `<stem>.examples.txt` file found
    /// in `dir` replacing the corresponding body or few-shot blocks.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let body_path = dir.join(format!("{}.txt", name.file_stem()));
            if body_path.is_file() {
                let body = std::fs::read_to_string(&body_path)
                    .map_err(|source| PromptError::Io { path: body_path.clone(), source })?;
                set.templates.get_mut(&name).expect("all templates present").body = body;
            }
            let examples_path = dir.join(format!("{}.examples.txt", name.file_stem()));
            if examples_path.is_file() {
                let text = std::fs::read_to_string(&examples_path)
                    .map_err(|source| PromptError::Io { path: examples_path.clone(), source })?;
                set.templates.get_mut(&name).expect("all templates present").few_shot =
                    split_examples(&text);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        self.templates.get(&name).expect("every template name is populated")
    }

    pub fn render(&self, name: TemplateName, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        self.get(name).render(bindings)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
