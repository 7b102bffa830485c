//! Prompt templates keyed by stage and style.
//!
//! Templates are data: the builtin set is the bundled `resources/prompts.json`
//! and a user file with the same schema can override any subset of entries.
//! Placeholders are written `{name}` and must be declared per entry.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatMessage, Style};

const BUILTIN_PROMPTS: &str = include_str!("../resources/prompts.json");

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` is missing bindings for: {}", names.join(", "))]
    MissingBindings { template: String, names: Vec<String> },
    #[error("template `{template}` uses undeclared placeholders: {}", names.join(", "))]
    Undeclared { template: String, names: Vec<String> },
    #[error("catalog has no `{key}` prompt for {style:?} style")]
    MissingKey { key: PromptKey, style: Style },
    #[error("prompt file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("prompt file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateStyle {
    Chat,
    Completion,
    Both,
}

impl TemplateStyle {
    fn covers(self, style: Style) -> bool {
        matches!(
            (self, style),
            (TemplateStyle::Both, _)
                | (TemplateStyle::Chat, Style::Chat)
                | (TemplateStyle::Completion, Style::Completion)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKey {
    Setup,
    FollowupAsk,
    FollowupGet,
    Decision,
    ExamineeAnswer,
    ClaimFromQuestion,
    ClaimPhraseSuffix,
    Ays,
    IdkSuffix,
    FalsehoodQuestion,
    FalsehoodCompletion,
    FalsehoodPhraseSuffix,
}

impl PromptKey {
    pub const ALL: [PromptKey; 12] = [
        PromptKey::Setup,
        PromptKey::FollowupAsk,
        PromptKey::FollowupGet,
        PromptKey::Decision,
        PromptKey::ExamineeAnswer,
        PromptKey::ClaimFromQuestion,
        PromptKey::ClaimPhraseSuffix,
        PromptKey::Ays,
        PromptKey::IdkSuffix,
        PromptKey::FalsehoodQuestion,
        PromptKey::FalsehoodCompletion,
        PromptKey::FalsehoodPhraseSuffix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKey::Setup => "setup",
            PromptKey::FollowupAsk => "followup-ask",
            PromptKey::FollowupGet => "followup-get",
            PromptKey::Decision => "decision",
            PromptKey::ExamineeAnswer => "examinee-answer",
            PromptKey::ClaimFromQuestion => "claim-from-question",
            PromptKey::ClaimPhraseSuffix => "claim-phrase-suffix",
            PromptKey::Ays => "ays",
            PromptKey::IdkSuffix => "idk-suffix",
            PromptKey::FalsehoodQuestion => "falsehood-question",
            PromptKey::FalsehoodCompletion => "falsehood-completion",
            PromptKey::FalsehoodPhraseSuffix => "falsehood-phrase-suffix",
        }
    }
}

impl fmt::Display for PromptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Placeholder names referenced by `body`, in first-use order.
pub fn referenced_placeholders(body: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    placeholder_re()
        .captures_iter(body)
        .map(|c| c[1].to_string())
        .filter(|n| seen.insert(n.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(skip)]
    pub name: String,
    pub style: TemplateStyle,
    #[serde(default)]
    pub placeholders: Vec<String>,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, style: TemplateStyle, body: impl Into<String>) -> Self {
        let body = body.into();
        Self {
            name: name.into(),
            style,
            placeholders: referenced_placeholders(&body),
            body,
        }
    }

    /// Every placeholder in the body must be declared.
    pub fn check_declared(&self) -> Result<(), TemplateError> {
        let undeclared: Vec<String> = referenced_placeholders(&self.body)
            .into_iter()
            .filter(|p| !self.placeholders.contains(p))
            .collect();
        if undeclared.is_empty() {
            Ok(())
        } else {
            Err(TemplateError::Undeclared {
                template: self.name.clone(),
                names: undeclared,
            })
        }
    }

    /// Substitutes every `{name}` in a single pass. Binding values are
    /// inserted verbatim and never re-scanned.
    pub fn render<'a, I>(&self, bindings: I) -> Result<String, TemplateError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        render_body(&self.name, &self.body, &bindings.into_iter().collect())
    }
}

fn render_body(
    name: &str,
    body: &str,
    bindings: &HashMap<&str, &str>,
) -> Result<String, TemplateError> {
    let missing: Vec<String> = referenced_placeholders(body)
        .into_iter()
        .filter(|p| !bindings.contains_key(p.as_str()))
        .collect();
    if !missing.is_empty() {
        return Err(TemplateError::MissingBindings {
            template: name.to_string(),
            names: missing,
        });
    }
    Ok(placeholder_re()
        .replace_all(body, |c: &regex::Captures<'_>| bindings[&c[1]].to_string())
        .into_owned())
}

/// Free-function form of [`PromptTemplate::render`].
pub fn render(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    template.render(bindings.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    entries: BTreeMap<String, PromptTemplate>,
}

/// The bundled catalog.
pub fn builtin_catalog() -> PromptCatalog {
    static BUILTIN: OnceLock<PromptCatalog> = OnceLock::new();
    BUILTIN
        .get_or_init(|| {
            PromptCatalog::from_json(BUILTIN_PROMPTS).expect("bundled prompt catalog is valid")
        })
        .clone()
}

impl PromptCatalog {
    fn parse_entries(json: &str) -> Result<BTreeMap<String, PromptTemplate>, TemplateError> {
        let mut entries: BTreeMap<String, PromptTemplate> = serde_json::from_str(json)?;
        for (name, t) in entries.iter_mut() {
            t.name = name.clone();
            t.check_declared()?;
        }
        Ok(entries)
    }

    /// Parses a complete catalog.
    pub fn from_json(json: &str) -> Result<Self, TemplateError> {
        let catalog = Self {
            entries: Self::parse_entries(json)?,
        };
        catalog.check_complete()?;
        Ok(catalog)
    }

    /// Builtin catalog with the entries of `path` laid over it.
    pub fn load_override(path: &Path) -> Result<Self, TemplateError> {
        let overrides = Self::parse_entries(&fs::read_to_string(path)?)?;
        let mut catalog = builtin_catalog();
        catalog.entries.extend(overrides);
        catalog.check_complete()?;
        Ok(catalog)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("catalog serializes")
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &PromptTemplate)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, key: PromptKey, style: Style) -> Result<&PromptTemplate, TemplateError> {
        let styled = format!(
            "{}.{}",
            key.as_str(),
            match style {
                Style::Chat => "chat",
                Style::Completion => "completion",
            }
        );
        self.entries
            .get(&styled)
            .or_else(|| self.entries.get(key.as_str()))
            .filter(|t| t.style.covers(style))
            .ok_or(TemplateError::MissingKey { key, style })
    }

    /// Body of a placeholder-free prompt.
    pub fn text(&self, key: PromptKey, style: Style) -> Result<String, TemplateError> {
        self.get(key, style)?.render([])
    }

    pub fn check_complete(&self) -> Result<(), TemplateError> {
        for key in PromptKey::ALL {
            for style in [Style::Chat, Style::Completion] {
                self.get(key, style)?;
            }
        }
        Ok(())
    }

    /// Setup prompt as messages. Chat style puts the first sentence in a
    /// system message and the rest in a user message; completion style is a
    /// single user message.
    pub fn setup_messages(&self, style: Style, claim: &str) -> Result<Vec<ChatMessage>, TemplateError> {
        let template = self.get(PromptKey::Setup, style)?;
        let bindings: HashMap<&str, &str> = [("claim", claim)].into_iter().collect();
        if style == Style::Chat {
            if let Some((first, rest)) = split_first_sentence(&template.body) {
                return Ok(vec![
                    ChatMessage::system(render_body(&template.name, first, &bindings)?),
                    ChatMessage::user(render_body(&template.name, rest, &bindings)?),
                ]);
            }
        }
        Ok(vec![ChatMessage::user(render_body(
            &template.name,
            &template.body,
            &bindings,
        )?)])
    }
}

/// Splits at the first ". " (split happens on the template, before the claim
/// is substituted, so periods inside claims never matter).
fn split_first_sentence(body: &str) -> Option<(&str, &str)> {
    let i = body.find(". ")?;
    let rest = body[i + 2..].trim_start();
    if rest.is_empty() {
        return None;
    }
    Some((&body[..=i], rest))
}
