//! Gold correctness labels from alias substring matching, plus a manual
//! override channel.
//!
//! Matching is plain substring on normalized text, not word-boundary: a gold
//! answer "US" matches inside "USSR". Such false positives are fixed through
//! the override file.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::dataset::{GeneratedClaim, QAItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GoldLabel {
    Correct,
    Incorrect,
    /// Dropped from every metric.
    Excluded,
}

impl fmt::Display for GoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoldLabel::Correct => "Correct",
            GoldLabel::Incorrect => "Incorrect",
            GoldLabel::Excluded => "Excluded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideEntry {
    pub item_id: String,
    pub label: GoldLabel,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, thiserror::Error)]
pub enum OverrideError {
    #[error("overrides reference unknown item ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
}

fn straighten_apostrophe(c: char) -> char {
    match c {
        '\u{2018}' | '\u{2019}' | '\u{201B}' | '\u{02BC}' | '\u{2032}' => '\'',
        other => other,
    }
}

/// NFKC, lowercase, straight apostrophes, single spaces, trimmed.
pub fn normalize(text: &str) -> String {
    let folded: String = text
        .nfkc()
        .collect::<String>()
        .to_lowercase()
        .nfkc()
        .map(straighten_apostrophe)
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True iff the normalized gold answer or any normalized alias occurs in the
/// normalized text. Empty answers never match.
pub fn mentions_answer(text: &str, item: &QAItem) -> bool {
    let haystack = normalize(text);
    std::iter::once(&item.gold_answer)
        .chain(item.aliases.iter())
        .map(|a| normalize(a))
        .filter(|a| !a.is_empty())
        .any(|a| haystack.contains(&a))
}

pub fn auto_label(claim: &GeneratedClaim, item: &QAItem) -> GoldLabel {
    if mentions_answer(&claim.text, item) {
        GoldLabel::Correct
    } else {
        GoldLabel::Incorrect
    }
}

/// Overrides win over automatic labels. Every override must name a known id.
pub fn apply_overrides(
    mut labels: BTreeMap<String, GoldLabel>,
    overrides: &[OverrideEntry],
) -> Result<BTreeMap<String, GoldLabel>, OverrideError> {
    let unknown: Vec<String> = overrides
        .iter()
        .filter(|o| !labels.contains_key(&o.item_id))
        .map(|o| o.item_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(OverrideError::UnknownIds(unknown));
    }
    for o in overrides {
        labels.insert(o.item_id.clone(), o.label);
    }
    Ok(labels)
}
