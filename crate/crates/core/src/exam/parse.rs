//! Parsers for examiner output.

use std::sync::OnceLock;

use regex::Regex;

use super::{RawDecision, Verdict};

fn number_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(\d{1,3})[.)]").unwrap())
}

/// Items of a numbered list ("1." or "1)"), inline or one per line.
///
/// Markers are only accepted in sequence (1, 2, 3, ...), so numbers inside a
/// question such as "released in 2003." do not split it. Anything before the
/// first marker is treated as preamble.
fn numbered_items(text: &str) -> Vec<String> {
    let mut starts: Vec<(usize, usize)> = Vec::new();
    let mut expected = 1u32;
    for caps in number_marker_re().captures_iter(text) {
        let num = caps.get(1).unwrap();
        let marker_end = caps.get(0).unwrap().end();
        if text[marker_end..].starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        if num.as_str().parse::<u32>() == Ok(expected) {
            starts.push((num.start(), marker_end));
            expected += 1;
        }
    }
    let mut items = Vec::with_capacity(starts.len());
    for (i, &(_, body_start)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(text.len(), |&(s, _)| s);
        let item = text[body_start..end].trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    items
}

/// Splits an examiner reply into individual questions.
///
/// Numbered-list items first; otherwise every line ending in "?"; otherwise
/// the whole reply if it ends in "?". At most `max` questions are kept.
pub fn extract_questions(text: &str, max: usize) -> Vec<String> {
    let mut questions = numbered_items(text);
    if questions.is_empty() {
        questions = text
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*', '•']).trim())
            .filter(|l| l.ends_with('?'))
            .map(str::to_string)
            .collect();
    }
    if questions.is_empty() {
        let whole = text.trim();
        if whole.ends_with('?') {
            questions.push(whole.to_string());
        }
    }
    questions.truncate(max);
    questions
}

/// True iff the trimmed, lowercased reply starts with "yes".
pub fn parse_yes_no(text: &str) -> bool {
    text.trim().to_lowercase().starts_with("yes")
}

/// Maps the examiner's final reply to a decision.
///
/// "incorrect" is checked before "correct" since it contains it. Replies with
/// neither word are inconclusive and count as a rejection. A reply such as
/// "not incorrect" therefore rejects; that coarse edge is accepted.
pub fn parse_decision(text: &str) -> RawDecision {
    let lower = text.to_lowercase();
    let (verdict, inconclusive) = if lower.contains("incorrect") {
        (Verdict::Reject, false)
    } else if lower.contains("correct") {
        (Verdict::Accept, false)
    } else {
        (Verdict::Reject, true)
    };
    RawDecision {
        verdict,
        inconclusive,
        source_text: text.to_string(),
    }
}
