//! Rule-based prompt classification and option extraction.
//!
//! A prompt is multiple-choice when the option markers "A.", "B.", ... occur
//! as a well-formed list: each marker at most once, letters contiguous from
//! "A" (at least through "B", at most through "D"), positions strictly
//! increasing, each at a token boundary (start of text or preceded by
//! whitespace). The boundary requirement keeps abbreviations like "Dr."
//! from reading as markers. Any other boundary-marker pattern (duplicates,
//! out-of-order, a gap like A, B, D) is treated as malformed and falls
//! through to the open-ended rule: '?' anywhere means open-ended, otherwise
//! the prompt is not a question.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpdError};

pub const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const MAX_OPTIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptKind {
    MultipleChoice,
    OpenEnded,
    NonQuestion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrompt {
    pub kind: PromptKind,
    /// For multiple-choice, the text before the first marker; otherwise the
    /// whole trimmed prompt.
    pub question: String,
    /// Empty unless multiple-choice; then 2 to 4 entries in letter order.
    pub options: Vec<String>,
}

/// Byte positions of well-formed option markers, or None when the marker
/// layout is malformed and the prompt should fall through to the '?' rule.
fn marker_positions(text: &str) -> Option<Vec<usize>> {
    let bytes = text.as_bytes();
    // occurrences[k] lists boundary positions of letter k ('A' + k)
    let mut occurrences: [Vec<usize>; 4] = Default::default();
    for i in 0..bytes.len().saturating_sub(1) {
        let c = bytes[i];
        if !(b'A'..=b'D').contains(&c) || bytes[i + 1] != b'.' {
            continue;
        }
        let at_boundary = i == 0 || (bytes[i - 1] as char).is_whitespace();
        if at_boundary {
            occurrences[(c - b'A') as usize].push(i);
        }
    }
    if occurrences.iter().any(|o| o.len() > 1) {
        return None;
    }
    let count = occurrences.iter().take_while(|o| o.len() == 1).count();
    if count < 2 {
        return None;
    }
    // letters past the contiguous prefix must not appear at all
    if occurrences[count..].iter().any(|o| !o.is_empty()) {
        return None;
    }
    let positions: Vec<usize> = occurrences[..count].iter().map(|o| o[0]).collect();
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return None;
    }
    Some(positions)
}

/// Classifies a prompt and, for multiple-choice, splits out the question and
/// option texts.
pub fn classify_and_parse(prompt: &str) -> ParsedPrompt {
    if let Some(positions) = marker_positions(prompt) {
        let question = prompt[..positions[0]].trim().to_string();
        let mut options = Vec::with_capacity(positions.len());
        for (idx, &start) in positions.iter().enumerate() {
            let body_start = start + 2; // skip the letter and the period
            let body_end = positions.get(idx + 1).copied().unwrap_or(prompt.len());
            options.push(prompt[body_start..body_end].trim().to_string());
        }
        return ParsedPrompt {
            kind: PromptKind::MultipleChoice,
            question,
            options,
        };
    }
    let trimmed = prompt.trim().to_string();
    if trimmed.contains('?') {
        ParsedPrompt {
            kind: PromptKind::OpenEnded,
            question: trimmed,
            options: Vec::new(),
        }
    } else {
        ParsedPrompt {
            kind: PromptKind::NonQuestion,
            question: trimmed,
            options: Vec::new(),
        }
    }
}

/// Joins each option back onto the question: `s_i = question + " " + option`.
/// Only meaningful for multiple-choice prompts.
pub fn contextualize_options(parsed: &ParsedPrompt) -> Result<Vec<String>> {
    if parsed.kind != PromptKind::MultipleChoice {
        return Err(UpdError::contract(format!(
            "contextualize_options on {:?} prompt",
            parsed.kind
        )));
    }
    Ok(parsed
        .options
        .iter()
        .map(|option| {
            if parsed.question.is_empty() {
                option.clone()
            } else {
                format!("{} {}", parsed.question, option)
            }
        })
        .collect())
}

/// Canonical prompt layout the corpus generator emits:
/// `question A. opt1 B. opt2 ...`. Parsing it recovers question and options
/// exactly.
pub fn canonical_prompt(question: &str, options: &[String]) -> String {
    let mut out = String::from(question);
    for (i, option) in options.iter().enumerate() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push(OPTION_LETTERS[i]);
        out.push('.');
        out.push(' ');
        out.push_str(option);
    }
    out
}

/// Letter for a zero-based option index.
pub fn option_letter(index: usize) -> char {
    OPTION_LETTERS[index]
}

/// Zero-based option index for a letter, case-insensitive.
pub fn letter_index(letter: char) -> Option<usize> {
    OPTION_LETTERS
        .iter()
        .position(|&l| l == letter.to_ascii_uppercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc(prompt: &str) -> ParsedPrompt {
        let parsed = classify_and_parse(prompt);
        assert_eq!(parsed.kind, PromptKind::MultipleChoice, "{prompt:?}");
        parsed
    }

    #[test]
    fn splits_question_and_options() {
        let parsed = mc("What color is the dress? A. White B. Blue C. Red");
        assert_eq!(parsed.question, "What color is the dress?");
        assert_eq!(parsed.options, vec!["White", "Blue", "Red"]);
    }

    #[test]
    fn abbreviations_are_not_markers() {
        let parsed = mc("Who is pictured? A. Dr. Smith B. Mr. Lee");
        assert_eq!(parsed.options, vec!["Dr. Smith", "Mr. Lee"]);
    }

    #[test]
    fn marker_without_preceding_whitespace_is_ignored() {
        // "GRADE.A." has no boundary before the A
        let parsed = classify_and_parse("Rate this GRADE.A. product");
        assert_eq!(parsed.kind, PromptKind::NonQuestion);
    }

    #[test]
    fn question_mark_without_markers_is_open_ended() {
        let parsed = classify_and_parse("What color is the dress?");
        assert_eq!(parsed.kind, PromptKind::OpenEnded);
        assert!(parsed.options.is_empty());
        assert!(parsed.question.contains('?'));
    }

    #[test]
    fn no_markers_no_question_mark_is_non_question() {
        let parsed = classify_and_parse("Describe this image.");
        assert_eq!(parsed.kind, PromptKind::NonQuestion);
    }

    #[test]
    fn out_of_order_markers_fall_through() {
        let parsed = classify_and_parse("Pick one? B. first A. second");
        assert_eq!(parsed.kind, PromptKind::OpenEnded);
    }

    #[test]
    fn duplicate_markers_fall_through() {
        let parsed = classify_and_parse("Pick one? A. x B. y A. z");
        assert_eq!(parsed.kind, PromptKind::OpenEnded);
    }

    #[test]
    fn gap_in_marker_letters_falls_through() {
        let parsed = classify_and_parse("Pick one? A. x B. y D. z");
        assert_eq!(parsed.kind, PromptKind::OpenEnded);
    }

    #[test]
    fn lone_marker_is_not_multiple_choice() {
        let parsed = classify_and_parse("Initial? A. alone");
        assert_eq!(parsed.kind, PromptKind::OpenEnded);
    }

    #[test]
    fn canonical_prompt_round_trips() {
        let question = "What object is white?";
        let options = vec!["Dress".to_string(), "Cat".to_string(), "Cup".to_string()];
        let prompt = canonical_prompt(question, &options);
        let parsed = classify_and_parse(&prompt);
        assert_eq!(parsed.kind, PromptKind::MultipleChoice);
        assert_eq!(parsed.question, question);
        assert_eq!(parsed.options, options);
    }

    #[test]
    fn contextualize_joins_question_and_option() {
        let parsed = mc("What color is the ball? A. Red B. Green");
        let contexts = contextualize_options(&parsed).unwrap();
        assert_eq!(
            contexts,
            vec![
                "What color is the ball? Red",
                "What color is the ball? Green"
            ]
        );
    }

    #[test]
    fn contextualize_rejects_non_mc() {
        let parsed = classify_and_parse("Where is the dog?");
        assert!(contextualize_options(&parsed).is_err());
    }

    #[test]
    fn four_option_prompt_parses_all_options() {
        let parsed = mc("Which? A. a B. b C. c D. d");
        assert_eq!(parsed.options.len(), 4);
        assert_eq!(parsed.options, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn empty_prompt_is_non_question() {
        assert_eq!(classify_and_parse("").kind, PromptKind::NonQuestion);
    }
}
