//! Answer extraction and paired accuracy metrics.
//!
//! Scoring is instance-level and strict: a validation question counts as
//! solved only when every rotated copy of its option list is answered
//! correctly, and a pair counts toward dual accuracy only when both the
//! answerable side and its unanswerable twin are solved. Dual accuracy can
//! therefore never exceed either side's accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{target_option_index, Category, VqaItem};
use crate::error::{Result, UpdError};
use crate::microvlm::ABSTAIN_TEXT;
use crate::parser::{letter_index, option_letter};

/// What a free-text model response resolved to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Extracted {
    /// The response declines to answer.
    Abstain,
    /// A committed option, as a zero-based index.
    Letter(usize),
    /// Normalized open-ended answer text.
    Text(String),
    Unparseable,
}

impl fmt::Display for Extracted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extracted::Abstain => write!(f, "ABSTAIN"),
            Extracted::Letter(i) => write!(f, "LETTER:{}", option_letter(*i)),
            Extracted::Text(t) => write!(f, "TEXT:{t}"),
            Extracted::Unparseable => write!(f, "UNPARSEABLE"),
        }
    }
}

fn normalized_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whole-word phrase containment; substring matching would let one option
/// hide inside another word.
fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack
            .windows(needle.len())
            .any(|window| window == needle)
}

/// A committed letter must stand alone at the front: "b." or "B", not the
/// first letter of a longer word.
fn leading_letter(response: &str) -> Option<usize> {
    let trimmed = response.trim_start();
    let mut chars = trimmed.chars();
    let first = chars.next()?;
    let index = letter_index(first)?;
    match chars.next() {
        None => Some(index),
        Some(c) if c == '.' || c.is_whitespace() => Some(index),
        Some(_) => None,
    }
}

/// Resolves a raw response against an item's option list. Abstention wins
/// over everything else; with options present a leading letter wins over a
/// mention of an option's text, and an ambiguous mention resolves to
/// nothing.
pub fn extract_answer(response: &str, options: &[String]) -> Extracted {
    let words = normalized_words(response);
    if contains_phrase(&words, &normalized_words(ABSTAIN_TEXT)) {
        return Extracted::Abstain;
    }
    if options.is_empty() {
        return Extracted::Text(words.join(" "));
    }
    if let Some(index) = leading_letter(response) {
        return Extracted::Letter(index);
    }
    let mut hit = None;
    for (i, option) in options.iter().enumerate() {
        if contains_phrase(&words, &normalized_words(option)) {
            if hit.is_some() {
                return Extracted::Unparseable;
            }
            hit = Some(i);
        }
    }
    match hit {
        Some(i) => Extracted::Letter(i),
        None => Extracted::Unparseable,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub pair_id: String,
    pub category: Category,
    pub answerable: bool,
    pub shift: usize,
    pub response: String,
    pub extracted: Extracted,
    pub correct: bool,
}

/// Scores one raw response against one item.
pub fn judge(item: &VqaItem, response: &str) -> Result<ItemOutcome> {
    let extracted = extract_answer(response, &item.options);
    let correct = if !item.answerable {
        extracted == Extracted::Abstain
    } else if item.is_multiple_choice() {
        extracted == Extracted::Letter(target_option_index(item)?)
    } else {
        extracted == Extracted::Text(normalized_words(&item.target).join(" "))
    };
    Ok(ItemOutcome {
        item_id: item.item_id.clone(),
        pair_id: item.pair_id.clone(),
        category: item.category,
        answerable: item.answerable,
        shift: item.shift,
        response: response.to_string(),
        extracted,
        correct,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySlice {
    pub pairs: usize,
    pub answerable_circular: f64,
    pub unanswerable_circular: f64,
    pub dual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub pairs: usize,
    /// Fraction of answerable questions solved across all their rotations.
    pub answerable_circular: f64,
    /// Fraction of unanswerable questions refused across all rotations.
    pub unanswerable_circular: f64,
    /// Fraction of pairs with both sides solved.
    pub dual: f64,
    /// Item-level abstention rate on unanswerable items.
    pub abstain_true_positive_rate: f64,
    /// Item-level committed-answer rate on answerable items.
    pub abstain_true_negative_rate: f64,
    pub by_category: BTreeMap<String, CategorySlice>,
}

fn mean_of(flags: &BTreeMap<&str, bool>) -> f64 {
    flags.values().filter(|ok| **ok).count() as f64 / flags.len() as f64
}

/// Folds per-item outcomes into instance-level and pair-level accuracy.
/// Every pair must be present with both sides.
pub fn compile_report(outcomes: &[ItemOutcome]) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(UpdError::contract("cannot compile a report from no outcomes"));
    }
    let mut answerable_ok: BTreeMap<&str, bool> = BTreeMap::new();
    let mut unanswerable_ok: BTreeMap<&str, bool> = BTreeMap::new();
    let mut pair_category: BTreeMap<&str, Category> = BTreeMap::new();
    let (mut abstain_hits, mut unans_items) = (0usize, 0usize);
    let (mut commit_hits, mut ans_items) = (0usize, 0usize);
    for outcome in outcomes {
        let flags = if outcome.answerable {
            ans_items += 1;
            if outcome.extracted != Extracted::Abstain {
                commit_hits += 1;
            }
            &mut answerable_ok
        } else {
            unans_items += 1;
            if outcome.extracted == Extracted::Abstain {
                abstain_hits += 1;
            }
            pair_category.insert(outcome.pair_id.as_str(), outcome.category);
            &mut unanswerable_ok
        };
        *flags.entry(outcome.pair_id.as_str()).or_insert(true) &= outcome.correct;
    }
    let a_keys: BTreeSet<&str> = answerable_ok.keys().copied().collect();
    let u_keys: BTreeSet<&str> = unanswerable_ok.keys().copied().collect();
    if a_keys != u_keys {
        let missing = a_keys.symmetric_difference(&u_keys).next().unwrap();
        return Err(UpdError::MalformedData {
            path: missing.to_string(),
            detail: "pair is missing one side in the evaluated set".into(),
        });
    }

    let mut by_category: BTreeMap<String, (usize, usize, usize, usize)> = BTreeMap::new();
    let mut dual_hits = 0usize;
    for (pair, &a_ok) in &answerable_ok {
        let u_ok = unanswerable_ok[pair];
        let both = a_ok && u_ok;
        dual_hits += both as usize;
        let entry = by_category
            .entry(pair_category[pair].name().to_string())
            .or_insert((0, 0, 0, 0));
        entry.0 += 1;
        entry.1 += a_ok as usize;
        entry.2 += u_ok as usize;
        entry.3 += both as usize;
    }
    let pairs = answerable_ok.len();
    Ok(EvalReport {
        items: outcomes.len(),
        pairs,
        answerable_circular: mean_of(&answerable_ok),
        unanswerable_circular: mean_of(&unanswerable_ok),
        dual: dual_hits as f64 / pairs as f64,
        abstain_true_positive_rate: abstain_hits as f64 / unans_items.max(1) as f64,
        abstain_true_negative_rate: commit_hits as f64 / ans_items.max(1) as f64,
        by_category: by_category
            .into_iter()
            .map(|(name, (n, a, u, d))| {
                (
                    name,
                    CategorySlice {
                        pairs: n,
                        answerable_circular: a as f64 / n as f64,
                        unanswerable_circular: u as f64 / n as f64,
                        dual: d as f64 / n as f64,
                    },
                )
            })
            .collect(),
    })
}

/// Instance-level accuracy over whatever outcomes are given, with no
/// pairing requirement. Suits early stopping on an answerable-only slice.
pub fn circular_accuracy(outcomes: &[ItemOutcome]) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let mut flags: BTreeMap<(&str, bool), bool> = BTreeMap::new();
    for outcome in outcomes {
        *flags
            .entry((outcome.pair_id.as_str(), outcome.answerable))
            .or_insert(true) &= outcome.correct;
    }
    Some(flags.values().filter(|ok| **ok).count() as f64 / flags.len() as f64)
}

pub struct Evaluation {
    pub outcomes: Vec<ItemOutcome>,
    pub report: EvalReport,
}

/// Runs the answerer over every item in parallel and folds the outcomes
/// into a report. Outcome order follows item order.
pub fn evaluate<F>(items: &[VqaItem], answer: F) -> Result<Evaluation>
where
    F: Fn(&VqaItem) -> Result<String> + Sync,
{
    let outcomes = items
        .par_iter()
        .map(|item| answer(item).and_then(|response| judge(item, &response)))
        .collect::<Result<Vec<_>>>()?;
    let report = compile_report(&outcomes)?;
    Ok(Evaluation { outcomes, report })
}

pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>6} {:>11} {:>13} {:>8}\n",
        "category", "pairs", "answerable", "unanswerable", "dual"
    ));
    for (name, slice) in &report.by_category {
        out.push_str(&format!(
            "{:<10} {:>6} {:>11.4} {:>13.4} {:>8.4}\n",
            name, slice.pairs, slice.answerable_circular, slice.unanswerable_circular, slice.dual
        ));
    }
    out.push_str(&format!(
        "{:<10} {:>6} {:>11.4} {:>13.4} {:>8.4}\n",
        "overall",
        report.pairs,
        report.answerable_circular,
        report.unanswerable_circular,
        report.dual
    ));
    out.push_str(&format!(
        "abstention: true positive rate {:.4}, true negative rate {:.4}\n",
        report.abstain_true_positive_rate, report.abstain_true_negative_rate
    ));
    out
}

fn csv_field(text: &str) -> String {
    if text.contains(|c| c == ',' || c == '"' || c == '\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

pub fn outcomes_csv(outcomes: &[ItemOutcome]) -> String {
    let mut out =
        String::from("item_id,pair_id,category,answerable,shift,correct,extracted,response\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_field(&o.item_id),
            csv_field(&o.pair_id),
            o.category.name(),
            o.answerable,
            o.shift,
            o.correct,
            csv_field(&o.extracted.to_string()),
            csv_field(&o.response),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_corpus, CorpusSpec};
    use crate::embedder::SyntheticWorld;
    use crate::numerics::random::rng_from_seed;
    use rand::Rng;

    fn opts(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn abstention_beats_a_leading_letter() {
        let options = opts(&["White", "Red", "Blue", "Green"]);
        assert_eq!(
            extract_answer("A. I cannot answer.", &options),
            Extracted::Abstain
        );
        assert_eq!(extract_answer("i cannot answer", &options), Extracted::Abstain);
        assert_eq!(extract_answer("I cannot answer.", &[]), Extracted::Abstain);
    }

    #[test]
    fn leading_letters_parse_with_or_without_period() {
        let options = opts(&["White", "Red", "Blue", "Green"]);
        assert_eq!(extract_answer("b.", &options), Extracted::Letter(1));
        assert_eq!(extract_answer("B", &options), Extracted::Letter(1));
        assert_eq!(extract_answer(" c extra", &options), Extracted::Letter(2));
        // a word starting with a letter character is not a letter answer
        assert_eq!(extract_answer("blue.", &options), Extracted::Letter(2));
    }

    #[test]
    fn option_mentions_resolve_only_when_unique() {
        let options = opts(&["White", "Red", "Blue", "Green"]);
        assert_eq!(
            extract_answer("the dress is white", &options),
            Extracted::Letter(0)
        );
        assert_eq!(
            extract_answer("white or red", &options),
            Extracted::Unparseable
        );
        assert_eq!(extract_answer("purple", &options), Extracted::Unparseable);
        // whole-word matching: an option hiding inside a longer word does
        // not count
        assert_eq!(
            extract_answer("redder than ever", &options),
            Extracted::Unparseable
        );
    }

    #[test]
    fn open_answers_normalize_before_comparison() {
        let item = VqaItem {
            schema_version: 1,
            item_id: "x-a".into(),
            pair_id: "x".into(),
            category: Category::OpenStandard,
            answerable: true,
            scene: crate::embedder::Scene::new("s", vec![("dress".into(), "white".into())]),
            prompt: "What color is the dress?".into(),
            options: Vec::new(),
            target: "White.".into(),
            shift: 0,
            config_hash: String::new(),
        };
        assert!(judge(&item, "white.").unwrap().correct);
        assert!(judge(&item, "  WHITE ").unwrap().correct);
        assert!(!judge(&item, "red.").unwrap().correct);
        assert!(!judge(&item, "I cannot answer.").unwrap().correct);
    }

    fn outcome(pair: &str, answerable: bool, shift: usize, correct: bool) -> ItemOutcome {
        ItemOutcome {
            item_id: format!("{pair}-{answerable}-{shift}"),
            pair_id: pair.to_string(),
            category: if answerable {
                Category::Standard
            } else {
                Category::AnswerRemoval
            },
            answerable,
            shift,
            response: String::new(),
            extracted: if correct && !answerable {
                Extracted::Abstain
            } else {
                Extracted::Letter(0)
            },
            correct,
        }
    }

    #[test]
    fn one_failed_rotation_sinks_the_instance() {
        let outcomes = vec![
            outcome("p0", true, 0, true),
            outcome("p0", true, 1, false),
            outcome("p0", true, 2, true),
            outcome("p0", false, 0, true),
            outcome("p0", false, 1, true),
            outcome("p0", false, 2, true),
        ];
        let report = compile_report(&outcomes).unwrap();
        assert_eq!(report.answerable_circular, 0.0);
        assert_eq!(report.unanswerable_circular, 1.0);
        assert_eq!(report.dual, 0.0);
        assert_eq!(circular_accuracy(&outcomes), Some(0.5));
    }

    #[test]
    fn report_matches_a_brute_force_recount() {
        let mut rng = rng_from_seed(11);
        for _ in 0..50 {
            let pairs = rng.gen_range(1..=20usize);
            let shifts = rng.gen_range(1..=4usize);
            let mut outcomes = Vec::new();
            for p in 0..pairs {
                for side in [true, false] {
                    for s in 0..shifts {
                        outcomes.push(outcome(&format!("p{p}"), side, s, rng.gen_bool(0.7)));
                    }
                }
            }
            let report = compile_report(&outcomes).unwrap();

            // independent recount straight from the flat list
            let mut a_hits = 0;
            let mut u_hits = 0;
            let mut d_hits = 0;
            for p in 0..pairs {
                let id = format!("p{p}");
                let all = |side: bool| {
                    outcomes
                        .iter()
                        .filter(|o| o.pair_id == id && o.answerable == side)
                        .all(|o| o.correct)
                };
                let (a, u) = (all(true), all(false));
                a_hits += a as usize;
                u_hits += u as usize;
                d_hits += (a && u) as usize;
            }
            let n = pairs as f64;
            assert_eq!(report.answerable_circular, a_hits as f64 / n);
            assert_eq!(report.unanswerable_circular, u_hits as f64 / n);
            assert_eq!(report.dual, d_hits as f64 / n);
            assert!(report.dual <= report.answerable_circular + 1e-15);
            assert!(report.dual <= report.unanswerable_circular + 1e-15);
            let sliced: usize = report.by_category.values().map(|s| s.pairs).sum();
            assert_eq!(sliced, pairs);
        }
    }

    #[test]
    fn an_oracle_answerer_scores_everything() {
        let world = SyntheticWorld::new(5, 64, 0.1).unwrap();
        let corpus = generate_corpus(&world, &CorpusSpec::toy(5)).unwrap();
        let eval = evaluate(&corpus.val, |item| Ok(item.target.clone())).unwrap();
        assert_eq!(eval.report.answerable_circular, 1.0);
        assert_eq!(eval.report.unanswerable_circular, 1.0);
        assert_eq!(eval.report.dual, 1.0);
        assert_eq!(eval.report.abstain_true_positive_rate, 1.0);
        assert_eq!(eval.report.abstain_true_negative_rate, 1.0);
        assert_eq!(eval.outcomes.len(), corpus.val.len());
    }

    #[test]
    fn always_abstaining_solves_only_the_unanswerable_side() {
        let world = SyntheticWorld::new(5, 64, 0.1).unwrap();
        let corpus = generate_corpus(&world, &CorpusSpec::toy(5)).unwrap();
        let eval = evaluate(&corpus.val, |_| Ok(ABSTAIN_TEXT.to_string())).unwrap();
        assert_eq!(eval.report.answerable_circular, 0.0);
        assert_eq!(eval.report.unanswerable_circular, 1.0);
        assert_eq!(eval.report.dual, 0.0);
        assert_eq!(eval.report.abstain_true_positive_rate, 1.0);
        assert_eq!(eval.report.abstain_true_negative_rate, 0.0);
    }

    #[test]
    fn a_missing_twin_is_rejected() {
        let outcomes = vec![outcome("p0", true, 0, true)];
        assert!(compile_report(&outcomes).is_err());
    }

    #[test]
    fn report_and_csv_serialize() {
        let outcomes = vec![
            outcome("p0", true, 0, true),
            outcome("p0", false, 0, true),
        ];
        let report = compile_report(&outcomes).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let csv = outcomes_csv(&outcomes);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("item_id,"));
        let table = render_table(&report);
        assert!(table.contains("overall"));
        assert!(table.contains("AAD"));
    }
}
