//! Synthetic paired corpus: answerable questions about generated scenes and
//! their unanswerable twins.
//!
//! Every unanswerable item is produced by one of three transforms of an
//! answerable original, and the two always travel together under one pair
//! id:
//! - answer removal: drop the correct option from the option list
//! - answer set swap: replace the options with a set taken from a question
//!   of the other type, so none of them fits
//! - image swap: keep the question and options, swap in a scene that lacks
//!   the entity the question asks about
//!
//! Open-ended pairs keep the scene and change the question: the answerable
//! side asks about a present object, the unanswerable side about an absent
//! one. Training items carry only the canonical option order; validation
//! items are circularly augmented, one copy per rotation of the option
//! list, so an option-order-robust model is required to score.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{Scene, SyntheticWorld};
use crate::error::{Result, UpdError};
use crate::microvlm::ABSTAIN_TEXT;
use crate::numerics::random::{derive_seed, rng_from_seed};
use crate::parser::{canonical_prompt, classify_and_parse, PromptKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "STANDARD")]
    Standard,
    #[serde(rename = "AAD")]
    AnswerRemoval,
    #[serde(rename = "IASD")]
    AnswerSetSwap,
    #[serde(rename = "IVQD")]
    ImageSwap,
    #[serde(rename = "OPEN_STANDARD")]
    OpenStandard,
    #[serde(rename = "OPEN_UNANSWERABLE")]
    OpenUnanswerable,
    /// Train-only instruction items that teach the abstention wording.
    #[serde(rename = "PHRASE_DRILL")]
    PhraseDrill,
}

impl Category {
    pub fn is_open(self) -> bool {
        matches!(self, Category::OpenStandard | Category::OpenUnanswerable)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Category::Standard => "std",
            Category::AnswerRemoval => "aad",
            Category::AnswerSetSwap => "iasd",
            Category::ImageSwap => "ivqd",
            Category::OpenStandard => "open-std",
            Category::OpenUnanswerable => "open-unans",
            Category::PhraseDrill => "drill",
        }
    }

    /// Display name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            Category::Standard => "STANDARD",
            Category::AnswerRemoval => "AAD",
            Category::AnswerSetSwap => "IASD",
            Category::ImageSwap => "IVQD",
            Category::OpenStandard => "OPEN_STANDARD",
            Category::OpenUnanswerable => "OPEN_UNANSWERABLE",
            Category::PhraseDrill => "PHRASE_DRILL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub schema_version: u32,
    pub item_id: String,
    /// Shared by an answerable item and its unanswerable twin.
    pub pair_id: String,
    pub category: Category,
    pub answerable: bool,
    pub scene: Scene,
    /// Full prompt text; parses back to the question and option list.
    pub prompt: String,
    /// Option texts in prompt order; empty for open-ended items.
    pub options: Vec<String>,
    /// Exact target string: a word answer like "White." or the abstention
    /// sentence.
    pub target: String,
    /// Rotation index of the option list; training items are always 0.
    pub shift: usize,
    pub config_hash: String,
}

impl VqaItem {
    pub fn is_multiple_choice(&self) -> bool {
        matches!(
            self.category,
            Category::Standard
                | Category::AnswerRemoval
                | Category::AnswerSetSwap
                | Category::ImageSwap
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Training pair counts per unanswerable transform.
    pub train_answer_removal: usize,
    pub train_answer_set_swap: usize,
    pub train_image_swap: usize,
    pub train_open: usize,
    /// Train-only items that teach the decoder to voice the abstention
    /// sentence on request. A question is never answered by it; a full-size
    /// language model brings this wording from its text prior, so the desk
    /// model gets the same competence explicitly.
    pub train_phrase_drill: usize,
    /// Validation pairs per multiple-choice transform.
    pub val_per_mc_category: usize,
    pub val_open: usize,
    /// Options per generated multiple-choice question.
    pub mc_options: usize,
    pub config_hash: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            train_answer_removal: 293,
            train_answer_set_swap: 189,
            train_image_swap: 307,
            train_open: 700,
            train_phrase_drill: 64,
            val_per_mc_category: 30,
            val_open: 50,
            mc_options: 4,
            config_hash: String::new(),
        }
    }
}

impl CorpusSpec {
    /// Small spec for tests; same structure, seconds of work.
    pub fn toy(seed: u64) -> Self {
        CorpusSpec {
            seed,
            train_answer_removal: 8,
            train_answer_set_swap: 8,
            train_image_swap: 8,
            train_open: 16,
            train_phrase_drill: 4,
            val_per_mc_category: 4,
            val_open: 6,
            mc_options: 4,
            config_hash: "toy".into(),
        }
    }

    fn validate(&self, world: &SyntheticWorld) -> Result<()> {
        if self.mc_options < 3 || self.mc_options > 4 {
            return Err(UpdError::Config(format!(
                "mc_options must be 3 or 4 so answer removal leaves at least two, got {}",
                self.mc_options
            )));
        }
        if world.colors().len() < self.mc_options {
            return Err(UpdError::Config(
                "not enough colors to fill a distractor set".into(),
            ));
        }
        // a scene uses at most 3 objects; object distractors come from the rest
        if world.objects().len() < 3 + self.mc_options {
            return Err(UpdError::Config(
                "not enough objects to build absent-object distractors".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<VqaItem>,
    pub val: Vec<VqaItem>,
}

#[derive(Clone, Copy, PartialEq)]
enum QuestionKind {
    ColorOfObject,
    ObjectWithColor,
}

impl QuestionKind {
    fn opposite(self) -> Self {
        match self {
            QuestionKind::ColorOfObject => QuestionKind::ObjectWithColor,
            QuestionKind::ObjectWithColor => QuestionKind::ColorOfObject,
        }
    }
}

struct McQuestion {
    kind: QuestionKind,
    question: String,
    options: Vec<String>,
    correct_index: usize,
    /// The entity the question refers to: the queried object for a color
    /// question, the queried color for an object question.
    referenced: String,
}

struct Generator<'w> {
    world: &'w SyntheticWorld,
    spec: CorpusSpec,
    rng: ChaCha8Rng,
}

impl<'w> Generator<'w> {
    fn new(world: &'w SyntheticWorld, spec: &CorpusSpec, label: &str) -> Self {
        Generator {
            world,
            spec: spec.clone(),
            rng: rng_from_seed(derive_seed(spec.seed, &format!("corpus:{label}"))),
        }
    }

    /// One to three facts, objects and colors both distinct within a scene.
    // One fact per scene. The decoder answers by checking which option is
    // present in the image; multi-object scenes would demand object-color
    // binding that a two-block single-head decoder cannot express once
    // options are permuted.
    fn sample_scene(&mut self, id: String) -> Scene {
        let object = self.world.objects()[self.rng.gen_range(0..self.world.objects().len())].clone();
        let color = self.world.colors()[self.rng.gen_range(0..self.world.colors().len())].clone();
        Scene::new(id, vec![(object, color)])
    }

    fn pick_fact(&mut self, scene: &Scene) -> (String, String) {
        let idx = self.rng.gen_range(0..scene.facts.len());
        scene.facts[idx].clone()
    }

    fn mc_question(&mut self, scene: &Scene, kind: QuestionKind) -> McQuestion {
        let (object, color) = self.pick_fact(scene);
        let n = self.spec.mc_options;
        let (question, correct, referenced, mut distractors) = match kind {
            QuestionKind::ColorOfObject => {
                let pool: Vec<String> = self
                    .world
                    .colors()
                    .iter()
                    .filter(|c| **c != color)
                    .cloned()
                    .collect();
                (
                    format!("What color is the {object}?"),
                    color.clone(),
                    object.clone(),
                    pool,
                )
            }
            QuestionKind::ObjectWithColor => {
                // distractors must be absent from the scene so only one
                // option can possibly be right
                let pool: Vec<String> = self
                    .world
                    .objects()
                    .iter()
                    .filter(|o| !scene.contains_object(o))
                    .cloned()
                    .collect();
                (
                    format!("Which object is {color}?"),
                    object.clone(),
                    color.clone(),
                    pool,
                )
            }
        };
        distractors.shuffle(&mut self.rng);
        distractors.truncate(n - 1);
        let correct_index = self.rng.gen_range(0..n);
        let mut options: Vec<String> = Vec::with_capacity(n);
        let mut rest = distractors.into_iter();
        for slot in 0..n {
            if slot == correct_index {
                options.push(title_case(&correct));
            } else {
                options.push(title_case(&rest.next().expect("enough distractors")));
            }
        }
        McQuestion {
            kind,
            question,
            options,
            correct_index,
            referenced,
        }
    }

    /// A scene guaranteed not to contain the referenced entity.
    fn swap_scene(&mut self, id: String, kind: QuestionKind, referenced: &str) -> Result<Scene> {
        for _ in 0..1000 {
            let candidate = self.sample_scene(id.clone());
            let clash = match kind {
                QuestionKind::ColorOfObject => candidate.contains_object(referenced),
                QuestionKind::ObjectWithColor => candidate.contains_color(referenced),
            };
            if !clash {
                return Ok(candidate);
            }
        }
        Err(UpdError::Infeasible(format!(
            "no scene avoiding {referenced:?} found in 1000 draws"
        )))
    }

    fn mc_pair(&mut self, split: &str, category: Category, index: usize) -> Result<Vec<VqaItem>> {
        let pair_id = format!("{split}-{}-{index:04}", category.tag());
        let scene = self.sample_scene(format!("{pair_id}-scene"));
        let kind = if self.rng.gen_bool(0.5) {
            QuestionKind::ColorOfObject
        } else {
            QuestionKind::ObjectWithColor
        };
        let q = self.mc_question(&scene, kind);

        let answerable = VqaItem {
            schema_version: SCHEMA_VERSION,
            item_id: format!("{pair_id}-a"),
            pair_id: pair_id.clone(),
            category: Category::Standard,
            answerable: true,
            scene: scene.clone(),
            prompt: canonical_prompt(&q.question, &q.options),
            options: q.options.clone(),
            target: mc_target(&q.options, q.correct_index),
            shift: 0,
            config_hash: self.spec.config_hash.clone(),
        };

        let (u_scene, u_options) = match category {
            Category::AnswerRemoval => {
                let mut opts = q.options.clone();
                opts.remove(q.correct_index);
                (scene.clone(), opts)
            }
            Category::AnswerSetSwap => {
                let donor_scene = self.sample_scene(format!("{pair_id}-donor"));
                let donor = self.mc_question(&donor_scene, q.kind.opposite());
                (scene.clone(), donor.options)
            }
            Category::ImageSwap => {
                let donor = self.swap_scene(format!("{pair_id}-donor"), q.kind, &q.referenced)?;
                (donor, q.options.clone())
            }
            _ => {
                return Err(UpdError::contract(format!(
                    "{category:?} is not a multiple-choice transform"
                )))
            }
        };
        let unanswerable = VqaItem {
            schema_version: SCHEMA_VERSION,
            item_id: format!("{pair_id}-u"),
            pair_id,
            category,
            answerable: false,
            scene: u_scene,
            prompt: canonical_prompt(&q.question, &u_options),
            options: u_options,
            target: ABSTAIN_TEXT.to_string(),
            shift: 0,
            config_hash: self.spec.config_hash.clone(),
        };
        Ok(vec![answerable, unanswerable])
    }

    /// Answerable instruction whose correct output is the abstention
    /// sentence, over a fresh scene so the wording never binds to an image.
    /// Train-only; evaluation never sees this category.
    fn drill_item(&mut self, split: &str, index: usize) -> VqaItem {
        let item_id = format!("{split}-drill-{index:04}");
        let scene = self.sample_scene(format!("{item_id}-scene"));
        VqaItem {
            schema_version: SCHEMA_VERSION,
            item_id: item_id.clone(),
            pair_id: item_id,
            category: Category::PhraseDrill,
            answerable: true,
            scene,
            prompt: "Say you cannot answer.".into(),
            options: Vec::new(),
            target: ABSTAIN_TEXT.to_string(),
            shift: 0,
            config_hash: self.spec.config_hash.clone(),
        }
    }

    fn open_pair(&mut self, split: &str, index: usize) -> Result<Vec<VqaItem>> {
        let pair_id = format!("{split}-open-{index:04}");
        let scene = self.sample_scene(format!("{pair_id}-scene"));
        let (object, color) = self.pick_fact(&scene);
        let absent: Vec<String> = self
            .world
            .objects()
            .iter()
            .filter(|o| !scene.contains_object(o))
            .cloned()
            .collect();
        let missing = absent[self.rng.gen_range(0..absent.len())].clone();

        let answerable = VqaItem {
            schema_version: SCHEMA_VERSION,
            item_id: format!("{pair_id}-a"),
            pair_id: pair_id.clone(),
            category: Category::OpenStandard,
            answerable: true,
            scene: scene.clone(),
            prompt: format!("What color is the {object}?"),
            options: Vec::new(),
            target: format!("{}.", title_case(&color)),
            shift: 0,
            config_hash: self.spec.config_hash.clone(),
        };
        let unanswerable = VqaItem {
            schema_version: SCHEMA_VERSION,
            item_id: format!("{pair_id}-u"),
            pair_id,
            category: Category::OpenUnanswerable,
            answerable: false,
            scene,
            prompt: format!("What color is the {missing}?"),
            options: Vec::new(),
            target: ABSTAIN_TEXT.to_string(),
            shift: 0,
            config_hash: self.spec.config_hash.clone(),
        };
        Ok(vec![answerable, unanswerable])
    }
}

/// All rotations of a validation item's option list. The expected letter
/// follows the correct option to its new slot; target text and abstention
/// targets are rotation-invariant. Open-ended items get a single shift-zero
/// copy.
pub fn circular_variants(item: &VqaItem) -> Result<Vec<VqaItem>> {
    if !item.is_multiple_choice() {
        return Ok(vec![item.clone()]);
    }
    let parsed = classify_and_parse(&item.prompt);
    if parsed.kind != PromptKind::MultipleChoice {
        return Err(UpdError::MalformedData {
            path: item.item_id.clone(),
            detail: "multiple-choice item whose prompt does not parse as one".into(),
        });
    }
    let n = item.options.len();
    let correct_text = if item.answerable {
        Some(item.options[target_option_index(item)?].clone())
    } else {
        None
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let rotated: Vec<String> = (0..n).map(|j| item.options[(j + k) % n].clone()).collect();
        let target = match &correct_text {
            Some(text) => {
                let idx = rotated
                    .iter()
                    .position(|o| o == text)
                    .expect("rotation preserves the option set");
                mc_target(&rotated, idx)
            }
            None => item.target.clone(),
        };
        out.push(VqaItem {
            item_id: format!("{}-s{k}", item.item_id),
            prompt: canonical_prompt(&parsed.question, &rotated),
            options: rotated,
            target,
            shift: k,
            ..item.clone()
        });
    }
    Ok(out)
}

/// Generates the full train and validation corpus for one spec.
pub fn generate_corpus(world: &SyntheticWorld, spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate(world)?;
    let mut train = Vec::new();
    let mut gen = Generator::new(world, spec, "train");
    for (category, count) in [
        (Category::AnswerRemoval, spec.train_answer_removal),
        (Category::AnswerSetSwap, spec.train_answer_set_swap),
        (Category::ImageSwap, spec.train_image_swap),
    ] {
        for i in 0..count {
            train.extend(gen.mc_pair("train", category, i)?);
        }
    }
    for i in 0..spec.train_open {
        train.extend(gen.open_pair("train", i)?);
    }
    for i in 0..spec.train_phrase_drill {
        train.push(gen.drill_item("train", i));
    }

    let mut val = Vec::new();
    let mut gen = Generator::new(world, spec, "val");
    for category in [
        Category::AnswerRemoval,
        Category::AnswerSetSwap,
        Category::ImageSwap,
    ] {
        for i in 0..spec.val_per_mc_category {
            for item in gen.mc_pair("val", category, i)? {
                val.extend(circular_variants(&item)?);
            }
        }
    }
    for i in 0..spec.val_open {
        for item in gen.open_pair("val", i)? {
            val.extend(circular_variants(&item)?);
        }
    }
    Ok(Corpus { train, val })
}

/// Deterministic paired batches: twins stay together, pair order reshuffles
/// per epoch. Errors if any pair is missing a side.
pub fn paired_batches<'a>(
    items: &'a [VqaItem],
    pairs_per_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<&'a VqaItem>>> {
    if pairs_per_batch == 0 {
        return Err(UpdError::Config("pairs_per_batch must be positive".into()));
    }
    let mut by_pair: std::collections::BTreeMap<&str, Vec<&VqaItem>> =
        std::collections::BTreeMap::new();
    for item in items {
        by_pair.entry(item.pair_id.as_str()).or_default().push(item);
    }
    let mut pairs: Vec<Vec<&VqaItem>> = Vec::with_capacity(by_pair.len());
    for (pair_id, mut members) in by_pair {
        if members.len() != 2 || members[0].answerable == members[1].answerable {
            return Err(UpdError::MalformedData {
                path: pair_id.to_string(),
                detail: format!(
                    "expected one answerable and one unanswerable item, found {}",
                    members.len()
                ),
            });
        }
        members.sort_by_key(|m| !m.answerable);
        pairs.push(members);
    }
    let mut rng = rng_from_seed(derive_seed(seed, &format!("batch-epoch:{epoch}")));
    pairs.shuffle(&mut rng);
    Ok(pairs
        .chunks(pairs_per_batch)
        .map(|chunk| chunk.iter().flatten().copied().collect())
        .collect())
}

pub fn save_items(path: &Path, items: &[VqaItem]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| UpdError::io(path.display().to_string(), e))?;
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(file, "{line}").map_err(|e| UpdError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_items(path: &Path) -> Result<Vec<VqaItem>> {
    let file =
        std::fs::File::open(path).map_err(|e| UpdError::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| UpdError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: VqaItem =
            serde_json::from_str(&line).map_err(|e| UpdError::MalformedData {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
        if item.schema_version != SCHEMA_VERSION {
            return Err(UpdError::MalformedData {
                path: path.display().to_string(),
                detail: format!(
                    "line {}: schema version {} unsupported",
                    lineno + 1,
                    item.schema_version
                ),
            });
        }
        if !seen.insert(item.item_id.clone()) {
            return Err(UpdError::MalformedData {
                path: path.display().to_string(),
                detail: format!("duplicate item id {:?}", item.item_id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

fn title_case(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Answer text for a correct option: the option word itself, the same shape
/// open-ended answers take. Scoring resolves the word back to its slot, so
/// option rotation still moves the expected letter; a two-block decoder
/// learns to ground the content word orders of magnitude faster than the
/// two-hop letter-slot lookup.
fn mc_target(options: &[String], index: usize) -> String {
    format!("{}.", options[index])
}

/// Index of the option an answerable multiple-choice item's target names.
pub fn target_option_index(item: &VqaItem) -> Result<usize> {
    let text = item.target.trim().trim_end_matches('.');
    item.options
        .iter()
        .position(|o| o.eq_ignore_ascii_case(text))
        .ok_or_else(|| UpdError::MalformedData {
            path: item.item_id.clone(),
            detail: format!("target {:?} does not name one of the options", item.target),
        })
}
