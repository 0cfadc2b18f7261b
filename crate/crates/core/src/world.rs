//! The synthetic subject-verb-object captioning world.
//!
//! A [`Grammar`] fixes the vocabulary: subject words grouped into categories,
//! object and verb words, a compatibility map saying which verbs can join a
//! (subject category, object) pair, caption templates, synonym sets, and a
//! part-of-speech tag per word. Scenes are (subject, object, verb) triples
//! sampled under the compatibility map; reference captions realize a scene
//! through templates with optional synonym substitution.
//!
//! Everything is driven by a seeded generator: (seed, config) fully
//! determines the grammar, every scene, and every caption.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Size and rate knobs for grammar and dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub categories: usize,
    pub subjects_per_category: usize,
    pub objects: usize,
    pub verbs: usize,
    pub templates: usize,
    /// Probability that a content word is given a synonym in the grammar.
    pub synonym_fraction: f64,
    /// Probability that a content slot is realized with a synonym.
    pub substitution_rate: f64,
    /// How many categories are held out for meta-test.
    pub test_categories: usize,
    /// Samples generated per category.
    pub per_category: usize,
    /// Reference captions per sample (1–5).
    pub references: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            categories: 20,
            subjects_per_category: 2,
            objects: 20,
            verbs: 12,
            templates: 5,
            synonym_fraction: 0.5,
            substitution_rate: 0.3,
            test_categories: 5,
            per_category: 30,
            references: 5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.categories >= 10, "categories must be ≥ 10"),
            (self.subjects_per_category >= 2, "subjects_per_category must be ≥ 2"),
            (self.objects >= 10, "objects must be ≥ 10"),
            (self.verbs >= 8, "verbs must be ≥ 8"),
            (self.templates >= 3, "templates must be ≥ 3"),
            (
                self.templates <= TEMPLATE_PATTERNS.len(),
                "templates exceed the available pattern pool",
            ),
            (
                self.test_categories >= 1 && self.test_categories < self.categories,
                "test_categories must leave at least one train category",
            ),
            ((0.0..=1.0).contains(&self.synonym_fraction), "synonym_fraction must be in [0,1]"),
            ((0.0..=1.0).contains(&self.substitution_rate), "substitution_rate must be in [0,1]"),
            (self.per_category >= 1, "per_category must be ≥ 1"),
            ((1..=5).contains(&self.references), "references must be in 1..=5"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(format!("world: {msg}")));
            }
        }
        Ok(())
    }
}

/// Part of speech, used by the coverage metrics to filter content words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pos {
    Noun,
    Verb,
    Function,
}

/// One caption-template slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Sub,
    Verb,
    Obj,
    Word(String),
}

/// The closed vocabulary and composition rules of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub categories: usize,
    /// (subject word, category id); each word belongs to exactly one category.
    pub subjects: Vec<(String, usize)>,
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    /// (subject category → object word → allowed verbs); nonempty everywhere.
    pub compatibility: BTreeMap<usize, BTreeMap<String, Vec<String>>>,
    pub templates: Vec<Vec<Slot>>,
    /// word → full synonym set, symmetric and reflexive (includes the word).
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub pos: BTreeMap<String, Pos>,
}

/// A single situation to caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub subject: String,
    pub object: String,
    pub verb: String,
    /// Seeds the vision encoder's additive noise for this scene.
    pub noise_seed: u64,
}

/// A scene with its frozen image feature and reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedSample {
    pub scene: Scene,
    pub category_id: usize,
    #[serde(with = "feature_vec")]
    pub feature: Tensor,
    pub references: Vec<Vec<String>>,
}

/// Serialize the [1×d_v] feature tensor as a bare float array.
mod feature_vec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        serde::Serialize::serialize(t.data(), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
        let data: Vec<f64> = serde::Deserialize::deserialize(d)?;
        Tensor::new(vec![1, data.len()], data).map_err(serde::de::Error::custom)
    }
}

/// Disjoint category partition for meta-train/meta-test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub meta_train_categories: Vec<usize>,
    pub meta_test_categories: Vec<usize>,
}

impl CategorySplit {
    pub fn validate(&self, categories: usize) -> Result<()> {
        let mut seen = vec![false; categories];
        for &c in self.meta_train_categories.iter().chain(&self.meta_test_categories) {
            if c >= categories {
                return Err(Error::Contract(format!("split names unknown category {c}")));
            }
            if seen[c] {
                return Err(Error::Contract(format!("split lists category {c} twice")));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract("split does not cover all categories".into()));
        }
        Ok(())
    }
}

// ---- word pools ----

const SUBJECT_POOL: &[&str] = &[
    "cat", "dog", "fox", "bear", "wolf", "owl", "hen", "duck", "goat", "lamb", "pony", "mule",
    "crab", "toad", "mouse", "otter", "seal", "hare", "lynx", "mole", "bee", "ant", "wasp",
    "moth", "swan", "crow", "finch", "robin", "heron", "stork", "child", "farmer", "baker",
    "rider", "singer", "dancer", "miner", "sailor", "scout", "piper", "weaver", "tailor",
    "smith", "clerk", "monk", "knight", "pilot", "juggler", "drummer", "fiddler",
];

const OBJECT_POOL: &[&str] = &[
    "ball", "rope", "drum", "bell", "kite", "cart", "pear", "plum", "cake", "loaf", "broom",
    "ladder", "bucket", "lantern", "ribbon", "basket", "mirror", "candle", "button", "marble",
    "whistle", "hammer", "shovel", "pillow", "blanket", "kettle", "spoon", "plate", "branch",
    "stone", "acorn", "berry", "flower", "garland", "satchel", "barrel", "anchor", "paddle",
    "thimble", "locket",
];

const VERB_POOL: &[&str] = &[
    "lifts", "carries", "drops", "chases", "finds", "holds", "pushes", "pulls", "spins",
    "tosses", "grabs", "shakes", "taps", "kicks", "rolls", "flips", "hides", "cleans",
    "paints", "mends", "stacks", "drags", "turns", "guards",
];

/// Every function word any template can use; all of them enter the
/// vocabulary so that reshuffled-domain grammars never mint new tokens.
pub const FUNCTION_POOL: &[&str] = &[
    "the", "a", "one", "this", "that", "today", "now", "again", "outside", "nearby", "quietly",
    "softly", "often", "gently", "twice",
];

/// Template skeletons. Subject precedes verb precedes object in all of them.
const TEMPLATE_PATTERNS: &[&[&str]] = &[
    &["the", "SUB", "VERB", "the", "OBJ"],
    &["a", "SUB", "VERB", "a", "OBJ"],
    &["the", "SUB", "VERB", "a", "OBJ", "today"],
    &["one", "SUB", "quietly", "VERB", "the", "OBJ"],
    &["the", "SUB", "VERB", "the", "OBJ", "outside"],
    &["a", "SUB", "often", "VERB", "that", "OBJ"],
    &["this", "SUB", "VERB", "one", "OBJ", "now"],
    &["the", "SUB", "gently", "VERB", "the", "OBJ", "again"],
];

const SYLLABLES: &[&str] = &[
    "ba", "do", "fi", "gu", "ka", "lo", "mi", "nu", "pa", "re", "so", "tu", "va", "zo",
];

/// Draw `count` distinct words: pool entries first (shuffled), then
/// generated syllable words once the pool runs dry.
fn draw_words(pool: &[&str], count: usize, taken: &mut Vec<String>, rng: &mut SeededRng) -> Vec<String> {
    let mut shuffled: Vec<&str> = pool.to_vec();
    shuffled.shuffle(rng);
    let mut out = Vec::with_capacity(count);
    for w in shuffled {
        if out.len() == count {
            break;
        }
        if !taken.iter().any(|t| t == w) {
            out.push(w.to_string());
            taken.push(w.to_string());
        }
    }
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .map(|_| *SYLLABLES.choose(rng).expect("non-empty syllable list"))
            .collect();
        if !taken.iter().any(|t| *t == word) {
            out.push(word.clone());
            taken.push(word);
        }
    }
    out
}

/// Generate a grammar satisfying all invariants.
pub fn build_grammar(cfg: &WorldConfig, rng: &mut SeededRng) -> Result<Grammar> {
    cfg.validate()?;
    let mut taken: Vec<String> = FUNCTION_POOL.iter().map(|s| s.to_string()).collect();

    let n_subjects = cfg.categories * cfg.subjects_per_category;
    let subject_words = draw_words(SUBJECT_POOL, n_subjects, &mut taken, rng);
    let objects = draw_words(OBJECT_POOL, cfg.objects, &mut taken, rng);
    let verbs = draw_words(VERB_POOL, cfg.verbs, &mut taken, rng);

    let subjects: Vec<(String, usize)> = subject_words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i / cfg.subjects_per_category))
        .collect();

    // Synonyms: per content word, with probability synonym_fraction, pair it
    // with a fresh word of the same part of speech.
    let mut synonyms: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut pos: BTreeMap<String, Pos> = BTreeMap::new();
    for w in FUNCTION_POOL {
        pos.insert(w.to_string(), Pos::Function);
    }
    let mut assign = |words: &[String], tag: Pos, pool: &[&str], taken: &mut Vec<String>, rng: &mut SeededRng| {
        for w in words {
            pos.insert(w.clone(), tag);
            let mut set = vec![w.clone()];
            if rng.random_bool(cfg.synonym_fraction) {
                let syn = draw_words(pool, 1, taken, rng).pop().expect("one word");
                pos.insert(syn.clone(), tag);
                set.push(syn);
            }
            set.sort();
            for member in &set {
                synonyms.insert(member.clone(), set.clone());
            }
        }
    };
    assign(&subject_words, Pos::Noun, SUBJECT_POOL, &mut taken, rng);
    assign(&objects, Pos::Noun, OBJECT_POOL, &mut taken, rng);
    assign(&verbs, Pos::Verb, VERB_POOL, &mut taken, rng);

    let compatibility = draw_compatibility(cfg.categories, &objects, &verbs, rng);
    let templates = draw_templates(cfg.templates, rng);

    let grammar =
        Grammar { categories: cfg.categories, subjects, objects, verbs, compatibility, templates, synonyms, pos };
    grammar.validate()?;
    Ok(grammar)
}

fn draw_compatibility(
    categories: usize,
    objects: &[String],
    verbs: &[String],
    rng: &mut SeededRng,
) -> BTreeMap<usize, BTreeMap<String, Vec<String>>> {
    let mut compatibility = BTreeMap::new();
    for cat in 0..categories {
        let mut per_object = BTreeMap::new();
        for obj in objects {
            let n = rng.random_range(1..=3.min(verbs.len()));
            let mut picked: Vec<String> =
                verbs.choose_multiple(rng, n).cloned().collect();
            picked.sort();
            per_object.insert(obj.clone(), picked);
        }
        compatibility.insert(cat, per_object);
    }
    compatibility
}

fn draw_templates(count: usize, rng: &mut SeededRng) -> Vec<Vec<Slot>> {
    let mut order: Vec<usize> = (0..TEMPLATE_PATTERNS.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .take(count)
        .map(|i| {
            TEMPLATE_PATTERNS[i]
                .iter()
                .map(|&w| match w {
                    "SUB" => Slot::Sub,
                    "VERB" => Slot::Verb,
                    "OBJ" => Slot::Obj,
                    other => Slot::Word(other.to_string()),
                })
                .collect()
        })
        .collect()
}

/// Same vocabulary, different world: fresh compatibility map and a fresh
/// template selection. Emulates a domain shift without a token shift.
pub fn reshuffle_domain(grammar: &Grammar, template_count: usize, rng: &mut SeededRng) -> Result<Grammar> {
    let mut out = grammar.clone();
    out.compatibility = draw_compatibility(grammar.categories, &grammar.objects, &grammar.verbs, rng);
    out.templates = draw_templates(template_count.min(TEMPLATE_PATTERNS.len()), rng);
    out.validate()?;
    Ok(out)
}

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.iter().any(|(_, c)| *c >= self.categories) {
            return Err(Error::Contract("subject assigned to unknown category".into()));
        }
        for cat in 0..self.categories {
            if !self.subjects.iter().any(|(_, c)| *c == cat) {
                return Err(Error::Contract(format!("category {cat} has no subjects")));
            }
            let per_object = self
                .compatibility
                .get(&cat)
                .ok_or_else(|| Error::Contract(format!("category {cat} missing from compatibility")))?;
            for obj in &self.objects {
                let allowed = per_object
                    .get(obj)
                    .ok_or_else(|| Error::Contract(format!("({cat}, {obj}) missing from compatibility")))?;
                if allowed.is_empty() {
                    return Err(Error::Contract(format!("({cat}, {obj}) allows no verbs")));
                }
            }
        }
        for (word, set) in &self.synonyms {
            if !set.contains(word) {
                return Err(Error::Contract(format!("synonym set of {word} is not reflexive")));
            }
            for member in set {
                if self.synonyms.get(member) != Some(set) {
                    return Err(Error::Contract(format!(
                        "synonym sets of {word} and {member} disagree (not symmetric)"
                    )));
                }
            }
        }
        if self.templates.len() < 3 {
            return Err(Error::Contract("grammar needs ≥ 3 templates".into()));
        }
        Ok(())
    }

    /// All words of the world in sorted order (content, synonyms, and the
    /// full function pool — template choice never changes the vocabulary).
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = self.pos.keys().cloned().collect();
        words.sort();
        words.dedup();
        words
    }

    pub fn subjects_in_category(&self, category: usize) -> Vec<&str> {
        self.subjects
            .iter()
            .filter(|(_, c)| *c == category)
            .map(|(w, _)| w.as_str())
            .collect()
    }

    pub fn category_of_subject(&self, subject: &str) -> Result<usize> {
        self.subjects
            .iter()
            .find(|(w, _)| w == subject)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Lookup(format!("unknown subject {subject}")))
    }

    /// Synonym set of a word; every word is at least its own synonym.
    pub fn synonym_set(&self, word: &str) -> Vec<String> {
        self.synonyms
            .get(word)
            .cloned()
            .unwrap_or_else(|| vec![word.to_string()])
    }
}

/// Shuffle categories and hold out the configured number for meta-test.
pub fn split_categories(categories: usize, test_categories: usize, rng: &mut SeededRng) -> Result<CategorySplit> {
    if test_categories == 0 || test_categories >= categories {
        return Err(Error::Config(format!(
            "cannot hold out {test_categories} of {categories} categories"
        )));
    }
    let mut ids: Vec<usize> = (0..categories).collect();
    ids.shuffle(rng);
    let (test, train) = ids.split_at(test_categories);
    let mut meta_train_categories = train.to_vec();
    let mut meta_test_categories = test.to_vec();
    meta_train_categories.sort_unstable();
    meta_test_categories.sort_unstable();
    let split = CategorySplit { meta_train_categories, meta_test_categories };
    split.validate(categories)?;
    Ok(split)
}

/// Draw a scene: subject uniform in the category, object uniform, verb
/// uniform among the compatible verbs.
pub fn sample_scene(grammar: &Grammar, category: usize, rng: &mut SeededRng) -> Result<Scene> {
    let subjects = grammar.subjects_in_category(category);
    if subjects.is_empty() {
        return Err(Error::Lookup(format!("unknown category {category}")));
    }
    let subject = (*subjects.choose(rng).expect("non-empty")).to_string();
    let object = grammar
        .objects
        .choose(rng)
        .ok_or_else(|| Error::Contract("grammar has no objects".into()))?
        .clone();
    let verbs = &grammar.compatibility[&category][&object];
    let verb = verbs.choose(rng).expect("compatibility is never empty").clone();
    let noise_seed = rng.random::<u64>();
    Ok(Scene { subject, object, verb, noise_seed })
}

fn realize_once(grammar: &Grammar, scene: &Scene, substitution_rate: f64, rng: &mut SeededRng) -> Vec<String> {
    let template = grammar.templates.choose(rng).expect("≥3 templates");
    let mut substitute = |word: &str| -> String {
        let set = grammar.synonym_set(word);
        if set.len() > 1 && rng.random_bool(substitution_rate) {
            let others: Vec<&String> = set.iter().filter(|w| *w != word).collect();
            (*others.choose(rng).expect("non-empty")).clone()
        } else {
            word.to_string()
        }
    };
    template
        .iter()
        .map(|slot| match slot {
            Slot::Sub => substitute(&scene.subject),
            Slot::Verb => substitute(&scene.verb),
            Slot::Obj => substitute(&scene.object),
            Slot::Word(w) => w.clone(),
        })
        .collect()
}

/// Default probability that a realized content slot is swapped for a synonym.
pub const DEFAULT_SUBSTITUTION_RATE: f64 = 0.3;

/// `count` distinct template realizations of a scene, at the default
/// synonym substitution rate.
pub fn realize_captions(
    grammar: &Grammar,
    scene: &Scene,
    rng: &mut SeededRng,
    count: usize,
) -> Result<Vec<Vec<String>>> {
    realize_captions_with_rate(grammar, scene, rng, count, DEFAULT_SUBSTITUTION_RATE)
}

/// [`realize_captions`] with an explicit synonym substitution rate.
pub fn realize_captions_with_rate(
    grammar: &Grammar,
    scene: &Scene,
    rng: &mut SeededRng,
    count: usize,
    substitution_rate: f64,
) -> Result<Vec<Vec<String>>> {
    if count == 0 || count > 5 {
        return Err(Error::Config(format!("caption count {count} outside 1..=5")));
    }
    let mut out: Vec<Vec<String>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 60 * count {
            return Err(Error::Data(format!(
                "could not realize {count} distinct captions for {scene:?}; \
                 template × synonym space too small"
            )));
        }
        let caption = realize_once(grammar, scene, substitution_rate, rng);
        if !out.contains(&caption) {
            out.push(caption);
        }
    }
    Ok(out)
}

/// Generate per-category samples and route them by the split.
pub fn make_dataset(
    grammar: &Grammar,
    split: &CategorySplit,
    cfg: &WorldConfig,
    rng: &mut SeededRng,
    encode: impl Fn(&Scene) -> Result<Tensor>,
) -> Result<(Vec<CaptionedSample>, Vec<CaptionedSample>)> {
    split.validate(grammar.categories)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for category in 0..grammar.categories {
        for _ in 0..cfg.per_category {
            let scene = sample_scene(grammar, category, rng)?;
            let references =
                realize_captions_with_rate(grammar, &scene, rng, cfg.references, cfg.substitution_rate)?;
            let feature = encode(&scene)?;
            let sample = CaptionedSample { scene, category_id: category, feature, references };
            if split.meta_train_categories.contains(&category) {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok((train, test))
}

// ---- persistence ----

pub fn write_grammar(path: &Path, grammar: &Grammar, split: &CategorySplit) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        grammar: &'a Grammar,
        split: &'a CategorySplit,
    }
    let json = serde_json::to_string_pretty(&Doc { grammar, split })?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_grammar(path: &Path) -> Result<(Grammar, CategorySplit)> {
    #[derive(Deserialize)]
    struct Doc {
        grammar: Grammar,
        split: CategorySplit,
    }
    let doc: Doc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    doc.grammar.validate()?;
    doc.split.validate(doc.grammar.categories)?;
    Ok((doc.grammar, doc.split))
}

/// One sample per line.
pub fn write_dataset(path: &Path, samples: &[CaptionedSample]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<CaptionedSample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
