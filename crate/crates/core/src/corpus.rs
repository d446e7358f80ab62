//! Data model for slot-filling examples, JSON-lines ingestion, few-shot
//! subsampling and synthetic corpus generation.
//!
//! The native file format is JSON lines: a header record
//! `{"domain": .., "slot_keys": [..]}` followed by one example per line,
//! `{"utterance": .., "requested": [..], "labels": {key: {"span": [s,e]}}}`.
//! Span offsets are UTF-8 byte offsets into the utterance. A label that is
//! absent (or explicitly `null`) means the slot is not provided.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::{Error, Result};

/// Value of one slot in one example: either absent or a contiguous span of
/// the utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotLabel {
    NotProvided,
    Span {
        surface: String,
        char_start: usize,
        char_end: usize,
    },
}

impl SlotLabel {
    pub fn span(surface: impl Into<String>, char_start: usize, char_end: usize) -> Self {
        SlotLabel::Span {
            surface: surface.into(),
            char_start,
            char_end,
        }
    }

    pub fn is_provided(&self) -> bool {
        matches!(self, SlotLabel::Span { .. })
    }

    pub fn surface(&self) -> Option<&str> {
        match self {
            SlotLabel::NotProvided => None,
            SlotLabel::Span { surface, .. } => Some(surface),
        }
    }
}

/// One utterance with the slots the system just asked for and the gold
/// slot values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotExample {
    pub utterance: String,
    pub requested_slots: Vec<String>,
    labels: BTreeMap<String, SlotLabel>,
}

impl SlotExample {
    pub fn new(
        utterance: impl Into<String>,
        requested_slots: Vec<String>,
        labels: BTreeMap<String, SlotLabel>,
    ) -> Self {
        SlotExample {
            utterance: utterance.into(),
            requested_slots,
            labels: labels
                .into_iter()
                .filter(|(_, l)| l.is_provided())
                .collect(),
        }
    }

    /// Gold label for `key`; absent keys read as `NotProvided`.
    pub fn label(&self, key: &str) -> &SlotLabel {
        self.labels.get(key).unwrap_or(&SlotLabel::NotProvided)
    }

    /// Keys with provided values, in sorted order.
    pub fn provided_slots(&self) -> impl Iterator<Item = (&str, &SlotLabel)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn validate(&self, index: usize, slot_keys: &BTreeSet<String>) -> Result<()> {
        for key in &self.requested_slots {
            if !slot_keys.contains(key) {
                return Err(Error::Validation(format!(
                    "example {index}: requested slot '{key}' not in the domain slot set"
                )));
            }
        }
        for (key, label) in &self.labels {
            if !slot_keys.contains(key) {
                return Err(Error::Validation(format!(
                    "example {index}: label slot '{key}' not in the domain slot set"
                )));
            }
            if let SlotLabel::Span {
                surface,
                char_start,
                char_end,
            } = label
            {
                if surface.is_empty() {
                    return Err(Error::Validation(format!(
                        "example {index}: slot '{key}' has an empty surface"
                    )));
                }
                let ok = *char_start < *char_end
                    && *char_end <= self.utterance.len()
                    && self.utterance.is_char_boundary(*char_start)
                    && self.utterance.is_char_boundary(*char_end)
                    && &self.utterance[*char_start..*char_end] == surface;
                if !ok {
                    return Err(Error::Validation(format!(
                        "example {index}: slot '{key}' span [{char_start},{char_end}) does not \
                         reproduce surface {surface:?} in utterance {:?}",
                        self.utterance
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A named domain: its slot inventory plus examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub domain_name: String,
    pub slot_keys: Vec<String>,
    pub examples: Vec<SlotExample>,
}

impl Dataset {
    pub fn new(
        domain_name: impl Into<String>,
        slot_keys: Vec<String>,
        examples: Vec<SlotExample>,
    ) -> Result<Self> {
        let d = Dataset {
            domain_name: domain_name.into(),
            slot_keys,
            examples,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let keys: BTreeSet<String> = self.slot_keys.iter().cloned().collect();
        if keys.len() != self.slot_keys.len() {
            return Err(Error::Validation("duplicate slot keys".into()));
        }
        let mut problems = Vec::new();
        for (i, ex) in self.examples.iter().enumerate() {
            if let Err(e) = ex.validate(i, &keys) {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Serialize to the native JSON-lines form (header line + one example
    /// per line). Byte-stable for a given dataset.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = RawHeader {
            domain: self.domain_name.clone(),
            slot_keys: self.slot_keys.clone(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for ex in &self.examples {
            let raw = RawExample {
                utterance: ex.utterance.clone(),
                requested: ex.requested_slots.clone(),
                labels: ex
                    .labels
                    .iter()
                    .map(|(k, v)| {
                        let raw = match v {
                            SlotLabel::NotProvided => None,
                            SlotLabel::Span {
                                char_start,
                                char_end,
                                ..
                            } => Some(RawLabel {
                                span: (*char_start, *char_end),
                                surface: None,
                            }),
                        };
                        (k.clone(), raw)
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&raw).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
            location: "line 1".into(),
            message: "empty file, expected a header record".into(),
        })?;
        let header: RawHeader = serde_json::from_str(header_line).map_err(|e| Error::Parse {
            location: "line 1 (header)".into(),
            message: e.to_string(),
        })?;

        let mut examples = Vec::new();
        for (lineno, line) in lines {
            let raw: RawExample = serde_json::from_str(line).map_err(|e| Error::Parse {
                location: format!("line {} (record {})", lineno + 1, examples.len()),
                message: e.to_string(),
            })?;
            let mut labels = BTreeMap::new();
            for (key, rl) in raw.labels {
                let Some(rl) = rl else { continue };
                let (s, e) = rl.span;
                let surface = match rl.surface {
                    Some(sf) => sf,
                    None => {
                        if e <= raw.utterance.len()
                            && s < e
                            && raw.utterance.is_char_boundary(s)
                            && raw.utterance.is_char_boundary(e)
                        {
                            raw.utterance[s..e].to_string()
                        } else {
                            // Let validation report it with the record index.
                            String::new()
                        }
                    }
                };
                labels.insert(
                    key,
                    SlotLabel::Span {
                        surface,
                        char_start: s,
                        char_end: e,
                    },
                );
            }
            examples.push(SlotExample {
                utterance: raw.utterance,
                requested_slots: raw.requested,
                labels,
            });
        }
        Dataset::new(header.domain, header.slot_keys, examples)
    }
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    domain: String,
    slot_keys: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    utterance: String,
    #[serde(default)]
    requested: Vec<String>,
    #[serde(default)]
    labels: BTreeMap<String, Option<RawLabel>>,
}

#[derive(Serialize, Deserialize)]
struct RawLabel {
    span: (usize, usize),
    #[serde(skip_serializing_if = "Option::is_none")]
    surface: Option<String>,
}

/// Load a native JSON-lines dataset file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_jsonl_str(&text)
}

/// Write a dataset in the native JSON-lines form.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Import the restaurant-booking dataset's published record shape
/// (`userInput.text`, `context.requestedSlots`, `labels[].valueSpan`)
/// into the native model. The file is a single JSON array.
pub fn import_restaurants_8k(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    import_restaurants_8k_str(&text)
}

pub fn import_restaurants_8k_str(text: &str) -> Result<Dataset> {
    #[derive(Deserialize)]
    struct R8kRecord {
        #[serde(rename = "userInput")]
        user_input: R8kUserInput,
        #[serde(default)]
        context: Option<R8kContext>,
        #[serde(default)]
        labels: Vec<R8kLabel>,
    }
    #[derive(Deserialize)]
    struct R8kUserInput {
        text: String,
    }
    #[derive(Deserialize)]
    struct R8kContext {
        #[serde(rename = "requestedSlots", default)]
        requested_slots: Vec<String>,
    }
    #[derive(Deserialize)]
    struct R8kLabel {
        slot: String,
        #[serde(rename = "valueSpan")]
        value_span: R8kSpan,
    }
    #[derive(Deserialize)]
    struct R8kSpan {
        #[serde(rename = "startIndex", default)]
        start_index: usize,
        #[serde(rename = "endIndex")]
        end_index: usize,
    }

    let records: Vec<R8kRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: "restaurants-8k json".into(),
        message: e.to_string(),
    })?;

    let mut keys: BTreeSet<String> = RESTAURANT_SLOT_KEYS.iter().map(|s| s.to_string()).collect();
    let mut examples = Vec::with_capacity(records.len());
    for rec in records {
        let mut labels = BTreeMap::new();
        for l in &rec.labels {
            keys.insert(l.slot.clone());
            let (s, e) = (l.value_span.start_index, l.value_span.end_index);
            let surface = rec
                .user_input
                .text
                .get(s..e)
                .unwrap_or_default()
                .to_string();
            labels.insert(
                l.slot.clone(),
                SlotLabel::Span {
                    surface,
                    char_start: s,
                    char_end: e,
                },
            );
        }
        let requested = rec.context.map(|c| c.requested_slots).unwrap_or_default();
        examples.push(SlotExample {
            utterance: rec.user_input.text,
            requested_slots: requested,
            labels,
        });
    }
    Dataset::new("restaurants-8k", keys.into_iter().collect(), examples)
}

/// Keep a deterministic `1/denominator` sample of the examples, preserving
/// their original order. Sizes follow the floor convention, so e.g. a
/// 8198-example set at denominator 16 keeps 512.
pub fn split_fraction(dataset: &Dataset, denominator: u32, seed: u64) -> Result<Dataset> {
    if !(denominator >= 1 && denominator.is_power_of_two() && denominator <= 128) {
        return Err(Error::Config(format!(
            "fraction denominator must be one of 1,2,4,...,128, got {denominator}"
        )));
    }
    if denominator == 1 {
        return Ok(dataset.clone());
    }
    let keep = dataset.len() / denominator as usize;
    if keep == 0 {
        return Err(Error::Validation(format!(
            "fraction 1/{denominator} of {} examples is empty",
            dataset.len()
        )));
    }
    let mut rng = substream(seed, "fraction-split");
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(Dataset {
        domain_name: dataset.domain_name.clone(),
        slot_keys: dataset.slot_keys.clone(),
        examples: chosen
            .into_iter()
            .map(|i| dataset.examples[i].clone())
            .collect(),
    })
}

/// Slot inventory of the restaurant-booking domain; the synthetic domain
/// mirrors it.
pub const RESTAURANT_SLOT_KEYS: [&str; 5] = ["date", "first_name", "last_name", "people", "time"];

/// Configuration for the synthetic corpus generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub domain_name: String,
    /// Name pools; train and test pools must be disjoint so that test-time
    /// names are genuinely unseen.
    pub train_first_names: Vec<String>,
    pub test_first_names: Vec<String>,
    pub train_last_names: Vec<String>,
    pub test_last_names: Vec<String>,
}

impl SynthConfig {
    pub fn new(train_size: usize, test_size: usize) -> Self {
        // Large pools with matched letter statistics but zero surface
        // overlap. Small pools (or single-token names) let the model
        // memorize surfaces through the vocabulary head; with ~1200
        // distinct multi-token names, copying is the only solution that
        // compresses.
        let (train_first, test_first) = name_pools("first", 1200, 300);
        let (train_last, test_last) = name_pools("last", 1200, 300);
        SynthConfig {
            train_size,
            test_size,
            domain_name: "synthetic-restaurants".into(),
            train_first_names: train_first,
            test_first_names: test_first,
            train_last_names: train_last,
            test_last_names: test_last,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_size < 1 || self.test_size < 1 {
            return Err(Error::Config("train and test sizes must be >= 1".into()));
        }
        let overlap = |a: &[String], b: &[String]| {
            let set: BTreeSet<&String> = a.iter().collect();
            b.iter().any(|x| set.contains(x))
        };
        for (label, a, b) in [
            ("first", &self.train_first_names, &self.test_first_names),
            ("last", &self.train_last_names, &self.test_last_names),
        ] {
            if a.is_empty() || b.is_empty() {
                return Err(Error::Config(format!("{label}-name pools must be non-empty")));
            }
            if overlap(a, b) {
                return Err(Error::Config(format!(
                    "train/test {label}-name pools overlap"
                )));
            }
        }
        Ok(())
    }
}

const NAME_ONSETS: [&str; 20] = [
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "th", "sh",
];
const NAME_VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const NAME_CODAS: [&str; 6] = ["n", "r", "l", "s", "m", "d"];

/// Deterministic pool of distinct capitalized names built from shared
/// syllable parts. The test pool is resampled until it is disjoint from
/// the train pool, so surfaces never overlap while letter statistics do.
fn name_pools(kind: &str, train_count: usize, test_count: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = substream(0xA11CE, &format!("name-pool-{kind}"));
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
        // Two CV syllables plus an optional coda ("Baki", "Thodun"): a
        // couple of subword tokens after BPE. The pool is large enough
        // that no whole name repeats often enough to earn its own merge.
        let mut name = String::new();
        for last in [false, true] {
            name.push_str(NAME_ONSETS[rng.gen_range(0..NAME_ONSETS.len())]);
            name.push_str(NAME_VOWELS[rng.gen_range(0..NAME_VOWELS.len())]);
            if last && rng.gen_bool(0.5) {
                name.push_str(NAME_CODAS[rng.gen_range(0..NAME_CODAS.len())]);
            }
        }
        let mut chars = name.chars();
        let first = chars.next().expect("non-empty name").to_uppercase();
        format!("{}{}", first.collect::<String>(), chars.as_str())
    };
    let mut train: Vec<String> = Vec::with_capacity(train_count);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    while train.len() < train_count {
        let name = draw(&mut rng);
        if seen.insert(name.clone()) {
            train.push(name);
        }
    }
    let mut test: Vec<String> = Vec::with_capacity(test_count);
    while test.len() < test_count {
        let name = draw(&mut rng);
        if seen.insert(name.clone()) {
            test.push(name);
        }
    }
    (train, test)
}

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

const WEEKDAYS: [&str; 7] = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];

/// Bare values an utterance can consist of entirely; only the requested
/// slots resolve whether e.g. "4" means four people or four o'clock.
const BARE_VALUES: [&str; 8] = ["4", "5", "6", "7", "8", "9", "four", "five"];

enum Part {
    Lit(&'static str),
    Slot(&'static str),
}

enum Requested {
    Never,
    /// Requested slots present with probability 1/2.
    Sometimes(&'static [&'static str]),
    Always(&'static [&'static str]),
}

struct Template {
    parts: &'static [Part],
    requested: Requested,
    weight: u32,
}

use Part::{Lit, Slot};

static TEMPLATES: &[Template] = &[
    Template {
        parts: &[Lit("do you have anything available tonight")],
        requested: Requested::Never,
        weight: 2,
    },
    Template {
        parts: &[Lit("hi i would like to make a booking")],
        requested: Requested::Never,
        weight: 2,
    },
    Template {
        parts: &[Lit("table at "), Slot("time")],
        requested: Requested::Sometimes(&["time"]),
        weight: 4,
    },
    Template {
        parts: &[Lit("we will arrive at "), Slot("time")],
        requested: Requested::Never,
        weight: 3,
    },
    Template {
        parts: &[Lit("book a table for "), Slot("date")],
        requested: Requested::Sometimes(&["date"]),
        weight: 4,
    },
    Template {
        parts: &[Lit("we need it on "), Slot("date")],
        requested: Requested::Never,
        weight: 3,
    },
    Template {
        parts: &[Lit("party of "), Slot("people")],
        requested: Requested::Sometimes(&["people"]),
        weight: 4,
    },
    Template {
        parts: &[Lit("a table for "), Slot("people"), Lit(" please")],
        requested: Requested::Never,
        weight: 3,
    },
    Template {
        parts: &[Lit("my first name is "), Slot("first_name")],
        requested: Requested::Sometimes(&["first_name"]),
        weight: 6,
    },
    Template {
        parts: &[Lit("the surname is "), Slot("last_name")],
        requested: Requested::Sometimes(&["last_name"]),
        weight: 6,
    },
    Template {
        parts: &[Lit("table for "), Slot("people"), Lit(" at "), Slot("time")],
        requested: Requested::Never,
        weight: 5,
    },
    Template {
        parts: &[
            Lit("book a table for "),
            Slot("people"),
            Lit(" people on "),
            Slot("date"),
        ],
        requested: Requested::Never,
        weight: 4,
    },
    Template {
        parts: &[Lit("my name is "), Slot("first_name"), Lit(" "), Slot("last_name")],
        requested: Requested::Sometimes(&["first_name", "last_name"]),
        weight: 9,
    },
    Template {
        parts: &[Slot("first_name"), Lit(" "), Slot("last_name")],
        requested: Requested::Always(&["first_name", "last_name"]),
        weight: 9,
    },
    Template {
        parts: &[Lit("booking under "), Slot("first_name"), Lit(" "), Slot("last_name")],
        requested: Requested::Never,
        weight: 5,
    },
    Template {
        parts: &[
            Lit("we want a table at "),
            Slot("time"),
            Lit(" on "),
            Slot("date"),
        ],
        requested: Requested::Never,
        weight: 4,
    },
    Template {
        parts: &[
            Lit("table for "),
            Slot("people"),
            Lit(" at "),
            Slot("time"),
            Lit(" on "),
            Slot("date"),
        ],
        requested: Requested::Never,
        weight: 3,
    },
    Template {
        parts: &[
            Lit("i am "),
            Slot("first_name"),
            Lit(" "),
            Slot("last_name"),
            Lit(" and we are "),
            Slot("people"),
        ],
        requested: Requested::Sometimes(&["first_name", "last_name"]),
        weight: 6,
    },
    // Bare ambiguous values: only the requested slot disambiguates.
    Template {
        parts: &[Slot("bare")],
        requested: Requested::Always(&["people"]),
        weight: 2,
    },
    Template {
        parts: &[Slot("bare")],
        requested: Requested::Always(&["time"]),
        weight: 2,
    },
    // A lone name is likewise ambiguous between the two name slots.
    Template {
        parts: &[Slot("first_name")],
        requested: Requested::Always(&["first_name"]),
        weight: 3,
    },
    Template {
        parts: &[Slot("last_name")],
        requested: Requested::Always(&["last_name"]),
        weight: 3,
    },
];

struct ValuePools<'a> {
    first_names: &'a [String],
    last_names: &'a [String],
}

fn draw_value(slot: &str, pools: &ValuePools, rng: &mut impl Rng) -> String {
    match slot {
        "first_name" => pools.first_names[rng.gen_range(0..pools.first_names.len())].clone(),
        "last_name" => pools.last_names[rng.gen_range(0..pools.last_names.len())].clone(),
        "people" => {
            const WORDS: [&str; 5] = ["two", "three", "four", "five", "six"];
            if rng.gen_bool(0.3) {
                WORDS[rng.gen_range(0..WORDS.len())].to_string()
            } else {
                rng.gen_range(2..=12u32).to_string()
            }
        }
        "time" => match rng.gen_range(0..4u32) {
            0 => format!("{}pm", rng.gen_range(1..=11u32)),
            1 => format!("{}am", rng.gen_range(7..=11u32)),
            2 => format!("{}:{:02}", rng.gen_range(1..=12u32), 15 * rng.gen_range(0..4u32)),
            _ => format!("{} oclock", rng.gen_range(1..=12u32)),
        },
        "date" => match rng.gen_range(0..3u32) {
            0 => {
                let day = rng.gen_range(1..=28u32);
                let suffix = match day % 10 {
                    1 if day != 11 => "st",
                    2 if day != 12 => "nd",
                    3 if day != 13 => "rd",
                    _ => "th",
                };
                format!("{} {day}{suffix}", MONTHS[rng.gen_range(0..MONTHS.len())])
            }
            1 => format!("next {}", WEEKDAYS[rng.gen_range(0..WEEKDAYS.len())]),
            _ => format!("this {}", WEEKDAYS[rng.gen_range(0..WEEKDAYS.len())]),
        },
        "bare" => BARE_VALUES[rng.gen_range(0..BARE_VALUES.len())].to_string(),
        other => unreachable!("unknown synthetic slot {other}"),
    }
}

fn render_template(tpl: &Template, pools: &ValuePools, rng: &mut impl Rng) -> SlotExample {
    let requested: Vec<String> = match &tpl.requested {
        Requested::Never => vec![],
        Requested::Always(slots) => slots.iter().map(|s| s.to_string()).collect(),
        Requested::Sometimes(slots) => {
            if rng.gen_bool(0.5) {
                slots.iter().map(|s| s.to_string()).collect()
            } else {
                vec![]
            }
        }
    };
    let mut utterance = String::new();
    let mut labels = BTreeMap::new();
    for part in tpl.parts {
        match part {
            Lit(text) => utterance.push_str(text),
            Slot(slot) => {
                let value = draw_value(slot, pools, rng);
                let start = utterance.len();
                utterance.push_str(&value);
                // A bare value is labeled as whichever slot was requested.
                let key = if *slot == "bare" {
                    requested[0].clone()
                } else {
                    slot.to_string()
                };
                labels.insert(
                    key,
                    SlotLabel::Span {
                        surface: value,
                        char_start: start,
                        char_end: utterance.len(),
                    },
                );
            }
        }
    }
    SlotExample {
        utterance,
        requested_slots: requested,
        labels,
    }
}

fn generate_split(
    size: usize,
    pools: &ValuePools,
    domain: &str,
    rng: &mut impl Rng,
) -> Dataset {
    let total_weight: u32 = TEMPLATES.iter().map(|t| t.weight).sum();
    let mut examples = Vec::with_capacity(size);
    while examples.len() < size {
        let mut pick = rng.gen_range(0..total_weight);
        let tpl = TEMPLATES
            .iter()
            .find(|t| {
                if pick < t.weight {
                    true
                } else {
                    pick -= t.weight;
                    false
                }
            })
            .expect("weights cover the range");
        examples.push(render_template(tpl, pools, rng));
    }
    Dataset {
        domain_name: domain.to_string(),
        slot_keys: RESTAURANT_SLOT_KEYS.iter().map(|s| s.to_string()).collect(),
        examples,
    }
}

/// Generate a deterministic synthetic train/test pair. Test-set name slots
/// never share a surface with the train set.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let train_pools = ValuePools {
        first_names: &config.train_first_names,
        last_names: &config.train_last_names,
    };
    let test_pools = ValuePools {
        first_names: &config.test_first_names,
        last_names: &config.test_last_names,
    };
    let mut train_rng = substream(seed, "corpus-train");
    let mut test_rng = substream(seed, "corpus-test");
    let train = generate_split(
        config.train_size,
        &train_pools,
        &config.domain_name,
        &mut train_rng,
    );
    let test = generate_split(
        config.test_size,
        &test_pools,
        &config.domain_name,
        &mut test_rng,
    );
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}
