//! Deterministic synthetic corpora in the task format.
//!
//! Each row places an MWE from a fixed inventory into a templated sentence
//! together with one cue word. Cue words come in two classes (idiomatic and
//! literal); with probability `cue_strength` the cue class equals the row's
//! label, otherwise it is the opposite class. At `cue_strength = 1.0` the
//! label is a deterministic function of the cue word.
//!
//! Inventories: zero-shot train and zero-shot dev use disjoint MWE sets, the
//! one-shot rows of both splits share a third set. A fraction of the one-shot
//! MWEs carry a single label in every row of both splits; the remaining
//! one-shot MWEs always show both labels in train.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Instance, Label, Language, Setting, IDIOMATIC, LITERAL};

pub const IDIOMATIC_CUES: [&str; 8] = [
    "figuratively",
    "metaphorically",
    "politics",
    "career",
    "gossip",
    "stockmarket",
    "slang",
    "proverb",
];

pub const LITERAL_CUES: [&str; 8] = [
    "kitchen", "river", "garden", "recipe", "zoo", "farm", "museum", "workshop",
];

const MWES: [&str; 48] = [
    "big fish",
    "milk tooth",
    "red tape",
    "hot potato",
    "cold feet",
    "black sheep",
    "night owl",
    "brain drain",
    "dark horse",
    "white elephant",
    "low hanging fruit",
    "silver bullet",
    "bad apple",
    "rat race",
    "top dog",
    "wet blanket",
    "gold mine",
    "ivory tower",
    "glass ceiling",
    "lame duck",
    "small fry",
    "couch potato",
    "loose cannon",
    "smoking gun",
    "sour grapes",
    "fish story",
    "hard nut",
    "old flame",
    "cash cow",
    "blue moon",
    "green light",
    "grey matter",
    "swan song",
    "paper tiger",
    "busy bee",
    "guinea pig",
    "hot air",
    "heavy hand",
    "open book",
    "rocket science",
    "double dutch",
    "sitting duck",
    "fine line",
    "monkey business",
    "eager beaver",
    "cold turkey",
    "bread winner",
    "sacred cow",
];

const OPENERS: [&str; 8] = [
    "she said the",
    "everyone noticed the",
    "they talked about the",
    "i saw the",
    "we heard about the",
    "the report mentioned the",
    "he described the",
    "our neighbor found the",
];

const MIDDLES: [&str; 7] = [
    "again",
    "near the end",
    "this week",
    "after lunch",
    "once more",
    "at last",
    "without warning",
];

const CUE_FRAMES: [(&str, &str); 4] = [
    ("in the", "story"),
    ("during the", "discussion"),
    ("according to the", "notes"),
    ("while reading about the", "topic"),
];

const CONTEXTS: [&str; 6] = [
    "It was an ordinary day.",
    "Nobody expected much.",
    "The meeting started late.",
    "Rain fell all morning.",
    "Plans changed quickly.",
    "The town was quiet.",
];

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Total rows over train and dev.
    pub n: usize,
    /// Probability that a row's cue class equals its label.
    pub cue_strength: f64,
    pub seed: u64,
    pub dev_fraction: f64,
    /// Fraction of rows in the one-shot setting.
    pub one_shot_fraction: f64,
    /// Fraction of one-shot MWEs with a single label across both splits.
    pub single_label_fraction: f64,
    /// Probability of rendering the MWE title-cased (a deformed occurrence).
    pub deformed_rate: f64,
}

impl SyntheticConfig {
    pub fn new(n: usize, cue_strength: f64, seed: u64) -> Self {
        SyntheticConfig {
            n,
            cue_strength,
            seed,
            dev_fraction: 0.2,
            one_shot_fraction: 0.3,
            single_label_fraction: 0.5,
            deformed_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    /// One-shot MWEs whose label is fixed across both splits.
    pub single_label_mwes: Vec<(String, Label)>,
}

impl SyntheticCorpus {
    /// Train rows followed by dev rows.
    pub fn all(&self) -> Dataset {
        let mut d = self.train.concat(&self.dev);
        d.provenance = self.train.provenance.clone();
        d
    }

    /// The cue class (0 or 1) of a generated target, if it holds a cue word.
    pub fn cue_class(target: &str) -> Option<Label> {
        target.split_whitespace().find_map(|w| {
            if IDIOMATIC_CUES.contains(&w) {
                Some(IDIOMATIC)
            } else if LITERAL_CUES.contains(&w) {
                Some(LITERAL)
            } else {
                None
            }
        })
    }
}

/// Generates a corpus of `n` rows with default proportions.
pub fn generate_synthetic_corpus(n: usize, cue_strength: f64, seed: u64) -> SyntheticCorpus {
    SyntheticConfig::new(n, cue_strength, seed).generate()
}

struct RowSpec {
    mwe: &'static str,
    setting: Setting,
    label: Label,
}

impl SyntheticConfig {
    pub fn generate(&self) -> SyntheticCorpus {
        assert!(self.n > 0, "synthetic corpus needs at least one row");
        let cue_strength = self.cue_strength.clamp(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let n_dev = ((self.n as f64) * self.dev_fraction).round() as usize;
        let n_train = self.n - n_dev;
        let one_train = ((n_train as f64) * self.one_shot_fraction).round() as usize;
        let one_dev = ((n_dev as f64) * self.one_shot_fraction).round() as usize;
        let zero_train = n_train - one_train;
        let zero_dev = n_dev - one_dev;

        let mut inventory: Vec<&'static str> = MWES.to_vec();
        inventory.shuffle(&mut rng);
        let (zero_train_mwes, rest) = inventory.split_at(20);
        let (zero_dev_mwes, one_mwes) = rest.split_at(12);
        // Every one-shot MWE gets at least two train rows.
        let n_one = one_mwes.len().min((one_train / 2).max(1));
        let one_mwes = &one_mwes[..n_one];
        let n_single = ((n_one as f64) * self.single_label_fraction).round() as usize;
        let single: Vec<(&str, Label)> = one_mwes[..n_single]
            .iter()
            .enumerate()
            .map(|(k, &m)| (m, (k % 2) as Label))
            .collect();
        let fixed_label = |m: &str| single.iter().find(|(s, _)| *s == m).map(|&(_, l)| l);

        let mut train_specs = Vec::with_capacity(n_train);
        for i in 0..zero_train {
            train_specs.push(RowSpec {
                mwe: zero_train_mwes[i % zero_train_mwes.len()],
                setting: Setting::ZeroShot,
                label: rng.gen_range(0..=1),
            });
        }
        let mut occurrences = vec![0usize; n_one];
        for i in 0..one_train {
            let k = i % n_one;
            let mwe = one_mwes[k];
            let label = fixed_label(mwe).unwrap_or((occurrences[k] % 2) as Label);
            occurrences[k] += 1;
            train_specs.push(RowSpec {
                mwe,
                setting: Setting::OneShot,
                label,
            });
        }

        let mut dev_specs = Vec::with_capacity(n_dev);
        for i in 0..zero_dev {
            dev_specs.push(RowSpec {
                mwe: zero_dev_mwes[i % zero_dev_mwes.len()],
                setting: Setting::ZeroShot,
                label: rng.gen_range(0..=1),
            });
        }
        for i in 0..one_dev {
            let mwe = one_mwes[i % n_one];
            let label = fixed_label(mwe).unwrap_or_else(|| rng.gen_range(0..=1));
            dev_specs.push(RowSpec {
                mwe,
                setting: Setting::OneShot,
                label,
            });
        }

        train_specs.shuffle(&mut rng);
        dev_specs.shuffle(&mut rng);
        let provenance = format!("synthetic:{}", self.seed);
        let train = self.render("train", &train_specs, cue_strength, &mut rng);
        let dev = self.render("dev", &dev_specs, cue_strength, &mut rng);
        SyntheticCorpus {
            train: Dataset::new(train, provenance.clone()),
            dev: Dataset::new(dev, provenance),
            single_label_mwes: single
                .into_iter()
                .map(|(m, l)| (m.to_string(), l))
                .collect(),
        }
    }

    fn render(
        &self,
        split: &str,
        specs: &[RowSpec],
        cue_strength: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Instance> {
        specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let agrees = rng.gen_bool(cue_strength);
                let cue_class = if agrees { spec.label } else { 1 - spec.label };
                let cues = if cue_class == IDIOMATIC {
                    &IDIOMATIC_CUES
                } else {
                    &LITERAL_CUES
                };
                let cue = cues[rng.gen_range(0..cues.len())];
                let surface = if rng.gen_bool(self.deformed_rate) {
                    title_case(spec.mwe)
                } else {
                    spec.mwe.to_string()
                };
                let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
                let middle = MIDDLES[rng.gen_range(0..MIDDLES.len())];
                let (pre, post) = CUE_FRAMES[rng.gen_range(0..CUE_FRAMES.len())];
                let target = if rng.gen_bool(0.5) {
                    format!("{opener} {surface} {middle} {pre} {cue} {post} .")
                } else {
                    format!("{pre} {cue} {post} {opener} {surface} {middle} .")
                };
                let previous = if rng.gen_bool(0.8) {
                    CONTEXTS[rng.gen_range(0..CONTEXTS.len())].to_string()
                } else {
                    String::new()
                };
                let next = if rng.gen_bool(0.8) {
                    CONTEXTS[rng.gen_range(0..CONTEXTS.len())].to_string()
                } else {
                    String::new()
                };
                Instance {
                    id: format!("{split}.{i:05}"),
                    language: Language::EN,
                    mwe: spec.mwe.to_string(),
                    setting: spec.setting,
                    previous,
                    target,
                    next,
                    label: Some(spec.label),
                }
            })
            .collect()
    }
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}
