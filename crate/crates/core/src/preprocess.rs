//! Turning an instance into model input text: MWE location and marking,
//! context handling, and AEDA punctuation augmentation.
//!
//! An MWE occurrence is *undeformed* when the MWE's words appear verbatim
//! (case-sensitive, separated by any run of whitespace) with word boundaries
//! on both sides. Anything else, including a capitalized occurrence such as a
//! proper noun, counts as deformed.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};

pub const DEFAULT_SEP: &str = "[SEP]";

/// Punctuation inserted by AEDA.
pub const AEDA_MARKS: [&str; 6] = [".", ";", "?", ":", "!", ","];

/// Location of an MWE inside a target sentence. Offsets are byte offsets
/// into the target, `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MweSpan {
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub deformed: bool,
}

impl MweSpan {
    pub fn absent() -> Self {
        MweSpan {
            start: None,
            end: None,
            deformed: true,
        }
    }

    pub fn offsets(&self) -> Option<(usize, usize)> {
        self.start.zip(self.end)
    }

    pub(crate) fn as_undeformed(&self, start: usize, end: usize) -> MweSpan {
        MweSpan {
            start: Some(start),
            end: Some(end),
            deformed: false,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Tries to match `words` at byte offset `pos`. Returns the end offset.
fn match_at(target: &str, pos: usize, words: &[&str], fold_case: bool) -> Option<usize> {
    let mut rest = &target[pos..];
    let mut end = pos;
    for (k, word) in words.iter().enumerate() {
        if k > 0 {
            let trimmed = rest.trim_start();
            if trimmed.len() == rest.len() {
                return None;
            }
            end += rest.len() - trimmed.len();
            rest = trimmed;
        }
        let mut consumed = 0;
        let mut chars = rest.chars();
        for w in word.chars() {
            let t = chars.next()?;
            let same = if fold_case {
                t == w || t.to_lowercase().eq(w.to_lowercase())
            } else {
                t == w
            };
            if !same {
                return None;
            }
            consumed += t.len_utf8();
        }
        rest = &rest[consumed..];
        end += consumed;
    }
    match rest.chars().next() {
        Some(c) if is_word_char(c) => None,
        _ => Some(end),
    }
}

fn find_occurrence(target: &str, words: &[&str], fold_case: bool) -> Option<(usize, usize)> {
    let mut prev: Option<char> = None;
    for (pos, c) in target.char_indices() {
        let boundary = prev.is_none_or(|p| !is_word_char(p));
        prev = Some(c);
        if !boundary {
            continue;
        }
        if let Some(end) = match_at(target, pos, words, fold_case) {
            return Some((pos, end));
        }
    }
    None
}

/// First undeformed occurrence of `mwe`; failing that, the first
/// case-insensitive occurrence flagged as deformed; failing that, an absent
/// span.
pub fn find_mwe_span(target: &str, mwe: &str) -> MweSpan {
    let words: Vec<&str> = mwe.split_whitespace().collect();
    if words.is_empty() {
        return MweSpan::absent();
    }
    if let Some((s, e)) = find_occurrence(target, &words, false) {
        return MweSpan {
            start: Some(s),
            end: Some(e),
            deformed: false,
        };
    }
    match find_occurrence(target, &words, true) {
        Some((s, e)) => MweSpan {
            start: Some(s),
            end: Some(e),
            deformed: true,
        },
        None => MweSpan::absent(),
    }
}

/// Inserts `sep` immediately before and after the span.
pub fn mark_mwe(target: &str, span: &MweSpan, sep: &str) -> Result<String> {
    if span.deformed {
        return Err(Error::Contract("cannot mark a deformed MWE span".into()));
    }
    let (start, end) = span
        .offsets()
        .ok_or_else(|| Error::Contract("MWE span has no offsets".into()))?;
    if start >= end
        || end > target.len()
        || !target.is_char_boundary(start)
        || !target.is_char_boundary(end)
    {
        return Err(Error::Contract(format!(
            "span {start}..{end} invalid for target of length {}",
            target.len()
        )));
    }
    let mut out = String::with_capacity(target.len() + 2 * sep.len());
    out.push_str(&target[..start]);
    out.push_str(sep);
    out.push_str(&target[start..end]);
    out.push_str(sep);
    out.push_str(&target[end..]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkingMode {
    /// Mark any occurrence, including case-insensitive ones.
    Always,
    /// Mark only undeformed occurrences.
    UndeformedOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildPolicy {
    pub include_context: bool,
    pub mark_idiom: bool,
    pub marking_mode: MarkingMode,
    /// Token budget, applied by the tokenizer.
    pub max_tokens: usize,
    pub sep: String,
}

impl Default for BuildPolicy {
    fn default() -> Self {
        BuildPolicy {
            include_context: false,
            mark_idiom: true,
            marking_mode: MarkingMode::UndeformedOnly,
            max_tokens: 128,
            sep: DEFAULT_SEP.to_string(),
        }
    }
}

impl BuildPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 16 {
            return Err(Error::InvalidConfig {
                key: "max_tokens".into(),
                message: format!("must be >= 16, got {}", self.max_tokens),
            });
        }
        if self.sep.trim().is_empty() {
            return Err(Error::InvalidConfig {
                key: "sep".into(),
                message: "separator must be non-empty".into(),
            });
        }
        Ok(())
    }
}

/// Builds the model input text for one instance. Never truncates.
pub fn build_example(inst: &Instance, policy: &BuildPolicy) -> String {
    let mut target = inst.target.clone();
    if policy.mark_idiom {
        let span = find_mwe_span(&inst.target, &inst.mwe);
        let mark = match policy.marking_mode {
            MarkingMode::Always => span.offsets(),
            MarkingMode::UndeformedOnly if !span.deformed => span.offsets(),
            MarkingMode::UndeformedOnly => None,
        };
        if let Some((s, e)) = mark {
            target = mark_mwe(&inst.target, &span.as_undeformed(s, e), &policy.sep)
                .expect("offsets come from find_mwe_span");
        }
    }
    if !policy.include_context {
        return target;
    }
    [inst.previous.trim(), target.as_str(), inst.next.trim()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// AEDA with the default separator; see [`aeda_augment_with_sep`].
pub fn aeda_augment(sentence: &str, seed: u64) -> Result<String> {
    aeda_augment_with_sep(sentence, seed, DEFAULT_SEP)
}

/// Inserts between 1 and `max(1, n/3)` punctuation marks (n = word count) in
/// front of distinct, uniformly chosen words. Slots strictly inside a
/// `sep`-marked region are never used. Output words are single-space joined.
pub fn aeda_augment_with_sep(sentence: &str, seed: u64, sep: &str) -> Result<String> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Contract("AEDA needs at least one word".into()));
    }
    let n = words.len();
    // Slot j sits in front of word j; it is inside a marked region when an
    // odd number of separators precede it.
    let mut open = 0usize;
    let mut slots = Vec::with_capacity(n);
    for (j, w) in words.iter().enumerate() {
        if open % 2 == 0 {
            slots.push(j);
        }
        open += w.matches(sep).count();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = (n / 3).max(1);
    let k = rng.gen_range(1..=upper).min(slots.len());
    let mut chosen: Vec<usize> = sample(&mut rng, slots.len(), k)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    chosen.sort_unstable();

    let mut out: Vec<&str> = Vec::with_capacity(n + k);
    let mut next = chosen.iter().peekable();
    for (j, w) in words.iter().enumerate() {
        if next.peek() == Some(&&j) {
            next.next();
            out.push(AEDA_MARKS[rng.gen_range(0..AEDA_MARKS.len())]);
        }
        out.push(w);
    }
    Ok(out.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Setting};
    use proptest::prelude::*;

    fn instance(mwe: &str, target: &str, previous: &str, next: &str) -> Instance {
        Instance {
            id: "t".into(),
            language: Language::EN,
            mwe: mwe.into(),
            setting: Setting::OneShot,
            previous: previous.into(),
            target: target.into(),
            next: next.into(),
            label: Some(1),
        }
    }

    #[test]
    fn capitalized_occurrence_is_deformed() {
        let span = find_mwe_span(
            "Her latest pamphlet Milk Tooth, published by Rough Trade Books",
            "milk tooth",
        );
        assert!(span.deformed);
        assert_eq!(span.offsets(), Some((20, 30)));
    }

    #[test]
    fn verbatim_occurrence_is_undeformed() {
        let t = "caught some big fish along the way";
        let span = find_mwe_span(t, "big fish");
        assert!(!span.deformed);
        let (s, e) = span.offsets().unwrap();
        assert_eq!(&t[s..e], "big fish");
    }

    #[test]
    fn absent_and_word_boundaries() {
        assert_eq!(find_mwe_span("no match here", "big fish"), MweSpan::absent());
        assert_eq!(find_mwe_span("a big fishery", "big fish"), MweSpan::absent());
        assert_eq!(find_mwe_span("abig fish", "big fish"), MweSpan::absent());
        let span = find_mwe_span("a big   fish!", "big fish");
        assert_eq!(span.offsets(), Some((2, 12)));
        assert!(!span.deformed);
    }

    #[test]
    fn first_occurrence_wins_and_exact_beats_folded() {
        let t = "Big Fish and big fish and big fish";
        let span = find_mwe_span(t, "big fish");
        assert!(!span.deformed);
        assert_eq!(span.start, Some(13));
    }

    #[test]
    fn marking_inserts_separators() {
        let t = "a big fish here";
        let span = find_mwe_span(t, "big fish");
        assert_eq!(mark_mwe(t, &span, "[SEP]").unwrap(), "a [SEP]big fish[SEP] here");
        let whole = find_mwe_span("big fish", "big fish");
        assert_eq!(mark_mwe("big fish", &whole, "[SEP]").unwrap(), "[SEP]big fish[SEP]");
        let deformed = find_mwe_span("Big Fish", "big fish");
        assert!(matches!(mark_mwe("Big Fish", &deformed, "[SEP]"), Err(Error::Contract(_))));
    }

    #[test]
    fn build_example_policies() {
        let milk = instance(
            "milk tooth",
            "Her latest pamphlet Milk Tooth, published by Rough Trade Books, is a collection of thwarted escape plans for a too-heavy world.",
            "A ritual sacrifice from the 19th century is vividly relieved.",
            "In these poems of trauma and transformation, the present throbs with unfinished histories.",
        );
        let p = BuildPolicy::default();
        assert_eq!(build_example(&milk, &p), milk.target);

        let always = BuildPolicy {
            marking_mode: MarkingMode::Always,
            ..BuildPolicy::default()
        };
        assert!(build_example(&milk, &always).contains("[SEP]Milk Tooth[SEP]"));

        let ctx = BuildPolicy {
            include_context: true,
            mark_idiom: false,
            ..BuildPolicy::default()
        };
        let bare = instance("big fish", "a big fish", "", "");
        assert_eq!(build_example(&bare, &ctx), "a big fish");
        let full = instance("big fish", "a big fish", "Before.", "After.");
        assert_eq!(build_example(&full, &ctx), "Before. a big fish After.");
    }

    #[test]
    fn policy_validation() {
        let bad = BuildPolicy {
            max_tokens: 8,
            ..BuildPolicy::default()
        };
        assert!(bad.validate().is_err());
        assert!(BuildPolicy::default().validate().is_ok());
    }

    #[test]
    fn aeda_single_word_and_empty() {
        let out = aeda_augment("hello", 3).unwrap();
        let words: Vec<&str> = out.split(' ').collect();
        assert_eq!(words.len(), 2);
        assert!(AEDA_MARKS.contains(&words[0]));
        assert!(aeda_augment("   ", 1).is_err());
    }

    #[test]
    fn aeda_respects_marked_region() {
        let s = "x [SEP]a b c d e f g[SEP] y z w";
        for seed in 0..500 {
            let out = aeda_augment(s, seed).unwrap();
            let start = out.find("[SEP]").unwrap();
            let end = out.rfind("[SEP]").unwrap();
            let inner = &out[start..end];
            assert_eq!(inner, "[SEP]a b c d e f g", "seed {seed}: {out}");
        }
    }

    #[test]
    fn aeda_count_distribution_is_uniform() {
        let s = "one two three four five six seven eight nine";
        let mut counts = [0usize; 4];
        let trials = 10_000;
        for seed in 0..trials {
            let out = aeda_augment(s, seed).unwrap();
            let k = out.split(' ').count() - 9;
            counts[k] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let frac = c as f64 / trials as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn marking_preserves_content(
            pre in "[a-z ]{0,12}", post in "[ a-z]{0,12}",
            w1 in "[a-z]{1,6}", w2 in "[a-z]{1,6}",
        ) {
            let mwe = format!("{w1} {w2}");
            let target = format!("{pre} {mwe} {post}");
            let span = find_mwe_span(&target, &mwe);
            prop_assert!(!span.deformed);
            let (s, e) = span.offsets().unwrap();
            prop_assert_eq!(&target[s..e], mwe.as_str());
            let marked = mark_mwe(&target, &span, DEFAULT_SEP).unwrap();
            prop_assert_eq!(marked.len(), target.len() + 2 * DEFAULT_SEP.len());
            prop_assert_eq!(marked.replacen(DEFAULT_SEP, "", 2), target);
        }

        #[test]
        fn unmarked_policy_never_emits_separator(
            target in "[A-Za-z ]{1,40}", mwe in "[a-z]{1,5} [a-z]{1,5}", ctx in any::<bool>(),
        ) {
            let inst = instance(&mwe, &target, "prev", "next");
            let p = BuildPolicy { mark_idiom: false, include_context: ctx, ..BuildPolicy::default() };
            prop_assert!(!build_example(&inst, &p).contains(DEFAULT_SEP));
        }

        #[test]
        fn aeda_only_adds_marks(words in proptest::collection::vec("[a-z]{1,8}", 1..30), seed in any::<u64>()) {
            let s = words.join(" ");
            let out = aeda_augment(&s, seed).unwrap();
            let kept: Vec<&str> = out.split(' ').filter(|w| !AEDA_MARKS.contains(w)).collect();
            prop_assert_eq!(kept, words.iter().map(String::as_str).collect::<Vec<_>>());
            let k = out.split(' ').count() - words.len();
            prop_assert!(k >= 1 && k <= (words.len() / 3).max(1));
        }
    }
}
