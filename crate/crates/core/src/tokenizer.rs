//! Text to token ids.
//!
//! [`WordTokenizer`] is the built-in word-level tokenizer; [`WordPieceTokenizer`]
//! adapts an external WordPiece `vocab.txt` (one token per line, BERT style).
//! Both implement [`Tokenizer`], which is all the rest of the crate sees.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::preprocess::DEFAULT_SEP;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
}

/// Token ids for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub ids: Vec<usize>,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Vec<u8>,
    /// Inclusive `[first, last]` indices of the tokens between the MWE markers.
    pub mwe_token_range: Option<(usize, usize)>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading real (unpadded) tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Returns the sequence without trailing padding.
    pub fn unpadded(&self) -> TokenizedInput {
        let n = self.real_len();
        TokenizedInput {
            ids: self.ids[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            mwe_token_range: self.mwe_token_range,
        }
    }
}

/// Right-pads every sequence to the longest length in the batch.
pub fn pad_batch(batch: &[TokenizedInput], pad_id: usize) -> Vec<TokenizedInput> {
    let width = batch.iter().map(|t| t.ids.len()).max().unwrap_or(0);
    batch
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.ids.resize(width, pad_id);
            t.attention_mask.resize(width, 0);
            t
        })
        .collect()
}

pub trait Tokenizer: Send + Sync {
    fn special_ids(&self) -> SpecialIds;
    fn vocab_size(&self) -> usize;

    /// Token ids for `text`: `[CLS]` first, tail-truncated to `max_tokens`.
    /// Marker strings become `[SEP]` tokens and the first marker pair sets
    /// `mwe_token_range`.
    fn tokenize(&self, text: &str, max_tokens: usize) -> Result<TokenizedInput>;

    fn token(&self, id: usize) -> Option<&str>;

    fn detokenize_ids(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(Error::UnknownTokenId {
                        id,
                        size: self.vocab_size(),
                    })
            })
            .collect()
    }
}

enum Piece {
    Marker,
    Word(String),
}

/// Splits `text` into markers and lowercased words; a word is a run of
/// alphanumerics or a single other non-space character.
fn pre_tokenize(text: &str, marker: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    for (k, segment) in text.split(marker).enumerate() {
        if k > 0 {
            out.push(Piece::Marker);
        }
        let mut word = String::new();
        for c in segment.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(Piece::Word(std::mem::take(&mut word)));
            }
            if !c.is_whitespace() {
                out.push(Piece::Word(c.to_lowercase().collect()));
            }
        }
        if !word.is_empty() {
            out.push(Piece::Word(word));
        }
    }
    out
}

/// Lowercased words of `text` with markers dropped.
pub fn words(text: &str) -> Vec<String> {
    pre_tokenize(text, DEFAULT_SEP)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Word(w) => Some(w),
            Piece::Marker => None,
        })
        .collect()
}

/// Shared assembly: `[CLS]`, word ids via `map_word`, markers, truncation and
/// MWE range bookkeeping.
fn assemble(
    text: &str,
    marker: &str,
    special: SpecialIds,
    max_tokens: usize,
    mut map_word: impl FnMut(&str, &mut Vec<usize>),
) -> Result<TokenizedInput> {
    if max_tokens < 2 {
        return Err(Error::Tokenize(format!("max_tokens must be >= 2, got {max_tokens}")));
    }
    let pieces = pre_tokenize(text, marker);
    let markers = pieces.iter().filter(|p| matches!(p, Piece::Marker)).count();
    if markers % 2 == 1 {
        return Err(Error::Tokenize(format!(
            "unbalanced MWE markers ({markers}) in `{text}`"
        )));
    }
    let mut ids = vec![special.cls];
    let mut open = None;
    let mut close = None;
    for piece in &pieces {
        match piece {
            Piece::Marker => {
                if open.is_none() {
                    open = Some(ids.len());
                } else if close.is_none() {
                    close = Some(ids.len());
                }
                ids.push(special.sep);
            }
            Piece::Word(w) => map_word(w, &mut ids),
        }
    }
    let range = match (open, close) {
        (Some(o), Some(c)) if c > o + 1 => Some((o + 1, c - 1)),
        _ => None,
    };
    ids.truncate(max_tokens);
    let n = ids.len();
    let mwe_token_range = range.and_then(|(first, last)| {
        if first >= n {
            None
        } else {
            Some((first, last.min(n - 1)))
        }
    });
    Ok(TokenizedInput {
        attention_mask: vec![1; n],
        ids,
        mwe_token_range,
    })
}

/// Word types with their ids. The first four ids are `[PAD]`, `[UNK]`,
/// `[CLS]`, `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const SPECIALS: [&'static str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

    /// Builds a vocab from word types (specials are prepended).
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special_ids(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 || lines[..4] != Self::SPECIALS {
            return Err(Error::Tokenize(
                "vocab file must start with [PAD], [UNK], [CLS], [SEP]".into(),
            ));
        }
        let vocab = Vocab::from_words(lines[4..].iter().map(|s| s.to_string()));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Tokenize("vocab file has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_to_string(path)?)
    }
}

/// Word types occurring at least `min_freq` times in the previous, target and
/// next columns, ordered by descending frequency then lexicographically.
pub fn build_vocab(corpus: &Dataset, min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for inst in corpus {
        for text in [&inst.previous, &inst.target, &inst.next] {
            for w in words(text) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut types: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(w, c)| *c >= min_freq && !Vocab::SPECIALS.contains(&w.as_str()))
        .collect();
    types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocab::from_words(types.into_iter().map(|(w, _)| w)))
}

/// Built-in word-level tokenizer; unknown words map to `[UNK]`.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vocab,
    marker: String,
}

impl WordTokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self::with_marker(vocab, DEFAULT_SEP)
    }

    pub fn with_marker(vocab: Vocab, marker: &str) -> Self {
        WordTokenizer {
            vocab,
            marker: marker.to_string(),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

impl Tokenizer for WordTokenizer {
    fn special_ids(&self) -> SpecialIds {
        self.vocab.special_ids()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn tokenize(&self, text: &str, max_tokens: usize) -> Result<TokenizedInput> {
        let special = self.special_ids();
        assemble(text, &self.marker, special, max_tokens, |w, ids| {
            ids.push(self.vocab.id(w).unwrap_or(special.unk))
        })
    }

    fn token(&self, id: usize) -> Option<&str> {
        self.vocab.token(id)
    }
}

/// Greedy longest-match-first WordPiece over an external vocab file.
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    special: SpecialIds,
    marker: String,
    max_word_chars: usize,
}

impl WordPieceTokenizer {
    /// `text` holds one token per line (line number = id) and must contain
    /// the four special tokens somewhere.
    pub fn from_vocab_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Tokenize(format!("WordPiece vocab lacks {name}")))
        };
        let special = SpecialIds {
            pad: find(PAD_TOKEN)?,
            unk: find(UNK_TOKEN)?,
            cls: find(CLS_TOKEN)?,
            sep: find(SEP_TOKEN)?,
        };
        Ok(WordPieceTokenizer {
            tokens,
            index,
            special,
            marker: DEFAULT_SEP.to_string(),
            max_word_chars: 100,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_vocab_text(&crate::io::read_to_string(path)?)
    }

    fn push_word(&self, word: &str, ids: &mut Vec<usize>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > self.max_word_chars {
            ids.push(self.special.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let from = chars[start].0;
                let to = chars.get(end).map(|c| c.0).unwrap_or(word.len());
                let piece = if start == 0 {
                    word[from..to].to_string()
                } else {
                    format!("##{}", &word[from..to])
                };
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    ids.push(self.special.unk);
                    return;
                }
            }
        }
        ids.extend(pieces);
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn special_ids(&self) -> SpecialIds {
        self.special
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn tokenize(&self, text: &str, max_tokens: usize) -> Result<TokenizedInput> {
        assemble(text, &self.marker, self.special, max_tokens, |w, ids| {
            self.push_word(w, ids)
        })
    }

    fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}
