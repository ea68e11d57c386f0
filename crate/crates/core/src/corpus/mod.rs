//! Task-format datasets: loading, serialization, setting splits and length
//! statistics, plus the synthetic corpus generator used for desk-scale runs.

mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{find_mwe_span, mark_mwe, DEFAULT_SEP};
use crate::tokenizer::Tokenizer;

pub use synthetic::{
    generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus, IDIOMATIC_CUES, LITERAL_CUES,
};

/// Column names in file order. `Label` is optional for unlabeled test files.
pub const COLUMNS: [&str; 8] = [
    "DataID", "Language", "MWE", "Setting", "Previous", "Target", "Next", "Label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    EN,
    PT,
    GL,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::EN => "EN",
            Language::PT => "PT",
            Language::GL => "GL",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EN" => Ok(Language::EN),
            "PT" => Ok(Language::PT),
            "GL" => Ok(Language::GL),
            other => Err(format!("unknown language `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "zero_shot")]
    ZeroShot,
    #[serde(rename = "one_shot")]
    OneShot,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::ZeroShot => "zero_shot",
            Setting::OneShot => "one_shot",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match norm.as_str() {
            "zeroshot" => Ok(Setting::ZeroShot),
            "oneshot" => Ok(Setting::OneShot),
            _ => Err(format!("unknown setting `{}`", s.trim())),
        }
    }
}

/// Gold label. 0 is idiomatic, 1 is literal.
pub type Label = u8;

pub const IDIOMATIC: Label = 0;
pub const LITERAL: Label = 1;

/// One row of the task format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub language: Language,
    pub mwe: String,
    pub setting: Setting,
    pub previous: String,
    pub target: String,
    pub next: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Comma,
    Tab,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
        }
    }

    /// Tab wins when the header line contains more tabs than commas.
    pub fn sniff(header_line: &str) -> Self {
        let tabs = header_line.matches('\t').count();
        let commas = header_line.matches(',').count();
        if tabs > commas {
            Delimiter::Tab
        } else {
            Delimiter::Comma
        }
    }
}

/// An ordered, immutable collection of instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    /// File path or `synthetic:<seed>`.
    pub provenance: String,
    /// Delimiter the data was read with; reused when serializing.
    pub delimiter: Delimiter,
    /// Whether the source had a `Label` column.
    pub has_label_column: bool,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>, provenance: impl Into<String>) -> Self {
        let has_label_column = instances.iter().any(|i| i.label.is_some());
        Dataset {
            instances,
            provenance: provenance.into(),
            delimiter: Delimiter::Comma,
            has_label_column,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.instances.iter().all(|i| i.label.is_some())
    }

    /// Keeps the rows matching `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&Instance) -> bool) -> Dataset {
        Dataset {
            instances: self.instances.iter().filter(|i| keep(i)).cloned().collect(),
            provenance: self.provenance.clone(),
            delimiter: self.delimiter,
            has_label_column: self.has_label_column,
        }
    }

    /// Concatenation, `self` rows first.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut instances = self.instances.clone();
        instances.extend(other.instances.iter().cloned());
        Dataset {
            instances,
            provenance: format!("{}+{}", self.provenance, other.provenance),
            delimiter: self.delimiter,
            has_label_column: self.has_label_column || other.has_label_column,
        }
    }

    pub fn count_by_language(&self) -> Vec<(Language, usize)> {
        [Language::EN, Language::PT, Language::GL]
            .into_iter()
            .map(|l| (l, self.instances.iter().filter(|i| i.language == l).count()))
            .collect()
    }

    /// Serializes in the same column format it was read from.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(self.delimiter.byte())
            .from_writer(writer);
        let ncols = if self.has_label_column { 8 } else { 7 };
        w.write_record(&COLUMNS[..ncols]).map_err(csv_err)?;
        for inst in &self.instances {
            let label = inst.label.map(|l| l.to_string()).unwrap_or_default();
            let row = [
                inst.id.as_str(),
                inst.language.as_str(),
                inst.mwe.as_str(),
                inst.setting.as_str(),
                inst.previous.as_str(),
                inst.target.as_str(),
                inst.next.as_str(),
                label.as_str(),
            ];
            w.write_record(&row[..ncols]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&self.provenance, e))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_writer(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        crate::io::write_atomic(path, &bytes)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Instance;
    type IntoIter = std::slice::Iter<'a, Instance>;

    fn into_iter(self) -> Self::IntoIter {
        self.instances.iter()
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Schema {
        line,
        message: e.to_string(),
    }
}

/// Reads a task-format file. The delimiter (comma or tab) is sniffed from the
/// header line.
pub fn load_dataset(path: impl AsRef<Path>, expect_labels: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, expect_labels, path.display().to_string())
}

/// Parses task-format text; see [`load_dataset`].
pub fn parse_dataset(text: &str, expect_labels: bool, provenance: String) -> Result<Dataset> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let header_line = text.lines().next().unwrap_or("");
    let delimiter = Delimiter::sniff(header_line);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter.byte())
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());

    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(COLUMNS.iter()) {
        *slot = find(name).ok_or_else(|| Error::MissingColumn {
            column: name.to_string(),
        })?;
    }
    let label_index = find("Label");
    if expect_labels && label_index.is_none() {
        return Err(Error::MissingColumn {
            column: "Label".into(),
        });
    }

    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let id = field(index[0]);
        let row = |message: String| Error::Validation {
            row: id.clone(),
            message,
        };
        let language = field(index[1]).parse::<Language>().map_err(row)?;
        let setting = field(index[3]).parse::<Setting>().map_err(row)?;
        let target = field(index[5]);
        if target.trim().is_empty() {
            return Err(row("empty Target".into()));
        }
        let label = match label_index.map(field) {
            None => None,
            Some(raw) if raw.trim().is_empty() => {
                if expect_labels {
                    return Err(row("missing label".into()));
                }
                None
            }
            Some(raw) => match raw.trim() {
                "0" => Some(IDIOMATIC),
                "1" => Some(LITERAL),
                other => return Err(row(format!("non-binary label `{other}`"))),
            },
        };
        if !seen.insert(id.clone()) {
            return Err(row("duplicate DataID".into()));
        }
        instances.push(Instance {
            id: id.clone(),
            language,
            mwe: field(index[2]),
            setting,
            previous: field(index[4]),
            target,
            next: field(index[6]),
            label,
        });
    }

    Ok(Dataset {
        instances,
        provenance,
        delimiter,
        has_label_column: label_index.is_some(),
    })
}

/// Partitions by the `Setting` column, preserving order within each part.
pub fn split_by_setting(d: &Dataset) -> (Dataset, Dataset) {
    (
        d.filter(|i| i.setting == Setting::ZeroShot),
        d.filter(|i| i.setting == Setting::OneShot),
    )
}

/// Order statistics of a sample of token counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: usize,
    /// Nearest-rank 90th percentile: at least 90% of the sample is `<= p90`.
    pub p90: usize,
    pub count: usize,
}

impl Summary {
    /// `None` on an empty sample.
    pub fn of(values: &[usize]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let mean = sorted.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let rank = (9 * n).div_ceil(10);
        Some(Summary {
            mean,
            median,
            max: sorted[n - 1],
            p90: sorted[rank - 1],
            count: n,
        })
    }
}

/// Target-sentence lengths and first-MWE-token positions, in tokenizer units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub length: Summary,
    /// Over rows where the MWE occurs in the target (any casing). `None`
    /// when it occurs nowhere.
    pub mwe_position: Option<Summary>,
}

/// Token count of a target, excluding the leading `[CLS]`.
pub fn target_length(target: &str, tokenizer: &dyn Tokenizer) -> Result<usize> {
    let t = tokenizer.tokenize(target, usize::MAX)?;
    Ok(t.ids.len().saturating_sub(1))
}

/// Zero-based index of the first MWE token among the target's tokens
/// (excluding `[CLS]`), or `None` when the MWE does not occur.
pub fn mwe_position(target: &str, mwe: &str, tokenizer: &dyn Tokenizer) -> Result<Option<usize>> {
    if mwe.trim().is_empty() {
        return Ok(None);
    }
    let span = find_mwe_span(target, mwe);
    let Some((start, end)) = span.offsets() else {
        return Ok(None);
    };
    let marked = mark_mwe(target, &span.as_undeformed(start, end), DEFAULT_SEP)?;
    let t = tokenizer.tokenize(&marked, usize::MAX)?;
    // [CLS] and the opening marker precede the first MWE token.
    Ok(t.mwe_token_range.map(|(first, _)| first - 2))
}

pub fn length_statistics(d: &Dataset, tokenizer: &dyn Tokenizer) -> Result<LengthStats> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut lengths = Vec::with_capacity(d.len());
    let mut positions = Vec::new();
    for inst in d {
        lengths.push(target_length(&inst.target, tokenizer)?);
        if let Some(p) = mwe_position(&inst.target, &inst.mwe, tokenizer)? {
            positions.push(p);
        }
    }
    Ok(LengthStats {
        length: Summary::of(&lengths).expect("non-empty"),
        mwe_position: Summary::of(&positions),
    })
}
