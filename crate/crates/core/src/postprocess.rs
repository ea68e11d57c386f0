//! Single-label override rule and prediction artifacts.
//!
//! If every training occurrence of an MWE carries the same label, every
//! prediction for that MWE is replaced with that label.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance, Label, Language, Setting, LITERAL};
use crate::error::{Error, Result};

/// Label assigned when both class probabilities are exactly equal.
pub const DEFAULT_TIE_LABEL: Label = LITERAL;

/// Argmax over two class probabilities; exact ties go to `tie`.
pub fn argmax_label(p: &[f64; 2], tie: Label) -> Label {
    if p[0] > p[1] {
        0
    } else if p[1] > p[0] {
        1
    } else {
        tie
    }
}

/// Case-folded, whitespace-collapsed MWE key.
pub fn normalize_mwe(mwe: &str) -> String {
    mwe.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub language: Language,
    pub setting: Setting,
    pub mwe: String,
    pub probabilities: [f64; 2],
    pub label: Label,
    pub overridden: bool,
}

impl Prediction {
    pub fn new(inst: &Instance, probabilities: [f64; 2], tie: Label) -> Self {
        Prediction {
            id: inst.id.clone(),
            language: inst.language,
            setting: inst.setting,
            mwe: inst.mwe.clone(),
            probabilities,
            label: argmax_label(&probabilities, tie),
            overridden: false,
        }
    }

    /// A hard prediction with one-hot probabilities.
    pub fn from_label(inst: &Instance, label: Label) -> Self {
        let mut p = [0.0; 2];
        p[label as usize] = 1.0;
        Prediction::new(inst, p, DEFAULT_TIE_LABEL)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.predictions.iter().map(|p| p.label).collect()
    }

    /// Submission-shaped CSV: `ID,Language,Setting,Label`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
        w.write_record(["ID", "Language", "Setting", "Label"]).map_err(csv_err)?;
        for p in &self.predictions {
            w.write_record([
                p.id.as_str(),
                p.language.as_str(),
                p.setting.as_str(),
                &p.label.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Contract(format!("csv write failed: {e}")))
    }

    /// Tab-separated sidecar with probabilities and override flags.
    pub fn to_sidecar_tsv(&self) -> String {
        let mut s = String::from("id\tmwe\tp_idiomatic\tp_literal\tlabel\toverridden\n");
        for p in &self.predictions {
            let _ = writeln!(
                s,
                "{}\t{}\t{:?}\t{:?}\t{}\t{}",
                p.id, p.mwe, p.probabilities[0], p.probabilities[1], p.label, p.overridden
            );
        }
        s
    }

    /// Reads a submission-shaped CSV. Probabilities become one-hot.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.trim_start_matches('\u{feff}').as_bytes());
        let headers = r
            .headers()
            .map_err(|e| Error::Schema {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn { column: name.into() })
        };
        let (ci, cl, cs, cy) = (col("ID")?, col("Language")?, col("Setting")?, col("Label")?);
        let mut predictions = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Schema {
                line,
                message: e.to_string(),
            })?;
            let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
            let bad = |message: String| Error::Validation {
                row: field(ci),
                message,
            };
            let language: Language = field(cl).parse().map_err(bad)?;
            let setting: Setting = field(cs).parse().map_err(bad)?;
            let label = match field(cy).as_str() {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label must be 0 or 1, got `{other}`"))),
            };
            let mut probabilities = [0.0; 2];
            probabilities[label as usize] = 1.0;
            predictions.push(Prediction {
                id: field(ci),
                language,
                setting,
                mwe: String::new(),
                probabilities,
                label,
                overridden: false,
            });
        }
        Ok(PredictionSet { predictions })
    }
}

/// Normalized MWE to its unanimous training label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideTable {
    pub entries: BTreeMap<String, Label>,
}

impl OverrideTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, mwe: &str) -> Option<Label> {
        self.entries.get(&normalize_mwe(mwe)).copied()
    }

    /// `mwe<TAB>label` lines, sorted by MWE.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(m, l)| format!("{m}\t{l}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let schema = |message: &str| Error::Schema {
                line: i + 1,
                message: message.into(),
            };
            let (mwe, label) = line.rsplit_once('\t').ok_or_else(|| schema("expected mwe<TAB>label"))?;
            let label = match label.trim() {
                "0" => 0,
                "1" => 1,
                _ => return Err(schema("label must be 0 or 1")),
            };
            entries.insert(normalize_mwe(mwe), label);
        }
        Ok(OverrideTable { entries })
    }
}

/// Groups labeled instances by normalized MWE and keeps the groups with a
/// single distinct label. Unlabeled instances are ignored.
pub fn build_override_table(train: &Dataset) -> OverrideTable {
    let mut seen: BTreeMap<String, BTreeSet<Label>> = BTreeMap::new();
    for inst in train {
        if let Some(label) = inst.label {
            seen.entry(normalize_mwe(&inst.mwe)).or_default().insert(label);
        }
    }
    let entries = seen
        .into_iter()
        .filter(|(_, labels)| labels.len() == 1)
        .map(|(mwe, labels)| (mwe, *labels.iter().next().expect("one label")))
        .collect();
    OverrideTable { entries }
}

/// Forces the table label onto every prediction whose MWE is in the table.
/// Probabilities are left untouched.
pub fn apply_overrides(preds: &PredictionSet, table: &OverrideTable) -> PredictionSet {
    let predictions = preds
        .predictions
        .iter()
        .map(|p| match table.get(&p.mwe) {
            Some(label) => Prediction {
                label,
                overridden: true,
                ..p.clone()
            },
            None => p.clone(),
        })
        .collect();
    PredictionSet { predictions }
}
