//! Macro F1 scoring and report formatting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::error::{Error, Result};
use crate::postprocess::PredictionSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold instances of this class.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Indexed by label: 0 idiomatic, 1 literal.
    pub classes: [ClassMetrics; 2],
    pub macro_f1: f64,
    /// `confusion[gold][pred]`.
    pub confusion: [[usize; 2]; 2],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<[[usize; 2]; 2]> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut m = [[0usize; 2]; 2];
    for (&g, &p) in gold.iter().zip(pred) {
        if g > 1 || p > 1 {
            return Err(Error::Contract(format!("labels must be 0 or 1, got gold {g} pred {p}")));
        }
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Precision, recall and F1 per class plus their unweighted mean. Any ratio
/// with an empty denominator is 0.
pub fn report(gold: &[Label], pred: &[Label]) -> Result<EvalReport> {
    let m = confusion(gold, pred)?;
    let class = |c: usize| {
        let tp = m[c][c];
        let fp = m[1 - c][c];
        let fn_ = m[c][1 - c];
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    };
    let classes = [class(0), class(1)];
    Ok(EvalReport {
        n: gold.len(),
        macro_f1: (classes[0].f1 + classes[1].f1) / 2.0,
        classes,
        confusion: m,
    })
}

pub fn macro_f1(gold: &[Label], pred: &[Label]) -> Result<f64> {
    Ok(report(gold, pred)?.macro_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Language,
    Setting,
}

impl std::str::FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "language" | "lang" => Ok(GroupBy::Language),
            "setting" => Ok(GroupBy::Setting),
            other => Err(format!("unknown grouping `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Group value, or `overall`.
    pub group: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Joins predictions to gold on id and scores them, once per group (sorted)
/// and then overall.
pub fn evaluate(preds: &PredictionSet, gold: &Dataset, group_by: Option<GroupBy>) -> Result<Vec<GroupReport>> {
    let index: HashMap<&str, _> = gold.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut missing = Vec::new();
    let mut groups: BTreeMap<String, (Vec<Label>, Vec<Label>)> = BTreeMap::new();
    let mut all = (Vec::new(), Vec::new());
    for p in &preds.predictions {
        let Some(inst) = index.get(p.id.as_str()) else {
            missing.push(p.id.clone());
            continue;
        };
        let Some(g) = inst.label else {
            missing.push(p.id.clone());
            continue;
        };
        all.0.push(g);
        all.1.push(p.label);
        if let Some(by) = group_by {
            let key = match by {
                GroupBy::Language => inst.language.as_str(),
                GroupBy::Setting => inst.setting.as_str(),
            };
            let e = groups.entry(key.to_string()).or_default();
            e.0.push(g);
            e.1.push(p.label);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGold { ids: missing });
    }
    let mut out = Vec::with_capacity(groups.len() + 1);
    for (group, (g, p)) in groups {
        out.push(GroupReport {
            group,
            report: report(&g, &p)?,
        });
    }
    out.push(GroupReport {
        group: "overall".into(),
        report: report(&all.0, &all.1)?,
    });
    Ok(out)
}

/// Aligned plain-text table, one row per group.
pub fn format_reports(reports: &[GroupReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "group", "n", "P(idiom)", "R(idiom)", "F1(idiom)", "P(lit)", "R(lit)", "F1(lit)", "macro_f1"
    );
    for g in reports {
        let r = &g.report;
        let [c0, c1] = &r.classes;
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            g.group, r.n, c0.precision, c0.recall, c0.f1, c1.precision, c1.recall, c1.f1, r.macro_f1
        );
    }
    s
}

/// One JSON object per line.
pub fn reports_to_json_lines(reports: &[GroupReport]) -> Result<String> {
    let mut s = String::new();
    for r in reports {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of an ablation table: per-seed dev Macro F1 in both settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub zero_shot: Vec<f64>,
    pub one_shot: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Free-form diagnostic lines printed under the table.
    pub notes: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>17}  {:>17}", "model", "zero-shot", "one-shot");
        for r in &self.rows {
            let (zm, zs) = mean_sd(&r.zero_shot);
            let (om, os) = mean_sd(&r.one_shot);
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.2} ± {:<6.2}  {:>8.2} ± {:<6.2}",
                r.name,
                100.0 * zm,
                100.0 * zs,
                100.0 * om,
                100.0 * os
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}
