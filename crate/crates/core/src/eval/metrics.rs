use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{auc, EvalError};
use crate::extract::VerdictValue;
use crate::manifest::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Predicted {
    Match,
    Mismatch,
    Unknown,
}

impl From<Label> for Predicted {
    fn from(l: Label) -> Self {
        match l {
            Label::Match => Predicted::Match,
            Label::Mismatch => Predicted::Mismatch,
        }
    }
}

impl From<VerdictValue> for Predicted {
    fn from(v: VerdictValue) -> Self {
        v.label().map_or(Predicted::Unknown, Predicted::from)
    }
}

impl Predicted {
    pub fn is_correct(self, truth: Label) -> bool {
        self == Predicted::from(truth)
    }
}

/// One line of a predictions file. `score` is the mismatch probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub true_label: Label,
    pub predicted: Predicted,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemRole {
    FineTuned,
    ZeroShot,
}

impl SystemRole {
    pub fn default_name(self) -> &'static str {
        match self {
            SystemRole::FineTuned => "Our Method",
            SystemRole::ZeroShot => "Zero-shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub system_name: String,
    pub role: SystemRole,
    pub split_name: String,
    pub extractor_version: Option<String>,
}

/// Accuracy, per-class accuracy and AUC for one system on one split.
/// Values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system_name: String,
    pub role: SystemRole,
    pub split_name: String,
    pub extractor_version: Option<String>,
    pub n_total: usize,
    pub n_match: usize,
    pub n_mismatch: usize,
    pub correct_match: usize,
    pub correct_mismatch: usize,
    pub n_unknown: usize,
    pub accuracy: f64,
    /// Accuracy on truly matched pairs; `None` when there are none.
    pub pristine: Option<f64>,
    /// Accuracy on truly mismatched pairs; `None` when there are none.
    pub falsified: Option<f64>,
    pub auc: Option<f64>,
    pub unknown_rate: f64,
}

/// UNKNOWN predictions count as incorrect in every accuracy figure. AUC is
/// reported only when every record carries a score and both classes occur.
pub fn score_predictions(
    records: &[PredictionRecord],
    meta: ReportMeta,
) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let scored = records.iter().filter(|r| r.score.is_some()).count();
    if scored != 0 && scored != records.len() {
        return Err(EvalError::MixedScores {
            scored,
            total: records.len(),
        });
    }
    if let Some(r) = records
        .iter()
        .find(|r| r.score.is_some_and(|s| !(0.0..=1.0).contains(&s)))
    {
        return Err(EvalError::InvalidScore(format!(
            "record {}: score {} outside [0, 1]",
            r.id,
            r.score.unwrap_or_default()
        )));
    }

    let mut n_match = 0;
    let mut correct_match = 0;
    let mut correct_mismatch = 0;
    let mut n_unknown = 0;
    for r in records {
        if r.true_label == Label::Match {
            n_match += 1;
        }
        if r.predicted.is_correct(r.true_label) {
            match r.true_label {
                Label::Match => correct_match += 1,
                Label::Mismatch => correct_mismatch += 1,
            }
        }
        if r.predicted == Predicted::Unknown {
            n_unknown += 1;
        }
    }
    let n_total = records.len();
    let n_mismatch = n_total - n_match;
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);

    let auc = if scored == n_total && n_match > 0 && n_mismatch > 0 {
        let pairs: Vec<(Label, f64)> = records
            .iter()
            .map(|r| (r.true_label, r.score.expect("all scored")))
            .collect();
        Some(auc(&pairs)?)
    } else {
        None
    };

    Ok(MetricsReport {
        system_name: meta.system_name,
        role: meta.role,
        split_name: meta.split_name,
        extractor_version: meta.extractor_version,
        n_total,
        n_match,
        n_mismatch,
        correct_match,
        correct_mismatch,
        n_unknown,
        accuracy: (correct_match + correct_mismatch) as f64 / n_total as f64,
        pristine: ratio(correct_match, n_match),
        falsified: ratio(correct_mismatch, n_mismatch),
        auc,
        unknown_rate: n_unknown as f64 / n_total as f64,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "system:       {} ({:?})", self.system_name, self.role)?;
        writeln!(f, "split:        {}", self.split_name)?;
        if let Some(v) = &self.extractor_version {
            writeln!(f, "extractor:    {v}")?;
        }
        writeln!(
            f,
            "records:      {} ({} match, {} mismatch, {} unknown)",
            self.n_total, self.n_match, self.n_mismatch, self.n_unknown
        )?;
        writeln!(f, "accuracy:     {:.4}", self.accuracy)?;
        writeln!(f, "pristine:     {}", opt(self.pristine))?;
        writeln!(f, "falsified:    {}", opt(self.falsified))?;
        writeln!(f, "auc:          {}", opt(self.auc))?;
        write!(f, "unknown rate: {:.4}", self.unknown_rate)
    }
}
