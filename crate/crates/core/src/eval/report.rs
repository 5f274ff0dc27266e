//! Per-split comparison of measured systems against published baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricsReport, SystemRole};
use crate::manifest::Partition;

pub const DEFAULT_BASELINES: &str = include_str!("../../data/baselines.toml");
pub const DEFAULT_GAIN_THRESHOLD: f64 = 0.08;

// absorbs representation error in differences like 0.73 - 0.65
const GAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemMetrics {
    pub system: String,
    pub accuracy: f64,
    pub pristine: f64,
    pub falsified: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSplit {
    pub name: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub baseline: SystemMetrics,
    pub zero_shot: Option<SystemMetrics>,
}

impl BaselineSplit {
    pub fn declared_counts(&self) -> BTreeMap<Partition, usize> {
        BTreeMap::from([
            (Partition::Train, self.train),
            (Partition::Val, self.val),
            (Partition::Test, self.test),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineTable {
    pub version: String,
    #[serde(rename = "split")]
    pub splits: Vec<BaselineSplit>,
}

impl BaselineTable {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Baselines(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, split_name: &str) -> Option<&BaselineSplit> {
        self.splits.iter().find(|s| s.name == split_name)
    }
}

impl Default for BaselineTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_BASELINES).expect("bundled baselines are valid")
    }
}

/// One column group of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnMetrics {
    pub system: String,
    pub accuracy: f64,
    pub pristine: Option<f64>,
    pub falsified: Option<f64>,
    pub auc: Option<f64>,
}

impl From<&SystemMetrics> for ColumnMetrics {
    fn from(m: &SystemMetrics) -> Self {
        Self {
            system: m.system.clone(),
            accuracy: m.accuracy,
            pristine: Some(m.pristine),
            falsified: Some(m.falsified),
            auc: None,
        }
    }
}

impl From<&MetricsReport> for ColumnMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            system: r.system_name.clone(),
            accuracy: r.accuracy,
            pristine: r.pristine,
            falsified: r.falsified,
            auc: r.auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub split_name: String,
    pub baseline: Option<ColumnMetrics>,
    pub zero_shot: Option<ColumnMetrics>,
    pub ours: Option<ColumnMetrics>,
    /// `ours.accuracy − max(baseline, zero-shot accuracy)`.
    pub gain: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline_version: String,
    pub gain_threshold: f64,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

/// Join measured reports with the baseline table by split name.
///
/// Splits appear in order of first occurrence among `reports`. A measured
/// zero-shot report replaces the table's zero-shot entry for its split. A
/// split without a table entry is kept with blank baseline columns and a
/// warning.
pub fn compare_report(
    reports: &[MetricsReport],
    baselines: &BaselineTable,
    gain_threshold: f64,
) -> Result<Comparison, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut split_order: Vec<&str> = Vec::new();
    for r in reports {
        if !split_order.contains(&r.split_name.as_str()) {
            split_order.push(&r.split_name);
        }
    }

    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(split_order.len());
    for split in split_order {
        let entry = baselines.get(split);
        if entry.is_none() {
            warnings.push(format!("no baseline entry for split {split:?}"));
        }
        let of_role = |role| {
            reports
                .iter()
                .filter(move |r| r.split_name == split && r.role == role)
        };
        let ours = of_role(SystemRole::FineTuned)
            .next_back()
            .map(ColumnMetrics::from);
        if of_role(SystemRole::FineTuned).count() > 1 {
            warnings.push(format!(
                "several fine-tuned reports for split {split:?}; using the last"
            ));
        }
        let zero_shot = of_role(SystemRole::ZeroShot)
            .next_back()
            .map(ColumnMetrics::from)
            .or_else(|| {
                entry
                    .and_then(|e| e.zero_shot.as_ref())
                    .map(ColumnMetrics::from)
            });
        let baseline = entry.map(|e| ColumnMetrics::from(&e.baseline));

        let best_reference = baseline
            .iter()
            .chain(zero_shot.iter())
            .map(|c| c.accuracy)
            .reduce(f64::max);
        let gain = match (&ours, best_reference) {
            (Some(o), Some(b)) => Some(o.accuracy - b),
            _ => None,
        };
        rows.push(ComparisonRow {
            split_name: split.to_string(),
            flagged: gain.is_some_and(|g| g + GAIN_EPS >= gain_threshold),
            baseline,
            zero_shot,
            ours,
            gain,
        });
    }
    Ok(Comparison {
        baseline_version: baselines.version.clone(),
        gain_threshold,
        rows,
        warnings,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl Comparison {
    /// Aligned plain-text table, two-decimal fractions.
    pub fn render_text(&self) -> String {
        let title = |pick: fn(&ComparisonRow) -> Option<&ColumnMetrics>, fallback: &str| {
            self.rows
                .iter()
                .find_map(|r| pick(r).map(|c| c.system.clone()))
                .unwrap_or_else(|| fallback.to_string())
        };
        let base_title = title(|r| r.baseline.as_ref(), "Baseline");
        let zs_title = title(|r| r.zero_shot.as_ref(), "Zero-shot");
        let ours_title = title(|r| r.ours.as_ref(), "Our Method");

        let split_w = self
            .rows
            .iter()
            .map(|r| r.split_name.chars().count())
            .chain([5])
            .max()
            .unwrap_or(5);
        let three_w = base_title.len().max(zs_title.len()).max(16);
        let four_w = ours_title.len().max(22);
        let flag_head = format!(">={:.2}", self.gain_threshold);

        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<split_w$} | {:<three_w$} | {:<three_w$} | {:<four_w$} | {:<5} | ",
            "", base_title, zs_title, ours_title, ""
        );
        let _ = writeln!(
            out,
            "{:<split_w$} | {:<three_w$} | {:<three_w$} | {:<four_w$} | {:<5} | {}",
            "Split", "ACC  P    F", "ACC  P    F", "ACC  P    F    AUC", "Gain", flag_head
        );
        let rule_len = split_w + 2 * three_w + four_w + 5 + flag_head.len() + 15;
        let _ = writeln!(out, "{}", "-".repeat(rule_len));

        let three = |c: &Option<ColumnMetrics>| match c {
            Some(c) => format!(
                "{} {} {}",
                cell(Some(c.accuracy)),
                cell(c.pristine),
                cell(c.falsified)
            ),
            None => "-    -    -".to_string(),
        };
        let four = |c: &Option<ColumnMetrics>| match c {
            Some(c) => format!(
                "{} {} {} {}",
                cell(Some(c.accuracy)),
                cell(c.pristine),
                cell(c.falsified),
                cell(c.auc)
            ),
            None => "-    -    -    -".to_string(),
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<split_w$} | {:<three_w$} | {:<three_w$} | {:<four_w$} | {:<5} | {}",
                r.split_name,
                three(&r.baseline),
                three(&r.zero_shot),
                four(&r.ours),
                cell(r.gain),
                if r.flagged { "*" } else { "" }
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
