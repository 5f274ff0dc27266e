//! Labeled image–caption manifests.
//!
//! A manifest is UTF-8 text with one flat JSON object per line:
//!
//! ```text
//! # comment lines are skipped
//! {"id":"a1","image":"img/a1.jpg","caption":"A dog on a beach.","label":0,"split":"train"}
//! ```
//!
//! `label` is `0` for a matching (in-context) pair and `1` for a mismatched
//! one. Unknown keys are rejected. Image references are kept as opaque
//! strings; nothing is read from disk until encoding time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Split identifiers used by the NewsCLIPpings benchmark tables.
pub mod splits {
    pub const SEMANTICS_CLIP_TEXT_IMAGE: &str = "Semantics/CLIP Text-Image";
    pub const SEMANTICS_CLIP_TEXT_TEXT: &str = "Semantics/CLIP Text-Text";
    pub const PERSON_SBERT_WK_TEXT_TEXT: &str = "Person/SBERT-WK Text-Text";
    pub const SCENE_RESNET_PLACE: &str = "Scene/ResNet Place";
    pub const MERGED_BALANCED: &str = "Merged/Balanced";

    pub const ALL: [&str; 5] = [
        SEMANTICS_CLIP_TEXT_IMAGE,
        SEMANTICS_CLIP_TEXT_TEXT,
        PERSON_SBERT_WK_TEXT_TEXT,
        SCENE_RESNET_PLACE,
        MERGED_BALANCED,
    ];

    pub fn is_predefined(name: &str) -> bool {
        ALL.contains(&name)
    }
}

/// Ground truth for an image–caption pair. `Match` is encoded as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Match,
    Mismatch,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Match, Label::Mismatch];

    pub fn code(self) -> u8 {
        match self {
            Label::Match => 0,
            Label::Mismatch => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Label::Match),
            1 => Some(Label::Mismatch),
            _ => None,
        }
    }

    /// Index of this label's logit in a `(match, mismatch)` pair.
    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn answer_token(self) -> AnswerToken {
        match self {
            Label::Match => AnswerToken::Yes,
            Label::Mismatch => AnswerToken::No,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Match => "MATCH",
            Label::Mismatch => "MISMATCH",
        })
    }
}

/// Target token of a fine-tuning record. Serialized exactly as `"Yes"` / `"No"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerToken {
    Yes,
    No,
}

impl AnswerToken {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerToken::Yes => "Yes",
            AnswerToken::No => "No",
        }
    }

    pub fn label(self) -> Label {
        match self {
            AnswerToken::Yes => Label::Match,
            AnswerToken::No => Label::Mismatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(ManifestError::UnknownPartition(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub caption: String,
    #[serde(with = "label_code")]
    pub label: Label,
    pub split: Partition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

mod label_code {
    use super::Label;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(label: &Label, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(label.code())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Label, D::Error> {
        let code = i64::deserialize(d)?;
        Label::from_code(code).ok_or_else(|| D::Error::custom(format!("unknown label {code}")))
    }
}

/// Raw line as it appears on disk, before invariant checks.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    image: String,
    caption: String,
    label: serde_json::Value,
    split: String,
    #[serde(default)]
    source: Option<String>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label {value}")]
    UnknownLabel { line: usize, value: String },
    #[error("line {line}: empty caption")]
    EmptyCaption { line: usize },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown split {value:?}")]
    UnknownSplit { line: usize, value: String },
    #[error("unknown partition {0:?}")]
    UnknownPartition(String),
    #[error("partition {partition}: declared {declared} samples, found {actual}")]
    CountMismatch {
        partition: Partition,
        declared: usize,
        actual: usize,
    },
    #[error("sample {id:?} sits in partition {partition} but declares split {split}")]
    MisplacedSample {
        id: String,
        partition: Partition,
        split: Partition,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// A validated manifest grouped by partition. Only partitions with at least
/// one sample are present in `partitions`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitManifest {
    pub split_name: String,
    pub partitions: BTreeMap<Partition, Vec<Sample>>,
    pub declared_counts: Option<BTreeMap<Partition, usize>>,
}

impl SplitManifest {
    pub fn new(split_name: impl Into<String>) -> Self {
        Self {
            split_name: split_name.into(),
            ..Self::default()
        }
    }

    /// Attach expected partition sizes and check them against the loaded data.
    pub fn with_declared_counts(
        mut self,
        declared: BTreeMap<Partition, usize>,
    ) -> Result<Self, ManifestError> {
        self.declared_counts = Some(declared);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        for (&partition, samples) in &self.partitions {
            if let Some(s) = samples.iter().find(|s| s.split != partition) {
                return Err(ManifestError::MisplacedSample {
                    id: s.id.clone(),
                    partition,
                    split: s.split,
                });
            }
        }
        if let Some(declared) = &self.declared_counts {
            for (&partition, &count) in declared {
                let actual = self.partition(partition).len();
                if actual != count {
                    return Err(ManifestError::CountMismatch {
                        partition,
                        declared: count,
                        actual,
                    });
                }
            }
        }
        Ok(())
    }

    /// Samples of a partition, empty if absent.
    pub fn partition(&self, partition: Partition) -> &[Sample] {
        self.partitions
            .get(&partition)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.partitions.values().flatten()
    }

    /// Write the manifest back out in the line format, partitions in
    /// train/val/test order.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for sample in self.samples() {
            serde_json::to_writer(&mut w, sample)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Parse a line-delimited manifest. Blank lines and lines starting with `#`
/// are skipped; line numbers in errors are 1-based.
pub fn load_manifest<R: BufRead>(
    reader: R,
    split_name: &str,
) -> Result<SplitManifest, ManifestError> {
    let mut manifest = SplitManifest::new(split_name);
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let sample = parse_line(trimmed, line_no)?;
        if !seen.insert(sample.id.clone()) {
            return Err(ManifestError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        manifest
            .partitions
            .entry(sample.split)
            .or_default()
            .push(sample);
    }
    Ok(manifest)
}

pub fn load_manifest_file(path: &Path, split_name: &str) -> Result<SplitManifest, ManifestError> {
    let file = std::fs::File::open(path)?;
    load_manifest(io::BufReader::new(file), split_name)
}

fn parse_line(line: &str, line_no: usize) -> Result<Sample, ManifestError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| ManifestError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let label = raw
        .label
        .as_i64()
        .and_then(Label::from_code)
        .ok_or_else(|| ManifestError::UnknownLabel {
            line: line_no,
            value: raw.label.to_string(),
        })?;
    if raw.caption.trim().is_empty() {
        return Err(ManifestError::EmptyCaption { line: line_no });
    }
    let split = raw
        .split
        .parse::<Partition>()
        .map_err(|_| ManifestError::UnknownSplit {
            line: line_no,
            value: raw.split.clone(),
        })?;
    Ok(Sample {
        id: raw.id,
        image_ref: raw.image,
        caption: raw.caption,
        label,
        split,
        source: raw.source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionStats {
    pub total: usize,
    pub n_match: usize,
    pub n_mismatch: usize,
    /// `n_match / total`; `None` for an empty partition.
    pub balance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split_name: String,
    pub partitions: BTreeMap<Partition, PartitionStats>,
}

/// Per-partition totals and class balance. Every partition is reported,
/// including empty ones.
pub fn split_stats(manifest: &SplitManifest) -> SplitStats {
    let partitions = Partition::ALL
        .iter()
        .map(|&p| {
            let samples = manifest.partition(p);
            let n_match = samples.iter().filter(|s| s.label == Label::Match).count();
            let total = samples.len();
            let balance = (total > 0).then(|| n_match as f64 / total as f64);
            (
                p,
                PartitionStats {
                    total,
                    n_match,
                    n_mismatch: total - n_match,
                    balance,
                },
            )
        })
        .collect();
    SplitStats {
        split_name: manifest.split_name.clone(),
        partitions,
    }
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split: {}", self.split_name)?;
        writeln!(
            f,
            "{:<9} {:>9} {:>9} {:>9} {:>9}",
            "partition", "total", "match", "mismatch", "balance"
        )?;
        for (p, s) in &self.partitions {
            let balance = s
                .balance
                .map(|b| format!("{b:.4}"))
                .unwrap_or_else(|| "n/a".to_string());
            writeln!(
                f,
                "{:<9} {:>9} {:>9} {:>9} {:>9}",
                p.as_str(),
                s.total,
                s.n_match,
                s.n_mismatch,
                balance
            )?;
        }
        Ok(())
    }
}

/// A restructured `(image, caption, label)` training triple. The sample id is
/// carried along so downstream errors can name the record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub caption: String,
    pub label_token: AnswerToken,
}

impl FineTuneRecord {
    pub fn label(&self) -> Label {
        self.label_token.label()
    }
}

impl From<&Sample> for FineTuneRecord {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            image_ref: s.image_ref.clone(),
            caption: s.caption.clone(),
            label_token: s.label.answer_token(),
        }
    }
}

pub fn restructure_for_finetune(
    manifest: &SplitManifest,
    partition: Partition,
) -> Result<Vec<FineTuneRecord>, ManifestError> {
    let samples = manifest
        .partitions
        .get(&partition)
        .ok_or_else(|| ManifestError::UnknownPartition(partition.to_string()))?;
    Ok(samples.iter().map(FineTuneRecord::from).collect())
}

pub fn write_records<W: Write>(records: &[FineTuneRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<FineTuneRecord>, ManifestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: i64, split: &str) -> String {
        format!(
            r#"{{"id":"{id}","image":"img/{id}.jpg","caption":"caption {id}","label":{label},"split":"{split}"}}"#
        )
    }

    fn load(text: &str) -> Result<SplitManifest, ManifestError> {
        load_manifest(text.as_bytes(), splits::MERGED_BALANCED)
    }

    #[test]
    fn two_well_formed_lines() {
        let text = format!("{}\n{}\n", line("a", 0, "train"), line("b", 1, "train"));
        let m = load(&text).unwrap();
        assert_eq!(m.len(), 2);
        let train = m.partition(Partition::Train);
        assert_eq!(train[0].label, Label::Match);
        assert_eq!(train[1].label, Label::Mismatch);
    }

    #[test]
    fn empty_input_is_empty_manifest() {
        let m = load("").unwrap();
        assert!(m.is_empty());
        assert!(m.partitions.is_empty());
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let text = format!("# header\n\n   # indented\n{}\n", line("a", 0, "val"));
        let m = load(&text).unwrap();
        assert_eq!(m.partition(Partition::Val).len(), 1);
    }

    #[test]
    fn unknown_label_reports_line() {
        let text = format!("{}\n{}\n", line("a", 0, "train"), line("b", 2, "train"));
        match load(&text) {
            Err(e @ ManifestError::UnknownLabel { line: 2, .. }) => {
                assert!(e.to_string().contains("unknown label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn string_label_is_unknown_label() {
        let text = r#"{"id":"a","image":"x","caption":"c","label":"0","split":"train"}"#;
        assert!(matches!(
            load(text),
            Err(ManifestError::UnknownLabel { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = format!("{}\n{}\n", line("a", 0, "train"), line("a", 1, "test"));
        assert!(matches!(
            load(&text),
            Err(ManifestError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn whitespace_caption_rejected() {
        let text = r#"{"id":"a","image":"x","caption":" \t ","label":0,"split":"train"}"#;
        assert!(matches!(
            load(text),
            Err(ManifestError::EmptyCaption { line: 1 })
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"id":"a","image":"x","caption":"c","label":0,"split":"train","extra":1}"#;
        assert!(matches!(
            load(text),
            Err(ManifestError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn missing_key_and_bad_json_are_malformed() {
        assert!(matches!(
            load(r#"{"id":"a","image":"x","label":0,"split":"train"}"#),
            Err(ManifestError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            load("not json"),
            Err(ManifestError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_split_rejected() {
        let text = line("a", 0, "holdout");
        assert!(matches!(
            load(&text),
            Err(ManifestError::UnknownSplit { line: 1, .. })
        ));
    }

    #[test]
    fn source_is_optional_and_kept() {
        let text =
            r#"{"id":"a","image":"x","caption":"c","label":1,"split":"test","source":"bbc"}"#;
        let m = load(text).unwrap();
        assert_eq!(
            m.partition(Partition::Test)[0].source.as_deref(),
            Some("bbc")
        );
    }

    #[test]
    fn stats_balanced_and_degenerate() {
        let text = [
            line("a", 0, "train"),
            line("b", 0, "train"),
            line("c", 1, "train"),
            line("d", 1, "train"),
            line("e", 1, "test"),
            line("f", 1, "test"),
            line("g", 1, "test"),
        ]
        .join("\n");
        let stats = split_stats(&load(&text).unwrap());
        let train = stats.partitions[&Partition::Train];
        assert_eq!((train.total, train.n_match, train.n_mismatch), (4, 2, 2));
        assert_eq!(train.balance, Some(0.5));
        let test = stats.partitions[&Partition::Test];
        assert_eq!(test.balance, Some(0.0));
        let val = stats.partitions[&Partition::Val];
        assert_eq!(val.total, 0);
        assert_eq!(val.balance, None);
        assert!(stats.to_string().contains("n/a"));
    }

    #[test]
    fn declared_counts_checked() {
        let text = format!("{}\n{}\n", line("a", 0, "train"), line("b", 1, "train"));
        let m = load(&text).unwrap();
        let ok = BTreeMap::from([(Partition::Train, 2)]);
        assert!(m.clone().with_declared_counts(ok).is_ok());
        let bad = BTreeMap::from([(Partition::Train, 2), (Partition::Test, 1)]);
        assert!(matches!(
            m.with_declared_counts(bad),
            Err(ManifestError::CountMismatch {
                partition: Partition::Test,
                declared: 1,
                actual: 0
            })
        ));
    }

    #[test]
    fn misplaced_sample_detected() {
        let text = line("a", 0, "train");
        let mut m = load(&text).unwrap();
        let s = m.partitions.remove(&Partition::Train).unwrap();
        m.partitions.insert(Partition::Val, s);
        assert!(matches!(
            m.validate(),
            Err(ManifestError::MisplacedSample { .. })
        ));
    }

    #[test]
    fn restructure_maps_labels_and_preserves_order() {
        let lines: Vec<String> = (0..10)
            .map(|i| line(&format!("s{i}"), i % 2, "train"))
            .collect();
        let m = load(&lines.join("\n")).unwrap();
        let recs = restructure_for_finetune(&m, Partition::Train).unwrap();
        assert_eq!(recs.len(), 10);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.id, format!("s{i}"));
            let expected = if i % 2 == 0 {
                AnswerToken::Yes
            } else {
                AnswerToken::No
            };
            assert_eq!(r.label_token, expected);
        }
        let json = serde_json::to_string(&recs[0]).unwrap();
        assert!(json.contains(r#""label_token":"Yes""#));
        let json = serde_json::to_string(&recs[1]).unwrap();
        assert!(json.contains(r#""label_token":"No""#));
    }

    #[test]
    fn restructure_unknown_partition() {
        let m = load(&line("a", 0, "train")).unwrap();
        assert!(matches!(
            restructure_for_finetune(&m, Partition::Test),
            Err(ManifestError::UnknownPartition(p)) if p == "test"
        ));
        assert!("holdout".parse::<Partition>().is_err());
    }

    #[test]
    fn label_token_bijection() {
        for l in Label::ALL {
            assert_eq!(l.answer_token().label(), l);
        }
        assert_ne!(Label::Match.answer_token(), Label::Mismatch.answer_token());
    }

    #[test]
    fn records_round_trip() {
        let m = load(&format!("{}\n{}", line("a", 0, "val"), line("b", 1, "val"))).unwrap();
        let recs = restructure_for_finetune(&m, Partition::Val).unwrap();
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }
}
