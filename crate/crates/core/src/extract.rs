//! Yes/No verdicts from free-text model answers.
//!
//! Chat-style vision-language models tend to answer with a description that
//! contains the answer somewhere ("The caption does not match what the image
//! shows..."). The extractor normalizes the text and looks for cue phrases
//! from a versioned lexicon. The earliest cue by position decides; when two
//! cues start at the same word the longer phrase wins, so "does not match"
//! reads as negative rather than as an affirmative "match".

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Label;

pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.toml");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("lexicon i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon has an empty version string")]
    MissingVersion,
    #[error("lexicon phrase {0:?} is empty after normalization")]
    EmptyPhrase(String),
    #[error("phrase {0:?} is listed as both affirmative and negative")]
    Conflict(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub version: String,
    pub affirmative: Vec<String>,
    pub negative: Vec<String>,
}

impl Lexicon {
    pub fn from_toml(text: &str) -> Result<Self, LexiconError> {
        let lex: Lexicon = toml::from_str(text)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), LexiconError> {
        if self.version.trim().is_empty() {
            return Err(LexiconError::MissingVersion);
        }
        for p in self.affirmative.iter().chain(&self.negative) {
            if normalize(p).is_empty() {
                return Err(LexiconError::EmptyPhrase(p.clone()));
            }
        }
        for p in &self.affirmative {
            let np = normalize(p);
            if self.negative.iter().any(|n| normalize(n) == np) {
                return Err(LexiconError::Conflict(p.clone()));
            }
        }
        Ok(())
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_toml(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{02BC}')
}

/// Lowercase, replace every non-alphanumeric character with a space (an
/// apostrophe between two alphanumerics is kept as `'`), collapse runs of
/// whitespace and trim. Idempotent.
pub fn normalize(text: &str) -> String {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for (i, &c) in chars.iter().enumerate() {
        let keep = if c.is_alphanumeric() {
            Some(c)
        } else if is_apostrophe(c)
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            Some('\'')
        } else {
            None
        };
        match keep {
            Some(k) => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.push(k);
            }
            None => pending_space = true,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VerdictValue {
    Yes,
    No,
    Unknown,
}

impl VerdictValue {
    pub fn label(self) -> Option<Label> {
        match self {
            VerdictValue::Yes => Some(Label::Match),
            VerdictValue::No => Some(Label::Mismatch),
            VerdictValue::Unknown => None,
        }
    }
}

impl fmt::Display for VerdictValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictValue::Yes => "YES",
            VerdictValue::No => "NO",
            VerdictValue::Unknown => "UNKNOWN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub value: VerdictValue,
    /// Character offsets `[start, end)` of the deciding cue in the normalized
    /// text. Present exactly when the verdict is not `Unknown`.
    pub evidence_span: Option<(usize, usize)>,
    pub cue: Option<String>,
}

impl Verdict {
    fn unknown() -> Self {
        Self {
            value: VerdictValue::Unknown,
            evidence_span: None,
            cue: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Cue {
    words: Vec<String>,
    value: VerdictValue,
}

#[derive(Debug, Clone)]
pub struct Extractor {
    lexicon: Lexicon,
    // longest first; negative before affirmative at equal length
    cues: Vec<Cue>,
}

impl Default for Extractor {
    fn default() -> Self {
        Self::new(Lexicon::default())
    }
}

impl Extractor {
    pub fn new(lexicon: Lexicon) -> Self {
        let mut cues: Vec<Cue> = lexicon
            .negative
            .iter()
            .map(|p| (p, VerdictValue::No))
            .chain(lexicon.affirmative.iter().map(|p| (p, VerdictValue::Yes)))
            .map(|(p, value)| Cue {
                words: normalize(p).split(' ').map(str::to_string).collect(),
                value,
            })
            .collect();
        // stable sort keeps negatives ahead of affirmatives of equal length
        cues.sort_by_key(|c| std::cmp::Reverse(c.words.len()));
        Self { lexicon, cues }
    }

    pub fn version(&self) -> &str {
        &self.lexicon.version
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn extract_verdict(&self, text: &str) -> Verdict {
        let norm = normalize(text);
        if norm.is_empty() {
            return Verdict::unknown();
        }
        // (word, char start, char end)
        let mut words = Vec::new();
        let mut pos = 0;
        for w in norm.split(' ') {
            let len = w.chars().count();
            words.push((w, pos, pos + len));
            pos += len + 1;
        }

        for start in 0..words.len() {
            for cue in &self.cues {
                let end = start + cue.words.len();
                if end > words.len() {
                    continue;
                }
                if words[start..end]
                    .iter()
                    .zip(&cue.words)
                    .all(|(w, c)| w.0 == c)
                {
                    return Verdict {
                        value: cue.value,
                        evidence_span: Some((words[start].1, words[end - 1].2)),
                        cue: Some(cue.words.join(" ")),
                    };
                }
            }
        }
        Verdict::unknown()
    }
}

/// Extract with the bundled lexicon.
pub fn extract_verdict(text: &str) -> Verdict {
    thread_local! {
        static DEFAULT: Extractor = Extractor::default();
    }
    DEFAULT.with(|e| e.extract_verdict(text))
}
