//! Combining a verification question and a caption into a single prompt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Label;

pub const QUESTION_PLACEHOLDER: &str = "{question}";
pub const CAPTION_PLACEHOLDER: &str = "{caption}";

pub const DEFAULT_TEMPLATE_ID: &str = "question-first-v1";
pub const DEFAULT_TEMPLATE_TEXT: &str = "{question}\nCaption: {caption}";
pub const DEFAULT_QUESTION: &str =
    "Does this caption match the context of the image? Answer Yes or No.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error(
        "template {id:?}: placeholder {placeholder} occurs {count} times, expected exactly once"
    )]
    Placeholder {
        id: String,
        placeholder: &'static str,
        count: usize,
    },
    #[error("empty question")]
    EmptyQuestion,
    #[error("empty caption")]
    EmptyCaption,
    #[error("unrecognized answer token {0:?}")]
    UnrecognizedToken(String),
}

/// Prompt template with exactly one `{question}` and one `{caption}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct PromptTemplate {
    id: String,
    text: String,
}

#[derive(Deserialize)]
struct RawTemplate {
    id: String,
    text: String,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = PromptError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::new(raw.id, raw.text)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            id: DEFAULT_TEMPLATE_ID.to_string(),
            text: DEFAULT_TEMPLATE_TEXT.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, PromptError> {
        let id = id.into();
        let text = text.into();
        for placeholder in [QUESTION_PLACEHOLDER, CAPTION_PLACEHOLDER] {
            let count = text.matches(placeholder).count();
            if count != 1 {
                return Err(PromptError::Placeholder {
                    id,
                    placeholder,
                    count,
                });
            }
        }
        Ok(Self { id, text })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Substitute question and caption into the template in a single left-to-right
/// pass, so braces inside either value are never re-expanded.
pub fn build_prompt(
    template: &PromptTemplate,
    question: &str,
    caption: &str,
) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    if caption.trim().is_empty() {
        return Err(PromptError::EmptyCaption);
    }

    let text = template.text();
    let q = text.find(QUESTION_PLACEHOLDER).expect("validated template");
    let c = text.find(CAPTION_PLACEHOLDER).expect("validated template");
    let mut slots = [
        (q, QUESTION_PLACEHOLDER.len(), question),
        (c, CAPTION_PLACEHOLDER.len(), caption),
    ];
    slots.sort_by_key(|s| s.0);

    let mut out = String::with_capacity(text.len() + question.len() + caption.len());
    let mut cursor = 0;
    for (at, len, value) in slots {
        out.push_str(&text[cursor..at]);
        out.push_str(value);
        cursor = at + len;
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

/// A template together with the question it is filled with for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: PromptTemplate,
    pub question: String,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            question: DEFAULT_QUESTION.to_string(),
        }
    }
}

impl PromptSpec {
    pub fn render(&self, caption: &str) -> Result<String, PromptError> {
        build_prompt(&self.template, &self.question, caption)
    }
}

/// Case-insensitive `yes` → match, `no` → mismatch.
pub fn token_to_label(token: &str) -> Result<Label, PromptError> {
    let t = token.trim();
    if t.eq_ignore_ascii_case("yes") {
        Ok(Label::Match)
    } else if t.eq_ignore_ascii_case("no") {
        Ok(Label::Mismatch)
    } else {
        Err(PromptError::UnrecognizedToken(token.to_string()))
    }
}
