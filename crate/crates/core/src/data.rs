//! SQuAD v1.1 JSON ingestion, answer alignment and prediction files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Token;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Offset in characters (code points), as in the JSON files.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default)]
    version: Option<String>,
    data: Vec<Article>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Article {
    #[serde(default)]
    title: String,
    paragraphs: Vec<Paragraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Qa {
    id: String,
    question: String,
    answers: Vec<Answer>,
}

/// Byte offset of the `char_idx`-th character; `text.len()` for the end.
pub fn char_to_byte(text: &str, char_idx: usize) -> Option<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .nth(char_idx)
}

impl Answer {
    /// Byte range of the answer in `context`, if it lies inside it.
    pub fn byte_range(&self, context: &str) -> Option<(usize, usize)> {
        let start = char_to_byte(context, self.answer_start)?;
        let end = start + self.text.len();
        (end <= context.len() && context.is_char_boundary(end)).then_some((start, end))
    }

    pub fn matches_context(&self, context: &str) -> bool {
        self.byte_range(context)
            .is_some_and(|(s, e)| context[s..e] == self.text)
    }
}

/// Flattens a SQuAD-layout JSON document. The second value lists answers
/// whose text does not match the context at the stated offset.
pub fn parse_squad_str(json: &str) -> Result<(Vec<QaExample>, Vec<String>)> {
    let file: SquadFile = serde_json::from_str(json)
        .map_err(|e| Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for article in file.data {
        for para in article.paragraphs {
            for qa in para.qas {
                for (k, a) in qa.answers.iter().enumerate() {
                    if !a.matches_context(&para.context) {
                        warnings.push(format!(
                            "{}: answer {k} {:?} does not match the context at offset {}",
                            qa.id, a.text, a.answer_start
                        ));
                    }
                }
                out.push(QaExample {
                    id: qa.id,
                    context: para.context.clone(),
                    question: qa.question,
                    answers: qa.answers,
                });
            }
        }
    }
    Ok((out, warnings))
}

pub fn load_squad_json(path: &Path) -> Result<(Vec<QaExample>, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    parse_squad_str(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Serializes examples back into the SQuAD layout. Consecutive examples
/// sharing a context become one paragraph.
pub fn to_squad_json(examples: &[QaExample]) -> String {
    let mut paragraphs: Vec<Paragraph> = Vec::new();
    for ex in examples {
        let qa = Qa {
            id: ex.id.clone(),
            question: ex.question.clone(),
            answers: ex.answers.clone(),
        };
        match paragraphs.last_mut() {
            Some(p) if p.context == ex.context => p.qas.push(qa),
            _ => paragraphs.push(Paragraph {
                context: ex.context.clone(),
                qas: vec![qa],
            }),
        }
    }
    let file = SquadFile {
        version: Some("1.1".into()),
        data: vec![Article {
            title: String::new(),
            paragraphs,
        }],
    };
    serde_json::to_string_pretty(&file).expect("serializable")
}

pub fn save_squad_json(path: &Path, examples: &[QaExample]) -> Result<()> {
    fs::write(path, to_squad_json(examples))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    /// False when the answer boundaries fall inside tokens.
    pub exact: bool,
}

/// Smallest token span covering the answer's characters.
pub fn align_answer_span(context: &str, tokens: &[Token], answer: &Answer) -> Result<TokenSpan> {
    let (b0, b1) = answer.byte_range(context).ok_or_else(|| {
        Error::Data(format!(
            "answer offset {} lies outside the context",
            answer.answer_start
        ))
    })?;
    let overlaps = |t: &Token| t.start < b1.max(b0 + 1) && t.end > b0;
    let start = tokens
        .iter()
        .position(overlaps)
        .ok_or_else(|| Error::Data(format!("answer {:?} covers no token", answer.text)))?;
    let end = tokens
        .iter()
        .rposition(overlaps)
        .expect("a first overlap implies a last");
    let exact = tokens[start].start == b0 && tokens[end].end == b1;
    Ok(TokenSpan { start, end, exact })
}

/// Reads a `{"id": "answer", ...}` predictions file.
pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_predictions(path: &Path, preds: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(preds).expect("serializable"))?;
    Ok(())
}
