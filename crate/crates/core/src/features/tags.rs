//! Part-of-speech and named-entity tag inventories and the sidecar tag file.
//!
//! Index 0 of each inventory is `<none>`; it is used for untagged text and
//! for tag names outside the inventory.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

pub const NO_TAG: &str = "<none>";

/// Penn Treebank tags plus the coarse punctuation tags spaCy emits.
pub const POS_TAGS: &[&str] = &[
    NO_TAG, "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS",
    "NNP", "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO", "UH",
    "VB", "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT", "WP", "WP$", "WRB", ".", ",", ":", "``",
    "''", "-LRB-", "-RRB-", "HYPH", "NFP", "ADD", "AFX", "XX", "_SP", "$", "#",
];

/// OntoNotes entity types; `O` marks tokens outside any entity.
pub const NER_TAGS: &[&str] = &[
    NO_TAG, "O", "PERSON", "NORP", "FAC", "ORG", "GPE", "LOC", "PRODUCT", "EVENT",
    "WORK_OF_ART", "LAW", "LANGUAGE", "DATE", "TIME", "PERCENT", "MONEY", "QUANTITY",
    "ORDINAL", "CARDINAL",
];

fn index_in(inventory: &[&str], tag: &str) -> usize {
    inventory.iter().position(|t| *t == tag).unwrap_or(0)
}

pub fn pos_index(tag: &str) -> usize {
    index_in(POS_TAGS, tag)
}

pub fn ner_index(tag: &str) -> usize {
    // spaCy prints IOB-prefixed labels in some modes.
    let bare = tag
        .strip_prefix("B-")
        .or_else(|| tag.strip_prefix("I-"))
        .unwrap_or(tag);
    index_in(NER_TAGS, bare)
}

/// Token-aligned tag indices for one context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextTags {
    pub pos: Vec<usize>,
    pub ner: Vec<usize>,
}

impl ContextTags {
    pub fn from_names(pos: &[&str], ner: &[&str]) -> Result<Self> {
        if pos.len() != ner.len() {
            return Err(Error::Data(format!(
                "{} POS tags but {} NER tags",
                pos.len(),
                ner.len()
            )));
        }
        Ok(ContextTags {
            pos: pos.iter().map(|t| pos_index(t)).collect(),
            ner: ner.iter().map(|t| ner_index(t)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Parses sidecar lines of the form `id<TAB>POS POS ...<TAB>NER NER ...`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_tag_lines(text: &str) -> Result<HashMap<String, ContextTags>> {
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "tag file line {}: expected 3 tab-separated fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let pos: Vec<&str> = fields[1].split_whitespace().collect();
        let ner: Vec<&str> = fields[2].split_whitespace().collect();
        let tags = ContextTags::from_names(&pos, &ner)
            .map_err(|e| Error::Parse(format!("tag file line {}: {e}", lineno + 1)))?;
        out.insert(fields[0].to_string(), tags);
    }
    Ok(out)
}

pub fn load_tag_file(path: &Path) -> Result<HashMap<String, ContextTags>> {
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_tag_lines(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_tags_map_to_zero() {
        assert_eq!(pos_index("NN"), 12);
        assert_eq!(pos_index("nonsense"), 0);
        assert_eq!(ner_index("B-PERSON"), ner_index("PERSON"));
        assert_eq!(ner_index("ALIEN"), 0);
    }

    #[test]
    fn parses_sidecar() {
        let text = "# comment\nq1\tDT NN\tO O\n\nq2\tNNP\tB-GPE\n";
        let tags = parse_tag_lines(text).unwrap();
        assert_eq!(tags.len(), 2);
        assert_eq!(tags["q1"].pos, vec![pos_index("DT"), pos_index("NN")]);
        assert_eq!(tags["q2"].ner, vec![ner_index("GPE")]);
    }

    #[test]
    fn rejects_misaligned_records() {
        assert!(matches!(parse_tag_lines("q1\tDT NN\tO\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_tag_lines("q1\tDT\n"), Err(Error::Parse(_))));
    }
}
