//! Whitespace/punctuation tokenizer with byte offsets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Byte offset of the first character in the source string.
    pub start: usize,
    /// Byte offset one past the last character.
    pub end: usize,
}

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '«' | '»' | '—' | '–' | '…' | '¿' | '¡' | '·'
        )
}

/// Splits on whitespace, then detaches leading and trailing punctuation
/// characters of each chunk as single-character tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chunk_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                split_chunk(text, s, i, &mut tokens);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        split_chunk(text, s, text.len(), &mut tokens);
    }
    tokens
}

fn split_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let chunk = &text[start..end];
    let push = |out: &mut Vec<Token>, s: usize, e: usize| {
        out.push(Token {
            text: text[s..e].to_string(),
            start: s,
            end: e,
        })
    };

    let mut lead_end = start;
    for (i, c) in chunk.char_indices() {
        if is_punct(c) {
            lead_end = start + i + c.len_utf8();
        } else {
            break;
        }
    }
    if lead_end == end {
        // All punctuation.
        for (i, c) in chunk.char_indices() {
            push(out, start + i, start + i + c.len_utf8());
        }
        return;
    }
    let mut trail_start = end;
    for (i, c) in chunk.char_indices().rev() {
        if is_punct(c) && start + i >= lead_end {
            trail_start = start + i;
        } else {
            break;
        }
    }
    for (i, c) in text[start..lead_end].char_indices() {
        push(out, start + i, start + i + c.len_utf8());
    }
    push(out, lead_end, trail_start);
    for (i, c) in text[trail_start..end].char_indices() {
        push(out, trail_start + i, trail_start + i + c.len_utf8());
    }
}

/// Lowercased form with plural `-s`/`-es`, `-ies`, `-ing` and `-ed` stripped.
pub fn lemma(word: &str) -> String {
    let w = word.to_lowercase();
    let n = w.chars().count();
    let strip = |k: usize| w[..w.len() - k].to_string();
    if n > 5 && w.ends_with("ing") {
        strip(3)
    } else if n > 4 && (w.ends_with("ies") || w.ends_with("ied")) {
        format!("{}y", strip(3))
    } else if n > 4
        && (w.ends_with("ed") || ["ches", "shes", "sses", "xes", "zes"].iter().any(|s| w.ends_with(s)))
    {
        strip(2)
    } else if n > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        strip(1)
    } else {
        w
    }
}
