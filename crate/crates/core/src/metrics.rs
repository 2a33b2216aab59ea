//! Exact match and token-overlap F1 over normalized answer strings.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Lowercases, removes ASCII punctuation and the articles a/an/the, and
/// collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    static ARTICLES: OnceLock<Regex> = OnceLock::new();
    let articles = ARTICLES.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"));
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn f1_single(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `(f1, em)` maximized over the gold answers. Returns zeros when there
/// are no golds.
pub fn f1_em(prediction: &str, golds: &[impl AsRef<str>]) -> (f64, f64) {
    let pred = normalize_answer(prediction);
    let pred_toks: Vec<&str> = pred.split_whitespace().collect();
    let mut best = (0.0f64, 0.0f64);
    for g in golds {
        let gold = normalize_answer(g.as_ref());
        let gold_toks: Vec<&str> = gold.split_whitespace().collect();
        let em = if pred == gold { 1.0 } else { 0.0 };
        best.0 = best.0.max(f1_single(&pred_toks, &gold_toks));
        best.1 = best.1.max(em);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    pub f1: f64,
    pub em: f64,
    pub n: usize,
}

impl EvalResult {
    /// Averages per-example `(f1, em)` pairs.
    pub fn from_scores(scores: &[(f64, f64)]) -> Self {
        let n = scores.len();
        if n == 0 {
            return EvalResult::default();
        }
        let (f1, em) = scores
            .iter()
            .fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
        EvalResult {
            f1: f1 / n as f64,
            em: em / n as f64,
            n,
        }
    }
}
