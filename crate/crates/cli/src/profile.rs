//! Per-component timing of the full model and single-example latency.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use fastfusion::data::QaExample;
use fastfusion::features::{EmbeddingSource, Vocabulary};
use fastfusion::model::{Component, Model, ModelConfig, StageClock};
use fastfusion::{Error, Result};

use crate::bench::{summarize, SCHEMA_VERSION};

const WORDS: usize = 400;

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Vocabulary of the random-text words, every one tuned.
pub fn random_vocab() -> Vocabulary {
    let counts = (0..WORDS).map(|i| (word(i), 1)).collect();
    Vocabulary::build(&counts, [], |_| true, WORDS)
}

/// Freshly initialized model over [`random_vocab`] with hashed word vectors.
pub fn random_model(config: ModelConfig) -> Result<Model> {
    let dim = config.embed_dim;
    Model::new(config, random_vocab(), &EmbeddingSource::Hashed { dim })
}

/// A context of `context_len` random words and a question that reuses a
/// few of them.
pub fn random_pair(context_len: usize, question_len: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..WORDS).collect();
    let context: Vec<String> = (0..context_len)
        .map(|_| word(*ids.choose(&mut rng).expect("non-empty")))
        .collect();
    let question: Vec<String> = (0..question_len)
        .map(|_| word(*ids.choose(&mut rng).expect("non-empty")))
        .collect();
    (context.join(" "), question.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentTiming {
    pub component: String,
    /// Mean time per pass.
    pub mean_ns: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentProfile {
    pub schema_version: String,
    pub context_len: usize,
    pub question_len: usize,
    pub trials: usize,
    pub skipped: Option<String>,
    pub components: Vec<ComponentTiming>,
    /// Mean of the summed component times per pass.
    pub profiled_total_ns: u64,
    /// Mean wall-clock of an uninstrumented prediction.
    pub unprofiled_total_ns: u64,
}

impl ComponentProfile {
    pub fn percent_sum(&self) -> f64 {
        self.components.iter().map(|c| c.percent).sum()
    }

    pub fn get(&self, c: Component) -> Option<&ComponentTiming> {
        self.components.iter().find(|t| t.component == c.name())
    }
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos() as u64
}

/// Times every pipeline stage over `trials` predictions on one pair, plus
/// the same number of uninstrumented predictions. With `skip`, that stage's
/// outputs are replaced by zeros.
pub fn profile_components(
    model: &Model,
    context: &str,
    question: &str,
    trials: usize,
    skip: Option<Component>,
) -> Result<ComponentProfile> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut clock = match skip {
        Some(c) => StageClock::skipping(c)?,
        None => StageClock::new(),
    };
    // Warm caches and allocator.
    let feats = model.featurize(context, question, None)?;
    model.predict_timed(context, question, None, Some(&mut clock))?;
    model.predict(context, question, None)?;
    clock.reset();

    let mut unprofiled = Duration::ZERO;
    for _ in 0..trials {
        model.predict_timed(context, question, None, Some(&mut clock))?;
        if skip.is_none() {
            let t0 = Instant::now();
            model.predict(context, question, None)?;
            unprofiled += t0.elapsed();
        }
    }
    let total = clock.sum();
    let components = clock
        .totals()
        .map(|(c, d)| ComponentTiming {
            component: c.name().to_string(),
            mean_ns: nanos(d) / trials as u64,
            percent: if total.is_zero() {
                0.0
            } else {
                100.0 * d.as_secs_f64() / total.as_secs_f64()
            },
        })
        .collect();
    Ok(ComponentProfile {
        schema_version: SCHEMA_VERSION.into(),
        context_len: feats.context_len(),
        question_len: feats.question_len(),
        trials,
        skipped: skip.map(|c| c.name().to_string()),
        components,
        profiled_total_ns: nanos(total) / trials as u64,
        unprofiled_total_ns: nanos(unprofiled) / trials as u64,
    })
}

pub fn format_profile(p: &ComponentProfile) -> String {
    let mut out = format!("{:<24} {:>12} {:>8}\n", "component", "mean_us", "percent");
    for c in &p.components {
        out.push_str(&format!(
            "{:<24} {:>12.1} {:>7.2}%\n",
            c.component,
            c.mean_ns as f64 / 1e3,
            c.percent
        ));
    }
    out.push_str(&format!(
        "{:<24} {:>12.1}\n{:<24} {:>12.1}\n",
        "profiled total",
        p.profiled_total_ns as f64 / 1e3,
        "unprofiled total",
        p.unprofiled_total_ns as f64 / 1e3
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub schema_version: String,
    pub n: usize,
    pub median_ns: u64,
    pub mean_ns: u64,
    pub p90_ns: u64,
}

pub const MIN_LATENCY_EXAMPLES: usize = 20;

/// Times `n` single predictions, cycling through `examples`, featurization
/// included.
pub fn latency_1example(model: &Model, examples: &[QaExample], n: usize) -> Result<LatencyReport> {
    if examples.is_empty() {
        return Err(Error::Config("latency needs at least one example".into()));
    }
    if n < MIN_LATENCY_EXAMPLES {
        return Err(Error::Config(format!(
            "latency needs at least {MIN_LATENCY_EXAMPLES} timed examples, got {n}"
        )));
    }
    let first = &examples[0];
    model.predict(&first.context, &first.question, None)?;
    let mut samples = Vec::with_capacity(n);
    for ex in examples.iter().cycle().take(n) {
        let t0 = Instant::now();
        model.predict(&ex.context, &ex.question, None)?;
        samples.push(nanos(t0.elapsed()).max(1));
    }
    let (median_ns, mean_ns, p90_ns) = summarize(&mut samples);
    Ok(LatencyReport {
        schema_version: SCHEMA_VERSION.into(),
        n,
        median_ns,
        mean_ns,
        p90_ns,
    })
}
