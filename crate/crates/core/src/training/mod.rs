//! Span objective, mini-batch training loop and evaluation.

pub mod optim;
pub mod synth;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{align_answer_span, QaExample};
use crate::error::{Error, Result};
use crate::features::{tokenize, EmbeddingSource, TokenFeatures, Vocabulary};
use crate::metrics::{f1_em, EvalResult};
use crate::model::{span_to_prediction, Model, ModelConfig, Scores};
use crate::tape::{Tape, Var};

pub use optim::{clip_gradients, global_grad_norm, AdamConfig, ClipInfo, OptimState};
pub use synth::synth_task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop once dev exact match reaches this fraction.
    pub target_em: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            clip_norm: 20.0,
            epochs: 30,
            seed: 0,
            adam: AdamConfig::default(),
            target_em: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// A featurized example with its training target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub context: String,
    pub feats: TokenFeatures,
    pub gold_start: usize,
    pub gold_end: usize,
    pub golds: Vec<String>,
}

/// Featurizes examples and aligns their first answer. Examples that cannot
/// be featurized or aligned are dropped with a warning; answers that cut
/// through tokens are kept with the covering span and a warning.
pub fn prepare(model: &Model, examples: &[QaExample]) -> (Vec<TrainExample>, Vec<String>) {
    let mut out = Vec::with_capacity(examples.len());
    let mut warnings = Vec::new();
    for ex in examples {
        let Some(first) = ex.answers.first() else {
            warnings.push(format!("{}: no answers", ex.id));
            continue;
        };
        let feats = match model.featurize(&ex.context, &ex.question, None) {
            Ok(f) => f,
            Err(e) => {
                warnings.push(format!("{}: {e}", ex.id));
                continue;
            }
        };
        match align_answer_span(&ex.context, &feats.context_tokens, first) {
            Ok(span) => {
                if !span.exact {
                    warnings.push(format!("{}: answer boundary inside a token", ex.id));
                }
                out.push(TrainExample {
                    id: ex.id.clone(),
                    context: ex.context.clone(),
                    gold_start: span.start,
                    gold_end: span.end,
                    golds: ex.answers.iter().map(|a| a.text.clone()).collect(),
                    feats,
                });
            }
            Err(e) => warnings.push(format!("{}: {e}", ex.id)),
        }
    }
    (out, warnings)
}

/// Vocabulary over the training tokens plus any extra texts (e.g. dev).
pub fn build_vocab<'a>(
    train: &[QaExample],
    extra: impl IntoIterator<Item = &'a QaExample>,
    source: &EmbeddingSource,
) -> Vocabulary {
    let mut counts = BTreeMap::new();
    for ex in train {
        for t in tokenize(&ex.context).into_iter().chain(tokenize(&ex.question)) {
            *counts.entry(t.text).or_insert(0usize) += 1;
        }
    }
    let extra_words: Vec<String> = extra
        .into_iter()
        .flat_map(|ex| tokenize(&ex.context).into_iter().chain(tokenize(&ex.question)))
        .map(|t| t.text)
        .collect();
    Vocabulary::build(
        &counts,
        extra_words.iter().map(String::as_str),
        |w| source.has_vector(w),
        crate::features::vocab::TUNE_TOP_K,
    )
}

/// `−ln s[gold_start] − ln e[gold_end]` on the tape.
pub fn span_loss(tape: &Tape<'_>, scores: &Scores, gold_start: usize, gold_end: usize) -> Result<Var> {
    let n = tape.cols(scores.start);
    if gold_start >= n || gold_end >= n || gold_start > gold_end {
        return Err(Error::Data(format!(
            "gold span ({gold_start}, {gold_end}) invalid for {n} tokens"
        )));
    }
    let ls = tape.ln(tape.pick(scores.start, gold_start)?)?;
    let le = tape.ln(tape.pick(scores.end, gold_end)?)?;
    tape.scale(tape.add(ls, le)?, -1.0)
}

/// Same objective on plain distributions.
pub fn span_loss_value(s: &[f64], e: &[f64], gold_start: usize, gold_end: usize) -> Result<f64> {
    if gold_start >= s.len() || gold_end >= e.len() {
        return Err(Error::Data("gold index out of range".into()));
    }
    Ok(-s[gold_start].ln() - e[gold_end].ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Dropout seed for one example within one step.
fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.set_word_pos(index as u128 * 2);
    rand::RngCore::next_u64(&mut rng)
}

/// One optimizer step on a batch: per-example forward and backward with
/// dropout, gradients averaged over the batch, clipped, then Adam.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimState,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let step = opt.step + 1;
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let grads = {
            let tape = Tape::with_params(&model.store).training(example_seed(cfg.seed, step, i));
            let scores = model.forward(&tape, &ex.feats, None)?;
            let loss = span_loss(&tape, &scores, ex.gold_start, ex.gold_end)?;
            total += tape.scalar(loss)?;
            tape.backward(loss)?
        };
        grads.accumulate_into(&mut model.store, scale);
    }
    let clip = clip_gradients(&mut model.store, cfg.clip_norm)?;
    opt.adam_step(&mut model.store)?;
    Ok(StepLog {
        epoch,
        step,
        loss: total * scale,
        grad_norm: clip.norm,
        clip_scale: clip.scale,
    })
}

/// Shuffles with a per-epoch seed and runs every batch. Returns the mean
/// batch loss.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimState,
    data: &[TrainExample],
    cfg: &TrainConfig,
    epoch: usize,
    mut on_step: impl FnMut(&StepLog),
) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
        let log = train_step(model, opt, &batch, cfg, epoch)?;
        on_step(&log);
        losses.push(log.loss);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Dropout-free predictions scored against every gold answer.
pub fn evaluate(model: &Model, data: &[TrainExample]) -> Result<(EvalResult, BTreeMap<String, String>)> {
    let mut scores = Vec::with_capacity(data.len());
    let mut preds = BTreeMap::new();
    for ex in data {
        let span = model.best_span(&ex.feats, None)?;
        let pred = span_to_prediction(&ex.context, &ex.feats, span);
        scores.push(f1_em(&pred.text, &ex.golds));
        preds.insert(ex.id.clone(), pred.text);
    }
    Ok((EvalResult::from_scores(&scores), preds))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    pub reached_target: bool,
}

pub const LOG_HEADER: &str = "kind\tepoch\tstep\tloss\tgrad_norm\tclip_scale\tdev_f1\tdev_em";

/// Trains for up to `cfg.epochs`, evaluating on `dev` after each epoch.
/// When `log` is given, writes tab-separated step and epoch records.
pub fn train(
    model: &mut Model,
    train_data: &[TrainExample],
    dev: &[TrainExample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = OptimState::new(&model.store, cfg.adam);
    let mut report = TrainReport {
        epochs: Vec::new(),
        losses: Vec::new(),
        reached_target: false,
    };
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    for epoch in 1..=cfg.epochs {
        let mut io_err = None;
        let mean_loss = train_epoch(model, &mut opt, train_data, cfg, epoch, |s| {
            report.losses.push(s.loss);
            if let Some(w) = log.as_deref_mut() {
                if let Err(e) = writeln!(
                    w,
                    "step\t{}\t{}\t{}\t{}\t{}\t\t",
                    s.epoch, s.step, s.loss, s.grad_norm, s.clip_scale
                ) {
                    io_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let dev_result = if dev.is_empty() {
            EvalResult::default()
        } else {
            evaluate(model, dev)?.0
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "epoch\t{epoch}\t{}\t{mean_loss}\t\t\t{}\t{}",
                opt.step, dev_result.f1, dev_result.em
            )?;
        }
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            dev: dev_result,
        });
        if cfg.target_em.is_some_and(|t| !dev.is_empty() && dev_result.em >= t) {
            report.reached_target = true;
            break;
        }
    }
    Ok(report)
}

/// Settings for the synthetic convergence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSetup {
    pub n_train: usize,
    pub n_dev: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub data_seed: u64,
}

impl Default for SynthSetup {
    fn default() -> Self {
        SynthSetup {
            n_train: 1800,
            n_dev: 200,
            hidden: 32,
            embed_dim: 300,
            data_seed: 17,
        }
    }
}

/// Builds a model and featurized train/dev splits for the synthetic task.
pub fn synth_setup(
    setup: &SynthSetup,
    model_seed: u64,
) -> Result<(Model, Vec<TrainExample>, Vec<TrainExample>)> {
    let all = synth_task(setup.n_train + setup.n_dev, setup.data_seed);
    let (train_raw, dev_raw) = all.split_at(setup.n_train);
    let source = EmbeddingSource::Hashed { dim: setup.embed_dim };
    let vocab = build_vocab(train_raw, dev_raw, &source);
    let config = ModelConfig {
        seed: model_seed,
        ..crate::model::small_config(setup.hidden, setup.embed_dim)
    };
    let model = Model::new(config, vocab, &source)?;
    let (train_data, w1) = prepare(&model, train_raw);
    let (dev_data, w2) = prepare(&model, dev_raw);
    if !w1.is_empty() || !w2.is_empty() {
        return Err(Error::Data(format!(
            "synthetic data failed to align: {:?}",
            w1.iter().chain(&w2).next()
        )));
    }
    Ok((model, train_data, dev_data))
}
