//! Command-line entry point.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fastfusion::data::{load_squad_json, write_predictions, QaExample};
use fastfusion::features::vocab::load_embedding_file;
use fastfusion::features::{tokenize, EmbeddingSource};
use fastfusion::metrics::{f1_em, EvalResult};
use fastfusion::model::{Component, EncoderKind, Model, ModelConfig};
use fastfusion::training::{build_vocab, prepare, synth_task, train, AdamConfig, TrainConfig};

use crate::bench::{bench_block, format_table, Block};
use crate::profile::{
    format_profile, latency_1example, profile_components, random_model, random_pair,
    MIN_LATENCY_EXAMPLES,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] fastfusion::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fastfusion", about = "Extractive question answering with SRU encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time the forward pass of one recurrent block.
    Bench(BenchArgs),
    /// Time each stage of the model on one example.
    Profile(ProfileArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a SQuAD-format file.
    Eval(EvalArgs),
    /// Answer one question.
    Predict(PredictArgs),
    /// Single-example latency distribution.
    Latency(LatencyArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub block: Block,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Input and hidden size.
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 30)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print an aligned text table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Model to profile; a randomly initialized one is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub context_len: usize,
    #[arg(long, default_value_t = 10)]
    pub question_len: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Hidden size of the random model.
    #[arg(long, default_value_t = 125)]
    pub hidden: usize,
    /// Replace one stage's outputs with zeros.
    #[arg(long)]
    pub skip: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// SQuAD-format training file.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many generated examples instead of a file.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// SQuAD-format dev file; synthetic runs hold out 10% when absent.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 125)]
    pub hidden: usize,
    /// Text embedding file (`token v1 ... vd` per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Stop early once dev exact match reaches this fraction.
    #[arg(long)]
    pub target_em: Option<f64>,
    /// Tab-separated training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Use BiLSTM blocks instead of BiSRU.
    #[arg(long)]
    pub lstm: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub question: String,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| fastfusion::Error::Data(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => writeln!(out, "{json}")?,
    }
    Ok(())
}

fn load_examples(path: &Path, err: &mut dyn Write) -> CliResult<Vec<QaExample>> {
    let (examples, warnings) = load_squad_json(path)?;
    for w in &warnings {
        writeln!(err, "warning: {w}")?;
    }
    Ok(examples)
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.trials < 5 || a.warmup < 1 || a.seq_len < 1 || a.hidden < 1 {
        return Err(CliError::Usage(
            "--trials must be at least 5; --warmup, --seq-len and --hidden at least 1".into(),
        ));
    }
    let report = bench_block(a.block, a.seq_len, a.hidden, a.trials, a.warmup, a.seed)?;
    if a.table {
        write!(out, "{}", format_table(std::slice::from_ref(&report)))?;
        if let Some(p) = &a.out {
            emit(&report, Some(p), out)?;
        }
        Ok(())
    } else {
        emit(&report, a.out.as_deref(), out)
    }
}

fn run_profile(a: &ProfileArgs, out: &mut dyn Write) -> CliResult<()> {
    let skip = match &a.skip {
        Some(s) => {
            let c = Component::parse(s)
                .filter(|c| c.skippable())
                .ok_or_else(|| CliError::Usage(format!("cannot skip component {s:?}")))?;
            Some(c)
        }
        None => None,
    };
    if a.context_len == 0 || a.question_len == 0 || a.trials == 0 {
        return Err(CliError::Usage(
            "--context-len, --question-len and --trials must be positive".into(),
        ));
    }
    let model = match &a.checkpoint {
        Some(p) => Model::load(p)?,
        None => random_model(ModelConfig {
            seed: a.seed,
            ..ModelConfig::with_hidden(a.hidden)
        })?,
    };
    let (context, question) = random_pair(a.context_len, a.question_len, a.seed);
    let profile = profile_components(&model, &context, &question, a.trials, skip)?;
    if a.table {
        write!(out, "{}", format_profile(&profile))?;
        if let Some(p) = &a.out {
            emit(&profile, Some(p), out)?;
        }
        Ok(())
    } else {
        emit(&profile, a.out.as_deref(), out)
    }
}

fn embedding_source(a: &TrainArgs, texts: &[&QaExample]) -> CliResult<EmbeddingSource> {
    match &a.embeddings {
        Some(path) => {
            let mut keep = HashSet::new();
            for ex in texts {
                for t in tokenize(&ex.context).into_iter().chain(tokenize(&ex.question)) {
                    keep.insert(t.text.to_lowercase());
                    keep.insert(t.text);
                }
            }
            Ok(load_embedding_file(path, a.embed_dim, Some(&keep))?)
        }
        None => Ok(EmbeddingSource::Hashed { dim: a.embed_dim }),
    }
}

fn run_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let (train_raw, dev_raw) = match (&a.data, a.synthetic) {
        (Some(path), None) => {
            let train = load_examples(path, err)?;
            let dev = match &a.dev {
                Some(d) => load_examples(d, err)?,
                None => Vec::new(),
            };
            (train, dev)
        }
        (None, Some(n)) if n >= 2 => {
            let mut all = synth_task(n, a.seed);
            let dev = match &a.dev {
                Some(d) => load_examples(d, err)?,
                None => all.split_off(n - (n / 10).max(1)),
            };
            (all, dev)
        }
        (None, Some(_)) => return Err(CliError::Usage("--synthetic needs at least 2 examples".into())),
        _ => return Err(CliError::Usage("one of --data or --synthetic is required".into())),
    };
    if train_raw.is_empty() {
        return Err(fastfusion::Error::Data("training set is empty".into()).into());
    }
    let all: Vec<&QaExample> = train_raw.iter().chain(&dev_raw).collect();
    let source = embedding_source(a, &all)?;
    let vocab = build_vocab(&train_raw, &dev_raw, &source);
    let config = ModelConfig {
        hidden: a.hidden,
        attn_dim: 2 * a.hidden,
        embed_dim: a.embed_dim,
        seed: a.seed,
        encoder: if a.lstm { EncoderKind::Lstm } else { EncoderKind::Sru },
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, vocab, &source)?;
    let (train_data, w1) = prepare(&model, &train_raw);
    let (dev_data, w2) = prepare(&model, &dev_raw);
    for w in w1.iter().chain(&w2) {
        writeln!(err, "warning: {w}")?;
    }
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        target_em: a.target_em,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = match &a.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            let r = train(&mut model, &train_data, &dev_data, &cfg, Some(&mut w))?;
            w.flush()?;
            r
        }
        None => train(&mut model, &train_data, &dev_data, &cfg, None)?,
    };
    model.save(&a.out)?;
    emit(&report.epochs, None, out)
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let model = Model::load(&a.checkpoint)?;
    let examples = load_examples(&a.data, err)?;
    let mut preds = BTreeMap::new();
    let mut scores = Vec::with_capacity(examples.len());
    for ex in &examples {
        let p = model.predict(&ex.context, &ex.question, None)?;
        let golds: Vec<&str> = ex.answers.iter().map(|a| a.text.as_str()).collect();
        if !golds.is_empty() {
            scores.push(f1_em(&p.text, &golds));
        }
        preds.insert(ex.id.clone(), p.text);
    }
    if let Some(path) = &a.predictions_out {
        write_predictions(path, &preds)?;
    }
    let result: EvalResult = EvalResult::from_scores(&scores);
    emit(&result, None, out)
}

fn run_predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = Model::load(&a.checkpoint)?;
    let p = model.predict(&a.context, &a.question, None)?;
    emit(&p, None, out)
}

fn run_latency(a: &LatencyArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if a.n < MIN_LATENCY_EXAMPLES {
        return Err(CliError::Usage(format!("--n must be at least {MIN_LATENCY_EXAMPLES}")));
    }
    let model = Model::load(&a.checkpoint)?;
    let examples = load_examples(&a.data, err)?;
    if examples.is_empty() {
        return Err(CliError::Usage("the data file has no examples".into()));
    }
    let report = latency_1example(&model, &examples, a.n)?;
    emit(&report, None, out)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Bench(a) => run_bench(a, out),
        Command::Profile(a) => run_profile(a, out),
        Command::Train(a) => run_train(a, out, err),
        Command::Eval(a) => run_eval(a, out, err),
        Command::Predict(a) => run_predict(a, out),
        Command::Latency(a) => run_latency(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
