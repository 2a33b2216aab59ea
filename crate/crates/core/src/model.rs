//! The full reader: features, recurrent blocks, fully-aware attention,
//! self-attention, and the start/end answer heads.
//!
//! ```text
//! C^ℓ = enc(C_in)             Q^ℓ = enc(Q_in)
//! C^h = enc(C^ℓ)              Q^h = enc(Q^ℓ)
//! Q^u = enc([Q^ℓ; Q^h])
//! C^His = [C^GloVe; C^ℓ; C^h]  Q^His = [Q^GloVe; Q^ℓ; Q^h]
//! Ĉ^k = attn_k(C^His, Q^His, Q^k)       k ∈ {ℓ, h, u}
//! C^v = enc([C^ℓ; C^h; Ĉ^ℓ; Ĉ^h; Ĉ^u])
//! C^His2 = [C^GloVe; C^ℓ; C^h; Ĉ^ℓ; Ĉ^h; Ĉ^u; C^v]
//! Ĉ^v = self_attn(C^His2, C^His2, C^v)
//! C^u = enc([C^v; Ĉ^v])
//! q = summary(Q^u)
//! s = softmax(q W_1 C^uᵀ), z = s C^u, q̂ = GRUCell(z, q), e = softmax(q̂ W_e C^uᵀ)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attn, question_summary, AttnParams, SummaryParams};
use crate::error::{Error, Result};
use crate::features::{
    build_inputs, featurize, tags, ContextTags, EmbeddingSource, FeatureDims, FeatureParams,
    TokenFeatures, Vocabulary,
};
use crate::recurrent::{gru_cell, BiLstmParams, GruParams, SeqEncoder, SeqMask, StackedBiSru};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Sru,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size of each recurrent direction; block outputs are twice this.
    pub hidden: usize,
    pub embed_dim: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    pub n_pos: usize,
    pub n_ner: usize,
    /// Width of the shared attention projection.
    pub attn_dim: usize,
    /// Dropout on word vectors and attention inputs.
    pub dropout_input: f64,
    /// Dropout on recurrent-layer inputs.
    pub dropout_rnn: f64,
    pub max_span_len: usize,
    pub layers_per_block: usize,
    pub encoder: EncoderKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dims = FeatureDims::default();
        ModelConfig {
            hidden: 125,
            embed_dim: dims.embed,
            pos_dim: dims.pos,
            ner_dim: dims.ner,
            n_pos: dims.n_pos,
            n_ner: dims.n_ner,
            attn_dim: 250,
            dropout_input: 0.4,
            dropout_rnn: 0.2,
            max_span_len: 15,
            layers_per_block: 2,
            encoder: EncoderKind::Sru,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Same shape as the default but with a different hidden size; the
    /// attention width follows the block width.
    pub fn with_hidden(hidden: usize) -> Self {
        ModelConfig {
            hidden,
            attn_dim: 2 * hidden,
            ..Self::default()
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            embed: self.embed_dim,
            pos: self.pos_dim,
            ner: self.ner_dim,
            n_pos: self.n_pos,
            n_ner: self.n_ner,
        }
    }

    pub fn block_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("pos_dim", self.pos_dim),
            ("ner_dim", self.ner_dim),
            ("n_pos", self.n_pos),
            ("n_ner", self.n_ner),
            ("attn_dim", self.attn_dim),
            ("max_span_len", self.max_span_len),
            ("layers_per_block", self.layers_per_block),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, p) in [("dropout_input", self.dropout_input), ("dropout_rnn", self.dropout_rnn)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    /// Widths implied by the configuration.
    pub fn expected_widths(&self) -> WidthAudit {
        let w = self.block_width();
        let e = self.embed_dim;
        WidthAudit {
            c_in: self.feature_dims().context_width(),
            q_in: e,
            block_out: w,
            q_understand_in: 2 * w,
            c_his: e + 2 * w,
            fusion_in: 5 * w,
            c_his2: e + 6 * w,
            final_in: 2 * w,
        }
    }
}

/// Input and output widths of every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WidthAudit {
    pub c_in: usize,
    pub q_in: usize,
    pub block_out: usize,
    pub q_understand_in: usize,
    pub c_his: usize,
    pub fusion_in: usize,
    pub c_his2: usize,
    pub final_in: usize,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub features: FeatureParams,
    pub low_c: SeqEncoder,
    pub low_q: SeqEncoder,
    pub high_c: SeqEncoder,
    pub high_q: SeqEncoder,
    pub q_understand: SeqEncoder,
    pub c_fuse: SeqEncoder,
    pub c_final: SeqEncoder,
    pub attn_low: AttnParams,
    pub attn_high: AttnParams,
    pub attn_u: AttnParams,
    pub self_attn: AttnParams,
    pub summary: SummaryParams,
    pub w_start: ParamId,
    pub w_end: ParamId,
    pub gru: GruParams,
}

impl ModelParams {
    /// Widths read back from the constructed parameters.
    pub fn audit(&self) -> WidthAudit {
        WidthAudit {
            c_in: self.low_c.input_dim(),
            q_in: self.low_q.input_dim(),
            block_out: self.c_final.output_dim(),
            q_understand_in: self.q_understand.input_dim(),
            c_his: self.attn_low.d_qk,
            fusion_in: self.c_fuse.input_dim(),
            c_his2: self.self_attn.d_qk,
            final_in: self.c_final.input_dim(),
        }
    }

    fn encoders(&self) -> [(&'static str, &SeqEncoder); 7] {
        [
            ("low_c", &self.low_c),
            ("low_q", &self.low_q),
            ("high_c", &self.high_c),
            ("high_q", &self.high_q),
            ("q_understand", &self.q_understand),
            ("c_fuse", &self.c_fuse),
            ("c_final", &self.c_final),
        ]
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Featurize,
    LowEncode,
    HighEncode,
    QuestionUnderstanding,
    QcAttention,
    SelfAttention,
    Answer,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Featurize,
        Component::LowEncode,
        Component::HighEncode,
        Component::QuestionUnderstanding,
        Component::QcAttention,
        Component::SelfAttention,
        Component::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Featurize => "featurize",
            Component::LowEncode => "low_encode",
            Component::HighEncode => "high_encode",
            Component::QuestionUnderstanding => "question_understanding",
            Component::QcAttention => "qc_attention",
            Component::SelfAttention => "self_attention",
            Component::Answer => "answer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Stages whose outputs can be replaced by zeros for ablation timing.
    pub fn skippable(self) -> bool {
        !matches!(self, Component::Featurize | Component::Answer)
    }
}

/// Per-stage wall-clock accumulator. Each stage runs to completion before
/// the next starts, so stage times add up to the pass time.
#[derive(Debug, Clone, Default)]
pub struct StageClock {
    totals: [Duration; 7],
    skip: Option<Component>,
}

impl StageClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clock that replaces `component`'s outputs with zeros.
    pub fn skipping(component: Component) -> Result<Self> {
        if !component.skippable() {
            return Err(Error::Contract(format!(
                "component {} cannot be skipped",
                component.name()
            )));
        }
        Ok(StageClock {
            skip: Some(component),
            ..Self::default()
        })
    }

    pub fn total(&self, c: Component) -> Duration {
        self.totals[c as usize]
    }

    pub fn totals(&self) -> impl Iterator<Item = (Component, Duration)> + '_ {
        Component::ALL.into_iter().map(|c| (c, self.totals[c as usize]))
    }

    pub fn sum(&self) -> Duration {
        self.totals.iter().sum()
    }

    pub fn reset(&mut self) {
        self.totals = [Duration::ZERO; 7];
    }
}

fn timed<T>(
    clock: &mut Option<&mut StageClock>,
    c: Component,
    f: impl FnOnce(bool) -> Result<T>,
) -> Result<T> {
    match clock {
        Some(clk) => {
            let skip = clk.skip == Some(c);
            let t0 = Instant::now();
            let out = f(skip);
            clk.totals[c as usize] += t0.elapsed();
            out
        }
        None => f(false),
    }
}

/// Start and end distributions as `1×n` rows.
#[derive(Debug, Clone)]
pub struct Scores {
    pub start: Var,
    pub end: Var,
    pub c_mask: SeqMask,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub c_u: Var,
    pub q_u: Var,
    pub q: Var,
    pub c_mask: SeqMask,
    pub q_mask: SeqMask,
}

/// Best span under the length limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Maximizes `s_i · e_j` over `i ≤ j < i + max_len`, `j < valid_len`.
/// Ties resolve to the smallest `i`, then the smallest `j`.
pub fn span_search(s: &[f64], e: &[f64], max_len: usize, valid_len: usize) -> Result<Span> {
    if s.len() != e.len() {
        return Err(Error::dim("span_search", &[s.len()], &[e.len()]));
    }
    let n = valid_len.min(s.len());
    if n == 0 {
        return Err(Error::Degenerate("span search over an empty context".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_span_len must be positive".into()));
    }
    let mut best = Span {
        start: 0,
        end: 0,
        score: f64::NEG_INFINITY,
    };
    for i in 0..n {
        for j in i..n.min(i + max_len) {
            let score = s[i] * e[j];
            if score > best.score {
                best = Span { start: i, end: j, score };
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    /// Character (code point) offsets into the context, end exclusive.
    pub char_span: (usize, usize),
    /// Byte offsets into the context, end exclusive.
    pub byte_span: (usize, usize),
    pub text: String,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub params: ModelParams,
}

fn encoder(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    name: &str,
    d_in: usize,
    rng: &mut ChaCha8Rng,
) -> SeqEncoder {
    match cfg.encoder {
        EncoderKind::Sru => SeqEncoder::Sru(StackedBiSru::init(
            store,
            name,
            d_in,
            cfg.hidden,
            cfg.layers_per_block,
            cfg.dropout_rnn,
            rng,
        )),
        EncoderKind::Lstm => SeqEncoder::Lstm {
            layers: (0..cfg.layers_per_block)
                .map(|i| {
                    let input = if i == 0 { d_in } else { 2 * cfg.hidden };
                    BiLstmParams::init(store, &format!("{name}.{i}"), input, cfg.hidden, rng)
                })
                .collect(),
            dropout: cfg.dropout_rnn,
        },
    }
}

impl Model {
    /// Randomly initialized model; word vectors come from `source`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, source: &EmbeddingSource) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let dims = config.feature_dims();
        let w = config.block_width();
        let features = FeatureParams::init(
            &mut store,
            &vocab,
            source,
            dims,
            config.attn_dim,
            config.dropout_input,
            &mut rng,
        )?;
        let exp = config.expected_widths();
        let cfg = &config;
        let low_c = encoder(&mut store, cfg, "low_c", exp.c_in, &mut rng);
        let low_q = encoder(&mut store, cfg, "low_q", exp.q_in, &mut rng);
        let high_c = encoder(&mut store, cfg, "high_c", w, &mut rng);
        let high_q = encoder(&mut store, cfg, "high_q", w, &mut rng);
        let q_understand = encoder(&mut store, cfg, "q_understand", exp.q_understand_in, &mut rng);
        let mut fa = |name: &str, d_qk: usize, rng: &mut ChaCha8Rng| {
            AttnParams::init(&mut store, name, d_qk, cfg.attn_dim, cfg.dropout_input, rng)
        };
        let attn_low = fa("attn_low", exp.c_his, &mut rng);
        let attn_high = fa("attn_high", exp.c_his, &mut rng);
        let attn_u = fa("attn_u", exp.c_his, &mut rng);
        let self_attn = fa("self_attn", exp.c_his2, &mut rng);
        let c_fuse = encoder(&mut store, cfg, "c_fuse", exp.fusion_in, &mut rng);
        let c_final = encoder(&mut store, cfg, "c_final", exp.final_in, &mut rng);
        let summary = SummaryParams::init(&mut store, "summary", w, &mut rng);
        let bound = (1.0 / w as f64).sqrt();
        let w_start = store.add(
            "answer.w_start",
            Tensor::uniform(&[w, w], bound, &mut rng).with_grad(true),
        );
        let w_end = store.add(
            "answer.w_end",
            Tensor::uniform(&[w, w], bound, &mut rng).with_grad(true),
        );
        let gru = GruParams::init(&mut store, "answer.gru", w, w, &mut rng);
        let params = ModelParams {
            features,
            low_c,
            low_q,
            high_c,
            high_q,
            q_understand,
            c_fuse,
            c_final,
            attn_low,
            attn_high,
            attn_u,
            self_attn,
            summary,
            w_start,
            w_end,
            gru,
        };
        let model = Model {
            config,
            vocab,
            store,
            params,
        };
        model.check_widths()?;
        Ok(model)
    }

    /// Verifies that every block's input width matches what its producer
    /// emits. Runs at construction.
    pub fn check_widths(&self) -> Result<WidthAudit> {
        let expected = self.config.expected_widths();
        let actual = self.params.audit();
        if expected != actual {
            return Err(Error::Config(format!(
                "width chain mismatch: expected {expected:?}, built {actual:?}"
            )));
        }
        let w = self.config.block_width();
        for (name, enc) in self.params.encoders() {
            enc.validate()?;
            if enc.output_dim() != w {
                return Err(Error::Config(format!(
                    "{name} emits width {}, expected {w}",
                    enc.output_dim()
                )));
            }
        }
        if self.params.summary.d != w || self.params.gru.d_in != w || self.params.gru.d_h != w {
            return Err(Error::Config("answer layer widths do not match block width".into()));
        }
        Ok(actual)
    }

    pub fn featurize(&self, context: &str, question: &str, tags: Option<&ContextTags>) -> Result<TokenFeatures> {
        featurize(context, question, &self.vocab, tags)
    }

    /// Runs every stage up to the encoded context, question and summary.
    pub fn encode(
        &self,
        tape: &Tape<'_>,
        feats: &TokenFeatures,
        mut clock: Option<&mut StageClock>,
    ) -> Result<Encoded> {
        let p = &self.params;
        let w = self.config.block_width();
        let inputs = timed(&mut clock, Component::Featurize, |_| {
            build_inputs(tape, &p.features, &self.vocab, feats, None)
        })?;
        let (n, m) = (tape.rows(inputs.c_in), tape.rows(inputs.q_in));
        let (cm, qm) = (&inputs.c_mask, &inputs.q_mask);
        let zeros = |rows: usize, cols: usize| tape.zeros(&[rows, cols]);

        let (c_low, q_low) = timed(&mut clock, Component::LowEncode, |skip| {
            if skip {
                return Ok((zeros(n, w), zeros(m, w)));
            }
            Ok((
                p.low_c.forward(tape, inputs.c_in, cm)?,
                p.low_q.forward(tape, inputs.q_in, qm)?,
            ))
        })?;
        let (c_high, q_high) = timed(&mut clock, Component::HighEncode, |skip| {
            if skip {
                return Ok((zeros(n, w), zeros(m, w)));
            }
            Ok((
                p.high_c.forward(tape, c_low, cm)?,
                p.high_q.forward(tape, q_low, qm)?,
            ))
        })?;
        let q_u = timed(&mut clock, Component::QuestionUnderstanding, |skip| {
            if skip {
                return Ok(zeros(m, w));
            }
            let x = tape.concat_cols(&[q_low, q_high])?;
            p.q_understand.forward(tape, x, qm)
        })?;
        let (a_low, a_high, a_u, c_v) = timed(&mut clock, Component::QcAttention, |skip| {
            if skip {
                return Ok((zeros(n, w), zeros(n, w), zeros(n, w), zeros(n, w)));
            }
            let c_his = tape.concat_cols(&[inputs.c_glove, c_low, c_high])?;
            let q_his = tape.concat_cols(&[inputs.q_glove, q_low, q_high])?;
            let a_low = attn(tape, &p.attn_low, c_his, q_his, q_low, qm)?;
            let a_high = attn(tape, &p.attn_high, c_his, q_his, q_high, qm)?;
            let a_u = attn(tape, &p.attn_u, c_his, q_his, q_u, qm)?;
            let x = tape.concat_cols(&[c_low, c_high, a_low, a_high, a_u])?;
            Ok((a_low, a_high, a_u, p.c_fuse.forward(tape, x, cm)?))
        })?;
        let c_u = timed(&mut clock, Component::SelfAttention, |skip| {
            if skip {
                return Ok(zeros(n, w));
            }
            let c_his2 =
                tape.concat_cols(&[inputs.c_glove, c_low, c_high, a_low, a_high, a_u, c_v])?;
            let a_v = attn(tape, &p.self_attn, c_his2, c_his2, c_v, cm)?;
            let x = tape.concat_cols(&[c_v, a_v])?;
            p.c_final.forward(tape, x, cm)
        })?;
        let q = timed(&mut clock, Component::Answer, |_| {
            question_summary(tape, &p.summary, q_u, qm)
        })?;
        Ok(Encoded {
            c_u,
            q_u,
            q,
            c_mask: inputs.c_mask,
            q_mask: inputs.q_mask,
        })
    }

    /// Bilinear start distribution, GRU-refined question vector, bilinear
    /// end distribution.
    pub fn answer_scores(&self, tape: &Tape<'_>, enc: &Encoded) -> Result<Scores> {
        let p = &self.params;
        let n = tape.rows(enc.c_u);
        if n == 0 {
            return Err(Error::Degenerate("empty context".into()));
        }
        let c_t = tape.transpose(enc.c_u)?;
        let mask = enc.c_mask.as_slice();
        let start_logits = tape.matmul(tape.matmul(enc.q, tape.param(p.w_start)?)?, c_t)?;
        let start = tape.softmax_rows(start_logits, Some(mask))?;
        let z = tape.matmul(start, enc.c_u)?;
        let q_hat = gru_cell(tape, &p.gru, z, enc.q)?;
        let end_logits = tape.matmul(tape.matmul(q_hat, tape.param(p.w_end)?)?, c_t)?;
        let end = tape.softmax_rows(end_logits, Some(mask))?;
        Ok(Scores {
            start,
            end,
            c_mask: enc.c_mask.clone(),
        })
    }

    pub fn forward(
        &self,
        tape: &Tape<'_>,
        feats: &TokenFeatures,
        mut clock: Option<&mut StageClock>,
    ) -> Result<Scores> {
        let enc = self.encode(tape, feats, clock.as_deref_mut())?;
        timed(&mut clock, Component::Answer, |_| self.answer_scores(tape, &enc))
    }

    /// Best span for already featurized input, without dropout.
    pub fn best_span(&self, feats: &TokenFeatures, mut clock: Option<&mut StageClock>) -> Result<Span> {
        let tape = Tape::with_params(&self.store);
        let scores = self.forward(&tape, feats, clock.as_deref_mut())?;
        timed(&mut clock, Component::Answer, |_| {
            span_search(
                &tape.data(scores.start),
                &tape.data(scores.end),
                self.config.max_span_len,
                scores.c_mask.valid_len()?,
            )
        })
    }

    pub fn predict(&self, context: &str, question: &str, tags: Option<&ContextTags>) -> Result<Prediction> {
        self.predict_timed(context, question, tags, None)
    }

    /// `predict` with per-stage timing; text featurization counts toward
    /// the featurize stage.
    pub fn predict_timed(
        &self,
        context: &str,
        question: &str,
        tags: Option<&ContextTags>,
        mut clock: Option<&mut StageClock>,
    ) -> Result<Prediction> {
        let feats = timed(&mut clock, Component::Featurize, |_| {
            self.featurize(context, question, tags)
        })?;
        let span = self.best_span(&feats, clock)?;
        Ok(span_to_prediction(context, &feats, span))
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable_scalars()
    }
}

pub fn span_to_prediction(context: &str, feats: &TokenFeatures, span: Span) -> Prediction {
    let b0 = feats.context_tokens[span.start].start;
    let b1 = feats.context_tokens[span.end].end;
    let c0 = context[..b0].chars().count();
    let c1 = c0 + context[b0..b1].chars().count();
    Prediction {
        start: span.start,
        end: span.end,
        score: span.score,
        char_span: (c0, c1),
        byte_span: (b0, b1),
        text: context[b0..b1].to_string(),
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"FFNCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Model {
    /// Layout: magic, `u32` version, `u64` header length, JSON header with
    /// config and vocabulary, `u64` tensor count, then per tensor: `u32` name
    /// length, name, `u8` trainable flag, `u32` rank, `u64` dims, and
    /// row-major little-endian `f64` values. Integers are little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        })
        .map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.store.len() as u64).to_le_bytes())?;
        for (_, name, t) in self.store.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[u8::from(t.requires_grad)])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("file too short for a checkpoint"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
        let source = EmbeddingSource::Zeros {
            dim: header.config.embed_dim,
        };
        let mut model = Model::new(header.config, header.vocab, &source)?;

        let count = read_u64(&mut r)? as usize;
        if count != model.store.len() {
            return Err(bad(format!(
                "checkpoint has {count} tensors, model expects {}",
                model.store.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
            let t = model.store.get_mut(id);
            if t.shape() != dims.as_slice() {
                return Err(bad(format!(
                    "tensor {name} has shape {dims:?}, model expects {:?}",
                    t.shape()
                )));
            }
            if t.requires_grad != (flag[0] != 0) {
                return Err(bad(format!("tensor {name} trainable flag mismatch")));
            }
            let mut bytes = vec![0u8; t.len() * 8];
            r.read_exact(&mut bytes)?;
            for (x, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("missing tensor {}", model.store.name(ParamId(i)))));
        }
        Ok(model)
    }
}

/// Configuration used by tests and the synthetic task: small widths, tag
/// tables sized to the full inventories.
pub fn small_config(hidden: usize, embed_dim: usize) -> ModelConfig {
    ModelConfig {
        hidden,
        embed_dim,
        pos_dim: 12,
        ner_dim: 8,
        n_pos: tags::POS_TAGS.len(),
        n_ner: tags::NER_TAGS.len(),
        attn_dim: 2 * hidden,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::Rng;

    fn vocab_for(texts: &[&str]) -> Vocabulary {
        let mut counts = BTreeMap::new();
        for t in texts {
            for tok in crate::features::tokenize(t) {
                *counts.entry(tok.text).or_insert(0) += 1;
            }
        }
        Vocabulary::build(&counts, [], |_| true, 1000)
    }

    fn tiny_model(hidden: usize, embed: usize, seed: u64) -> Model {
        let vocab = vocab_for(&["the cat sat on the mat", "where did the cat sit"]);
        let cfg = ModelConfig {
            seed,
            ..small_config(hidden, embed)
        };
        Model::new(cfg, vocab, &EmbeddingSource::Hashed { dim: embed }).unwrap()
    }

    fn brute_force(s: &[f64], e: &[f64], max_len: usize) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if j >= i && j - i < max_len && s[i] * e[j] > best.2 {
                    best = (i, j, s[i] * e[j]);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn default_width_audit() {
        let vocab = vocab_for(&["a b c"]);
        let model = Model::new(ModelConfig::default(), vocab, &EmbeddingSource::Hashed { dim: 300 }).unwrap();
        let a = model.check_widths().unwrap();
        assert_eq!(
            a,
            WidthAudit {
                c_in: 624,
                q_in: 300,
                block_out: 250,
                q_understand_in: 500,
                c_his: 800,
                fusion_in: 1250,
                c_his2: 1800,
                final_in: 500,
            }
        );
    }

    #[test]
    fn rejects_bad_config() {
        let vocab = vocab_for(&["a"]);
        let cfg = ModelConfig { max_span_len: 0, ..small_config(4, 4) };
        assert!(matches!(
            Model::new(cfg, vocab.clone(), &EmbeddingSource::Hashed { dim: 4 }),
            Err(Error::Config(_))
        ));
        // Embedding width disagrees with the configuration.
        assert!(Model::new(small_config(4, 4), vocab, &EmbeddingSource::Hashed { dim: 5 }).is_err());
    }

    #[test]
    fn span_search_examples() {
        let sp = span_search(&[1.0], &[1.0], 15, 1).unwrap();
        assert_eq!((sp.start, sp.end, sp.score), (0, 0, 1.0));

        let n = 40;
        let mut s = vec![0.001; n];
        let mut e = vec![0.001; n];
        s[2] = 0.9;
        e[30] = 0.9;
        let sp = span_search(&s, &e, 15, n).unwrap();
        assert_ne!((sp.start, sp.end), (2, 30));
        assert_eq!((sp.start, sp.end), brute_force(&s, &e, 15));

        // Equal scores everywhere: the first span wins.
        let sp = span_search(&[0.5, 0.5], &[0.5, 0.5], 15, 2).unwrap();
        assert_eq!((sp.start, sp.end), (0, 0));

        assert!(matches!(span_search(&[], &[], 15, 0), Err(Error::Degenerate(_))));
        // Masked tail is never chosen.
        let sp = span_search(&[0.1, 0.1, 0.8], &[0.1, 0.1, 0.8], 15, 2).unwrap();
        assert!(sp.end < 2);
    }

    proptest! {
        #[test]
        fn span_search_matches_brute_force(
            n in 1usize..40,
            seed in any::<u64>(),
            coarse in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse values create many exact ties.
            let mut draw = || if coarse { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen::<f64>() };
            let s: Vec<f64> = (0..n).map(|_| draw()).collect();
            let e: Vec<f64> = (0..n).map(|_| draw()).collect();
            let sp = span_search(&s, &e, 15, n).unwrap();
            prop_assert_eq!((sp.start, sp.end), brute_force(&s, &e, 15));
            prop_assert!(sp.end - sp.start < 15);
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let model = tiny_model(4, 6, 1);
        let feats = model.featurize("the cat sat on the mat", "where did the cat sit", None).unwrap();
        let tape = Tape::with_params(&model.store);
        let sc = model.forward(&tape, &feats, None).unwrap();
        for v in [sc.start, sc.end] {
            let d = tape.data(v);
            assert_eq!(d.len(), feats.context_len());
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_inputs() {
        let model = tiny_model(4, 6, 2);
        let feats = model.featurize("cat", "cat", None).unwrap();
        let tape = Tape::with_params(&model.store);
        let sc = model.forward(&tape, &feats, None).unwrap();
        assert_eq!(tape.data(sc.start), vec![1.0]);
        assert_eq!(tape.data(sc.end), vec![1.0]);
        let p = model.predict("cat", "cat", None).unwrap();
        assert_eq!((p.start, p.end, p.text.as_str()), (0, 0, "cat"));
    }

    #[test]
    fn zero_start_weights_give_uniform_start() {
        let mut model = tiny_model(4, 6, 3);
        let id = model.params.w_start;
        model.store.get_mut(id).data_mut().fill(0.0);
        let feats = model.featurize("the cat sat on", "cat", None).unwrap();
        let tape = Tape::with_params(&model.store);
        let sc = model.forward(&tape, &feats, None).unwrap();
        for x in tape.data(sc.start) {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_a_verbatim_substring() {
        let model = tiny_model(4, 6, 4);
        let ctx = "Le café, très « chaud » — sat on the mat.";
        let a = model.predict(ctx, "where is the café", None).unwrap();
        let b = model.predict(ctx, "where is the café", None).unwrap();
        assert_eq!(a, b);
        assert_eq!(&ctx[a.byte_span.0..a.byte_span.1], a.text);
        let chars: String = ctx.chars().skip(a.char_span.0).take(a.char_span.1 - a.char_span.0).collect();
        assert_eq!(chars, a.text);
        assert!(a.score > 0.0 && a.score <= 1.0);
        assert!(matches!(model.predict("", "q", None), Err(Error::Ingestion(_))));
    }

    #[test]
    fn stage_clock_covers_all_components() {
        let model = tiny_model(4, 6, 5);
        let mut clock = StageClock::new();
        model.predict_timed("the cat sat on the mat", "cat", None, Some(&mut clock)).unwrap();
        for (c, d) in clock.totals() {
            assert!(d > Duration::ZERO, "{} not timed", c.name());
        }
        assert!(StageClock::skipping(Component::Answer).is_err());
        let mut skip = StageClock::skipping(Component::QcAttention).unwrap();
        model.predict_timed("the cat sat on the mat", "cat", None, Some(&mut skip)).unwrap();
    }

    #[test]
    fn lstm_variant_runs() {
        let vocab = vocab_for(&["a b c"]);
        let cfg = ModelConfig { encoder: EncoderKind::Lstm, ..small_config(3, 4) };
        let model = Model::new(cfg, vocab, &EmbeddingSource::Hashed { dim: 4 }).unwrap();
        let p = model.predict("a b c", "b", None).unwrap();
        assert!(p.end < 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model(3, 5, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.vocab, model.vocab);
        for ((_, n1, t1), (_, n2, t2)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
            assert_eq!(t1.requires_grad, t2.requires_grad);
        }
        let q = ("the cat sat on the mat", "where did the cat sit");
        assert_eq!(model.predict(q.0, q.1, None).unwrap(), back.predict(q.0, q.1, None).unwrap());

        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
    }
}
