//! Context and question input representations built from raw text.
//!
//! Context rows are `[GloVe; TF; POS; NER; soft match; hard match]`, which is
//! `300 + 1 + 12 + 8 + 300 + 3 = 624` columns at the default widths.
//! Question rows are the word vectors alone.

pub mod tags;
pub mod tokenize;
pub mod vocab;

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{word_level_soft_match, AttnParams};
use crate::error::{Error, Result};
use crate::recurrent::SeqMask;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub use tags::ContextTags;
pub use tokenize::{lemma, tokenize, Token};
pub use vocab::{EmbeddingSlot, EmbeddingSource, Vocabulary, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub embed: usize,
    pub pos: usize,
    pub ner: usize,
    pub n_pos: usize,
    pub n_ner: usize,
}

impl FeatureDims {
    pub const TF: usize = 1;
    pub const HARD_MATCH: usize = 3;

    pub fn context_width(&self) -> usize {
        self.embed + Self::TF + self.pos + self.ner + self.embed + Self::HARD_MATCH
    }

    pub fn question_width(&self) -> usize {
        self.embed
    }

    /// Column ranges of each context feature, in concatenation order.
    pub fn context_columns(&self) -> [(&'static str, std::ops::Range<usize>); 6] {
        let widths = [
            ("glove", self.embed),
            ("tf", Self::TF),
            ("pos", self.pos),
            ("ner", self.ner),
            ("soft_match", self.embed),
            ("hard_match", Self::HARD_MATCH),
        ];
        let mut start = 0;
        widths.map(|(name, w)| {
            let r = start..start + w;
            start += w;
            (name, r)
        })
    }
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            embed: 300,
            pos: 12,
            ner: 8,
            n_pos: tags::POS_TAGS.len(),
            n_ner: tags::NER_TAGS.len(),
        }
    }
}

/// Per-token indices and scalar features for one context/question pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub context_tokens: Vec<Token>,
    pub question_tokens: Vec<Token>,
    pub context_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
    pub tf: Vec<f64>,
    pub pos: Vec<usize>,
    pub ner: Vec<usize>,
    pub hard_match: Vec<[bool; 3]>,
}

impl TokenFeatures {
    pub fn context_len(&self) -> usize {
        self.context_tokens.len()
    }

    pub fn question_len(&self) -> usize {
        self.question_tokens.len()
    }
}

/// `(exact, lowercase, lemma)` membership of each context token in the question.
pub fn hard_match_flags(context: &[Token], question: &[Token]) -> Vec<[bool; 3]> {
    let exact: HashSet<&str> = question.iter().map(|t| t.text.as_str()).collect();
    let lower: HashSet<String> = question.iter().map(|t| t.text.to_lowercase()).collect();
    let lemmas: HashSet<String> = question.iter().map(|t| lemma(&t.text)).collect();
    context
        .iter()
        .map(|t| {
            [
                exact.contains(t.text.as_str()),
                lower.contains(&t.text.to_lowercase()),
                lemmas.contains(&lemma(&t.text)),
            ]
        })
        .collect()
}

/// `n×3` matrix of hard-match indicators.
pub fn hard_match(context: &[Token], question: &[Token]) -> Tensor {
    let data = hard_match_flags(context, question)
        .iter()
        .flat_map(|f| f.map(|b| if b { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![context.len(), 3], data).expect("n×3 by construction")
}

/// Lowercase-form counts divided by the context length.
pub fn term_frequencies(context: &[Token]) -> Vec<f64> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let lower: Vec<String> = context.iter().map(|t| t.text.to_lowercase()).collect();
    for w in &lower {
        *counts.entry(w.clone()).or_default() += 1;
    }
    let n = context.len() as f64;
    lower.iter().map(|w| counts[w] as f64 / n).collect()
}

/// `n×1` term-frequency column.
pub fn term_frequency(context: &[Token]) -> Tensor {
    let tf = term_frequencies(context);
    Tensor::new(vec![tf.len(), 1], tf).expect("n×1 by construction")
}

/// Tokenizes and looks up a pair. Missing tags default to index 0; supplied
/// tags must align one-to-one with the context tokens.
pub fn featurize(
    context: &str,
    question: &str,
    vocab: &Vocabulary,
    tags: Option<&ContextTags>,
) -> Result<TokenFeatures> {
    let context_tokens = tokenize(context);
    let question_tokens = tokenize(question);
    if context_tokens.is_empty() {
        return Err(Error::Ingestion("context has no tokens".into()));
    }
    if question_tokens.is_empty() {
        return Err(Error::Ingestion("question has no tokens".into()));
    }
    let n = context_tokens.len();
    let (pos, ner) = match tags {
        Some(t) if t.len() != n => {
            return Err(Error::Ingestion(format!(
                "{} tags for {n} context tokens",
                t.len()
            )))
        }
        Some(t) => (t.pos.clone(), t.ner.clone()),
        None => (vec![0; n], vec![0; n]),
    };
    Ok(TokenFeatures {
        context_ids: context_tokens.iter().map(|t| vocab.lookup(&t.text)).collect(),
        question_ids: question_tokens.iter().map(|t| vocab.lookup(&t.text)).collect(),
        tf: term_frequencies(&context_tokens),
        hard_match: hard_match_flags(&context_tokens, &question_tokens),
        pos,
        ner,
        context_tokens,
        question_tokens,
    })
}

/// Embedding tables and the word-level soft-match attention.
#[derive(Debug, Clone)]
pub struct FeatureParams {
    /// Padding, unknown and frequent-word vectors; updated in training.
    pub tuned_emb: ParamId,
    /// Remaining word vectors; never updated.
    pub frozen_emb: ParamId,
    pub pos_emb: ParamId,
    pub ner_emb: ParamId,
    pub soft_match: AttnParams,
    pub dims: FeatureDims,
    pub embed_dropout: f64,
}

impl FeatureParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        source: &EmbeddingSource,
        dims: FeatureDims,
        attn_dim: usize,
        embed_dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if source.dim() != dims.embed {
            return Err(Error::Config(format!(
                "embedding source has width {}, configuration expects {}",
                source.dim(),
                dims.embed
            )));
        }
        let (tuned, frozen) = vocab.embedding_tables(source)?;
        let tuned_emb = store.add("embed.tuned", tuned.with_grad(true));
        let frozen_emb = store.add("embed.frozen", frozen.with_grad(false));
        let pos_emb = store.add(
            "embed.pos",
            Tensor::uniform(&[dims.n_pos, dims.pos], 0.1, rng).with_grad(true),
        );
        let ner_emb = store.add(
            "embed.ner",
            Tensor::uniform(&[dims.n_ner, dims.ner], 0.1, rng).with_grad(true),
        );
        let soft_match = AttnParams::init(store, "soft_match", dims.embed, attn_dim, 0.0, rng);
        Ok(FeatureParams {
            tuned_emb,
            frozen_emb,
            pos_emb,
            ner_emb,
            soft_match,
            dims,
            embed_dropout,
        })
    }
}

/// Tape nodes for one featurized pair.
#[derive(Debug, Clone)]
pub struct InputVars {
    /// `n×624` context input.
    pub c_in: Var,
    /// `m×300` question input.
    pub q_in: Var,
    /// Context word vectors after dropout; reused in the word histories.
    pub c_glove: Var,
    pub q_glove: Var,
    pub c_mask: SeqMask,
    pub q_mask: SeqMask,
}

fn word_vectors(tape: &Tape<'_>, fp: &FeatureParams, vocab: &Vocabulary, ids: &[usize]) -> Result<Var> {
    let mut tuned_rows = Vec::with_capacity(ids.len());
    let mut frozen_rows = Vec::with_capacity(ids.len());
    let mut any_frozen = false;
    for &id in ids {
        match vocab.slot(id) {
            EmbeddingSlot::Tuned(r) => {
                tuned_rows.push(Some(r));
                frozen_rows.push(None);
            }
            EmbeddingSlot::Frozen(r) => {
                tuned_rows.push(None);
                frozen_rows.push(Some(r));
                any_frozen = true;
            }
        }
    }
    let tuned = tape.gather_rows(tape.param(fp.tuned_emb)?, &tuned_rows)?;
    if !any_frozen {
        return Ok(tuned);
    }
    let frozen = tape.gather_rows(tape.param(fp.frozen_emb)?, &frozen_rows)?;
    tape.add(tuned, frozen)
}

/// Builds `C_in` and `Q_in`. Padding rows (beyond the token counts, up to
/// `pad_to`) use the padding vector and zero features and are masked out.
pub fn build_inputs(
    tape: &Tape<'_>,
    fp: &FeatureParams,
    vocab: &Vocabulary,
    feats: &TokenFeatures,
    pad_to: Option<(usize, usize)>,
) -> Result<InputVars> {
    let (n0, m0) = (feats.context_len(), feats.question_len());
    if n0 == 0 || m0 == 0 {
        return Err(Error::Ingestion("empty context or question".into()));
    }
    let (n, m) = pad_to.unwrap_or((n0, m0));
    if n < n0 || m < m0 {
        return Err(Error::Contract(format!(
            "pad length ({n}, {m}) shorter than ({n0}, {m0})"
        )));
    }
    let pad = |v: &[usize], len: usize, fill: usize| {
        let mut out = v.to_vec();
        out.resize(len, fill);
        out
    };
    let dims = fp.dims;

    let c_ids = pad(&feats.context_ids, n, PAD);
    let q_ids = pad(&feats.question_ids, m, PAD);
    let c_glove = tape.dropout(word_vectors(tape, fp, vocab, &c_ids)?, fp.embed_dropout, true)?;
    let q_glove = tape.dropout(word_vectors(tape, fp, vocab, &q_ids)?, fp.embed_dropout, true)?;

    let mut tf = feats.tf.clone();
    tf.resize(n, 0.0);
    let tf = tape.constant(Tensor::new(vec![n, 1], tf)?);

    let pos_rows: Vec<Option<usize>> = (0..n).map(|i| feats.pos.get(i).copied()).collect();
    let ner_rows: Vec<Option<usize>> = (0..n).map(|i| feats.ner.get(i).copied()).collect();
    let pos = tape.gather_rows(tape.param(fp.pos_emb)?, &pos_rows)?;
    let ner = tape.gather_rows(tape.param(fp.ner_emb)?, &ner_rows)?;

    let mut hard = vec![0.0; n * 3];
    for (i, flags) in feats.hard_match.iter().enumerate() {
        for (k, &b) in flags.iter().enumerate() {
            hard[i * 3 + k] = if b { 1.0 } else { 0.0 };
        }
    }
    let hard = tape.constant(Tensor::new(vec![n, 3], hard)?);

    let c_mask = SeqMask::prefix(n0, n);
    let q_mask = SeqMask::prefix(m0, m);
    let soft = word_level_soft_match(tape, &fp.soft_match, c_glove, q_glove, &q_mask)?;

    let c_in = tape.concat_cols(&[c_glove, tf, pos, ner, soft, hard])?;
    if tape.cols(c_in) != dims.context_width() {
        return Err(Error::dim("context input", &tape.shape(c_in), &[n, dims.context_width()]));
    }
    Ok(InputVars {
        c_in,
        q_in: q_glove,
        c_glove,
        q_glove,
        c_mask,
        q_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check_params;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn toks(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    #[test]
    fn hard_match_cases() {
        let h = hard_match(&toks("The cat"), &toks("the mat"));
        assert_eq!(h.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let h = hard_match(&toks("a b"), &[]);
        assert!(h.data().iter().all(|&x| x == 0.0));
        let h = hard_match(&toks("Paris"), &toks("is Paris big"));
        assert_eq!(h.data(), &[1.0, 1.0, 1.0]);
        // Lemma-only match.
        let h = hard_match(&toks("cats"), &toks("cat"));
        assert_eq!(h.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn term_frequency_cases() {
        assert_eq!(term_frequency(&toks("a b c d")).data(), &[0.25; 4]);
        assert_eq!(term_frequency(&toks("a b A d")).data(), &[0.5, 0.25, 0.5, 0.25]);
        assert_eq!(term_frequency(&toks("x")).data(), &[1.0]);
    }

    #[test]
    fn featurize_rejects_empty_text() {
        let v = Vocabulary::build(&BTreeMap::new(), [], |_| true, 0);
        assert!(matches!(featurize("", "q", &v, None), Err(Error::Ingestion(_))));
        assert!(matches!(featurize("c", "  ", &v, None), Err(Error::Ingestion(_))));
        let tags = ContextTags { pos: vec![1], ner: vec![1] };
        assert!(matches!(featurize("a b", "q", &v, Some(&tags)), Err(Error::Ingestion(_))));
    }

    #[test]
    fn default_widths() {
        let d = FeatureDims::default();
        assert_eq!(d.context_width(), 624);
        assert_eq!(d.question_width(), 300);
        let cols = d.context_columns();
        assert_eq!(cols[5].1, 621..624);
    }

    fn small_setup(embed: usize) -> (ParamStore, FeatureParams, Vocabulary) {
        let counts: BTreeMap<String, usize> =
            [("the", 5), ("cat", 3), ("sat", 1)].iter().map(|(w, c)| (w.to_string(), *c)).collect();
        let vocab = Vocabulary::build(&counts, ["mat"], |_| true, 2);
        let dims = FeatureDims { embed, pos: 3, ner: 2, n_pos: 5, n_ner: 4 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fp = FeatureParams::init(
            &mut store,
            &vocab,
            &EmbeddingSource::Hashed { dim: embed },
            dims,
            4,
            0.4,
            &mut rng,
        )
        .unwrap();
        (store, fp, vocab)
    }

    #[test]
    fn slices_recover_parts() {
        let (store, fp, vocab) = small_setup(5);
        let feats = featurize("the cat sat on the mat .", "where did the cat sit", &vocab, None).unwrap();
        let tape = Tape::with_params(&store);
        let iv = build_inputs(&tape, &fp, &vocab, &feats, None).unwrap();
        let c_in = tape.value(iv.c_in);
        let n = feats.context_len();
        assert_eq!(c_in.shape(), &[n, fp.dims.context_width()]);
        let cols = fp.dims.context_columns();
        let slice = |name: &str| {
            let r = cols.iter().find(|c| c.0 == name).unwrap().1.clone();
            (0..n).flat_map(|i| c_in.row(i)[r.clone()].to_vec()).collect::<Vec<f64>>()
        };
        assert_eq!(slice("tf"), term_frequencies(&feats.context_tokens));
        assert_eq!(slice("hard_match"), hard_match(&feats.context_tokens, &feats.question_tokens).into_data());
        assert_eq!(slice("glove"), tape.data(iv.c_glove));
        // "on" is unknown: its vector is the unknown-word row.
        let unk_row = store.get(fp.tuned_emb).row(UNK).to_vec();
        let on = feats.context_tokens.iter().position(|t| t.text == "on").unwrap();
        assert_eq!(&slice("glove")[on * 5..on * 5 + 5], unk_row.as_slice());
        // "mat" lives in the frozen table.
        let mat = feats.context_tokens.iter().position(|t| t.text == "mat").unwrap();
        let EmbeddingSlot::Frozen(row) = vocab.slot(vocab.lookup("mat")) else {
            panic!("mat should be frozen");
        };
        assert_eq!(&slice("glove")[mat * 5..mat * 5 + 5], store.get(fp.frozen_emb).row(row));
        assert_eq!(tape.value(iv.q_in).shape(), &[feats.question_len(), 5]);
    }

    #[test]
    fn padding_is_masked() {
        let (store, fp, vocab) = small_setup(4);
        let feats = featurize("the cat", "cat", &vocab, None).unwrap();
        let tape = Tape::with_params(&store);
        let iv = build_inputs(&tape, &fp, &vocab, &feats, Some((5, 3))).unwrap();
        assert_eq!(tape.shape(iv.c_in), vec![5, fp.dims.context_width()]);
        assert_eq!(iv.c_mask.valid_len().unwrap(), 2);
        assert_eq!(iv.q_mask.valid_len().unwrap(), 1);
        assert!(build_inputs(&tape, &fp, &vocab, &feats, Some((1, 3))).is_err());
    }

    #[test]
    fn frozen_rows_get_no_gradient() {
        let (store, fp, vocab) = small_setup(4);
        let feats = featurize("the mat", "cat", &vocab, None).unwrap();
        let tape = Tape::with_params(&store);
        let iv = build_inputs(&tape, &fp, &vocab, &feats, None).unwrap();
        let loss = tape.sum(tape.mul(iv.c_in, iv.c_in).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
        assert!(ids.contains(&fp.tuned_emb));
        assert!(!ids.contains(&fp.frozen_emb));
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let (store, fp, vocab) = small_setup(4);
        let feats = featurize("the cat sat", "cat sat", &vocab, Some(&ContextTags { pos: vec![1, 2, 3], ner: vec![0, 1, 3] })).unwrap();
        let checks = finite_diff_check_params(
            &store,
            |tape| {
                let iv = build_inputs(tape, &fp, &vocab, &feats, None)?;
                let w = tape.constant(Tensor::new(
                    vec![fp.dims.context_width(), 1],
                    (0..fp.dims.context_width()).map(|i| (i as f64 * 0.9 + 0.3).sin()).collect(),
                )?);
                let y = tape.tanh(tape.matmul(iv.c_in, w)?)?;
                tape.sum(tape.mul(y, y)?)
            },
            1e-6,
            200,
            1,
        )
        .unwrap();
        for c in checks {
            assert!(c.max_rel_error < 1e-4, "{}: {}", c.name, c.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn hard_match_ignores_question_order(
            ctx in proptest::collection::vec("[a-cA-C]{1,3}", 1..8),
            q in proptest::collection::vec("[a-cA-C]{1,3}s?", 0..6),
        ) {
            let c = toks(&ctx.join(" "));
            let forward = toks(&q.join(" "));
            let mut rev = q.clone();
            rev.reverse();
            let backward = toks(&rev.join(" "));
            prop_assert_eq!(hard_match(&c, &forward), hard_match(&c, &backward));
        }

        #[test]
        fn tf_in_unit_interval(ctx in proptest::collection::vec("[a-c]{1,2}", 1..20)) {
            for x in term_frequencies(&toks(&ctx.join(" "))) {
                prop_assert!(x > 0.0 && x <= 1.0);
            }
        }
    }
}
