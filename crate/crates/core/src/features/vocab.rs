//! Word vocabulary and word-vector tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Number of most frequent training words whose vectors are fine-tuned.
pub const TUNE_TOP_K: usize = 1000;

/// Where a vocabulary entry's vector lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSlot {
    /// Row of the trainable table.
    Tuned(usize),
    /// Row of the frozen table.
    Frozen(usize),
}

/// Token ↔ index map. Index 0 is padding, 1 is the unknown word. The padding
/// and unknown rows plus the most frequent training words form the tune set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    tuned: Vec<bool>,
    index: HashMap<String, usize>,
    slots: Vec<EmbeddingSlot>,
    n_tuned: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    tuned: Vec<usize>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let set: HashSet<usize> = r.tuned.into_iter().collect();
        let flags = (0..r.words.len()).map(|i| set.contains(&i)).collect();
        Vocabulary::from_parts(r.words, flags)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tuned: (0..v.words.len()).filter(|&i| v.tuned[i]).collect(),
            words: v.words,
        }
    }
}

impl Vocabulary {
    fn from_parts(words: Vec<String>, tuned: Vec<bool>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let mut slots = Vec::with_capacity(words.len());
        let (mut nt, mut nf) = (0, 0);
        for &t in &tuned {
            if t {
                slots.push(EmbeddingSlot::Tuned(nt));
                nt += 1;
            } else {
                slots.push(EmbeddingSlot::Frozen(nf));
                nf += 1;
            }
        }
        Vocabulary {
            words,
            tuned,
            index,
            slots,
            n_tuned: nt,
        }
    }

    /// Builds the vocabulary from training-split token counts plus any other
    /// words that should be representable (e.g. from the dev split).
    ///
    /// Training words are ordered by descending count, ties broken
    /// lexicographically; the first `top_k` of them are tuned. Words for
    /// which `has_vector` is false are left out and will map to `<unk>`.
    pub fn build<'a>(
        train_counts: &BTreeMap<String, usize>,
        extra: impl IntoIterator<Item = &'a str>,
        has_vector: impl Fn(&str) -> bool,
        top_k: usize,
    ) -> Self {
        let mut ranked: Vec<(&String, usize)> = train_counts
            .iter()
            .filter(|(w, _)| has_vector(w))
            .map(|(w, &c)| (w, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut tuned = vec![true, true];
        let mut seen: HashSet<String> = words.iter().cloned().collect();
        for (rank, (w, _)) in ranked.iter().enumerate() {
            if seen.insert((*w).clone()) {
                words.push((*w).clone());
                tuned.push(rank < top_k);
            }
        }
        let mut rest: Vec<&str> = extra
            .into_iter()
            .filter(|w| !seen.contains(*w) && has_vector(w))
            .collect();
        rest.sort_unstable();
        rest.dedup();
        for w in rest {
            words.push(w.to_string());
            tuned.push(false);
        }
        Vocabulary::from_parts(words, tuned)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Index of `token`, falling back to its lowercase form, then `<unk>`.
    pub fn lookup(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }

    pub fn slot(&self, idx: usize) -> EmbeddingSlot {
        self.slots[idx]
    }

    pub fn is_tuned(&self, idx: usize) -> bool {
        self.tuned[idx]
    }

    pub fn n_tuned(&self) -> usize {
        self.n_tuned
    }

    pub fn n_frozen(&self) -> usize {
        self.words.len() - self.n_tuned
    }

    /// Trainable and frozen tables filled from `source`. The padding row is zero.
    pub fn embedding_tables(&self, source: &EmbeddingSource) -> Result<(Tensor, Tensor)> {
        let dim = source.dim();
        let mut tuned = Tensor::zeros(&[self.n_tuned, dim]);
        let mut frozen = Tensor::zeros(&[self.n_frozen(), dim]);
        for (i, w) in self.words.iter().enumerate() {
            if i == PAD {
                continue;
            }
            let Some(vec) = source.vector(w) else {
                continue;
            };
            if vec.len() != dim {
                return Err(Error::dim("embedding row", &[dim], &[vec.len()]));
            }
            let (table, row) = match self.slots[i] {
                EmbeddingSlot::Tuned(r) => (&mut tuned, r),
                EmbeddingSlot::Frozen(r) => (&mut frozen, r),
            };
            table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&vec);
        }
        Ok((tuned, frozen))
    }
}

/// Source of initial word vectors.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    /// Vectors read from a text embedding file.
    File { dim: usize, vectors: HashMap<String, Vec<f64>> },
    /// Deterministic pseudo-random vectors derived from a hash of the word.
    Hashed { dim: usize },
    /// All-zero vectors; used when tables are about to be overwritten.
    Zeros { dim: usize },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::File { dim, .. }
            | EmbeddingSource::Hashed { dim }
            | EmbeddingSource::Zeros { dim } => *dim,
        }
    }

    pub fn has_vector(&self, word: &str) -> bool {
        match self {
            EmbeddingSource::File { vectors, .. } => {
                word == UNK_TOKEN || vectors.contains_key(word)
            }
            _ => true,
        }
    }

    pub fn vector(&self, word: &str) -> Option<Vec<f64>> {
        match self {
            EmbeddingSource::File { vectors, dim } => vectors
                .get(word)
                .cloned()
                .or_else(|| (word == UNK_TOKEN).then(|| hashed_vector(word, *dim))),
            EmbeddingSource::Hashed { dim } => Some(hashed_vector(word, *dim)),
            EmbeddingSource::Zeros { dim } => Some(vec![0.0; *dim]),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Uniform in `[-0.5, 0.5]`, seeded by the word's FNV-1a hash.
pub fn hashed_vector(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word));
    (0..dim).map(|_| rng.gen_range(-0.5..=0.5)).collect()
}

/// Reads a `token f1 ... fd` text embedding file. The last `dim` fields are
/// the vector, everything before them is the token (some files contain
/// tokens with spaces). When `keep` is given, other tokens are skipped.
pub fn load_embedding_file(
    path: &Path,
    dim: usize,
    keep: Option<&HashSet<String>>,
) -> Result<EmbeddingSource> {
    let reader = BufReader::new(File::open(path)?);
    let mut vectors = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < dim + 1 {
            return Err(Error::Parse(format!(
                "{}:{}: expected a token and {dim} values, found {} fields",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let split = fields.len() - dim;
        let token = fields[..split].join(" ");
        if keep.is_some_and(|k| !k.contains(&token)) {
            continue;
        }
        let values = fields[split..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        vectors.entry(token).or_insert(values);
    }
    Ok(EmbeddingSource::File { dim, vectors })
}
