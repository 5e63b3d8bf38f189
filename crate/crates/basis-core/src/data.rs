//! Data ingestion and batching: a character-level corpus pipeline for the
//! language-model runs and synthetic tasks for estimator tests.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive, derive2, Rng};
use crate::tensor::Matrix;

/// Stream tag for window sampling.
const SAMPLE_STREAM: u64 = 0xDA7A;

/// FNV-1a 64-bit content digest, used for corpus provenance in run reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Which side of the train/validation split to sample from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A character-level corpus: vocabulary in order of first appearance, the
/// encoded id sequence, and a train/validation split point.
#[derive(Debug, Clone)]
pub struct CharCorpus {
    vocab: Vec<char>,
    encoded: Vec<usize>,
    split_point: usize,
    digest: String,
}

impl CharCorpus {
    /// Build from text; the vocabulary is the distinct characters in order
    /// of first appearance and `split_fraction` of the sequence (floored)
    /// becomes the training region.
    pub fn from_text(text: &str, split_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyCorpus { path: "<inline>".into() });
        }
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(Error::InvalidArgument {
                op: "char_corpus",
                reason: format!("split_fraction must be in [0, 1], got {split_fraction}"),
            });
        }
        let mut vocab = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut encoded = Vec::new();
        for ch in text.chars() {
            let id = *index.entry(ch).or_insert_with(|| {
                vocab.push(ch);
                vocab.len() - 1
            });
            encoded.push(id);
        }
        let split_point = (split_fraction * encoded.len() as f64).floor() as usize;
        let digest = format!("{:016x}", fnv1a64(text.as_bytes()));
        Ok(CharCorpus { vocab, encoded, split_point, digest })
    }

    /// Load a UTF-8 text file.
    pub fn load(path: &Path, split_fraction: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        if text.is_empty() {
            return Err(Error::EmptyCorpus { path: path.to_path_buf() });
        }
        Self::from_text(&text, split_fraction)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn encoded(&self) -> &[usize] {
        &self.encoded
    }

    pub fn train_len(&self) -> usize {
        self.split_point
    }

    pub fn val_len(&self) -> usize {
        self.encoded.len() - self.split_point
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| {
                self.vocab.iter().position(|&v| v == ch).ok_or_else(|| Error::InvalidArgument {
                    op: "encode",
                    reason: format!("character {ch:?} not in vocabulary"),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.vocab[id]).collect()
    }

    fn split_range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.split_point),
            Split::Val => (self.split_point, self.encoded.len()),
        }
    }
}

/// Shape and seed of sampled language-model batches.
#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Token ids in row-major (batch x seq) order.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Sample `(inputs, targets)` windows from the chosen split; targets are the
/// inputs shifted one position ahead. Window starts are drawn from the
/// stream `(spec.seed, step)`, so the same `(seed, step)` always yields the
/// same batch.
pub fn sample_lm_batch(
    corpus: &CharCorpus,
    split: Split,
    spec: &BatchSpec,
    step: u64,
) -> Result<(TokenBatch, TokenBatch)> {
    let (lo, hi) = corpus.split_range(split);
    let region = hi - lo;
    if region < spec.seq_len + 1 {
        return Err(Error::CorpusTooShort { needed: spec.seq_len + 1, available: region });
    }
    let valid_starts = (region - spec.seq_len) as u64;
    let mut rng = Rng::new(derive2(spec.seed, SAMPLE_STREAM, step));
    let mut inputs = Vec::with_capacity(spec.batch_size * spec.seq_len);
    let mut targets = Vec::with_capacity(spec.batch_size * spec.seq_len);
    for _ in 0..spec.batch_size {
        let start = lo + rng.next_below(valid_starts) as usize;
        inputs.extend_from_slice(&corpus.encoded[start..start + spec.seq_len]);
        targets.extend_from_slice(&corpus.encoded[start + 1..start + spec.seq_len + 1]);
    }
    Ok((
        TokenBatch { batch: spec.batch_size, seq: spec.seq_len, ids: inputs },
        TokenBatch { batch: spec.batch_size, seq: spec.seq_len, ids: targets },
    ))
}

/// A least-squares fitting task: random normal inputs and targets generated
/// by a hidden weight matrix plus optional noise. Unit-test substrate for
/// gradient-estimator statistics and tiny end-to-end fits.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub x: Matrix,
    pub w_star: Matrix,
    pub targets: Matrix,
}

pub fn synth_linear_task(b: usize, n: usize, m: usize, noise: f64, seed: u64) -> SynthTask {
    let mut rng = Rng::new(derive(seed, 0x51));
    let x = Matrix::random_normal(b, n, 1.0, &mut rng);
    let w_star = Matrix::random_normal(n, m, 1.0, &mut rng);
    let mut targets = x.matmul(&w_star).expect("dims fixed above");
    if noise > 0.0 {
        for v in targets.data_mut() {
            *v += noise * rng.next_normal();
        }
    }
    SynthTask { x, w_star, targets }
}

impl SynthTask {
    /// Mean squared error of predictions against the targets.
    pub fn mse(&self, pred: &Matrix) -> Result<f64> {
        let d = pred.sub(&self.targets)?;
        Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64)
    }

    /// Gradient of [`Self::mse`] with respect to the predictions.
    pub fn mse_grad(&self, pred: &Matrix) -> Result<Matrix> {
        let d = pred.sub(&self.targets)?;
        let scale = 2.0 / d.data().len() as f64;
        Ok(d.scaled(scale))
    }
}

/// Deterministic synthetic prose: a seeded 2,000-word pronounceable lexicon
/// sampled with Zipf weights and grouped into short sentences. The long tail
/// of rare spellings keeps a small char-level model in the learning regime
/// for thousands of steps instead of saturating on a few dozen words.
pub fn synthetic_text(n_chars: usize, seed: u64) -> String {
    const LEXICON_SIZE: usize = 2_000;
    const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
    const VOWELS: &[u8] = b"aeiouy";

    let mut rng = Rng::new(derive(seed, 0x7E7));
    let mut lexicon: Vec<String> = Vec::with_capacity(LEXICON_SIZE);
    for _ in 0..LEXICON_SIZE {
        // 1-4 consonant/vowel syllables, occasionally closed by a consonant.
        let syllables = 1 + rng.next_below(4) as usize;
        let mut word = String::new();
        for _ in 0..syllables {
            word.push(CONSONANTS[rng.next_below(CONSONANTS.len() as u64) as usize] as char);
            word.push(VOWELS[rng.next_below(VOWELS.len() as u64) as usize] as char);
        }
        if rng.next_below(3) == 0 {
            word.push(CONSONANTS[rng.next_below(CONSONANTS.len() as u64) as usize] as char);
        }
        lexicon.push(word);
    }
    let weights: Vec<f64> = (0..LEXICON_SIZE).map(|k| 1.0 / (k + 1) as f64).collect();
    let total: f64 = weights.iter().sum();

    let mut out = String::with_capacity(n_chars + 16);
    let mut words_left = 0usize;
    while out.len() < n_chars {
        if words_left == 0 {
            if !out.is_empty() {
                out.pop(); // replace the trailing space
                out.push_str(". ");
            }
            words_left = 4 + rng.next_below(9) as usize;
        }
        let mut pick = rng.next_f64() * total;
        let mut word = lexicon.last().expect("nonempty").as_str();
        for (w, &wt) in lexicon.iter().zip(&weights) {
            if pick < wt {
                word = w;
                break;
            }
            pick -= wt;
        }
        out.push_str(word);
        out.push(' ');
        words_left -= 1;
    }
    out.truncate(n_chars);
    out
}
