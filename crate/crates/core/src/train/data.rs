//! Byte-level tokenization, corpus loading and deterministic batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| Error::Index {
                op: "detokenize",
                index: i,
                bound: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Reads a file, or every regular file directly inside a directory in
/// name order, as one byte stream.
pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(tokenize(&fs::read(path).map_err(|e| Error::io(path, e))?));
    }
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(tokenize(&fs::read(&f).map_err(|e| Error::io(&f, e))?));
    }
    Ok(out)
}

/// Splits the stream into contiguous `seq_len` chunks and serves
/// `batch_size` of them per step. Chunk order is reshuffled every epoch
/// from `seed`, so the batch for a step depends only on `(seed, step)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    tokens: Vec<usize>,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    num_chunks: usize,
    cached: Option<(usize, Vec<usize>)>,
}

impl Batcher {
    pub fn new(tokens: Vec<usize>, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let need = batch_size * seq_len;
        if tokens.len() < need || need == 0 {
            return Err(Error::CorpusTooSmall {
                have: tokens.len(),
                need: need.max(1),
            });
        }
        Ok(Batcher {
            num_chunks: tokens.len() / seq_len,
            tokens,
            batch_size,
            seq_len,
            seed,
            cached: None,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.num_chunks / self.batch_size
    }

    /// `batch_size · seq_len` token ids, sequences back to back.
    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let epoch = step / per_epoch;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.num_chunks).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            self.cached = Some((epoch, order));
        }
        let order = &self.cached.as_ref().expect("filled above").1;
        let start = (step % per_epoch) * self.batch_size;
        let mut out = Vec::with_capacity(self.batch_size * self.seq_len);
        for &chunk in &order[start..start + self.batch_size] {
            out.extend_from_slice(&self.tokens[chunk * self.seq_len..(chunk + 1) * self.seq_len]);
        }
        out
    }
}

const NOUNS: &[&str] = &[
    "river", "stone", "village", "teacher", "garden", "window", "letter", "market", "forest", "engine", "bridge",
    "child", "song", "road", "question", "table", "winter", "city", "boat", "lamp", "field", "doctor", "story",
    "mountain", "kitchen", "bird", "machine", "friend", "island", "book", "storm", "school", "harbor", "clock",
    "farmer", "painting", "cloud", "train", "door", "student",
];
const VERBS: &[&str] = &[
    "carries", "finds", "builds", "watches", "follows", "opens", "remembers", "paints", "crosses", "repairs",
    "reads", "hears", "leaves", "keeps", "moves", "answers", "covers", "visits", "holds", "explains",
];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "bright", "heavy", "narrow", "warm", "green", "distant", "careful", "broken",
    "early", "simple", "golden", "empty", "strange",
];
const ADVERBS: &[&str] = &["slowly", "often", "again", "quietly", "never", "always", "suddenly", "carefully"];
const PREPOSITIONS: &[&str] = &["across", "near", "under", "behind", "beside", "through", "over", "toward"];
const DETERMINERS: &[&str] = &["the", "a", "every", "that", "one", "this"];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    let zipf = Zipf::new(words.len() as u64, 1.1).expect("valid zipf");
    words[zipf.sample(rng) as usize - 1]
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    out.push(pick(rng, DETERMINERS).to_string());
    if rng.gen_bool(0.45) {
        out.push(pick(rng, ADJECTIVES).to_string());
    }
    out.push(pick(rng, NOUNS).to_string());
}

fn clause(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    noun_phrase(rng, out);
    if rng.gen_bool(0.25) {
        out.push(pick(rng, ADVERBS).to_string());
    }
    out.push(pick(rng, VERBS).to_string());
    noun_phrase(rng, out);
    if rng.gen_bool(0.5) {
        out.push(pick(rng, PREPOSITIONS).to_string());
        noun_phrase(rng, out);
    }
}

/// Deterministic English-like text of exactly `len` bytes: Zipf-weighted
/// words arranged in simple clauses, sentences and paragraphs.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(len + 256);
    let mut in_paragraph = 0;
    while text.len() < len {
        let mut words = Vec::new();
        clause(&mut rng, &mut words);
        if rng.gen_bool(0.3) {
            words.push(pick(&mut rng, CONNECTIVES).to_string());
            clause(&mut rng, &mut words);
        }
        let mut sentence = words.join(" ");
        if let Some(first) = sentence.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        sentence.push(if rng.gen_bool(0.1) { '?' } else { '.' });
        text.push_str(&sentence);
        in_paragraph += 1;
        if in_paragraph >= rng.gen_range(3..8) {
            text.push_str("\n\n");
            in_paragraph = 0;
        } else {
            text.push(' ');
        }
    }
    let mut bytes = text.into_bytes();
    bytes.truncate(len);
    bytes
}
