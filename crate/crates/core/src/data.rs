//! Synthetic MLM data: a seeded sparse Markov corpus, BERT-style masking,
//! prefix truncation, and epoch-wise batching.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Successors with nonzero probability per token in the order-1 chain.
pub const MAX_SUCCESSORS: usize = 4;

const CORPUS_MAGIC: &[u8; 8] = b"CGCORPUS";
const CORPUS_VERSION: u32 = 1;

fn default_order() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: usize,
    pub corpus_size: usize,
    pub seq_len_full: usize,
    /// Current truncation length.
    pub train_len: usize,
    pub masks_per_seq: usize,
    pub mask_token_id: usize,
    #[serde(default = "default_order")]
    pub markov_order: usize,
    pub seed: u64,
}

impl DataConfig {
    /// Desk-scale data: `V=64`, 128-token sequences with 19 masks.
    pub fn desk() -> Self {
        DataConfig {
            vocab: 64,
            corpus_size: 2048,
            seq_len_full: 128,
            train_len: 128,
            masks_per_seq: 19,
            mask_token_id: 63,
            markov_order: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::validation("data.vocab", "must be >= 2"));
        }
        if self.corpus_size == 0 {
            return Err(Error::validation("data.corpus_size", "must be >= 1"));
        }
        if self.train_len == 0 || self.train_len > self.seq_len_full {
            return Err(Error::validation(
                "data.train_len",
                format!("must be in [1, seq_len_full = {}]", self.seq_len_full),
            ));
        }
        if self.masks_per_seq >= self.train_len {
            return Err(Error::validation(
                "data.masks_per_seq",
                format!("must be < train_len = {}", self.train_len),
            ));
        }
        if self.mask_token_id >= self.vocab {
            return Err(Error::validation("data.mask_token_id", "must be < vocab"));
        }
        if self.markov_order > 1 {
            return Err(Error::validation("data.markov_order", "only orders 0 and 1 are supported"));
        }
        Ok(())
    }

    /// Token ids the generator may emit (every id except the mask token).
    pub fn content_tokens(&self) -> Vec<usize> {
        (0..self.vocab).filter(|&t| t != self.mask_token_id).collect()
    }
}

/// Masks-per-sequence at a given length, holding the ~14.8% rate of 76/512.
pub fn masks_for_len(len: usize) -> usize {
    (0.148 * len as f64).round() as usize
}

fn sample_categorical(weights: &[(usize, f64)], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for &(tok, w) in weights {
        acc += w;
        if u < acc {
            return tok;
        }
    }
    weights.last().expect("non-empty distribution").0
}

fn dirichlet_weights(tokens: &[usize], rng: &mut Rng) -> Vec<(usize, f64)> {
    let raw: Vec<f64> = tokens.iter().map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let total: f64 = raw.iter().sum();
    tokens.iter().zip(raw).map(|(&t, w)| (t, w / total)).collect()
}

/// Generating process behind the corpus. Order 1: each token has at most
/// [`MAX_SUCCESSORS`] successors with flat-Dirichlet weights; order 0: one
/// such distribution over all content tokens, drawn i.i.d.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    order: usize,
    start: Vec<(usize, f64)>,
    // indexed by token id; empty for the mask token
    transitions: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    pub fn new(config: &DataConfig, rng: &mut Rng) -> Self {
        let content = config.content_tokens();
        let uniform = 1.0 / content.len() as f64;
        let (start, transitions) = if config.markov_order == 0 {
            let unigram = dirichlet_weights(&content, rng);
            (unigram, Vec::new())
        } else {
            let mut transitions = vec![Vec::new(); config.vocab];
            for &t in &content {
                let k = MAX_SUCCESSORS.min(content.len());
                let picks: Vec<usize> = rng
                    .choose_distinct(content.len(), k)
                    .into_iter()
                    .map(|i| content[i])
                    .collect();
                transitions[t] = dirichlet_weights(&picks, rng);
            }
            (content.iter().map(|&t| (t, uniform)).collect(), transitions)
        };
        MarkovChain {
            order: config.markov_order,
            start,
            transitions,
        }
    }

    /// Probability of `next` following `prev` (order 1) or of `next` alone (order 0).
    pub fn prob(&self, prev: usize, next: usize) -> f64 {
        let dist = if self.order == 0 { &self.start } else { &self.transitions[prev] };
        dist.iter().find(|&&(t, _)| t == next).map_or(0.0, |&(_, w)| w)
    }

    pub fn successors(&self, prev: usize) -> &[(usize, f64)] {
        if self.order == 0 {
            &self.start
        } else {
            &self.transitions[prev]
        }
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        let mut prev = sample_categorical(&self.start, rng);
        seq.push(prev);
        while seq.len() < len {
            prev = sample_categorical(self.successors(prev), rng);
            seq.push(prev);
        }
        seq
    }
}

/// Fixed-length token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub seed: u64,
    pub vocab: usize,
    pub seq_len: usize,
    pub sequences: Vec<Vec<usize>>,
}

/// Draw `config.corpus_size` sequences of `seq_len_full` tokens. The chain
/// itself is fixed by `config.seed`; `rng` drives the sampling.
pub fn gen_corpus(config: &DataConfig, rng: &mut Rng) -> Result<Corpus> {
    gen_sequences(config, config.corpus_size, rng)
}

/// Like [`gen_corpus`] with an explicit count; shares the chain, so a
/// held-out set drawn with another stream has the same distribution.
pub fn gen_sequences(config: &DataConfig, count: usize, rng: &mut Rng) -> Result<Corpus> {
    config.validate()?;
    let chain = MarkovChain::new(config, &mut Rng::new(config.seed).fork("chain"));
    let sequences = (0..count).map(|_| chain.sample(config.seq_len_full, rng)).collect();
    Ok(Corpus {
        seed: config.seed,
        vocab: config.vocab,
        seq_len: config.seq_len_full,
        sequences,
    })
}

impl Corpus {
    /// Flat binary: magic, version, V, count, length (u32 LE), seed (u64 LE),
    /// then every token as u32 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 4 * self.sequences.len() * self.seq_len);
        buf.extend_from_slice(CORPUS_MAGIC);
        for v in [CORPUS_VERSION, self.vocab as u32, self.sequences.len() as u32, self.seq_len as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for s in &self.sequences {
            for &t in s {
                buf.extend_from_slice(&(t as u32).to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Input(format!("{}: {why}", path.display()));
        if bytes.len() < 32 || &bytes[..8] != CORPUS_MAGIC {
            return Err(bad("not a corpus file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != CORPUS_VERSION as usize {
            return Err(bad("unsupported corpus version"));
        }
        let (vocab, count, len) = (word(1), word(2), word(3));
        let seed = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let body = &bytes[32..];
        if body.len() != 4 * count * len {
            return Err(bad("token payload length does not match header"));
        }
        let tokens: Vec<usize> = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if tokens.iter().any(|&t| t >= vocab) {
            return Err(bad("token id outside vocabulary"));
        }
        Ok(Corpus {
            seed,
            vocab,
            seq_len: len,
            sequences: tokens.chunks(len.max(1)).map(|c| c.to_vec()).collect(),
        })
    }
}

/// One masked training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input_ids: Vec<usize>,
    /// Strictly increasing.
    pub masked_positions: Vec<usize>,
    /// Original tokens at `masked_positions`.
    pub targets: Vec<usize>,
}

pub type Batch = Vec<Example>;

/// Replacement split applied to chosen positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingRule {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskingRule {
    /// 80% mask token, 10% random token, 10% unchanged.
    fn default() -> Self {
        MaskingRule {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

/// Choose `masks` distinct positions uniformly and corrupt them per `rule`.
/// Random replacements are drawn from the non-mask tokens.
pub fn mask_tokens(
    sequence: &[usize],
    masks: usize,
    mask_token_id: usize,
    vocab: usize,
    rule: MaskingRule,
    rng: &mut Rng,
) -> Result<Example> {
    if masks > sequence.len() {
        return Err(Error::Input(format!(
            "cannot mask {masks} positions of a {}-token sequence",
            sequence.len()
        )));
    }
    let positions = rng.choose_distinct(sequence.len(), masks);
    let mut input = sequence.to_vec();
    let targets = positions.iter().map(|&p| sequence[p]).collect();
    for &p in &positions {
        let u = rng.uniform();
        if u < rule.mask {
            input[p] = mask_token_id;
        } else if u < rule.mask + rule.random {
            let mut t = rng.below(vocab - 1);
            if t >= mask_token_id {
                t += 1;
            }
            input[p] = t;
        }
    }
    Ok(Example {
        input_ids: input,
        masked_positions: positions,
        targets,
    })
}

/// First `train_len` tokens.
pub fn truncate(sequence: &[usize], train_len: usize) -> &[usize] {
    &sequence[..train_len.min(sequence.len())]
}

/// Epoch-wise sampling without replacement.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: Rng,
}

impl Batcher {
    pub fn new(corpus_len: usize, rng: Rng) -> Self {
        let mut b = Batcher {
            order: (0..corpus_len).collect(),
            cursor: 0,
            epoch: 0,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        let mut r = self.rng.fork_index(self.epoch);
        r.shuffle(&mut self.order);
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next `batch_size` corpus indices; the last batch of an epoch may be short.
    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        assert!(batch_size >= 1, "batch size must be >= 1");
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

/// Truncate and mask the indexed sequences.
pub fn make_batch(corpus: &Corpus, indices: &[usize], config: &DataConfig, rule: MaskingRule, rng: &mut Rng) -> Result<Batch> {
    indices
        .iter()
        .map(|&i| {
            let seq = truncate(&corpus.sequences[i], config.train_len);
            mask_tokens(seq, config.masks_per_seq, config.mask_token_id, config.vocab, rule, rng)
        })
        .collect()
}

/// A fixed evaluation batch: `count` fresh sequences from the same chain,
/// masked with a dedicated stream.
pub fn heldout_batch(config: &DataConfig, count: usize, rng: &Rng) -> Result<Batch> {
    let corpus = gen_sequences(config, count, &mut rng.fork("heldout"))?;
    let idx: Vec<usize> = (0..count).collect();
    make_batch(&corpus, &idx, config, MaskingRule::default(), &mut rng.fork("mask"))
}
