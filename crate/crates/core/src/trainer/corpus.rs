//! Synthetic token corpora.
//!
//! Sequences come from an order-2 Markov chain over the content ids. Its
//! transition rows mix two sparse random tables, one keyed on the previous
//! token and one on the token before it:
//! `p(c | a, b) = ½ T_near[b][c] + ½ T_far[a][c]`.
//! Both tables are derived from the seed alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{CLS, FIRST_CONTENT, SEP};

/// Number of successors with nonzero probability in each sparse table row.
pub const SUPPORT: usize = 4;

type SparseRow = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    vocab_size: usize,
    near: Vec<SparseRow>,
    far: Vec<SparseRow>,
}

fn sparse_row(rng: &mut ChaCha8Rng, content: &[u32]) -> SparseRow {
    let k = SUPPORT.min(content.len());
    let picks: Vec<u32> = content.choose_multiple(rng, k).copied().collect();
    // Dirichlet(1) weights via normalized exponentials.
    let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    let mut row: SparseRow = picks.into_iter().zip(w.into_iter().map(|x| x / total)).collect();
    row.sort_by_key(|&(t, _)| t);
    row
}

impl MarkovChain {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self, TrainError> {
        if vocab_size <= 8 {
            return Err(TrainError::InvalidSpec(format!(
                "vocab_size must exceed 8, got {vocab_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content: Vec<u32> = (FIRST_CONTENT..vocab_size as u32).collect();
        let near = content.iter().map(|_| sparse_row(&mut rng, &content)).collect();
        let far = content.iter().map(|_| sparse_row(&mut rng, &content)).collect();
        Ok(Self {
            vocab_size,
            near,
            far,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn idx(t: u32) -> usize {
        (t - FIRST_CONTENT) as usize
    }

    /// Successor distribution given the two preceding tokens `(a, b)`, sorted by id.
    pub fn row(&self, a: u32, b: u32) -> Vec<(u32, f64)> {
        let mut m: BTreeMap<u32, f64> = BTreeMap::new();
        for &(t, p) in &self.near[Self::idx(b)] {
            *m.entry(t).or_default() += 0.5 * p;
        }
        for &(t, p) in &self.far[Self::idx(a)] {
            *m.entry(t).or_default() += 0.5 * p;
        }
        m.into_iter().collect()
    }

    fn draw(row: &[(u32, f64)], rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(t, p) in row {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.last().expect("non-empty row").0
    }

    pub fn sample_sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut seq = Vec::with_capacity(len);
        if len == 0 {
            return seq;
        }
        seq.push(rng.gen_range(FIRST_CONTENT..self.vocab_size as u32));
        if len > 1 {
            let first = seq[0];
            seq.push(Self::draw(&self.near[Self::idx(first)], rng));
        }
        while seq.len() < len {
            let n = seq.len();
            let row = self.row(seq[n - 2], seq[n - 1]);
            seq.push(Self::draw(&row, rng));
        }
        seq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub vocab_size: usize,
    pub seed: u64,
    pub num_sequences: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub sequences: Vec<Vec<u32>>,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Draws `num_sequences` sequences of `seq_len` content tokens. The chain and
/// the sampling stream are both derived from `seed`.
pub fn gen_corpus(
    vocab_size: usize,
    num_sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SyntheticCorpus, TrainError> {
    let chain = MarkovChain::new(vocab_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_0000_0001);
    let sequences = (0..num_sequences)
        .map(|_| chain.sample_sequence(seq_len, &mut rng))
        .collect();
    Ok(SyntheticCorpus {
        sequences,
        vocab_size,
        seed,
    })
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Moves the last `n` sequences into a held-out corpus.
    pub fn split_off(&mut self, n: usize) -> SyntheticCorpus {
        let at = self.sequences.len().saturating_sub(n);
        SyntheticCorpus {
            sequences: self.sequences.split_off(at),
            vocab_size: self.vocab_size,
            seed: self.seed,
        }
    }

    pub fn to_text(&self) -> String {
        let header = CorpusHeader {
            vocab_size: self.vocab_size,
            seed: self.seed,
            num_sequences: self.sequences.len(),
            seq_len: self.sequences.iter().map(Vec::len).max().unwrap_or(0),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.sequences {
            let mut first = true;
            for t in s {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{t}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        let header: CorpusHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| TrainError::Corpus("empty corpus file".into()))?,
        )
        .map_err(|e| TrainError::Corpus(format!("bad header: {e}")))?;
        let mut sequences = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let seq = line
                .split_ascii_whitespace()
                .map(|w| {
                    let t: u32 = w
                        .parse()
                        .map_err(|_| TrainError::Corpus(format!("line {}: bad id {w:?}", i + 2)))?;
                    if t as usize >= header.vocab_size {
                        return Err(TrainError::Corpus(format!(
                            "line {}: id {t} >= vocab_size {}",
                            i + 2,
                            header.vocab_size
                        )));
                    }
                    Ok(t)
                })
                .collect::<Result<Vec<u32>, _>>()?;
            sequences.push(seq);
        }
        Ok(Self {
            sequences,
            vocab_size: header.vocab_size,
            seed: header.seed,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), TrainError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, TrainError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `[CLS] content [SEP]`, truncating content to fit `max_positions`.
pub fn frame(seq: &[u32], max_positions: usize) -> Vec<u32> {
    let keep = seq.len().min(max_positions.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(CLS);
    out.extend_from_slice(&seq[..keep]);
    out.push(SEP);
    out
}

/// Sequence-classification data.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub num_labels: usize,
    pub vocab_size: usize,
}

/// A separable toy task: the content ids are cut into `num_labels` equal
/// bands and each sequence over-samples the band of its label (half of its
/// tokens on average), so label counts per band separate the classes.
pub fn gen_labeled_corpus(
    vocab_size: usize,
    num_sequences: usize,
    seq_len: usize,
    num_labels: usize,
    seed: u64,
) -> Result<LabeledCorpus, TrainError> {
    if num_labels < 2 {
        return Err(TrainError::InvalidSpec("need at least two labels".into()));
    }
    let content = vocab_size.saturating_sub(FIRST_CONTENT as usize);
    if content < num_labels {
        return Err(TrainError::InvalidSpec(format!(
            "{content} content ids cannot be split into {num_labels} bands"
        )));
    }
    let band = content / num_labels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(num_sequences);
    let mut labels = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let label = rng.gen_range(0..num_labels);
        let lo = FIRST_CONTENT as usize + label * band;
        let seq = (0..seq_len)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(lo..lo + band) as u32
                } else {
                    rng.gen_range(FIRST_CONTENT as usize..vocab_size) as u32
                }
            })
            .collect();
        sequences.push(seq);
        labels.push(label);
    }
    Ok(LabeledCorpus {
        sequences,
        labels,
        num_labels,
        vocab_size,
    })
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn split_off(&mut self, n: usize) -> LabeledCorpus {
        let at = self.sequences.len().saturating_sub(n);
        LabeledCorpus {
            sequences: self.sequences.split_off(at),
            labels: self.labels.split_off(at),
            num_labels: self.num_labels,
            vocab_size: self.vocab_size,
        }
    }

    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.num_labels];
        for &l in &self.labels {
            if l < self.num_labels {
                counts[l] += 1;
            }
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.labels.len().max(1) as f64
    }
}
