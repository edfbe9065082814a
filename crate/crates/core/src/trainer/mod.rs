//! Toy masked-language-model pretraining and classifier fine-tuning.
//!
//! A model pair shares corpus, batch order and mask draws (all driven by
//! `data_seed`) and differs only in `init_seed`. Masked positions are always
//! replaced by the MASK token; there is no 80/10/10 split.

mod backward;
pub mod corpus;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{
    frame, gen_corpus, gen_labeled_corpus, LabeledCorpus, MarkovChain, SyntheticCorpus,
};

use crate::model::forward::nll;
use crate::model::{
    classify_logits, init_model, init_tensor, names, Checkpoint, ModelError, SeqBatch,
    TransformerConfig, MASK,
};
use crate::numerics::Matrix;
use backward::Grads;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training spec: {0}")]
    InvalidSpec(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training made no progress: early loss {first:.4}, late loss {last:.4}")]
    NoProgress { first: f64, last: f64 },
    #[error("label {label} out of range for {num_labels} classes")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn d_batch() -> usize {
    8
}
fn d_lr() -> f32 {
    1e-3
}
fn d_beta1() -> f32 {
    0.9
}
fn d_beta2() -> f32 {
    0.999
}
fn d_eps() -> f32 {
    1e-8
}
fn d_mask() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f32,
    #[serde(default = "d_beta1")]
    pub beta1: f32,
    #[serde(default = "d_beta2")]
    pub beta2: f32,
    #[serde(default = "d_eps")]
    pub adam_eps: f32,
    /// Linear warmup length; the rate is constant afterwards.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "d_mask")]
    pub mask_prob: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
}

impl TrainSpec {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            batch_size: d_batch(),
            learning_rate: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_eps(),
            warmup_steps: 0,
            mask_prob: d_mask(),
            data_seed: 0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::InvalidSpec("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidSpec("batch_size must be >= 1".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(TrainError::InvalidSpec("mask_prob must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidSpec("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidSpec("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f32 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f32 / self.warmup_steps as f32).min(1.0)
        }
    }
}

struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, ck: &mut Checkpoint, grads: &Grads, spec: &TrainSpec, lr: f32) {
        self.t += 1;
        let (b1, b2) = (spec.beta1, spec.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let tensors = ck.tensors_mut();
        for (name, g) in grads {
            let p = tensors.get_mut(name).expect("gradient for known tensor");
            let n = g.data().len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + spec.adam_eps);
            }
        }
    }
}

/// Per-step training losses alongside the final weights.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean loss over the first and last tenth of the steps.
    pub fn early_late(&self) -> (f64, f64) {
        let n = self.losses.len();
        let w = n.div_ceil(10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[n - w..]))
    }
}

/// Epoch-shuffled index stream.
struct Order {
    idx: Vec<usize>,
    pos: usize,
}

impl Order {
    fn new(n: usize) -> Self {
        Self {
            idx: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.idx.len() {
            self.idx.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.idx[self.pos - 1]
    }
}

/// Masks each content position of a framed sequence with probability `p`,
/// forcing at least one. Returns masked input, positions and targets.
pub(crate) fn mask_sequence(
    framed: &[u32],
    p: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<usize>, Vec<u32>) {
    let content = 1..framed.len().saturating_sub(1);
    let mut positions: Vec<usize> = content.clone().filter(|_| rng.gen_bool(p)).collect();
    if positions.is_empty() && !content.is_empty() {
        positions.push(rng.gen_range(content));
    }
    let mut input = framed.to_vec();
    let targets = positions.iter().map(|&i| framed[i]).collect();
    for &i in &positions {
        input[i] = MASK;
    }
    (input, positions, targets)
}

/// Trains a freshly initialized model (seeded by `spec.init_seed`) on masked
/// language modeling over `corpus`.
pub fn train_mlm(
    config: &TransformerConfig,
    corpus: &SyntheticCorpus,
    spec: &TrainSpec,
) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Corpus("empty corpus".into()));
    }
    if corpus.vocab_size > config.vocab_size {
        return Err(TrainError::Corpus(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size, config.vocab_size
        )));
    }
    if config.max_positions < 3 {
        return Err(TrainError::InvalidSpec("max_positions must be at least 3".into()));
    }
    let mut ck = init_model(config, spec.init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let mut order = Order::new(corpus.len());
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut inputs = Vec::with_capacity(spec.batch_size);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for _ in 0..spec.batch_size {
            let seq = &corpus.sequences[order.next(&mut rng)];
            let framed = frame(seq, config.max_positions);
            let (input, pos, tgt) = mask_sequence(&framed, spec.mask_prob, &mut rng);
            rows.extend(pos.iter().map(|p| p + offset));
            targets.extend(tgt);
            offset += input.len();
            inputs.push(input);
        }
        let batch = SeqBatch::new(&inputs);
        batch.validate(&ck)?;
        let (loss, grads) = backward::mlm_loss_and_grads(&ck, &batch, &rows, &targets);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        losses.push(loss);
        adam.step(&mut ck, &grads, spec, spec.rate_at(step));
    }
    if let Some((name, _)) = ck.tensors().iter().find(|(_, m)| !m.is_finite()) {
        return Err(TrainError::Model(ModelError::NonFinite(name.clone())));
    }
    let outcome = TrainOutcome {
        checkpoint: ck,
        losses,
    };
    if spec.steps >= 10 {
        let (first, last) = outcome.early_late();
        if last >= first {
            return Err(TrainError::NoProgress { first, last });
        }
    }
    Ok(outcome)
}

/// Classification head tensors drawn from `head_seed` alone, so every base
/// model receives the same head initialization.
pub fn init_classifier_head(
    config: &TransformerConfig,
    num_labels: usize,
    head_seed: u64,
) -> BTreeMap<String, Matrix> {
    let d = config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
    let shapes: [(&str, Vec<usize>); 4] = [
        (names::CLS_OUT, vec![num_labels, d]),
        (names::CLS_OUT_B, vec![num_labels]),
        (names::CLS_POOL, vec![d, d]),
        (names::CLS_POOL_B, vec![d]),
    ];
    shapes
        .into_iter()
        .map(|(n, s)| (n.to_string(), init_tensor(n, &s, &mut rng)))
        .collect()
}

fn check_labels(data: &LabeledCorpus) -> Result<(), TrainError> {
    if data.num_labels < 2 {
        return Err(TrainError::InvalidSpec(format!(
            "classification needs at least 2 labels, got {}",
            data.num_labels
        )));
    }
    if data.labels.len() != data.sequences.len() {
        return Err(TrainError::Corpus("labels and sequences differ in length".into()));
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l >= data.num_labels) {
        return Err(TrainError::LabelOutOfRange {
            label,
            num_labels: data.num_labels,
        });
    }
    Ok(())
}

/// Attaches a freshly initialized classification head and fine-tunes the
/// whole network on `data` with cross-entropy on the first-token pooler.
pub fn finetune_classifier(
    ckpt: &Checkpoint,
    data: &LabeledCorpus,
    head_seed: u64,
    spec: &TrainSpec,
) -> Result<Checkpoint, TrainError> {
    spec.validate()?;
    check_labels(data)?;
    if data.is_empty() {
        return Err(TrainError::Corpus("empty labeled corpus".into()));
    }
    let head = init_classifier_head(ckpt.config(), data.num_labels, head_seed);
    let mut ck = ckpt.with_classifier(data.num_labels, head)?;
    let max_pos = ck.config().max_positions;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let mut order = Order::new(data.len());
    let mut adam = Adam::new();
    for step in 0..spec.steps {
        let mut inputs = Vec::with_capacity(spec.batch_size);
        let mut labels = Vec::with_capacity(spec.batch_size);
        for _ in 0..spec.batch_size {
            let i = order.next(&mut rng);
            inputs.push(frame(&data.sequences[i], max_pos));
            labels.push(data.labels[i]);
        }
        let batch = SeqBatch::new(&inputs);
        batch.validate(&ck)?;
        let (loss, grads) = backward::cls_loss_and_grads(&ck, &batch, &labels);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        adam.step(&mut ck, &grads, spec, spec.rate_at(step));
    }
    Ok(ck)
}

/// Mean cross-entropy and accuracy of the classification head on `data`.
pub fn classification_eval(ck: &Checkpoint, data: &LabeledCorpus) -> Result<(f64, f64), TrainError> {
    check_labels(data)?;
    if data.is_empty() {
        return Err(TrainError::Corpus("empty labeled corpus".into()));
    }
    let max_pos = ck.config().max_positions;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (chunk, labels) in data.sequences.chunks(64).zip(data.labels.chunks(64)) {
        let framed: Vec<Vec<u32>> = chunk.iter().map(|s| frame(s, max_pos)).collect();
        let logits = classify_logits(ck, &framed)?;
        for (r, &l) in labels.iter().enumerate() {
            let row = logits.row(r);
            if l >= row.len() {
                return Err(TrainError::LabelOutOfRange {
                    label: l,
                    num_labels: row.len(),
                });
            }
            loss += nll(row, l);
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += usize::from(pred == l);
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
