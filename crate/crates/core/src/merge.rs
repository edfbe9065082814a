//! Linear interpolation between aligned checkpoints and loss barriers along
//! the path.
//!
//! A barrier scan evaluates `λ·A + (1−λ)·B′` on a grid of λ values and reports
//! `max(losses) − (loss(0) + loss(1)) / 2`. For masked language modeling the
//! masks are drawn once ([`MaskedEvalSet`]) and reused at every λ, so the
//! curve reflects the models rather than mask noise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::forward::masked_nll;
use crate::model::{Checkpoint, ModelError, SeqBatch, TransformerConfig, MASK};
use crate::numerics::Matrix;
use crate::trainer::{classification_eval, frame, LabeledCorpus, TrainError};

pub const DEFAULT_GRID_POINTS: usize = 21;
pub const DEFAULT_MASK_PROB: f64 = 0.15;
pub const DEFAULT_BLOCK: usize = 128;

/// Blocks per forward pass during MLM evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("checkpoints disagree on {0}")]
    ConfigMismatch(String),
    #[error("lambda {0} is outside [0, 1]")]
    Lambda(f64),
    #[error("invalid lambda grid: {0}")]
    Grid(String),
    #[error("invalid evaluation setup: {0}")]
    InvalidEval(String),
    #[error("no positions masked; evaluation data or seed too small")]
    NoMaskedPositions,
    #[error("loss kind {spec} does not match evaluation data for {data}")]
    LossKindMismatch { spec: LossKind, data: LossKind },
    #[error("non-finite loss at lambda {0}")]
    NonFinite(f64),
    #[error("malformed report: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mlm,
    Classification,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mlm => "mlm",
            LossKind::Classification => "classification",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlm" => Ok(LossKind::Mlm),
            "classification" => Ok(LossKind::Classification),
            other => Err(MergeError::Format(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// `n` evenly spaced points from 0 to 1 inclusive.
pub fn lambda_grid(n: usize) -> Result<Vec<f64>, MergeError> {
    if n < 2 {
        return Err(MergeError::Grid(format!("need at least 2 points, got {n}")));
    }
    let last = (n - 1) as f64;
    Ok((0..n).map(|i| i as f64 / last).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub lambdas: Vec<f64>,
    pub loss: LossKind,
}

impl MergeSpec {
    pub fn new(lambdas: Vec<f64>, loss: LossKind) -> Result<Self, MergeError> {
        let spec = Self { lambdas, loss };
        spec.validate()?;
        Ok(spec)
    }

    /// The default 21-point grid.
    pub fn default_grid(loss: LossKind) -> Self {
        Self {
            lambdas: lambda_grid(DEFAULT_GRID_POINTS).expect("valid size"),
            loss,
        }
    }

    /// Grid must be strictly increasing, within [0, 1], and include both ends.
    pub fn validate(&self) -> Result<(), MergeError> {
        let g = &self.lambdas;
        if let Some(&bad) = g.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(MergeError::Lambda(bad));
        }
        if g.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MergeError::Grid("not strictly increasing".into()));
        }
        if g.first() != Some(&0.0) || g.last() != Some(&1.0) {
            return Err(MergeError::Grid("must contain 0 and 1".into()));
        }
        Ok(())
    }
}

fn check_same_config(a: &TransformerConfig, b: &TransformerConfig) -> Result<(), MergeError> {
    if a != b {
        return Err(MergeError::ConfigMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `λ·A + (1−λ)·B` for every tensor. The endpoints return exact clones.
pub fn interpolate(a: &Checkpoint, b: &Checkpoint, lambda: f64) -> Result<Checkpoint, MergeError> {
    check_same_config(a.config(), b.config())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MergeError::Lambda(lambda));
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    if lambda == 0.0 {
        return Ok(b.clone());
    }
    let tensors = a
        .tensors()
        .iter()
        .map(|(name, ta)| {
            let tb = &b.tensors()[name];
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32)
                .collect();
            let m = Matrix::from_vec(ta.rows(), ta.cols(), data).expect("same shape");
            (name.clone(), m)
        })
        .collect();
    Ok(Checkpoint::new(a.config().clone(), tensors)?)
}

/// One masked evaluation block: framed input with MASK substituted, plus the
/// masked positions and their original tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBlock {
    pub input: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Fixed masks over held-out text, drawn once and reused across models.
///
/// The content tokens of all sequences are concatenated and cut into blocks
/// of `min(block, max_positions − 2)` tokens, each framed with CLS/SEP. Every
/// content position is masked independently with probability `p`, using a
/// per-block stream of a generator seeded by `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEvalSet {
    pub blocks: Vec<MaskedBlock>,
    pub mask_prob: f64,
    pub block: usize,
    pub seed: u64,
}

impl MaskedEvalSet {
    pub fn new<S: AsRef<[u32]>>(
        config: &TransformerConfig,
        sequences: &[S],
        mask_prob: f64,
        block: usize,
        seed: u64,
    ) -> Result<Self, MergeError> {
        if !(mask_prob > 0.0 && mask_prob < 1.0) {
            return Err(MergeError::InvalidEval(format!(
                "mask probability {mask_prob} is outside (0, 1)"
            )));
        }
        let width = block.min(config.max_positions.saturating_sub(2));
        if width == 0 {
            return Err(MergeError::InvalidEval(format!(
                "block size {block} leaves no content positions"
            )));
        }
        let stream: Vec<u32> = sequences.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
        if stream.is_empty() {
            return Err(MergeError::InvalidEval("no evaluation tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<MaskedBlock> = stream
            .chunks(width)
            .enumerate()
            .map(|(i, chunk)| {
                rng.set_stream(i as u64);
                rng.set_word_pos(0);
                let framed = frame(chunk, config.max_positions);
                let positions: Vec<usize> =
                    (1..framed.len() - 1).filter(|_| rng.gen_bool(mask_prob)).collect();
                let targets = positions.iter().map(|&p| framed[p]).collect();
                let mut input = framed;
                for &p in &positions {
                    input[p] = MASK;
                }
                MaskedBlock {
                    input,
                    positions,
                    targets,
                }
            })
            .collect();
        let set = Self {
            blocks,
            mask_prob,
            block,
            seed,
        };
        if set.num_masked() == 0 {
            return Err(MergeError::NoMaskedPositions);
        }
        Ok(set)
    }

    pub fn num_masked(&self) -> usize {
        self.blocks.iter().map(|b| b.positions.len()).sum()
    }
}

/// Per-position natural-log NLL of the masked tokens, in block order.
fn masked_nlls(ck: &Checkpoint, set: &MaskedEvalSet) -> Result<Vec<f64>, MergeError> {
    let mut out = Vec::with_capacity(set.num_masked());
    for chunk in set.blocks.chunks(EVAL_BATCH) {
        let inputs: Vec<&[u32]> = chunk.iter().map(|b| b.input.as_slice()).collect();
        let batch = SeqBatch::new(&inputs);
        batch.validate(ck)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, span) in chunk.iter().zip(batch.spans()) {
            rows.extend(b.positions.iter().map(|&p| span.start + p));
            targets.extend_from_slice(&b.targets);
        }
        if rows.is_empty() {
            continue;
        }
        out.extend(masked_nll(ck, &batch, &rows, &targets));
    }
    Ok(out)
}

/// Mean masked-token cross-entropy in nats.
pub fn mlm_eval(ck: &Checkpoint, set: &MaskedEvalSet) -> Result<f64, MergeError> {
    let nlls = masked_nlls(ck, set)?;
    if nlls.is_empty() {
        return Err(MergeError::NoMaskedPositions);
    }
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// `2^(−mean log₂ p)` over the masked positions of `set`.
pub fn pseudo_perplexity_of(ck: &Checkpoint, set: &MaskedEvalSet) -> Result<f64, MergeError> {
    let nlls = masked_nlls(ck, set)?;
    if nlls.is_empty() {
        return Err(MergeError::NoMaskedPositions);
    }
    let mean_log2 = nlls.iter().map(|n| n / std::f64::consts::LN_2).sum::<f64>() / nlls.len() as f64;
    Ok(mean_log2.exp2())
}

/// Pseudo-perplexity of `ck` on `sequences` with masks drawn from `mask_seed`.
pub fn pseudo_perplexity<S: AsRef<[u32]>>(
    ck: &Checkpoint,
    sequences: &[S],
    mask_prob: f64,
    block: usize,
    mask_seed: u64,
) -> Result<f64, MergeError> {
    let set = MaskedEvalSet::new(ck.config(), sequences, mask_prob, block, mask_seed)?;
    pseudo_perplexity_of(ck, &set)
}

/// Data a barrier scan evaluates on.
#[derive(Debug, Clone, Copy)]
pub enum EvalData<'a> {
    Mlm(&'a MaskedEvalSet),
    Classification(&'a LabeledCorpus),
}

impl EvalData<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            EvalData::Mlm(_) => LossKind::Mlm,
            EvalData::Classification(_) => LossKind::Classification,
        }
    }

    /// Loss of one checkpoint: MLM cross-entropy (nats) or mean
    /// classification cross-entropy.
    pub fn loss(&self, ck: &Checkpoint) -> Result<f64, MergeError> {
        match self {
            EvalData::Mlm(set) => mlm_eval(ck, set),
            EvalData::Classification(data) => Ok(classification_eval(ck, data)?.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub loss_kind: LossKind,
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
    pub endpoint_mean: f64,
    pub barrier: f64,
    /// Free-form provenance: plan strategies, seeds, data ids.
    pub metadata: serde_json::Value,
}

impl BarrierReport {
    /// Builds a report from per-λ losses, computing the endpoint mean and the
    /// barrier.
    pub fn from_losses(
        loss_kind: LossKind,
        lambdas: Vec<f64>,
        losses: Vec<f64>,
        metadata: serde_json::Value,
    ) -> Result<Self, MergeError> {
        MergeSpec {
            lambdas: lambdas.clone(),
            loss: loss_kind,
        }
        .validate()?;
        if lambdas.len() != losses.len() {
            return Err(MergeError::Format(format!(
                "{} lambdas but {} losses",
                lambdas.len(),
                losses.len()
            )));
        }
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(MergeError::NonFinite(lambdas[i]));
        }
        let endpoint_mean = (losses[0] + losses[losses.len() - 1]) / 2.0;
        let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            loss_kind,
            lambdas,
            losses,
            endpoint_mean,
            barrier: max - endpoint_mean,
            metadata,
        })
    }

    /// Pseudo-perplexity at each λ; only meaningful for MLM reports, whose
    /// losses are mean masked cross-entropies in nats.
    pub fn pseudo_perplexities(&self) -> Option<Vec<f64>> {
        (self.loss_kind == LossKind::Mlm).then(|| self.losses.iter().map(|l| l.exp()).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, MergeError> {
        let r: BarrierReport =
            serde_json::from_str(s).map_err(|e| MergeError::Format(e.to_string()))?;
        let checked =
            BarrierReport::from_losses(r.loss_kind, r.lambdas.clone(), r.losses.clone(), r.metadata.clone())?;
        if (checked.barrier - r.barrier).abs() > 1e-12 || (checked.endpoint_mean - r.endpoint_mean).abs() > 1e-12 {
            return Err(MergeError::Format("barrier does not match losses".into()));
        }
        Ok(r)
    }

    /// `# metadata {json}` line, a `lambda,loss` header and one row per λ.
    /// The metadata object also carries the loss kind.
    pub fn to_csv(&self) -> String {
        let mut meta = match &self.metadata {
            serde_json::Value::Object(m) => m.clone(),
            serde_json::Value::Null => serde_json::Map::new(),
            other => {
                let mut m = serde_json::Map::new();
                m.insert("metadata".into(), other.clone());
                m
            }
        };
        meta.insert("loss_kind".into(), self.loss_kind.as_str().into());
        meta.insert("endpoint_mean".into(), self.endpoint_mean.into());
        meta.insert("barrier".into(), self.barrier.into());
        let mut out = format!("# metadata {}\nlambda,loss\n", serde_json::Value::Object(meta));
        for (l, v) in self.lambdas.iter().zip(&self.losses) {
            out.push_str(&format!("{l},{v}\n"));
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Self, MergeError> {
        let bad = |m: &str| MergeError::Format(m.to_string());
        let mut lines = s.lines();
        let meta_line = lines.next().ok_or_else(|| bad("empty report"))?;
        let json = meta_line
            .strip_prefix("# metadata ")
            .ok_or_else(|| bad("missing metadata line"))?;
        let mut meta: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(json).map_err(|e| MergeError::Format(e.to_string()))?;
        let kind: LossKind = meta
            .remove("loss_kind")
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| bad("metadata lacks loss_kind"))?
            .parse()?;
        meta.remove("endpoint_mean");
        meta.remove("barrier");
        if lines.next() != Some("lambda,loss") {
            return Err(bad("missing lambda,loss header"));
        }
        let mut lambdas = Vec::new();
        let mut losses = Vec::new();
        for line in lines {
            let (l, v) = line.split_once(',').ok_or_else(|| bad(line))?;
            lambdas.push(l.parse::<f64>().map_err(|_| bad(line))?);
            losses.push(v.parse::<f64>().map_err(|_| bad(line))?);
        }
        BarrierReport::from_losses(kind, lambdas, losses, serde_json::Value::Object(meta))
    }
}

/// `max(losses) − endpoint_mean`, recomputed from the stored losses.
pub fn loss_barrier(report: &BarrierReport) -> f64 {
    let n = report.losses.len();
    let endpoint_mean = (report.losses[0] + report.losses[n - 1]) / 2.0;
    report.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max) - endpoint_mean
}

/// Evaluates the loss of every interpolation on the grid. λ values run in
/// parallel; the result does not depend on scheduling.
pub fn barrier_scan(
    a: &Checkpoint,
    b: &Checkpoint,
    spec: &MergeSpec,
    eval: EvalData<'_>,
    metadata: serde_json::Value,
) -> Result<BarrierReport, MergeError> {
    spec.validate()?;
    check_same_config(a.config(), b.config())?;
    if spec.loss != eval.kind() {
        return Err(MergeError::LossKindMismatch {
            spec: spec.loss,
            data: eval.kind(),
        });
    }
    let losses = spec
        .lambdas
        .par_iter()
        .map(|&l| {
            let loss = eval.loss(&interpolate(a, b, l)?)?;
            if loss.is_finite() {
                Ok(loss)
            } else {
                Err(MergeError::NonFinite(l))
            }
        })
        .collect::<Result<Vec<f64>, MergeError>>()?;
    BarrierReport::from_losses(spec.loss, spec.lambdas.clone(), losses, metadata)
}
