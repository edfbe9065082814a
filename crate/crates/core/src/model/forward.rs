//! Batched forward pass. Sequences are stacked row-wise into one activation
//! matrix; attention runs per sequence on its slice of rows.
//!
//! When asked, the pass keeps every intermediate needed by the backward pass
//! in the trainer.

use std::collections::BTreeMap;
use std::ops::Range;

use super::{names, CapturePoint, CaptureSpec, Checkpoint, ModelError, MASK, PAD};
use crate::numerics::{dot, gemm, normalize_in_place, softmax_in_place, Matrix};

/// Token sequences stacked end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    tokens: Vec<u32>,
    spans: Vec<Range<usize>>,
}

impl SeqBatch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = tokens.len();
            tokens.extend_from_slice(s.as_ref());
            spans.push(start..tokens.len());
        }
        Self { tokens, spans }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn validate(&self, ck: &Checkpoint) -> Result<(), ModelError> {
        let cfg = ck.config();
        for span in &self.spans {
            if span.is_empty() {
                return Err(ModelError::EmptySequence);
            }
            if span.len() > cfg.max_positions {
                return Err(ModelError::SequenceTooLong {
                    len: span.len(),
                    max: cfg.max_positions,
                });
            }
        }
        if let Some(&token) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities, indexed `seq * num_heads + head`, each `n x n`.
    pub probs: Vec<Vec<f32>>,
    pub ctx: Matrix,
    pub ln1: LnCache,
    pub h1: Matrix,
    pub z: Matrix,
    pub f: Matrix,
    pub ln2: LnCache,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderTrace {
    pub emb_ln: LnCache,
    /// Input to each layer; `inputs[0]` is the embedding output.
    pub inputs: Vec<Matrix>,
    pub layers: Vec<LayerTrace>,
}

pub(crate) struct Encoded {
    pub hidden: Matrix,
    pub captures: BTreeMap<CapturePoint, Matrix>,
    pub trace: Option<EncoderTrace>,
}

/// `x Wᵀ + b`.
pub(crate) fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(b.data());
    }
    gemm(x, false, w, true, 1.0, &mut out);
    out
}

pub(crate) fn layer_norm_rows(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    eps: f32,
    keep: bool,
) -> (Matrix, Option<LnCache>) {
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        inv_std.push(normalize_in_place(xhat.row_mut(r), eps));
    }
    let mut out = xhat.clone();
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..out.rows() {
        for ((v, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
            *v = *v * gi + bi;
        }
    }
    let cache = keep.then_some(LnCache { xhat, inv_std });
    (out, cache)
}

pub(crate) fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn add_in_place(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += *y;
    }
}

/// Keys at PAD positions are masked, unless a sequence is entirely PAD.
fn key_validity(batch: &SeqBatch) -> Vec<bool> {
    let mut valid: Vec<bool> = batch.tokens.iter().map(|&t| t != PAD).collect();
    for span in &batch.spans {
        if !valid[span.clone()].iter().any(|&v| v) {
            valid[span.clone()].iter_mut().for_each(|v| *v = true);
        }
    }
    valid
}

fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    batch: &SeqBatch,
    key_valid: &[bool],
    num_heads: usize,
    keep: bool,
) -> (Matrix, Vec<Vec<f32>>) {
    let d = q.cols();
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Matrix::zeros(q.rows(), d);
    let mut all_probs = Vec::new();
    let mut acc = vec![0f64; dk];
    for span in &batch.spans {
        let n = span.len();
        let base = span.start;
        for head in 0..num_heads {
            let cols = head * dk..(head + 1) * dk;
            let mut probs = vec![0f32; n * n];
            for qi in 0..n {
                let qrow = &q.row(base + qi)[cols.clone()];
                let prow = &mut probs[qi * n..(qi + 1) * n];
                for (ki, p) in prow.iter_mut().enumerate() {
                    *p = if key_valid[base + ki] {
                        (dot(qrow, &k.row(base + ki)[cols.clone()]) * scale) as f32
                    } else {
                        f32::NEG_INFINITY
                    };
                }
                softmax_in_place(prow);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (ki, &p) in prow.iter().enumerate() {
                    let vrow = &v.row(base + ki)[cols.clone()];
                    for (a, &x) in acc.iter_mut().zip(vrow) {
                        *a += p as f64 * x as f64;
                    }
                }
                let crow = &mut ctx.row_mut(base + qi)[cols.clone()];
                for (c, a) in crow.iter_mut().zip(&acc) {
                    *c = *a as f32;
                }
            }
            if keep {
                all_probs.push(probs);
            }
        }
    }
    (ctx, all_probs)
}

/// Runs the encoder stack. Inputs must already be validated.
pub(crate) fn encode(
    ck: &Checkpoint,
    batch: &SeqBatch,
    capture: &CaptureSpec,
    keep_trace: bool,
) -> Encoded {
    let cfg = ck.config();
    let d = cfg.d_model;
    let eps = cfg.ln_eps;
    let act = cfg.activation;
    let mut captures = BTreeMap::new();

    let tok = ck.t(names::EMB_TOK);
    let pos = ck.t(names::EMB_POS);
    let typ = ck.t(names::EMB_TYPE).row(0);
    let mut x = Matrix::zeros(batch.num_tokens(), d);
    for span in &batch.spans {
        for (p, t) in span.clone().enumerate() {
            let id = batch.tokens[t] as usize;
            let (tr, pr) = (tok.row(id), pos.row(p));
            for (j, slot) in x.row_mut(t).iter_mut().enumerate() {
                *slot = tr[j] + pr[j] + typ[j];
            }
        }
    }
    let (mut h, emb_ln) = layer_norm_rows(
        &x,
        ck.t(names::EMB_LN_G),
        ck.t(names::EMB_LN_B),
        eps,
        keep_trace,
    );
    if capture.contains(CapturePoint::PostEmbedding) {
        captures.insert(CapturePoint::PostEmbedding, h.clone());
    }

    let key_valid = key_validity(batch);
    let mut inputs = Vec::new();
    let mut layers = Vec::new();
    for l in 0..cfg.num_layers {
        let w = |s: &str| ck.t(&names::layer(l, s));
        let q = linear(&h, w("attn.Wq"), w("attn.bq"));
        let k = linear(&h, w("attn.Wk"), w("attn.bk"));
        let v = linear(&h, w("attn.Wv"), w("attn.bv"));
        let (ctx, probs) = attention(&q, &k, &v, batch, &key_valid, cfg.num_heads, keep_trace);
        if capture.contains(CapturePoint::MhaPreproj(l)) {
            captures.insert(CapturePoint::MhaPreproj(l), ctx.clone());
        }
        let mut r1 = linear(&ctx, w("attn.Wo"), w("attn.bo"));
        add_in_place(&mut r1, &h);
        let (h1, ln1) = layer_norm_rows(&r1, w("attn.ln.g"), w("attn.ln.b"), eps, keep_trace);
        if capture.contains(CapturePoint::ResAfterAttn(l)) {
            captures.insert(CapturePoint::ResAfterAttn(l), h1.clone());
        }
        let z = linear(&h1, w("ff.W1"), w("ff.b1"));
        if capture.contains(CapturePoint::FfPreact(l)) {
            captures.insert(CapturePoint::FfPreact(l), z.clone());
        }
        let mut f = z.clone();
        f.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        if capture.contains(CapturePoint::FfHidden(l)) {
            captures.insert(CapturePoint::FfHidden(l), f.clone());
        }
        let mut r2 = linear(&f, w("ff.W2"), w("ff.b2"));
        add_in_place(&mut r2, &h1);
        let (h2, ln2) = layer_norm_rows(&r2, w("ff.ln.g"), w("ff.ln.b"), eps, keep_trace);
        if capture.contains(CapturePoint::ResAfterFf(l)) {
            captures.insert(CapturePoint::ResAfterFf(l), h2.clone());
        }
        let prev = std::mem::replace(&mut h, h2);
        if keep_trace {
            inputs.push(prev);
            layers.push(LayerTrace {
                q,
                k,
                v,
                probs,
                ctx,
                ln1: ln1.expect("kept"),
                h1,
                z,
                f,
                ln2: ln2.expect("kept"),
            });
        }
    }
    if capture.contains(CapturePoint::FinalLn) {
        captures.insert(CapturePoint::FinalLn, h.clone());
    }
    let trace = keep_trace.then(|| EncoderTrace {
        emb_ln: emb_ln.expect("kept"),
        inputs,
        layers,
    });
    Encoded {
        hidden: h,
        captures,
        trace,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MlmTrace {
    pub input: Matrix,
    pub t_pre: Matrix,
    pub ln: LnCache,
    pub u: Matrix,
}

/// Dense + activation + LayerNorm + decoder over the given hidden rows.
pub(crate) fn mlm_head(ck: &Checkpoint, rows: Matrix, keep: bool) -> (Matrix, Option<MlmTrace>) {
    let cfg = ck.config();
    let t_pre = linear(&rows, ck.t(names::MLM_DENSE), ck.t(names::MLM_DENSE_B));
    let mut t = t_pre.clone();
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = cfg.activation.apply(*v));
    let (u, ln) = layer_norm_rows(
        &t,
        ck.t(names::MLM_LN_G),
        ck.t(names::MLM_LN_B),
        cfg.ln_eps,
        keep,
    );
    let logits = linear(&u, ck.t(names::MLM_DECODER), ck.t(names::MLM_DECODER_B));
    let trace = keep.then(|| MlmTrace {
        input: rows,
        t_pre,
        ln: ln.expect("kept"),
        u,
    });
    (logits, trace)
}

#[derive(Debug, Clone)]
pub(crate) struct ClsTrace {
    pub input: Matrix,
    pub pooled: Matrix,
}

/// `tanh` pooler over the first token of each sequence, then the output layer.
pub(crate) fn cls_head(ck: &Checkpoint, rows: Matrix, keep: bool) -> (Matrix, Option<ClsTrace>) {
    let mut pooled = linear(&rows, ck.t(names::CLS_POOL), ck.t(names::CLS_POOL_B));
    pooled.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    let logits = linear(&pooled, ck.t(names::CLS_OUT), ck.t(names::CLS_OUT_B));
    let trace = keep.then_some(ClsTrace {
        input: rows,
        pooled,
    });
    (logits, trace)
}

/// Negative log-likelihood of `target` under softmax(`logits`), natural log.
pub(crate) fn nll(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target] as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// MLM logits, one row per input token.
    pub logits: Matrix,
    pub captures: BTreeMap<CapturePoint, Matrix>,
}

/// Forward pass over a batch of sequences; logits and captures are stacked
/// in input order.
pub fn forward_batch<S: AsRef<[u32]>>(
    ck: &Checkpoint,
    seqs: &[S],
    capture: &CaptureSpec,
) -> Result<ForwardOutput, ModelError> {
    capture.validate(ck.config())?;
    let batch = SeqBatch::new(seqs);
    batch.validate(ck)?;
    let enc = encode(ck, &batch, capture, false);
    let (logits, _) = mlm_head(ck, enc.hidden, false);
    if !logits.is_finite() {
        return Err(ModelError::NonFinite("logits".into()));
    }
    Ok(ForwardOutput {
        logits,
        captures: enc.captures,
    })
}

pub fn forward(
    ck: &Checkpoint,
    tokens: &[u32],
    capture: &CaptureSpec,
) -> Result<ForwardOutput, ModelError> {
    forward_batch(ck, &[tokens], capture)
}

/// Mean cross-entropy over `mask_positions`, after replacing them with MASK.
pub fn mlm_loss(ck: &Checkpoint, tokens: &[u32], mask_positions: &[usize]) -> Result<f64, ModelError> {
    if mask_positions.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let mut input = tokens.to_vec();
    for &p in mask_positions {
        if p >= tokens.len() {
            return Err(ModelError::BadMaskPosition {
                pos: p,
                len: tokens.len(),
            });
        }
        input[p] = MASK;
    }
    let targets: Vec<u32> = mask_positions.iter().map(|&p| tokens[p]).collect();
    let batch = SeqBatch::new(&[input]);
    batch.validate(ck)?;
    let nlls = masked_nll(ck, &batch, mask_positions, &targets);
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// Per-position NLL at the given stacked rows of an already-masked, validated
/// batch. Only those rows go through the MLM head.
pub(crate) fn masked_nll(
    ck: &Checkpoint,
    batch: &SeqBatch,
    rows: &[usize],
    targets: &[u32],
) -> Vec<f64> {
    let enc = encode(ck, batch, &CaptureSpec::none(), false);
    let (logits, _) = mlm_head(ck, gather_rows(&enc.hidden, rows), false);
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| nll(logits.row(i), t as usize))
        .collect()
}

/// Classification logits (one row per sequence) from the first token.
pub fn classify_logits<S: AsRef<[u32]>>(ck: &Checkpoint, seqs: &[S]) -> Result<Matrix, ModelError> {
    if ck.config().num_labels.is_none() {
        return Err(ModelError::NoClassifier);
    }
    let batch = SeqBatch::new(seqs);
    batch.validate(ck)?;
    let enc = encode(ck, &batch, &CaptureSpec::none(), false);
    let firsts: Vec<usize> = batch.spans().iter().map(|s| s.start).collect();
    let (logits, _) = cls_head(ck, gather_rows(&enc.hidden, &firsts), false);
    Ok(logits)
}
