//! Reverse-mode gradients for the encoder and both heads, driven by the
//! trace kept by the forward pass.

use std::collections::BTreeMap;

use crate::model::forward::{
    cls_head, encode, gather_rows, mlm_head, EncoderTrace, LnCache, SeqBatch,
};
use crate::model::{names, CaptureSpec, Checkpoint};
use crate::numerics::{dot, gemm, softmax_in_place, Matrix};

/// Gradients keyed by tensor name, same shapes as the weights.
pub(crate) type Grads = BTreeMap<String, Matrix>;

fn grad_slot<'a>(grads: &'a mut Grads, ck: &Checkpoint, name: &str) -> &'a mut Matrix {
    grads.entry(name.to_string()).or_insert_with(|| {
        let t = ck.t(name);
        Matrix::zeros(t.rows(), t.cols())
    })
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Backward through `y = x Wᵀ + b`; accumulates into dW/db and returns dx.
fn linear_backward(
    x: &Matrix,
    dy: &Matrix,
    ck: &Checkpoint,
    w_name: &str,
    b_name: &str,
    grads: &mut Grads,
) -> Matrix {
    let w = ck.t(w_name);
    gemm(dy, true, x, false, 1.0, grad_slot(grads, ck, w_name));
    {
        let mut db = vec![0f64; dy.cols()];
        for r in 0..dy.rows() {
            for (a, &g) in db.iter_mut().zip(dy.row(r)) {
                *a += g as f64;
            }
        }
        for (slot, a) in grad_slot(grads, ck, b_name).data_mut().iter_mut().zip(db) {
            *slot += a as f32;
        }
    }
    let mut dx = Matrix::zeros(dy.rows(), w.cols());
    gemm(dy, false, w, false, 0.0, &mut dx);
    dx
}

fn ln_backward(
    dy: &Matrix,
    cache: &LnCache,
    ck: &Checkpoint,
    g_name: &str,
    b_name: &str,
    grads: &mut Grads,
) -> Matrix {
    let gamma = ck.t(g_name).data().to_vec();
    let d = dy.cols();
    let mut dg = vec![0f64; d];
    let mut db = vec![0f64; d];
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0f64; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut m1 = 0f64;
        let mut m2 = 0f64;
        for j in 0..d {
            let g = dyr[j] as f64;
            dg[j] += g * xh[j] as f64;
            db[j] += g;
            dxhat[j] = g * gamma[j] as f64;
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j] as f64;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let inv = cache.inv_std[r] as f64;
        for (j, slot) in dx.row_mut(r).iter_mut().enumerate() {
            *slot = (inv * (dxhat[j] - m1 - xh[j] as f64 * m2)) as f32;
        }
    }
    let dg: Vec<f32> = dg.into_iter().map(|v| v as f32).collect();
    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
    add_into(grad_slot(grads, ck, g_name).data_mut(), &dg);
    add_into(grad_slot(grads, ck, b_name).data_mut(), &db);
    dx
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dctx: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Vec<f32>],
    batch: &SeqBatch,
    num_heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dkm = Matrix::zeros(q.rows(), d);
    let mut dv = Matrix::zeros(q.rows(), d);
    for (s, span) in batch.spans().iter().enumerate() {
        let n = span.len();
        let base = span.start;
        for head in 0..num_heads {
            let cols = head * dk..(head + 1) * dk;
            let p = &probs[s * num_heads + head];
            let mut ds = vec![0f64; n * n];
            for qi in 0..n {
                let dc = &dctx.row(base + qi)[cols.clone()];
                let prow = &p[qi * n..(qi + 1) * n];
                let mut dp = vec![0f64; n];
                let mut inner = 0f64;
                for ki in 0..n {
                    dp[ki] = dot(dc, &v.row(base + ki)[cols.clone()]);
                    inner += dp[ki] * prow[ki] as f64;
                }
                for ki in 0..n {
                    ds[qi * n + ki] = prow[ki] as f64 * (dp[ki] - inner) * scale;
                    let pk = prow[ki] as f64;
                    if pk != 0.0 {
                        let dvrow = &mut dv.row_mut(base + ki)[cols.clone()];
                        for (slot, &g) in dvrow.iter_mut().zip(dc) {
                            *slot += (pk * g as f64) as f32;
                        }
                    }
                }
            }
            for qi in 0..n {
                let mut acc = vec![0f64; dk];
                for ki in 0..n {
                    let g = ds[qi * n + ki];
                    if g != 0.0 {
                        for (a, &x) in acc.iter_mut().zip(&k.row(base + ki)[cols.clone()]) {
                            *a += g * x as f64;
                        }
                    }
                }
                for (slot, a) in dq.row_mut(base + qi)[cols.clone()].iter_mut().zip(&acc) {
                    *slot = *a as f32;
                }
            }
            for ki in 0..n {
                let mut acc = vec![0f64; dk];
                for qi in 0..n {
                    let g = ds[qi * n + ki];
                    if g != 0.0 {
                        for (a, &x) in acc.iter_mut().zip(&q.row(base + qi)[cols.clone()]) {
                            *a += g * x as f64;
                        }
                    }
                }
                for (slot, a) in dkm.row_mut(base + ki)[cols.clone()].iter_mut().zip(&acc) {
                    *slot = *a as f32;
                }
            }
        }
    }
    (dq, dkm, dv)
}

pub(crate) fn encoder_backward(
    ck: &Checkpoint,
    batch: &SeqBatch,
    trace: &EncoderTrace,
    dhidden: Matrix,
    grads: &mut Grads,
) {
    let cfg = ck.config();
    let act = cfg.activation;
    let mut dh = dhidden;
    for l in (0..cfg.num_layers).rev() {
        let lt = &trace.layers[l];
        let h_in = &trace.inputs[l];
        let n = |s: &str| names::layer(l, s);

        let dr2 = ln_backward(&dh, &lt.ln2, ck, &n("ff.ln.g"), &n("ff.ln.b"), grads);
        let mut dz = linear_backward(&lt.f, &dr2, ck, &n("ff.W2"), &n("ff.b2"), grads);
        for (g, &z) in dz.data_mut().iter_mut().zip(lt.z.data()) {
            *g *= act.derivative(z);
        }
        let mut dh1 = linear_backward(&lt.h1, &dz, ck, &n("ff.W1"), &n("ff.b1"), grads);
        add_into(dh1.data_mut(), dr2.data());

        let dr1 = ln_backward(&dh1, &lt.ln1, ck, &n("attn.ln.g"), &n("attn.ln.b"), grads);
        let dctx = linear_backward(&lt.ctx, &dr1, ck, &n("attn.Wo"), &n("attn.bo"), grads);
        let (dq, dk, dv) =
            attention_backward(&dctx, &lt.q, &lt.k, &lt.v, &lt.probs, batch, cfg.num_heads);
        let mut dx = dr1;
        for (dm, w, b) in [(&dq, "attn.Wq", "attn.bq"), (&dk, "attn.Wk", "attn.bk"), (&dv, "attn.Wv", "attn.bv")] {
            let part = linear_backward(h_in, dm, ck, &n(w), &n(b), grads);
            add_into(dx.data_mut(), part.data());
        }
        dh = dx;
    }
    let dx = ln_backward(&dh, &trace.emb_ln, ck, names::EMB_LN_G, names::EMB_LN_B, grads);
    let d = cfg.d_model;
    let mut dtok = std::mem::replace(grad_slot(grads, ck, names::EMB_TOK), Matrix::zeros(0, 0));
    let mut dpos = std::mem::replace(grad_slot(grads, ck, names::EMB_POS), Matrix::zeros(0, 0));
    let mut dtype = std::mem::replace(grad_slot(grads, ck, names::EMB_TYPE), Matrix::zeros(0, 0));
    for span in batch.spans() {
        for (p, t) in span.clone().enumerate() {
            let id = batch.tokens()[t] as usize;
            let g = dx.row(t);
            add_into(dtok.row_mut(id), g);
            add_into(dpos.row_mut(p), g);
            add_into(&mut dtype.row_mut(0)[..d], g);
        }
    }
    grads.insert(names::EMB_TOK.into(), dtok);
    grads.insert(names::EMB_POS.into(), dpos);
    grads.insert(names::EMB_TYPE.into(), dtype);
}

/// Softmax cross-entropy gradient, scaled by `1/count`. Returns the summed loss.
fn ce_grad(logits: &mut Matrix, targets: &[usize], count: usize) -> f64 {
    let mut total = 0.0;
    let inv = 1.0 / count as f32;
    for (r, &t) in targets.iter().enumerate() {
        total += crate::model::forward::nll(logits.row(r), t);
        let row = logits.row_mut(r);
        softmax_in_place(row);
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    total
}

fn scatter_rows(dst: &mut Matrix, rows: &[usize], src: &Matrix) {
    for (i, &r) in rows.iter().enumerate() {
        add_into(dst.row_mut(r), src.row(i));
    }
}

/// Mean masked-LM cross-entropy over `rows` of an already-masked batch and
/// its gradient with respect to every weight.
pub(crate) fn mlm_loss_and_grads(
    ck: &Checkpoint,
    batch: &SeqBatch,
    rows: &[usize],
    targets: &[u32],
) -> (f64, Grads) {
    let mut grads = Grads::new();
    let enc = encode(ck, batch, &CaptureSpec::none(), true);
    let trace = enc.trace.expect("trace kept");
    let (mut logits, head) = mlm_head(ck, gather_rows(&enc.hidden, rows), true);
    let head = head.expect("trace kept");
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = ce_grad(&mut logits, &targets, rows.len()) / rows.len() as f64;

    let cfg = ck.config();
    let du = linear_backward(&head.u, &logits, ck, names::MLM_DECODER, names::MLM_DECODER_B, &mut grads);
    let mut dt = ln_backward(&du, &head.ln, ck, names::MLM_LN_G, names::MLM_LN_B, &mut grads);
    for (g, &x) in dt.data_mut().iter_mut().zip(head.t_pre.data()) {
        *g *= cfg.activation.derivative(x);
    }
    let drows = linear_backward(&head.input, &dt, ck, names::MLM_DENSE, names::MLM_DENSE_B, &mut grads);
    let mut dhidden = Matrix::zeros(enc.hidden.rows(), enc.hidden.cols());
    scatter_rows(&mut dhidden, rows, &drows);
    encoder_backward(ck, batch, &trace, dhidden, &mut grads);
    (loss, grads)
}

/// Mean classification cross-entropy over a batch and its gradients.
pub(crate) fn cls_loss_and_grads(
    ck: &Checkpoint,
    batch: &SeqBatch,
    labels: &[usize],
) -> (f64, Grads) {
    let mut grads = Grads::new();
    let enc = encode(ck, batch, &CaptureSpec::none(), true);
    let trace = enc.trace.expect("trace kept");
    let firsts: Vec<usize> = batch.spans().iter().map(|s| s.start).collect();
    let (mut logits, head) = cls_head(ck, gather_rows(&enc.hidden, &firsts), true);
    let head = head.expect("trace kept");
    let loss = ce_grad(&mut logits, labels, labels.len()) / labels.len() as f64;

    let mut dpool = linear_backward(&head.pooled, &logits, ck, names::CLS_OUT, names::CLS_OUT_B, &mut grads);
    for (g, &p) in dpool.data_mut().iter_mut().zip(head.pooled.data()) {
        *g *= 1.0 - p * p;
    }
    let drows = linear_backward(&head.input, &dpool, ck, names::CLS_POOL, names::CLS_POOL_B, &mut grads);
    let mut dhidden = Matrix::zeros(enc.hidden.rows(), enc.hidden.cols());
    scatter_rows(&mut dhidden, &firsts, &drows);
    encoder_backward(ck, batch, &trace, dhidden, &mut grads);
    (loss, grads)
}
