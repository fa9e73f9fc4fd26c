//! Forward and backward passes.
//!
//! Sequences are processed one at a time at their trimmed (non-PAD) length,
//! which realizes PAD masking exactly: padded positions never enter the
//! computation. Layers are pre-norm; the decoder's self-attention is
//! causally masked. The forward pass records a tape of intermediate
//! activations from which [`forward_backward`] computes analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul, matmul_at, matmul_bt};
use crate::tokenizer::{EncodedSequence, PAD};

use super::{GradStore, ModelError, ModelState};

const LN_EPS: f64 = 1e-5;

/// Dropout toggle: `Train` samples dropout masks from the model's RNG,
/// `Eval` is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Next-token logits, one row per decoder input position. Row `i` predicts
/// the token at target position `i + 1`.
#[derive(Debug, Clone)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct LnTape {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
}

struct AttnTape {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// softmax outputs, head-major: `[h][lq][lk]`
    probs: Vec<f64>,
    ctx: Vec<f64>,
    drop: Option<Vec<f64>>,
}

struct FfnTape {
    h_pre: Vec<f64>,
    drop: Option<Vec<f64>>,
}

struct EncLayerTape {
    ln1: LnTape,
    attn: AttnTape,
    ln2: LnTape,
    ffn: FfnTape,
}

struct DecLayerTape {
    ln1: LnTape,
    self_attn: AttnTape,
    ln2: LnTape,
    cross_attn: AttnTape,
    ln3: LnTape,
    ffn: FfnTape,
}

struct Tape {
    src_ids: Vec<u32>,
    dec_ids: Vec<u32>,
    enc_drop: Option<Vec<f64>>,
    dec_drop: Option<Vec<f64>>,
    enc_layers: Vec<EncLayerTape>,
    enc_final: LnTape,
    dec_layers: Vec<DecLayerTape>,
    dec_final: LnTape,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Teacher-forced forward pass. In `Train` mode dropout masks are drawn
/// from (and advance) the model's RNG.
pub fn forward(m: &mut ModelState, src: &EncodedSequence, tgt: &EncodedSequence, mode: Mode) -> Result<Logits, ModelError> {
    let mut rng = m.rng.clone();
    let result = run_forward(m, src, tgt, mode, &mut rng).map(|(_, logits)| logits);
    m.rng = rng;
    result
}

/// Deterministic forward pass without dropout; usable on a shared reference.
pub fn forward_eval(m: &ModelState, src: &EncodedSequence, tgt: &EncodedSequence) -> Result<Logits, ModelError> {
    let mut rng = m.rng.clone(); // untouched in eval mode
    run_forward(m, src, tgt, Mode::Eval, &mut rng).map(|(_, logits)| logits)
}

/// Mean token-level cross-entropy of `logits` against the target sequence,
/// ignoring PAD labels. Also returns the non-PAD token count for
/// token-weighted gradient accumulation.
pub fn loss(logits: &Logits, tgt: &EncodedSequence) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..logits.rows {
        let label = tgt.ids[i + 1];
        if label == PAD {
            continue;
        }
        let row = logits.row(i);
        let (lse, _) = log_sum_exp(row);
        sum += lse - row[label as usize];
        count += 1;
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, count)
}

fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    (max + sum.ln(), max)
}

fn validate_pair(m: &ModelState, src: &EncodedSequence, tgt: &EncodedSequence) -> Result<(usize, usize), ModelError> {
    let v = m.config.vocab_size as u32;
    for seq in [src, tgt] {
        if seq.ids.len() != seq.attention_mask.len() {
            return Err(ModelError::ShapeMismatch("ids and attention_mask lengths differ".into()));
        }
        if seq.ids.len() > m.config.max_len {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence length {} exceeds model max_len {}",
                seq.ids.len(),
                m.config.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= v) {
            return Err(ModelError::ShapeMismatch(format!("token id {bad} out of vocabulary ({v})")));
        }
    }
    let src_len = src.content_len();
    let tgt_len = tgt.content_len();
    if src_len == 0 || tgt_len < 2 {
        return Err(ModelError::ShapeMismatch("source must be non-empty and target must hold LANG and EOS".into()));
    }
    Ok((src_len, tgt_len))
}

fn run_forward(
    m: &ModelState,
    src: &EncodedSequence,
    tgt: &EncodedSequence,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape, Logits), ModelError> {
    let (src_len, tgt_len) = validate_pair(m, src, tgt)?;
    let src_ids = src.ids[..src_len].to_vec();
    let dec_ids = tgt.ids[..tgt_len - 1].to_vec();

    let d = m.config.d_model;
    let dropout = if mode == Mode::Train && m.config.dropout_rate > 0.0 { Some(m.config.dropout_rate) } else { None };

    // encoder
    let mut x = embed(m, &src_ids);
    let enc_drop = apply_dropout(&mut x, dropout, rng);
    let mut enc_layers = Vec::with_capacity(m.config.enc_layers);
    for layer in 0..m.config.enc_layers {
        let p = format!("encoder.layer{layer}");
        let ln1 = layer_norm(m, &format!("{p}.ln1"), &x);
        let mut attn = attention(m, &format!("{p}.attn"), &ln1.out, &ln1.out, src_ids.len(), src_ids.len(), false);
        let mut attn_out = linear(m, &format!("{p}.attn.wo"), &attn.ctx, src_ids.len(), d, d);
        attn.drop = apply_dropout(&mut attn_out, dropout, rng);
        add_into(&mut x, &attn_out);

        let ln2 = layer_norm(m, &format!("{p}.ln2"), &x);
        let (mut ffn_out, mut ffn) = feed_forward(m, &p, &ln2.out, src_ids.len());
        ffn.drop = apply_dropout(&mut ffn_out, dropout, rng);
        add_into(&mut x, &ffn_out);

        enc_layers.push(EncLayerTape { ln1, attn, ln2, ffn });
    }
    let enc_final = layer_norm(m, "encoder.final_ln", &x);

    // decoder
    let mut y = embed(m, &dec_ids);
    let dec_drop = apply_dropout(&mut y, dropout, rng);
    let mut dec_layers = Vec::with_capacity(m.config.dec_layers);
    for layer in 0..m.config.dec_layers {
        let p = format!("decoder.layer{layer}");
        let ln1 = layer_norm(m, &format!("{p}.ln1"), &y);
        let mut self_attn = attention(m, &format!("{p}.self_attn"), &ln1.out, &ln1.out, dec_ids.len(), dec_ids.len(), true);
        let mut sa_out = linear(m, &format!("{p}.self_attn.wo"), &self_attn.ctx, dec_ids.len(), d, d);
        self_attn.drop = apply_dropout(&mut sa_out, dropout, rng);
        add_into(&mut y, &sa_out);

        let ln2 = layer_norm(m, &format!("{p}.ln2"), &y);
        let mut cross_attn =
            attention(m, &format!("{p}.cross_attn"), &ln2.out, &enc_final.out, dec_ids.len(), src_ids.len(), false);
        let mut ca_out = linear(m, &format!("{p}.cross_attn.wo"), &cross_attn.ctx, dec_ids.len(), d, d);
        cross_attn.drop = apply_dropout(&mut ca_out, dropout, rng);
        add_into(&mut y, &ca_out);

        let ln3 = layer_norm(m, &format!("{p}.ln3"), &y);
        let (mut ffn_out, mut ffn) = feed_forward(m, &p, &ln3.out, dec_ids.len());
        ffn.drop = apply_dropout(&mut ffn_out, dropout, rng);
        add_into(&mut y, &ffn_out);

        dec_layers.push(DecLayerTape { ln1, self_attn, ln2, cross_attn, ln3, ffn });
    }
    let dec_final = layer_norm(m, "decoder.final_ln", &y);

    let logits_data = linear(m, "decoder.output", &dec_final.out, dec_ids.len(), d, m.config.vocab_size);
    let logits = Logits { rows: dec_ids.len(), vocab: m.config.vocab_size, data: logits_data };
    let tape = Tape { src_ids, dec_ids, enc_drop, dec_drop, enc_layers, enc_final, dec_layers, dec_final };
    Ok((tape, logits))
}

/// Eval-mode encoder-only forward, used by the incremental decoder.
pub(super) fn encode_source(m: &ModelState, src_ids: &[u32]) -> Vec<f64> {
    let d = m.config.d_model;
    let l = src_ids.len();
    let mut x = embed(m, src_ids);
    for layer in 0..m.config.enc_layers {
        let p = format!("encoder.layer{layer}");
        let ln1 = layer_norm(m, &format!("{p}.ln1"), &x);
        let attn = attention(m, &format!("{p}.attn"), &ln1.out, &ln1.out, l, l, false);
        let attn_out = linear(m, &format!("{p}.attn.wo"), &attn.ctx, l, d, d);
        add_into(&mut x, &attn_out);
        let ln2 = layer_norm(m, &format!("{p}.ln2"), &x);
        let (ffn_out, _) = feed_forward(m, &p, &ln2.out, l);
        add_into(&mut x, &ffn_out);
    }
    layer_norm(m, "encoder.final_ln", &x).out
}

fn embed(m: &ModelState, ids: &[u32]) -> Vec<f64> {
    let d = m.config.d_model;
    let scale = (d as f64).sqrt();
    let table = &m.get("shared.embed").data;
    let pos = &m.get("shared.pos_enc").data;
    let mut x = vec![0.0; ids.len() * d];
    for (i, &id) in ids.iter().enumerate() {
        let row = &table[id as usize * d..(id as usize + 1) * d];
        let pos_row = &pos[i * d..(i + 1) * d];
        let out = &mut x[i * d..(i + 1) * d];
        for j in 0..d {
            out[j] = row[j] * scale + pos_row[j];
        }
    }
    x
}

fn apply_dropout(x: &mut [f64], rate: Option<f64>, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let rate = rate?;
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    for (v, &s) in x.iter_mut().zip(&mask) {
        *v *= s;
    }
    Some(mask)
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn layer_norm(m: &ModelState, prefix: &str, x: &[f64]) -> LnTape {
    let d = m.config.d_model;
    let gamma = &m.get(&format!("{prefix}.gamma")).data;
    let beta = &m.get(&format!("{prefix}.beta")).data;
    let rows = x.len() / d;
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            x_hat[r * d + j] = xh;
            out[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
    LnTape { x_hat, inv_std, out }
}

/// `x · w + b` for an `[l × din]` input.
fn linear(m: &ModelState, prefix: &str, x: &[f64], l: usize, din: usize, dout: usize) -> Vec<f64> {
    let w = &m.get(&format!("{prefix}.w")).data;
    let b = &m.get(&format!("{prefix}.b")).data;
    let mut out = matmul(x, w, l, din, dout);
    for r in 0..l {
        add_into(&mut out[r * dout..(r + 1) * dout], b);
    }
    out
}

/// Multi-head scaled dot-product attention up to the per-head contexts;
/// the output projection is applied by the caller so its dropout mask can
/// live in the tape.
fn attention(m: &ModelState, prefix: &str, q_input: &[f64], kv_input: &[f64], lq: usize, lk: usize, causal: bool) -> AttnTape {
    let d = m.config.d_model;
    let heads = m.config.n_heads;
    let dh = m.config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let q = linear(m, &format!("{prefix}.wq"), q_input, lq, d, d);
    let k = linear(m, &format!("{prefix}.wk"), kv_input, lk, d, d);
    let v = linear(m, &format!("{prefix}.wv"), kv_input, lk, d, d);

    let mut probs = vec![0.0; heads * lq * lk];
    let mut ctx = vec![0.0; lq * d];
    for h in 0..heads {
        let qh = split_head(&q, lq, d, h, dh);
        let kh = split_head(&k, lk, d, h, dh);
        let vh = split_head(&v, lk, d, h, dh);
        let mut scores = matmul_bt(&qh, &kh, lq, dh, lk);
        for s in scores.iter_mut() {
            *s *= inv_sqrt;
        }
        if causal {
            for i in 0..lq {
                for j in i + 1..lk {
                    scores[i * lk + j] = f64::NEG_INFINITY;
                }
            }
        }
        crate::tensor::softmax_rows(&mut scores, lq, lk);
        let ch = matmul(&scores, &vh, lq, lk, dh);
        probs[h * lq * lk..(h + 1) * lq * lk].copy_from_slice(&scores);
        merge_head(&mut ctx, &ch, lq, d, h, dh);
    }
    AttnTape { q, k, v, probs, ctx, drop: None }
}

fn feed_forward(m: &ModelState, layer_prefix: &str, x: &[f64], l: usize) -> (Vec<f64>, FfnTape) {
    let d = m.config.d_model;
    let f = m.config.ffn_dim;
    let h_pre = linear(m, &format!("{layer_prefix}.ffn.w1"), x, l, d, f);
    let h_post: Vec<f64> = h_pre.iter().map(|&v| v.max(0.0)).collect();
    let out = linear(m, &format!("{layer_prefix}.ffn.w2"), &h_post, l, f, d);
    (out, FfnTape { h_pre, drop: None })
}

fn split_head(x: &[f64], l: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * dh];
    for i in 0..l {
        out[i * dh..(i + 1) * dh].copy_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn merge_head(dst: &mut [f64], src: &[f64], l: usize, d: usize, h: usize, dh: usize) {
    for i in 0..l {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Forward, cross-entropy, and full backward for one sequence pair.
/// Token-sum gradients are accumulated into `grads`; the return value is
/// `(sum_loss, token_count)` so callers can weight micro-batches exactly.
pub fn forward_backward(
    m: &mut ModelState,
    src: &EncodedSequence,
    tgt: &EncodedSequence,
    mode: Mode,
    grads: &mut GradStore,
) -> Result<(f64, usize), ModelError> {
    let mut rng = m.rng.clone();
    let result = run_forward(m, src, tgt, mode, &mut rng);
    m.rng = rng;
    let (tape, logits) = result?;

    // cross-entropy and dlogits (sum over counted tokens)
    let vocab = logits.vocab;
    let mut d_logits = vec![0.0; logits.data.len()];
    let mut sum_loss = 0.0;
    let mut count = 0usize;
    for i in 0..logits.rows {
        let label = tgt.ids[i + 1];
        if label == PAD {
            continue;
        }
        let row = logits.row(i);
        let (lse, _) = log_sum_exp(row);
        sum_loss += lse - row[label as usize];
        count += 1;
        let d_row = &mut d_logits[i * vocab..(i + 1) * vocab];
        for (j, &x) in row.iter().enumerate() {
            d_row[j] = (x - lse).exp();
        }
        d_row[label as usize] -= 1.0;
    }

    backward(m, &tape, &d_logits, grads);
    grads.token_count += count;
    Ok((sum_loss, count))
}

struct GradSink<'a> {
    grads: &'a mut GradStore,
}

impl GradSink<'_> {
    fn add(&mut self, m: &ModelState, name: &str, values: &[f64]) {
        let i = m.idx(name);
        let t = &mut self.grads.tensors[i];
        debug_assert_eq!(t.data.len(), values.len(), "gradient shape for {name}");
        for (a, b) in t.data.iter_mut().zip(values) {
            *a += b;
        }
    }
}

fn backward(m: &ModelState, tape: &Tape, d_logits: &[f64], grads: &mut GradStore) {
    let d = m.config.d_model;
    let vocab = m.config.vocab_size;
    let lt = tape.dec_ids.len();
    let ls = tape.src_ids.len();
    let mut sink = GradSink { grads };

    // output projection
    let (mut d_y, dw, db) = linear_bwd(&tape.dec_final.out, &m.get("decoder.output.w").data, d_logits, lt, d, vocab);
    sink.add(m, "decoder.output.w", &dw);
    sink.add(m, "decoder.output.b", &db);

    d_y = layer_norm_bwd(m, "decoder.final_ln", &tape.dec_final, &d_y, &mut sink);

    // decoder layers in reverse; cross-attention contributes to d_enc_out
    let mut d_enc_out = vec![0.0; ls * d];
    for (layer_idx, layer) in tape.dec_layers.iter().enumerate().rev() {
        let p = format!("decoder.layer{layer_idx}");

        // ffn sublayer
        let mut d_ffn_out = d_y.clone();
        mask_dropout(&mut d_ffn_out, &layer.ffn.drop);
        let d_ln3_out = ffn_bwd(m, &p, &layer.ln3.out, &layer.ffn, &d_ffn_out, lt, &mut sink);
        let d_ln3_in = layer_norm_bwd_named(m, &format!("{p}.ln3"), &layer.ln3, &d_ln3_out, &mut sink);
        add_into(&mut d_y, &d_ln3_in);

        // cross-attention sublayer
        let mut d_ca_out = d_y.clone();
        mask_dropout(&mut d_ca_out, &layer.cross_attn.drop);
        let (d_ln2_out, d_kv) = attention_bwd(
            m,
            &format!("{p}.cross_attn"),
            &layer.cross_attn,
            &layer.ln2.out,
            &tape.enc_final.out,
            lt,
            ls,
            &d_ca_out,
            &mut sink,
        );
        add_into(&mut d_enc_out, &d_kv);
        let d_ln2_in = layer_norm_bwd_named(m, &format!("{p}.ln2"), &layer.ln2, &d_ln2_out, &mut sink);
        add_into(&mut d_y, &d_ln2_in);

        // self-attention sublayer
        let mut d_sa_out = d_y.clone();
        mask_dropout(&mut d_sa_out, &layer.self_attn.drop);
        let (mut d_ln1_out, d_kv_self) = attention_bwd(
            m,
            &format!("{p}.self_attn"),
            &layer.self_attn,
            &layer.ln1.out,
            &layer.ln1.out,
            lt,
            lt,
            &d_sa_out,
            &mut sink,
        );
        add_into(&mut d_ln1_out, &d_kv_self);
        let d_ln1_in = layer_norm_bwd_named(m, &format!("{p}.ln1"), &layer.ln1, &d_ln1_out, &mut sink);
        add_into(&mut d_y, &d_ln1_in);
    }

    // decoder embedding
    mask_dropout(&mut d_y, &tape.dec_drop);
    embed_bwd(m, &tape.dec_ids, &d_y, &mut sink);

    // encoder final LN
    let mut d_x = layer_norm_bwd(m, "encoder.final_ln", &tape.enc_final, &d_enc_out, &mut sink);

    // encoder layers in reverse
    for (layer_idx, layer) in tape.enc_layers.iter().enumerate().rev() {
        let p = format!("encoder.layer{layer_idx}");

        let mut d_ffn_out = d_x.clone();
        mask_dropout(&mut d_ffn_out, &layer.ffn.drop);
        let d_ln2_out = ffn_bwd(m, &p, &layer.ln2.out, &layer.ffn, &d_ffn_out, ls, &mut sink);
        let d_ln2_in = layer_norm_bwd_named(m, &format!("{p}.ln2"), &layer.ln2, &d_ln2_out, &mut sink);
        add_into(&mut d_x, &d_ln2_in);

        let mut d_attn_out = d_x.clone();
        mask_dropout(&mut d_attn_out, &layer.attn.drop);
        let (mut d_ln1_out, d_kv_self) = attention_bwd(
            m,
            &format!("{p}.attn"),
            &layer.attn,
            &layer.ln1.out,
            &layer.ln1.out,
            ls,
            ls,
            &d_attn_out,
            &mut sink,
        );
        add_into(&mut d_ln1_out, &d_kv_self);
        let d_ln1_in = layer_norm_bwd_named(m, &format!("{p}.ln1"), &layer.ln1, &d_ln1_out, &mut sink);
        add_into(&mut d_x, &d_ln1_in);
    }

    mask_dropout(&mut d_x, &tape.enc_drop);
    embed_bwd(m, &tape.src_ids, &d_x, &mut sink);
}

fn mask_dropout(dy: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, &s) in dy.iter_mut().zip(mask) {
            *v *= s;
        }
    }
}

/// Backward of `y = x·w + b`: returns `dx` and the parameter gradients.
fn linear_bwd(x: &[f64], w: &[f64], dy: &[f64], l: usize, din: usize, dout: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dx = matmul_bt(dy, w, l, dout, din);
    let dw = matmul_at(x, dy, din, l, dout);
    let mut db = vec![0.0; dout];
    for r in 0..l {
        add_into(&mut db, &dy[r * dout..(r + 1) * dout]);
    }
    (dx, dw, db)
}

fn layer_norm_bwd(m: &ModelState, prefix: &str, tape: &LnTape, dy: &[f64], sink: &mut GradSink) -> Vec<f64> {
    layer_norm_bwd_named(m, prefix, tape, dy, sink)
}

fn layer_norm_bwd_named(m: &ModelState, prefix: &str, tape: &LnTape, dy: &[f64], sink: &mut GradSink) -> Vec<f64> {
    let d = m.config.d_model;
    let gamma = &m.get(&format!("{prefix}.gamma")).data;
    let rows = dy.len() / d;
    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let dy_row = &dy[r * d..(r + 1) * d];
        let xh_row = &tape.x_hat[r * d..(r + 1) * d];
        let istd = tape.inv_std[r];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            d_gamma[j] += dy_row[j] * xh_row[j];
            d_beta[j] += dy_row[j];
            let dxhat = dy_row[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh_row[j];
        }
        let n = d as f64;
        for j in 0..d {
            let dxhat = dy_row[j] * gamma[j];
            dx[r * d + j] = istd * (dxhat - sum_dxhat / n - xh_row[j] * sum_dxhat_xhat / n);
        }
    }
    sink.add(m, &format!("{prefix}.gamma"), &d_gamma);
    sink.add(m, &format!("{prefix}.beta"), &d_beta);
    dx
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd(
    m: &ModelState,
    prefix: &str,
    tape: &AttnTape,
    q_input: &[f64],
    kv_input: &[f64],
    lq: usize,
    lk: usize,
    d_out: &[f64],
    sink: &mut GradSink,
) -> (Vec<f64>, Vec<f64>) {
    let d = m.config.d_model;
    let heads = m.config.n_heads;
    let dh = m.config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // output projection
    let (d_ctx, dwo, dbo) = linear_bwd(&tape.ctx, &m.get(&format!("{prefix}.wo.w")).data, d_out, lq, d, d);
    sink.add(m, &format!("{prefix}.wo.w"), &dwo);
    sink.add(m, &format!("{prefix}.wo.b"), &dbo);

    let mut dq = vec![0.0; lq * d];
    let mut dk = vec![0.0; lk * d];
    let mut dv = vec![0.0; lk * d];
    for h in 0..heads {
        let d_ch = split_head(&d_ctx, lq, d, h, dh);
        let qh = split_head(&tape.q, lq, d, h, dh);
        let kh = split_head(&tape.k, lk, d, h, dh);
        let vh = split_head(&tape.v, lk, d, h, dh);
        let probs = &tape.probs[h * lq * lk..(h + 1) * lq * lk];

        let mut d_probs = matmul_bt(&d_ch, &vh, lq, dh, lk);
        let d_vh = matmul_at(probs, &d_ch, lk, lq, dh);

        // softmax backward per row: dS = P ⊙ (dP − Σ_j dP⊙P)
        for i in 0..lq {
            let p_row = &probs[i * lk..(i + 1) * lk];
            let dp_row = &mut d_probs[i * lk..(i + 1) * lk];
            let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
            for j in 0..lk {
                dp_row[j] = p_row[j] * (dp_row[j] - dot);
            }
        }
        let d_s = d_probs;
        let mut d_qh = matmul(&d_s, &kh, lq, lk, dh);
        let mut d_kh = matmul_at(&d_s, &qh, lk, lq, dh);
        for v in d_qh.iter_mut() {
            *v *= inv_sqrt;
        }
        for v in d_kh.iter_mut() {
            *v *= inv_sqrt;
        }
        merge_head(&mut dq, &d_qh, lq, d, h, dh);
        merge_head(&mut dk, &d_kh, lk, d, h, dh);
        merge_head(&mut dv, &d_vh, lk, d, h, dh);
    }

    let (d_q_input, dwq, dbq) = linear_bwd(q_input, &m.get(&format!("{prefix}.wq.w")).data, &dq, lq, d, d);
    sink.add(m, &format!("{prefix}.wq.w"), &dwq);
    sink.add(m, &format!("{prefix}.wq.b"), &dbq);
    let (mut d_kv_input, dwk, dbk) = linear_bwd(kv_input, &m.get(&format!("{prefix}.wk.w")).data, &dk, lk, d, d);
    sink.add(m, &format!("{prefix}.wk.w"), &dwk);
    sink.add(m, &format!("{prefix}.wk.b"), &dbk);
    let (d_kv2, dwv, dbv) = linear_bwd(kv_input, &m.get(&format!("{prefix}.wv.w")).data, &dv, lk, d, d);
    sink.add(m, &format!("{prefix}.wv.w"), &dwv);
    sink.add(m, &format!("{prefix}.wv.b"), &dbv);
    add_into(&mut d_kv_input, &d_kv2);

    (d_q_input, d_kv_input)
}

fn ffn_bwd(
    m: &ModelState,
    layer_prefix: &str,
    x: &[f64],
    tape: &FfnTape,
    d_out: &[f64],
    l: usize,
    sink: &mut GradSink,
) -> Vec<f64> {
    let d = m.config.d_model;
    let f = m.config.ffn_dim;
    let h_post: Vec<f64> = tape.h_pre.iter().map(|&v| v.max(0.0)).collect();

    let (mut d_h, dw2, db2) = linear_bwd(&h_post, &m.get(&format!("{layer_prefix}.ffn.w2.w")).data, d_out, l, f, d);
    sink.add(m, &format!("{layer_prefix}.ffn.w2.w"), &dw2);
    sink.add(m, &format!("{layer_prefix}.ffn.w2.b"), &db2);

    for (g, &pre) in d_h.iter_mut().zip(&tape.h_pre) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }

    let (dx, dw1, db1) = linear_bwd(x, &m.get(&format!("{layer_prefix}.ffn.w1.w")).data, &d_h, l, d, f);
    sink.add(m, &format!("{layer_prefix}.ffn.w1.w"), &dw1);
    sink.add(m, &format!("{layer_prefix}.ffn.w1.b"), &db1);
    dx
}

fn embed_bwd(m: &ModelState, ids: &[u32], dx: &[f64], sink: &mut GradSink) {
    let d = m.config.d_model;
    let scale = (d as f64).sqrt();
    let mut d_embed = vec![0.0; m.config.vocab_size * d];
    for (i, &id) in ids.iter().enumerate() {
        let src = &dx[i * d..(i + 1) * d];
        let dst = &mut d_embed[id as usize * d..(id as usize + 1) * d];
        for j in 0..d {
            dst[j] += src[j] * scale;
        }
    }
    sink.add(m, "shared.embed", &d_embed);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelState};
    use crate::tokenizer::{EncodedSequence, LangTag};

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            max_len: 16,
            dropout_rate: 0.1,
            seed: 42,
        }
    }

    fn seq(ids: Vec<u32>, content: usize) -> EncodedSequence {
        let mut mask = vec![1u8; content];
        mask.resize(ids.len(), 0);
        EncodedSequence { ids, attention_mask: mask, lang: LangTag::urdu() }
    }

    #[test]
    fn softmax_of_logits_normalizes() {
        let m = ModelState::init(tiny_config(10)).unwrap();
        let src = seq(vec![6, 7, 8, 2, 0, 0], 4);
        let tgt = seq(vec![5, 8, 7, 2, 0, 0], 4);
        let logits = forward_eval(&m, &src, &tgt).unwrap();
        assert_eq!(logits.rows, 3);
        for i in 0..logits.rows {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let normalized: f64 = row.iter().map(|x| (x - max).exp() / sum).sum();
            assert!((normalized - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn causality_future_target_does_not_leak() {
        let m = ModelState::init(tiny_config(10)).unwrap();
        let src = seq(vec![6, 7, 2, 0], 3);
        let a = seq(vec![5, 6, 7, 8, 2, 0], 5);
        let mut b_ids = a.ids.clone();
        b_ids[3] = 9; // perturb a later target token
        let b = seq(b_ids, 5);
        let la = forward_eval(&m, &src, &a).unwrap();
        let lb = forward_eval(&m, &src, &b).unwrap();
        for i in 0..3 {
            assert_eq!(la.row(i), lb.row(i), "row {i} changed");
        }
        assert_ne!(la.row(3), lb.row(3), "perturbed position should differ");
    }

    #[test]
    fn pad_positions_do_not_affect_logits() {
        let m = ModelState::init(tiny_config(10)).unwrap();
        let src_a = seq(vec![6, 7, 2, 0, 0, 0], 3);
        let mut ids = src_a.ids.clone();
        ids[4] = 9; // perturb a PAD-masked position
        let src_b = seq(ids, 3);
        let tgt = seq(vec![5, 6, 2, 0], 3);
        let la = forward_eval(&m, &src_a, &tgt).unwrap();
        let lb = forward_eval(&m, &src_b, &tgt).unwrap();
        assert_eq!(la.data, lb.data);
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let vocab = 12;
        let logits = Logits { rows: 3, vocab, data: vec![0.7; 3 * vocab] };
        let tgt = seq(vec![5, 6, 7, 2, 0], 4);
        let (l, count) = loss(&logits, &tgt);
        assert_eq!(count, 3);
        assert!((l - (vocab as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn one_hot_logits_loss_vanishes() {
        let vocab = 8;
        let tgt = seq(vec![5, 6, 7, 2], 4);
        let mut data = vec![0.0; 3 * vocab];
        for (i, &label) in [6u32, 7, 2].iter().enumerate() {
            data[i * vocab + label as usize] = 50.0;
        }
        let logits = Logits { rows: 3, vocab, data };
        let (l, _) = loss(&logits, &tgt);
        assert!(l < 1e-9);
    }

    #[test]
    fn loss_matches_brute_force_cross_entropy() {
        let m = ModelState::init(tiny_config(9)).unwrap();
        let src = seq(vec![6, 8, 7, 2, 0], 4);
        let tgt = seq(vec![5, 7, 8, 6, 2, 0], 5);
        let logits = forward_eval(&m, &src, &tgt).unwrap();
        let (l, count) = loss(&logits, &tgt);
        assert_eq!(count, 4);

        // independent route: explicit softmax then -ln p
        let mut expect = 0.0;
        for i in 0..logits.rows {
            let row = logits.row(i);
            let label = tgt.ids[i + 1] as usize;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let p = (row[label] - max).exp() / z;
            expect += -p.ln();
        }
        expect /= count as f64;
        assert!((l - expect).abs() < 1e-9, "{l} vs {expect}");
    }

    #[test]
    fn train_mode_dropout_advances_rng_and_perturbs() {
        let mut m = ModelState::init(tiny_config(10)).unwrap();
        let src = seq(vec![6, 7, 2, 0], 3);
        let tgt = seq(vec![5, 6, 7, 2], 4);
        let eval = forward_eval(&m, &src, &tgt).unwrap();
        let train1 = forward(&mut m, &src, &tgt, Mode::Train).unwrap();
        let train2 = forward(&mut m, &src, &tgt, Mode::Train).unwrap();
        assert_ne!(eval.data, train1.data);
        assert_ne!(train1.data, train2.data, "rng should advance between train forwards");
        let eval2 = forward_eval(&m, &src, &tgt).unwrap();
        assert_eq!(eval.data, eval2.data, "eval mode is deterministic");
    }

    /// Central finite differences on a sample of entries in every trainable
    /// tensor. The exhaustive version runs in the acceptance suite.
    #[test]
    fn quick_gradient_check() {
        let mut config = tiny_config(9);
        config.dropout_rate = 0.0;
        let mut m = ModelState::init(config).unwrap();
        let src = seq(vec![6, 8, 7, 2, 0], 4);
        let tgt = seq(vec![5, 7, 8, 6, 2, 0], 5);

        let mut grads = GradStore::zeros_like(&m);
        let (_, count) = forward_backward(&mut m, &src, &tgt, Mode::Eval, &mut grads).unwrap();
        assert!(count > 0);

        let names: Vec<String> = m.tensor_names().to_vec();
        for name in names {
            if m.is_buffer(&name) {
                continue;
            }
            let len = m.tensor(&name).unwrap().len();
            let samples: Vec<usize> = (0..3.min(len)).map(|i| i * (len / 3.min(len)).max(1) % len).collect();
            for idx in samples {
                let orig = m.tensor(&name).unwrap().data[idx];
                let h = (orig.abs() * 1e-3).max(1e-4);

                let hi = (orig + h) as f32 as f64;
                let lo = (orig - h) as f32 as f64;
                m.tensor_mut(&name).unwrap().data[idx] = hi;
                let (l_hi, _) = loss(&forward_eval(&m, &src, &tgt).unwrap(), &tgt);
                m.tensor_mut(&name).unwrap().data[idx] = lo;
                let (l_lo, _) = loss(&forward_eval(&m, &src, &tgt).unwrap(), &tgt);
                m.tensor_mut(&name).unwrap().data[idx] = orig;

                let fd = (l_hi - l_lo) / (hi - lo);
                let analytic = grads.get(&m, &name).unwrap().data[idx] / count as f64;
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / denom < 1e-3,
                    "{name}[{idx}]: fd {fd:.6e} analytic {analytic:.6e}"
                );
            }
        }
    }
}
