//! Greedy and beam decoding.
//!
//! Decoding runs in eval mode with an incremental per-layer key/value cache,
//! so each generated token costs one decoder-row forward instead of a full
//! prefix recompute. Ties in the argmax break toward the lowest token id,
//! keeping decoding fully deterministic.

use crate::tensor::Tensor;
use crate::tokenizer::{EncodedSequence, LangTag, Vocabulary, EOS};

use super::{ModelError, ModelState};

/// Beam-search settings. Scores are mean token log-probabilities.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub width: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { width: 4 }
    }
}

/// Greedy decode: starting from the target-language token, repeatedly append
/// the argmax next token until EOS or `max_len` generated tokens.
pub fn decode_greedy(
    m: &ModelState,
    vocab: &Vocabulary,
    src: &EncodedSequence,
    target_lang: &LangTag,
    max_len: usize,
) -> Result<String, ModelError> {
    let lang_id = vocab.lang_id(target_lang)?;
    let mut dec = IncrementalDecoder::new(m, src)?;
    let mut ids = vec![lang_id];
    let limit = max_len.min(m.config.max_len);
    loop {
        let logits = dec.push(m, *ids.last().unwrap())?;
        let next = argmax_lowest_id(&logits);
        if next == EOS || ids.len() >= limit {
            break;
        }
        ids.push(next);
    }
    Ok(vocab.decode(&ids)?)
}

/// Beam search with mean-logprob scoring. Returns the best hypothesis.
pub fn decode_beam(
    m: &ModelState,
    vocab: &Vocabulary,
    src: &EncodedSequence,
    target_lang: &LangTag,
    max_len: usize,
    beam: &BeamConfig,
) -> Result<String, ModelError> {
    let width = beam.width.max(1);
    let lang_id = vocab.lang_id(target_lang)?;
    let limit = max_len.min(m.config.max_len);

    struct Hyp {
        ids: Vec<u32>,
        logprob: f64,
        dec: IncrementalDecoder,
    }

    let mut live = vec![Hyp { ids: vec![lang_id], logprob: 0.0, dec: IncrementalDecoder::new(m, src)? }];
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();

    while !live.is_empty() {
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        let mut logits_cache = Vec::with_capacity(live.len());
        for (bi, hyp) in live.iter_mut().enumerate() {
            let logits = hyp.dec.push(m, *hyp.ids.last().unwrap())?;
            let logprobs = log_softmax(&logits);
            let mut top: Vec<(u32, f64)> = logprobs.iter().enumerate().map(|(i, &lp)| (i as u32, lp)).collect();
            top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(tok, lp) in top.iter().take(width) {
                candidates.push((bi, tok, hyp.logprob + lp));
            }
            logits_cache.push(());
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));

        let mut next_live = Vec::new();
        for (bi, tok, logprob) in candidates {
            if next_live.len() >= width {
                break;
            }
            let hyp = &live[bi];
            if tok == EOS || hyp.ids.len() >= limit {
                let gen_len = hyp.ids.len().max(1);
                done.push((hyp.ids.clone(), logprob / gen_len as f64));
            } else {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                next_live.push(Hyp { ids, logprob, dec: live[bi].dec.clone() });
            }
        }
        if done.len() >= width {
            break;
        }
        live = next_live;
    }

    let best = done
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(ids, _)| ids)
        .unwrap_or_else(|| vec![lang_id]);
    Ok(vocab.decode(&best)?)
}

fn argmax_lowest_id(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

// ---------------------------------------------------------------------------
// Incremental decoder
// ---------------------------------------------------------------------------

/// Eval-mode decoder state: encoder output projected once into per-layer
/// cross-attention keys/values, plus growing self-attention caches.
#[derive(Clone)]
struct IncrementalDecoder {
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    src_len: usize,
    pos: usize,
}

impl IncrementalDecoder {
    fn new(m: &ModelState, src: &EncodedSequence) -> Result<Self, ModelError> {
        let src_len = src.content_len();
        if src_len == 0 {
            return Err(ModelError::ShapeMismatch("empty source".into()));
        }
        if src.ids.len() > m.config.max_len {
            return Err(ModelError::ShapeMismatch("source longer than model max_len".into()));
        }
        let v = m.config.vocab_size as u32;
        if let Some(&bad) = src.ids.iter().find(|&&id| id >= v) {
            return Err(ModelError::ShapeMismatch(format!("token id {bad} out of vocabulary ({v})")));
        }
        let enc_out = super::net::encode_source(m, &src.ids[..src_len]);
        let d = m.config.d_model;
        let mut cross_k = Vec::with_capacity(m.config.dec_layers);
        let mut cross_v = Vec::with_capacity(m.config.dec_layers);
        for layer in 0..m.config.dec_layers {
            let p = format!("decoder.layer{layer}.cross_attn");
            let mut k = Vec::with_capacity(src_len * d);
            let mut v = Vec::with_capacity(src_len * d);
            for row in enc_out.chunks_exact(d) {
                k.extend_from_slice(&row_linear(m, &format!("{p}.wk"), row));
                v.extend_from_slice(&row_linear(m, &format!("{p}.wv"), row));
            }
            cross_k.push(k);
            cross_v.push(v);
        }
        Ok(Self {
            cross_k,
            cross_v,
            self_k: vec![Vec::new(); m.config.dec_layers],
            self_v: vec![Vec::new(); m.config.dec_layers],
            src_len,
            pos: 0,
        })
    }

    /// Feeds one token and returns the next-token logits row.
    fn push(&mut self, m: &ModelState, token: u32) -> Result<Vec<f64>, ModelError> {
        let d = m.config.d_model;
        if self.pos >= m.config.max_len {
            return Err(ModelError::ShapeMismatch("decoder position beyond max_len".into()));
        }
        let scale = (d as f64).sqrt();
        let embed = &m.get("shared.embed").data;
        let pos_enc = &m.get("shared.pos_enc").data;
        let mut y: Vec<f64> = (0..d)
            .map(|j| embed[token as usize * d + j] * scale + pos_enc[self.pos * d + j])
            .collect();

        for layer in 0..m.config.dec_layers {
            let p = format!("decoder.layer{layer}");

            let a = ln_row(m, &format!("{p}.ln1"), &y);
            let q = row_linear(m, &format!("{p}.self_attn.wq"), &a);
            let k_new = row_linear(m, &format!("{p}.self_attn.wk"), &a);
            let v_new = row_linear(m, &format!("{p}.self_attn.wv"), &a);
            self.self_k[layer].extend_from_slice(&k_new);
            self.self_v[layer].extend_from_slice(&v_new);
            let ctx = attend_row(m, &q, &self.self_k[layer], &self.self_v[layer], self.pos + 1);
            let sa = row_linear(m, &format!("{p}.self_attn.wo"), &ctx);
            add(&mut y, &sa);

            let b = ln_row(m, &format!("{p}.ln2"), &y);
            let q2 = row_linear(m, &format!("{p}.cross_attn.wq"), &b);
            let ctx2 = attend_row(m, &q2, &self.cross_k[layer], &self.cross_v[layer], self.src_len);
            let ca = row_linear(m, &format!("{p}.cross_attn.wo"), &ctx2);
            add(&mut y, &ca);

            let c = ln_row(m, &format!("{p}.ln3"), &y);
            let h = row_linear(m, &format!("{p}.ffn.w1"), &c);
            let h: Vec<f64> = h.iter().map(|&x| x.max(0.0)).collect();
            let ffn = row_linear(m, &format!("{p}.ffn.w2"), &h);
            add(&mut y, &ffn);
        }

        let out = ln_row(m, "decoder.final_ln", &y);
        let logits = row_linear(m, "decoder.output", &out);
        self.pos += 1;
        Ok(logits)
    }
}

fn add(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn ln_row(m: &ModelState, prefix: &str, x: &[f64]) -> Vec<f64> {
    let gamma = &m.get(&format!("{prefix}.gamma")).data;
    let beta = &m.get(&format!("{prefix}.beta")).data;
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let istd = 1.0 / (var + 1e-5).sqrt();
    (0..d).map(|j| gamma[j] * (x[j] - mean) * istd + beta[j]).collect()
}

/// `x · w + b` for a single row.
fn row_linear(m: &ModelState, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w: &Tensor = m.get(&format!("{prefix}.w"));
    let b = &m.get(&format!("{prefix}.b")).data;
    let (din, dout) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), din);
    let mut out = b.clone();
    for (i, &xi) in x.iter().enumerate() {
        let w_row = &w.data[i * dout..(i + 1) * dout];
        for (o, &wij) in out.iter_mut().zip(w_row) {
            *o += xi * wij;
        }
    }
    out
}

/// Multi-head attention of one query row against `len` cached key/value rows.
fn attend_row(m: &ModelState, q: &[f64], keys: &[f64], values: &[f64], len: usize) -> Vec<f64> {
    let d = m.config.d_model;
    let heads = m.config.n_heads;
    let dh = m.config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; d];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut scores = Vec::with_capacity(len);
        for t in 0..len {
            let kh = &keys[t * d + h * dh..t * d + (h + 1) * dh];
            let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
            scores.push(dot * inv_sqrt);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for t in 0..len {
            let w = scores[t] / sum;
            let vh = &values[t * d + h * dh..t * d + (h + 1) * dh];
            for j in 0..dh {
                ctx[h * dh + j] += w * vh[j];
            }
        }
    }
    ctx
}
