//! Incremental (KV-cached) forward passes for decoding.
//!
//! Mirrors the training graph arithmetic on plain arrays, one sentence at a
//! time: the encoder runs once per source, cross-attention keys/values are
//! projected once, and each generated token appends one row to the per-layer
//! self-attention caches.

use super::scalar::Scalar;
use super::tape::matmul;
use super::{ModelConfig, NnetError, Parameters};
use ndarray::{s, Array1, Array2};

fn ln_rows<F: Scalar>(x: &Array2<F>, gain: &Array2<F>, bias: &Array2<F>) -> Array2<F> {
    let (n, d) = x.dim();
    let eps = F::from_f64(1e-5);
    let inv_d = F::one() / F::from_f64(d as f64);
    let g = gain.row(0);
    let b = bias.row(0);
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mut mu = F::zero();
        for &v in row.iter() {
            mu = mu + v;
        }
        mu = mu * inv_d;
        let mut var = F::zero();
        for &v in row.iter() {
            let c = v - mu;
            var = var + c * c;
        }
        var = var * inv_d;
        let r = F::one() / (var + eps).sqrt();
        let mut o = out.row_mut(i);
        for j in 0..d {
            o[j] = (row[j] - mu) * r * g[j] + b[j];
        }
    }
    out
}

fn linear_rows<F: Scalar>(params: &Parameters<F>, prefix: &str, x: &Array2<F>) -> Array2<F> {
    let w = params.get(&format!("{prefix}.weight"));
    let b = params.get(&format!("{prefix}.bias"));
    let mut out = matmul(x.view(), w.view());
    out += &b.slice(s![0, ..]);
    out
}

fn softmax_inplace<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = F::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Full (non-causal, unmasked) self-attention used by the encoder side.
fn self_attention_full<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    n_heads: usize,
) -> Array2<F> {
    let (n, d) = q.dim();
    let dh = d / n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((n, d));
    for h in 0..n_heads {
        let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
        let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
        let mut scores = matmul(qh, kh.t());
        scores.mapv_inplace(|x| x * scale);
        for i in 0..n {
            softmax_inplace(scores.row_mut(i).as_slice_mut().unwrap());
        }
        let ctx = matmul(scores.view(), vh);
        out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ctx);
    }
    out
}

fn embed_positioned<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    table: &str,
    ids: &[u32],
    start_pos: usize,
) -> Array2<F> {
    let t = params.get(table);
    let d = config.d_model;
    let scale = F::from_f64((d as f64).sqrt());
    let mut x = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        let pos = start_pos + i;
        let mut row = x.row_mut(i);
        let e = t.row(id as usize);
        for j in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            row[2 * j] = e[2 * j] * scale + F::from_f64(angle.sin());
            row[2 * j + 1] = e[2 * j + 1] * scale + F::from_f64(angle.cos());
        }
    }
    x
}

fn src_embed_name(config: &ModelConfig) -> &'static str {
    if config.share_embeddings {
        "embed.weight"
    } else {
        "src_embed.weight"
    }
}

fn tgt_embed_name(config: &ModelConfig) -> &'static str {
    if config.share_embeddings {
        "embed.weight"
    } else {
        "tgt_embed.weight"
    }
}

/// Encoder output plus per-layer cross-attention projections.
#[derive(Debug, Clone)]
pub struct EncoderCache<F: Scalar> {
    pub memory: Array2<F>,
    cross_k: Vec<Array2<F>>,
    cross_v: Vec<Array2<F>>,
}

/// Run the encoder over one source sentence (no padding involved).
pub fn encode_source<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    src_ids: &[u32],
) -> Result<EncoderCache<F>, NnetError> {
    if src_ids.is_empty() {
        return Err(NnetError::ShapeMismatch("empty source".into()));
    }
    if src_ids.len() > config.max_len {
        return Err(NnetError::Overlength { len: src_ids.len(), max: config.max_len });
    }
    for &id in src_ids {
        if id as usize >= config.vocab_size {
            return Err(NnetError::TokenOutOfRange { id, vocab: config.vocab_size });
        }
    }
    let mut x = embed_positioned(params, config, src_embed_name(config), src_ids, 0);
    for i in 0..config.enc_layers {
        let h = ln_rows(
            &x,
            params.get(&format!("encoder.{i}.ln1.gain")),
            params.get(&format!("encoder.{i}.ln1.bias")),
        );
        let q = linear_rows(params, &format!("encoder.{i}.attn.wq"), &h);
        let k = linear_rows(params, &format!("encoder.{i}.attn.wk"), &h);
        let v = linear_rows(params, &format!("encoder.{i}.attn.wv"), &h);
        let a = self_attention_full(&q, &k, &v, config.n_heads);
        let a = linear_rows(params, &format!("encoder.{i}.attn.wo"), &a);
        x += &a;
        let h = ln_rows(
            &x,
            params.get(&format!("encoder.{i}.ln2.gain")),
            params.get(&format!("encoder.{i}.ln2.bias")),
        );
        let f = linear_rows(params, &format!("encoder.{i}.ffn.w1"), &h)
            .mapv(|v| if v > F::zero() { v } else { F::zero() });
        let f = linear_rows(params, &format!("encoder.{i}.ffn.w2"), &f);
        x += &f;
    }
    let memory = ln_rows(&x, params.get("encoder.norm.gain"), params.get("encoder.norm.bias"));

    let mut cross_k = Vec::with_capacity(config.dec_layers);
    let mut cross_v = Vec::with_capacity(config.dec_layers);
    for i in 0..config.dec_layers {
        cross_k.push(linear_rows(params, &format!("decoder.{i}.cross_attn.wk"), &memory));
        cross_v.push(linear_rows(params, &format!("decoder.{i}.cross_attn.wv"), &memory));
    }
    Ok(EncoderCache { memory, cross_k, cross_v })
}

/// Grows one row per fed token; cheap to clone for beam bookkeeping.
#[derive(Debug, Clone)]
pub struct DecoderState<F: Scalar> {
    self_k: Vec<Array2<F>>,
    self_v: Vec<Array2<F>>,
    pos: usize,
}

impl<F: Scalar> DecoderState<F> {
    pub fn new(config: &ModelConfig) -> Self {
        DecoderState {
            self_k: (0..config.dec_layers).map(|_| Array2::zeros((0, config.d_model))).collect(),
            self_v: (0..config.dec_layers).map(|_| Array2::zeros((0, config.d_model))).collect(),
            pos: 0,
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }
}

fn append_row<F: Scalar>(cache: &mut Array2<F>, row: &Array2<F>) {
    let mut grown = Array2::zeros((cache.nrows() + 1, cache.ncols()));
    if cache.nrows() > 0 {
        grown.slice_mut(s![..cache.nrows(), ..]).assign(cache);
    }
    grown.row_mut(cache.nrows()).assign(&row.row(0));
    *cache = grown;
}

fn attend_cached<F: Scalar>(q: &Array2<F>, k: &Array2<F>, v: &Array2<F>, n_heads: usize) -> Array2<F> {
    let d = q.ncols();
    let dh = d / n_heads;
    let t = k.nrows();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((1, d));
    for h in 0..n_heads {
        let qh = q.slice(s![0, h * dh..(h + 1) * dh]);
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
        let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
        let mut scores: Array1<F> = Array1::zeros(t);
        for j in 0..t {
            let mut dot = F::zero();
            let krow = kh.row(j);
            for c in 0..dh {
                dot = dot + qh[c] * krow[c];
            }
            scores[j] = dot * scale;
        }
        softmax_inplace(scores.as_slice_mut().unwrap());
        let mut ctx: Array1<F> = Array1::zeros(dh);
        for j in 0..t {
            let p = scores[j];
            let vrow = vh.row(j);
            for c in 0..dh {
                ctx[c] = ctx[c] + p * vrow[c];
            }
        }
        out.slice_mut(s![0, h * dh..(h + 1) * dh]).assign(&ctx);
    }
    out
}

/// Feed one token; returns vocabulary logits for the next position.
pub fn decoder_step<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    enc: &EncoderCache<F>,
    state: &mut DecoderState<F>,
    token: u32,
) -> Result<Vec<F>, NnetError> {
    if token as usize >= config.vocab_size {
        return Err(NnetError::TokenOutOfRange { id: token, vocab: config.vocab_size });
    }
    if state.pos >= config.max_len {
        return Err(NnetError::Overlength { len: state.pos + 1, max: config.max_len });
    }
    let mut x = embed_positioned(params, config, tgt_embed_name(config), &[token], state.pos);
    for i in 0..config.dec_layers {
        let h = ln_rows(
            &x,
            params.get(&format!("decoder.{i}.ln1.gain")),
            params.get(&format!("decoder.{i}.ln1.bias")),
        );
        let q = linear_rows(params, &format!("decoder.{i}.self_attn.wq"), &h);
        let k = linear_rows(params, &format!("decoder.{i}.self_attn.wk"), &h);
        let v = linear_rows(params, &format!("decoder.{i}.self_attn.wv"), &h);
        append_row(&mut state.self_k[i], &k);
        append_row(&mut state.self_v[i], &v);
        let a = attend_cached(&q, &state.self_k[i], &state.self_v[i], config.n_heads);
        let a = linear_rows(params, &format!("decoder.{i}.self_attn.wo"), &a);
        x += &a;

        let h = ln_rows(
            &x,
            params.get(&format!("decoder.{i}.ln2.gain")),
            params.get(&format!("decoder.{i}.ln2.bias")),
        );
        let q = linear_rows(params, &format!("decoder.{i}.cross_attn.wq"), &h);
        let a = attend_cached(&q, &enc.cross_k[i], &enc.cross_v[i], config.n_heads);
        let a = linear_rows(params, &format!("decoder.{i}.cross_attn.wo"), &a);
        x += &a;

        let h = ln_rows(
            &x,
            params.get(&format!("decoder.{i}.ln3.gain")),
            params.get(&format!("decoder.{i}.ln3.bias")),
        );
        let f = linear_rows(params, &format!("decoder.{i}.ffn.w1"), &h)
            .mapv(|v| if v > F::zero() { v } else { F::zero() });
        let f = linear_rows(params, &format!("decoder.{i}.ffn.w2"), &f);
        x += &f;
    }
    let h = ln_rows(&x, params.get("decoder.norm.gain"), params.get("decoder.norm.bias"));
    let logits = if config.tie_output_projection {
        matmul(h.view(), params.get(tgt_embed_name(config)).t())
    } else {
        matmul(h.view(), params.get("out_proj.weight").view())
    };
    state.pos += 1;
    Ok(logits.row(0).to_vec())
}
