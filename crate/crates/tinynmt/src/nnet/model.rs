//! Transformer graph construction on the autodiff tape.
//!
//! Pre-norm residual blocks, sinusoidal positions, shared embeddings with a
//! tied output projection (both configurable), and a separate MLM head over
//! the encoder output.

use super::scalar::Scalar;
use super::tape::{AttnMeta, Tape, Var};
use super::{ModelConfig, NnetError, Parameters};
use crate::subword::PAD;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Padded id matrix in row-major order with its padding mask.
#[derive(Debug, Clone)]
pub struct BatchIds {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    pub pad: Vec<bool>,
}

impl BatchIds {
    /// Pad `rows` to the batch maximum with `<pad>`.
    pub fn from_rows(rows: &[Vec<u32>]) -> BatchIds {
        let batch = rows.len();
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; batch * len];
        let mut pad = vec![true; batch * len];
        for (b, row) in rows.iter().enumerate() {
            for (i, &id) in row.iter().enumerate() {
                ids[b * len + i] = id;
                pad[b * len + i] = false;
            }
        }
        BatchIds { ids, batch, len, pad }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), NnetError> {
        if self.len > config.max_len {
            return Err(NnetError::Overlength { len: self.len, max: config.max_len });
        }
        for &id in &self.ids {
            if id as usize >= config.vocab_size {
                return Err(NnetError::TokenOutOfRange { id, vocab: config.vocab_size });
            }
        }
        Ok(())
    }
}

/// Parameter tensors registered on a tape for one forward/backward pass.
pub struct Graph<'p, F: Scalar> {
    params: &'p Parameters<F>,
    vars: Vec<Var>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn register(tape: &mut Tape<F>, params: &'p Parameters<F>) -> Self {
        let vars = (0..params.len()).map(|i| tape.param(i, params.tensor(i).clone())).collect();
        Graph { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.params.index(name)]
    }
}

/// Sinusoidal position encodings for positions `0..len`, tiled over `batch`.
pub fn position_encoding<F: Scalar>(batch: usize, len: usize, d_model: usize) -> Array2<F> {
    let mut table = Array2::zeros((len, d_model));
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            table[[pos, 2 * i]] = F::from_f64(angle.sin());
            table[[pos, 2 * i + 1]] = F::from_f64(angle.cos());
        }
    }
    let mut tiled = Array2::zeros((batch * len, d_model));
    for b in 0..batch {
        for pos in 0..len {
            tiled.row_mut(b * len + pos).assign(&table.row(pos));
        }
    }
    tiled
}

fn linear<F: Scalar>(tape: &mut Tape<F>, g: &Graph<F>, prefix: &str, x: Var) -> Var {
    let w = g.var(&format!("{prefix}.weight"));
    let b = g.var(&format!("{prefix}.bias"));
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

fn layer_norm<F: Scalar>(tape: &mut Tape<F>, g: &Graph<F>, prefix: &str, x: Var) -> Var {
    let gain = g.var(&format!("{prefix}.gain"));
    let bias = g.var(&format!("{prefix}.bias"));
    tape.layer_norm(x, gain, bias)
}

fn mha<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    meta: AttnMeta,
) -> Var {
    let q = linear(tape, g, &format!("{prefix}.wq"), x_q);
    let k = linear(tape, g, &format!("{prefix}.wk"), x_kv);
    let v = linear(tape, g, &format!("{prefix}.wv"), x_kv);
    let a = tape.attention(q, k, v, meta);
    linear(tape, g, &format!("{prefix}.wo"), a)
}

fn ffn<F: Scalar>(tape: &mut Tape<F>, g: &Graph<F>, prefix: &str, x: Var) -> Var {
    let h = linear(tape, g, &format!("{prefix}.w1"), x);
    let h = tape.relu(h);
    linear(tape, g, &format!("{prefix}.w2"), h)
}

fn maybe_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Var {
    let Some(rng) = rng.as_deref_mut() else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = F::from_f64(1.0 / (1.0 - p));
    let dim = tape.value(x).dim();
    let mask = Array2::from_shape_fn(dim, |_| {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    });
    tape.dropout(x, mask)
}

fn embed_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    table: &str,
    batch: &BatchIds,
    dropout_rng: &mut Option<&mut ChaCha8Rng>,
) -> Var {
    let table = g.var(table);
    let e = tape.embed(table, &batch.ids);
    let scaled = tape.scale(e, F::from_f64((config.d_model as f64).sqrt()));
    let pe = tape.input(position_encoding(batch.batch, batch.len, config.d_model));
    let x = tape.add(scaled, pe);
    maybe_dropout(tape, x, config.dropout, dropout_rng)
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

/// Encoder stack over a source batch; returns `(batch*len, d_model)` states
/// after the final norm.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    src: &BatchIds,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let mut x = embed_tokens(tape, g, config, src_embed_name(config), src, &mut dropout_rng);
    let meta = AttnMeta {
        batch: src.batch,
        len_q: src.len,
        len_k: src.len,
        n_heads: config.n_heads,
        causal: false,
        key_pad: src.pad.clone(),
    };
    for i in 0..config.enc_layers {
        let h = layer_norm(tape, g, &format!("encoder.{i}.ln1"), x);
        let a = mha(tape, g, &format!("encoder.{i}.attn"), h, h, meta.clone());
        let a = maybe_dropout(tape, a, config.dropout, &mut dropout_rng);
        x = tape.add(x, a);
        let h = layer_norm(tape, g, &format!("encoder.{i}.ln2"), x);
        let f = ffn(tape, g, &format!("encoder.{i}.ffn"), h);
        let f = maybe_dropout(tape, f, config.dropout, &mut dropout_rng);
        x = tape.add(x, f);
    }
    layer_norm(tape, g, "encoder.norm", x)
}

/// Decoder stack with causal self-attention and cross-attention into
/// `memory`; returns `(batch*tgt_len, d_model)` states after the final norm.
pub fn decode_states<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    memory: Var,
    src: &BatchIds,
    tgt_in: &BatchIds,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let mut x = embed_tokens(tape, g, config, tgt_embed_name(config), tgt_in, &mut dropout_rng);
    let self_meta = AttnMeta {
        batch: tgt_in.batch,
        len_q: tgt_in.len,
        len_k: tgt_in.len,
        n_heads: config.n_heads,
        causal: true,
        key_pad: vec![false; tgt_in.batch * tgt_in.len],
    };
    let cross_meta = AttnMeta {
        batch: tgt_in.batch,
        len_q: tgt_in.len,
        len_k: src.len,
        n_heads: config.n_heads,
        causal: false,
        key_pad: src.pad.clone(),
    };
    for i in 0..config.dec_layers {
        let h = layer_norm(tape, g, &format!("decoder.{i}.ln1"), x);
        let a = mha(tape, g, &format!("decoder.{i}.self_attn"), h, h, self_meta.clone());
        let a = maybe_dropout(tape, a, config.dropout, &mut dropout_rng);
        x = tape.add(x, a);
        let h = layer_norm(tape, g, &format!("decoder.{i}.ln2"), x);
        let c = mha(tape, g, &format!("decoder.{i}.cross_attn"), h, memory, cross_meta.clone());
        let c = maybe_dropout(tape, c, config.dropout, &mut dropout_rng);
        x = tape.add(x, c);
        let h = layer_norm(tape, g, &format!("decoder.{i}.ln3"), x);
        let f = ffn(tape, g, &format!("decoder.{i}.ffn"), h);
        let f = maybe_dropout(tape, f, config.dropout, &mut dropout_rng);
        x = tape.add(x, f);
    }
    layer_norm(tape, g, "decoder.norm", x)
}

/// Vocabulary logits from decoder states: tied to the (target) embedding or
/// a separate projection, per config.
pub fn output_logits<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    states: Var,
) -> Var {
    if config.tie_output_projection {
        let table = g.var(tgt_embed_name(config));
        tape.matmul_t(states, table, false, true)
    } else {
        let w = g.var("out_proj.weight");
        tape.matmul(states, w)
    }
}

/// MLM-head logits over encoder states.
pub fn mlm_logits<F: Scalar>(tape: &mut Tape<F>, g: &Graph<F>, states: Var) -> Var {
    let w = g.var("mlm_head.weight");
    let b = g.var("mlm_head.bias");
    let h = tape.matmul(states, w);
    tape.add_row(h, b)
}

/// Full translation-model graph: logits `(batch*tgt_len, vocab)`.
pub fn mt_logits_graph<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    src: &BatchIds,
    tgt_in: &BatchIds,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let memory = encode(tape, g, config, src, dropout_rng.as_deref_mut());
    let states = decode_states(tape, g, config, memory, src, tgt_in, dropout_rng);
    output_logits(tape, g, config, states)
}

/// Teacher-forced translation forward pass.
/// Returns logits shaped `(batch, tgt_len, vocab)`.
pub fn forward_mt<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    src_rows: &[Vec<u32>],
    tgt_shifted_rows: &[Vec<u32>],
) -> Result<Array3<F>, NnetError> {
    config.validate()?;
    let src = BatchIds::from_rows(src_rows);
    let tgt = BatchIds::from_rows(tgt_shifted_rows);
    src.validate(config)?;
    tgt.validate(config)?;
    let mut tape = Tape::new();
    let g = Graph::register(&mut tape, params);
    let logits = mt_logits_graph(&mut tape, &g, config, &src, &tgt, None);
    let flat = tape.value(logits);
    Ok(flat
        .to_owned()
        .into_shape_with_order((tgt.batch, tgt.len, config.vocab_size))
        .expect("logit reshape"))
}

/// Encoder-only MLM forward pass: logits at every source position,
/// shaped `(batch, src_len, vocab)`.
pub fn forward_mlm<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    noised_rows: &[Vec<u32>],
) -> Result<Array3<F>, NnetError> {
    config.validate()?;
    let src = BatchIds::from_rows(noised_rows);
    src.validate(config)?;
    let mut tape = Tape::new();
    let g = Graph::register(&mut tape, params);
    let states = encode(&mut tape, &g, config, &src, None);
    let logits = mlm_logits(&mut tape, &g, states);
    let flat = tape.value(logits);
    Ok(flat
        .to_owned()
        .into_shape_with_order((src.batch, src.len, config.vocab_size))
        .expect("logit reshape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::init;

    fn rows(data: &[&[u32]]) -> Vec<Vec<u32>> {
        data.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn mt_logits_shape_contract() {
        let cfg = ModelConfig::tiny(100);
        let params = init::<f64>(&cfg, 1).unwrap();
        let src = rows(&[&[5, 6, 7], &[8, 9, 3]]);
        let tgt = rows(&[&[2, 5, 6, 7, 8], &[2, 9, 9, 9, 9]]);
        let logits = forward_mt(&params, &cfg, &src, &tgt).unwrap();
        assert_eq!(logits.dim(), (2, 5, 100));
    }

    #[test]
    fn mlm_logits_shape_contract() {
        let cfg = ModelConfig::tiny(50);
        let params = init::<f64>(&cfg, 1).unwrap();
        let logits = forward_mlm(&params, &cfg, &rows(&[&[5, 6, 7, 8], &[9, 10, 3]])).unwrap();
        assert_eq!(logits.dim(), (2, 4, 50));
    }

    #[test]
    fn overlength_and_out_of_range_are_rejected() {
        let cfg = ModelConfig::tiny(10);
        let params = init::<f64>(&cfg, 1).unwrap();
        let long: Vec<u32> = (0..40).map(|i| i % 10).collect();
        assert!(matches!(
            forward_mlm(&params, &cfg, &[long]),
            Err(NnetError::Overlength { .. })
        ));
        assert!(matches!(
            forward_mlm(&params, &cfg, &rows(&[&[11]])),
            Err(NnetError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn junk_in_padding_positions_does_not_change_logits() {
        let cfg = ModelConfig::tiny(20);
        let params = init::<f64>(&cfg, 2).unwrap();
        let tgt = rows(&[&[2, 5], &[2, 6]]);

        let src_a = BatchIds::from_rows(&rows(&[&[5, 6, 7, 8], &[9, 10]]));
        let mut src_b = src_a.clone();
        // Overwrite the two padded slots of row 1 with junk ids.
        src_b.ids[6] = 17;
        src_b.ids[7] = 3;

        let run = |src: &BatchIds| {
            let mut tape: Tape<f64> = Tape::new();
            let g = Graph::register(&mut tape, &params);
            let tgt_b = BatchIds::from_rows(&tgt);
            let logits = mt_logits_graph(&mut tape, &g, &cfg, src, &tgt_b, None);
            tape.value(logits).clone()
        };
        let la = run(&src_a);
        let lb = run(&src_b);
        let max_diff = la
            .iter()
            .zip(lb.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-6, "padding leaked into logits: {max_diff}");
    }

    #[test]
    fn causality_future_target_changes_do_not_affect_past_logits() {
        let cfg = ModelConfig::tiny(20);
        let params = init::<f64>(&cfg, 3).unwrap();
        let src = rows(&[&[5, 6, 7]]);
        let t1 = rows(&[&[2, 4, 9, 10]]);
        let t2 = rows(&[&[2, 4, 11, 12]]); // differs only at positions 2, 3
        let l1 = forward_mt(&params, &cfg, &src, &t1).unwrap();
        let l2 = forward_mt(&params, &cfg, &src, &t2).unwrap();
        for pos in 0..2 {
            for v in 0..20 {
                assert!(
                    (l1[[0, pos, v]] - l2[[0, pos, v]]).abs() < 1e-12,
                    "position {pos} depends on future tokens"
                );
            }
        }
        let mut diff = 0.0;
        for v in 0..20 {
            diff += (l1[[0, 2, v]] - l2[[0, 2, v]]).abs();
        }
        assert!(diff > 0.0, "position 2 should see its own input change");
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let cfg = ModelConfig::tiny(11);
        let mut params = init::<f64>(&cfg, 1).unwrap();
        for i in 0..params.len() {
            params.tensor_mut(i).fill(0.0);
        }
        let logits = forward_mt(&params, &cfg, &rows(&[&[5, 6]]), &rows(&[&[2, 5]])).unwrap();
        for pos in 0..2 {
            let row: Vec<f64> = (0..11).map(|v| logits[[0, pos, v]]).collect();
            let first = row[0];
            assert!(row.iter().all(|&x| (x - first).abs() < 1e-12), "logits not uniform");
        }
    }
}
