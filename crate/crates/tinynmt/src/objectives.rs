//! The three training objectives and their noise functions.
//!
//! MT: label-smoothed likelihood on parallel data. MLM: masked-token
//! cross-entropy at the encoder. DAE: span corruption on the encoder input
//! with the clean sentence as the decoder target.

use crate::nnet::model::{self, BatchIds, Graph};
use crate::nnet::{ModelConfig, NnetError, Parameters, Scalar, Tape, Var};
use crate::subword::{BOS, EOS, MASK};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

pub const LABEL_SMOOTHING: f64 = 0.1;

/// BERT-style token masking: each eligible position is selected with
/// `mask_rate`; selected positions become `<mask>` / a random id / stay put
/// according to `action_split`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MlmNoiseConfig {
    pub mask_rate: f64,
    pub action_split: (f64, f64, f64),
}

impl Default for MlmNoiseConfig {
    fn default() -> Self {
        MlmNoiseConfig { mask_rate: 0.15, action_split: (0.8, 0.1, 0.1) }
    }
}

/// mBART-style span corruption for the DAE objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DaeNoiseConfig {
    pub span_lambda: f64,
    pub mask_token_ratio: f64,
    pub shuffle_sentences: bool,
}

impl Default for DaeNoiseConfig {
    fn default() -> Self {
        DaeNoiseConfig { span_lambda: 3.5, mask_token_ratio: 0.35, shuffle_sentences: false }
    }
}

/// Range of ids eligible for masking/random replacement (control tokens and
/// `</s>` are never touched). `first_regular..vocab_size`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseVocab {
    pub first_regular: u32,
    pub vocab_size: u32,
}

fn eligible(id: u32, nv: &NoiseVocab) -> bool {
    id >= nv.first_regular && id < nv.vocab_size
}

/// Apply MLM noise; returns the noised sequence and the selected positions.
pub fn apply_mlm_noise(
    seq: &[u32],
    cfg: &MlmNoiseConfig,
    nv: &NoiseVocab,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<usize>) {
    let mut noised = seq.to_vec();
    let mut targets = Vec::new();
    let n_regular = nv.vocab_size - nv.first_regular;
    for (i, &id) in seq.iter().enumerate() {
        if !eligible(id, nv) {
            continue;
        }
        if rng.gen::<f64>() >= cfg.mask_rate {
            continue;
        }
        targets.push(i);
        let (p_mask, p_rand, _p_keep) = cfg.action_split;
        let u = rng.gen::<f64>();
        if u < p_mask {
            noised[i] = MASK;
        } else if u < p_mask + p_rand {
            noised[i] = nv.first_regular + rng.gen_range(0..n_regular);
        } // else keep
    }
    (noised, targets)
}

/// Span corruption: spans with Poisson(`span_lambda`) lengths are replaced
/// by single `<mask>` tokens until `mask_token_ratio` of the tokens are
/// covered; a zero-length draw inserts a lone `<mask>`.
pub fn apply_dae_noise(seq: &[u32], cfg: &DaeNoiseConfig, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n = seq.len();
    let target = (cfg.mask_token_ratio * n as f64).round() as usize;
    if target == 0 {
        return seq.to_vec();
    }
    let poisson = Poisson::new(cfg.span_lambda).expect("span_lambda > 0");
    // span id per position: usize::MAX = untouched; otherwise positions with
    // the same id collapse into one <mask>.
    let mut span_of = vec![usize::MAX; n];
    let mut insertions: Vec<usize> = Vec::new(); // gap index 0..=n
    let mut covered = 0usize;
    let mut next_span = 0usize;
    let mut attempts = 0usize;
    while covered < target && attempts < 16 * n + 16 {
        attempts += 1;
        let len = poisson.sample(rng) as usize;
        if len == 0 {
            insertions.push(rng.gen_range(0..=n));
            continue;
        }
        let len = len.min(target - covered);
        let free: Vec<usize> = (0..n).filter(|&i| span_of[i] == usize::MAX).collect();
        if free.is_empty() {
            break;
        }
        let start = free[rng.gen_range(0..free.len())];
        let mut l = 0;
        let mut i = start;
        while i < n && l < len && span_of[i] == usize::MAX {
            span_of[i] = next_span;
            l += 1;
            i += 1;
        }
        covered += l;
        next_span += 1;
    }

    let mut out = Vec::with_capacity(n + insertions.len());
    let mut last_span = usize::MAX;
    for i in 0..n {
        for _ in insertions.iter().filter(|&&g| g == i) {
            out.push(MASK);
            last_span = usize::MAX;
        }
        if span_of[i] == usize::MAX {
            out.push(seq[i]);
            last_span = usize::MAX;
        } else if span_of[i] != last_span {
            out.push(MASK);
            last_span = span_of[i];
        }
    }
    for _ in insertions.iter().filter(|&&g| g == n) {
        out.push(MASK);
    }
    out
}

/// Build the MT loss graph over already-tagged source rows and target rows
/// (both without `</s>`; it is appended here). Loss averages over all real
/// target tokens including `</s>`.
#[allow(clippy::too_many_arguments)]
pub fn mt_loss_graph<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    src_rows: &[Vec<u32>],
    tgt_rows: &[Vec<u32>],
    smoothing: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, NnetError> {
    if src_rows.len() != tgt_rows.len() {
        return Err(NnetError::ShapeMismatch(format!(
            "{} source rows vs {} target rows",
            src_rows.len(),
            tgt_rows.len()
        )));
    }
    let src_full: Vec<Vec<u32>> = src_rows
        .iter()
        .map(|r| {
            let mut v = r.clone();
            v.push(EOS);
            v
        })
        .collect();
    let mut dec_in = Vec::with_capacity(tgt_rows.len());
    let mut dec_out = Vec::with_capacity(tgt_rows.len());
    for r in tgt_rows {
        let mut din = Vec::with_capacity(r.len() + 1);
        din.push(BOS);
        din.extend_from_slice(r);
        let mut dout = r.clone();
        dout.push(EOS);
        dec_in.push(din);
        dec_out.push(dout);
    }
    let src = BatchIds::from_rows(&src_full);
    let tgt_in = BatchIds::from_rows(&dec_in);
    src.validate(config)?;
    tgt_in.validate(config)?;

    let logits = model::mt_logits_graph(tape, g, config, &src, &tgt_in, dropout_rng);
    let mut targets = vec![0u32; tgt_in.batch * tgt_in.len];
    let mut weights = vec![F::zero(); tgt_in.batch * tgt_in.len];
    for (b, row) in dec_out.iter().enumerate() {
        for (i, &id) in row.iter().enumerate() {
            targets[b * tgt_in.len + i] = id;
            weights[b * tgt_in.len + i] = F::one();
        }
    }
    Ok(tape.cross_entropy(logits, &targets, &weights, smoothing))
}

/// MLM loss graph: cross-entropy of the original ids at the selected
/// positions only, averaged over those positions. Returns the loss var and
/// the number of target positions.
pub fn mlm_loss_graph<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    rows: &[Vec<u32>],
    cfg: &MlmNoiseConfig,
    nv: &NoiseVocab,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize), NnetError> {
    let mut noised_rows = Vec::with_capacity(rows.len());
    let mut selected: Vec<Vec<usize>> = Vec::with_capacity(rows.len());
    for r in rows {
        let mut full = r.clone();
        full.push(EOS);
        let (noised, targets) = apply_mlm_noise(&full, cfg, nv, rng);
        noised_rows.push(noised);
        selected.push(targets);
    }
    let batch = BatchIds::from_rows(&noised_rows);
    batch.validate(config)?;

    let states = model::encode(tape, g, config, &batch, None);
    let logits = model::mlm_logits(tape, g, states);

    let mut targets = vec![0u32; batch.batch * batch.len];
    let mut weights = vec![F::zero(); batch.batch * batch.len];
    let mut n_targets = 0usize;
    for (b, (row, sel)) in rows.iter().zip(&selected).enumerate() {
        let mut full = row.clone();
        full.push(EOS);
        for &i in sel {
            targets[b * batch.len + i] = full[i];
            weights[b * batch.len + i] = F::one();
            n_targets += 1;
        }
    }
    Ok((tape.cross_entropy(logits, &targets, &weights, 0.0), n_targets))
}

/// DAE loss graph: encoder reads `lang_token + corrupted`, decoder
/// reconstructs the clean sequence. Label smoothing as for MT.
#[allow(clippy::too_many_arguments)]
pub fn dae_loss_graph<F: Scalar>(
    tape: &mut Tape<F>,
    g: &Graph<F>,
    config: &ModelConfig,
    rows: &[Vec<u32>],
    lang_token: Option<u32>,
    cfg: &DaeNoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var, NnetError> {
    let mut corrupted_rows = Vec::with_capacity(rows.len());
    for r in rows {
        let corrupted = apply_dae_noise(r, cfg, rng);
        let mut src = Vec::with_capacity(corrupted.len() + 1);
        if let Some(t) = lang_token {
            src.push(t);
        }
        src.extend_from_slice(&corrupted);
        if src.len() + 1 > config.max_len {
            return Err(NnetError::Overlength { len: src.len() + 1, max: config.max_len });
        }
        corrupted_rows.push(src);
    }
    mt_loss_graph(tape, g, config, &corrupted_rows, rows, LABEL_SMOOTHING, None)
}

/// Scalar MT loss (evaluation convenience over the graph builder).
pub fn mt_loss<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    src_rows: &[Vec<u32>],
    tgt_rows: &[Vec<u32>],
) -> Result<f64, NnetError> {
    let mut tape = Tape::new();
    let g = Graph::register(&mut tape, params);
    let loss = mt_loss_graph(&mut tape, &g, config, src_rows, tgt_rows, LABEL_SMOOTHING, None)?;
    Ok(tape.scalar_value(loss))
}

/// Scalar MLM loss over a single sequence.
pub fn mlm_loss<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    seq: &[u32],
    cfg: &MlmNoiseConfig,
    nv: &NoiseVocab,
    rng: &mut ChaCha8Rng,
) -> Result<f64, NnetError> {
    let mut tape = Tape::new();
    let g = Graph::register(&mut tape, params);
    let (loss, _) = mlm_loss_graph(&mut tape, &g, config, &[seq.to_vec()], cfg, nv, rng)?;
    Ok(tape.scalar_value(loss))
}

/// Scalar DAE loss over a single sequence.
pub fn dae_loss<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    seq: &[u32],
    lang_token: Option<u32>,
    cfg: &DaeNoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, NnetError> {
    let mut tape = Tape::new();
    let g = Graph::register(&mut tape, params);
    let loss = dae_loss_graph(&mut tape, &g, config, &[seq.to_vec()], lang_token, cfg, rng)?;
    Ok(tape.scalar_value(loss))
}

/// Cross-entropy floor of a perfectly fitted label-smoothed model: the
/// entropy of the smoothed target distribution.
pub fn label_smoothing_floor(smoothing: f64, vocab: usize) -> f64 {
    let v = vocab as f64;
    let q_true = 1.0 - smoothing + smoothing / v;
    let q_other = smoothing / v;
    -(q_true * q_true.ln() + (v - 1.0) * q_other * q_other.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init, ModelConfig};
    use rand::SeedableRng;

    fn nv(first: u32, size: u32) -> NoiseVocab {
        NoiseVocab { first_regular: first, vocab_size: size }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mlm_rate_zero_is_identity() {
        let seq: Vec<u32> = (10..30).collect();
        let cfg = MlmNoiseConfig { mask_rate: 0.0, ..Default::default() };
        let (noised, targets) = apply_mlm_noise(&seq, &cfg, &nv(9, 100), &mut rng(1));
        assert_eq!(noised, seq);
        assert!(targets.is_empty());
    }

    #[test]
    fn mlm_rate_one_all_mask() {
        let seq: Vec<u32> = (10..30).collect();
        let cfg = MlmNoiseConfig { mask_rate: 1.0, action_split: (1.0, 0.0, 0.0) };
        let (noised, targets) = apply_mlm_noise(&seq, &cfg, &nv(9, 100), &mut rng(1));
        assert!(noised.iter().all(|&id| id == MASK));
        assert_eq!(targets.len(), seq.len());
    }

    #[test]
    fn mlm_never_touches_specials() {
        let mut seq: Vec<u32> = (10..30).collect();
        seq.push(EOS);
        let cfg = MlmNoiseConfig { mask_rate: 1.0, action_split: (1.0, 0.0, 0.0) };
        let (noised, targets) = apply_mlm_noise(&seq, &cfg, &nv(9, 100), &mut rng(1));
        assert_eq!(*noised.last().unwrap(), EOS);
        assert!(!targets.contains(&(seq.len() - 1)));
    }

    #[test]
    fn mlm_selection_rate_within_three_sigma() {
        // Binomial bounds for n = 10000, p = 0.15: fraction in
        // [0.139288, 0.160712] (computed ahead of time).
        let cfg = MlmNoiseConfig::default();
        let vocab = nv(9, 500);
        let mut r = rng(42);
        let mut selected = 0usize;
        let mut total = 0usize;
        while total < 10_000 {
            let seq: Vec<u32> = (0..20).map(|i| 9 + (i as u32 * 7) % 491).collect();
            let (_, targets) = apply_mlm_noise(&seq, &cfg, &vocab, &mut r);
            selected += targets.len();
            total += seq.len();
        }
        let frac = selected as f64 / total as f64;
        assert!((0.139288..=0.160712).contains(&frac), "selection rate {frac}");
    }

    #[test]
    fn mlm_noise_deterministic_given_rng() {
        let seq: Vec<u32> = (10..40).collect();
        let cfg = MlmNoiseConfig::default();
        let a = apply_mlm_noise(&seq, &cfg, &nv(9, 100), &mut rng(7));
        let b = apply_mlm_noise(&seq, &cfg, &nv(9, 100), &mut rng(7));
        assert_eq!(a, b);
    }

    #[test]
    fn dae_ratio_zero_is_identity() {
        let seq: Vec<u32> = (10..30).collect();
        let cfg = DaeNoiseConfig { mask_token_ratio: 0.0, ..Default::default() };
        assert_eq!(apply_dae_noise(&seq, &cfg, &mut rng(1)), seq);
    }

    #[test]
    fn dae_single_span_collapses_to_one_mask() {
        // Drive the noiser until it yields the canonical shape:
        // "t1 t2 t3 t4" with one span over t2 t3 -> "t1 <mask> t4".
        let seq = vec![10u32, 11, 12, 13];
        let cfg = DaeNoiseConfig { span_lambda: 2.0, mask_token_ratio: 0.5, shuffle_sentences: false };
        let mut found = false;
        for seed in 0..200 {
            let out = apply_dae_noise(&seq, &cfg, &mut rng(seed));
            let masked: Vec<u32> = out.iter().copied().filter(|&t| t != MASK).collect();
            let n_masks = out.iter().filter(|&&t| t == MASK).count();
            if out.len() == 3 && n_masks == 1 && masked == vec![10, 13] {
                found = true;
                break;
            }
        }
        assert!(found, "never produced 't1 <mask> t4'");
    }

    #[test]
    fn dae_coverage_close_to_ratio() {
        let cfg = DaeNoiseConfig::default();
        let mut r = rng(5);
        let mut masked_tokens = 0usize;
        let mut total = 0usize;
        while total < 10_000 {
            let seq: Vec<u32> = (0..16).map(|i| 10 + i as u32).collect();
            let out = apply_dae_noise(&seq, &cfg, &mut r);
            let kept = out.iter().filter(|&&t| t != MASK).count();
            masked_tokens += seq.len() - kept;
            total += seq.len();
        }
        let frac = masked_tokens as f64 / total as f64;
        assert!((frac - 0.35).abs() <= 0.05, "coverage {frac}");
    }

    #[test]
    fn dae_output_length_bounded() {
        let cfg = DaeNoiseConfig::default();
        let mut r = rng(9);
        for _ in 0..200 {
            let seq: Vec<u32> = (0..12).map(|i| 10 + i as u32).collect();
            let out = apply_dae_noise(&seq, &cfg, &mut r);
            let inserted = out.iter().filter(|&&t| t == MASK).count();
            assert!(out.len() <= seq.len() + inserted);
        }
    }

    #[test]
    fn zero_params_losses_are_ln_vocab() {
        let vocab = 11usize;
        let cfg = ModelConfig::tiny(vocab);
        let mut params = init::<f64>(&cfg, 1).unwrap();
        for i in 0..params.len() {
            params.tensor_mut(i).fill(0.0);
        }
        let expect = (vocab as f64).ln();

        let src = vec![vec![5u32, 6, 7]];
        let tgt = vec![vec![8u32, 9]];
        let loss = mt_loss(&params, &cfg, &src, &tgt).unwrap();
        assert!((loss - expect).abs() < 1e-9, "mt loss {loss} vs ln V {expect}");

        let noise = MlmNoiseConfig { mask_rate: 1.0, action_split: (1.0, 0.0, 0.0) };
        let loss =
            mlm_loss(&params, &cfg, &[5, 6, 7, 8], &noise, &nv(5, 11), &mut rng(3)).unwrap();
        assert!((loss - expect).abs() < 1e-9, "mlm loss {loss}");

        let dae = DaeNoiseConfig::default();
        let loss = dae_loss(&params, &cfg, &[5, 6, 7, 8], None, &dae, &mut rng(3)).unwrap();
        assert!((loss - expect).abs() < 1e-9, "dae loss {loss}");
    }

    #[test]
    fn mlm_rate_zero_loss_is_zero_by_convention() {
        let cfg = ModelConfig::tiny(11);
        let params = init::<f64>(&cfg, 1).unwrap();
        let noise = MlmNoiseConfig { mask_rate: 0.0, ..Default::default() };
        let loss = mlm_loss(&params, &cfg, &[5, 6, 7], &noise, &nv(5, 11), &mut rng(1)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mt_loss_counts_eos_position() {
        // Target of length 1 -> mean over 2 positions (token + </s>).
        let cfg = ModelConfig::tiny(11);
        let params = init::<f64>(&cfg, 2).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let g = Graph::register(&mut tape, &params);
        let loss =
            mt_loss_graph(&mut tape, &g, &cfg, &[vec![5, 6]], &[vec![7]], 0.0, None).unwrap();
        // Recompute by hand from the two positions' log-probs.
        let logits = model::forward_mt(&params, &cfg, &[vec![5, 6, EOS]], &[vec![BOS, 7]]).unwrap();
        let mut manual = 0.0;
        for (pos, &target) in [7u32, EOS].iter().enumerate() {
            let row: Vec<f64> = (0..11).map(|v| logits[[0, pos, v]]).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            manual += z - row[target as usize];
        }
        manual /= 2.0;
        assert!((tape.scalar_value(loss) - manual).abs() < 1e-10);
    }

    #[test]
    fn mlm_step_leaves_decoder_untouched() {
        let cfg = ModelConfig::tiny(11);
        let params = init::<f64>(&cfg, 4).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let g = Graph::register(&mut tape, &params);
        let noise = MlmNoiseConfig { mask_rate: 1.0, action_split: (1.0, 0.0, 0.0) };
        let (loss, _) = mlm_loss_graph(
            &mut tape,
            &g,
            &cfg,
            &[vec![5, 6, 7, 8]],
            &noise,
            &nv(5, 11),
            &mut rng(2),
        )
        .unwrap();
        let grads = tape.backward(loss, params.len()).unwrap();
        for (i, name) in params.names().iter().enumerate() {
            if name.starts_with("decoder.") {
                assert!(grads[i].is_none(), "{name} received gradient from MLM step");
            }
        }
        // Encoder parameters do get gradients.
        let enc_idx = params.index("encoder.0.attn.wq.weight");
        assert!(grads[enc_idx].is_some());
    }

    #[test]
    fn smoothing_floor_closed_form() {
        let floor = label_smoothing_floor(0.1, 11);
        assert!((floor - 0.5139620149).abs() < 1e-9);
        let floor512 = label_smoothing_floor(0.1, 512);
        assert!((floor512 - 0.9470725340).abs() < 1e-9);
    }

    #[test]
    fn dae_ratio_zero_equals_autoencoding_mt_loss() {
        let cfg = ModelConfig::tiny(11);
        let params = init::<f64>(&cfg, 6).unwrap();
        let seq = vec![5u32, 6, 7, 8];
        let dae_cfg = DaeNoiseConfig { mask_token_ratio: 0.0, ..Default::default() };
        let l_dae = dae_loss(&params, &cfg, &seq, None, &dae_cfg, &mut rng(1)).unwrap();
        let l_mt = mt_loss(&params, &cfg, &[seq.clone()], &[seq]).unwrap();
        assert!((l_dae - l_mt).abs() < 1e-12);
    }
}
