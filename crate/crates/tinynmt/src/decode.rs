//! Beam-search decoding.
//!
//! The search engine is generic over a [`TokenScorer`], so the same code
//! serves the transformer, unit-test stubs, and the exhaustive oracle used
//! to validate it.

use crate::corpus::LangId;
use crate::exec;
use crate::nnet::infer::{decoder_step, encode_source, DecoderState, EncoderCache};
use crate::nnet::{CheckpointMeta, ModelConfig, NnetError, Parameters, Scalar};
use crate::subword::{TokenSeq, Vocabulary, BOS, EOS, UNK};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("model: {0}")]
    Nnet(#[from] NnetError),
    #[error("vocabulary: {0}")]
    Vocab(#[from] crate::subword::VocabError),
    #[error("invalid decode config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    None,
    ByLength,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub length_norm: LengthNorm,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 5, max_len: 64, length_norm: LengthNorm::ByLength }
    }
}

/// A finished decode: `ids` always ends with `</s>`; `score` is the sum of
/// token log-probabilities (including `</s>`), `normalized_score` divides by
/// the generated length. `truncated` marks forced termination at `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: TokenSeq,
    pub score: f64,
    pub normalized_score: f64,
    pub truncated: bool,
}

impl Hypothesis {
    fn rank_score(&self, norm: LengthNorm) -> f64 {
        match norm {
            LengthNorm::None => self.score,
            LengthNorm::ByLength => self.normalized_score,
        }
    }
}

/// Next-token log-probability model consumed by the beam engine.
pub trait TokenScorer {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    /// State after consuming `<s>`, plus log-probs for the first position.
    fn init(&self) -> (Self::State, Vec<f64>);
    /// Advance by one token; returns log-probs for the following position.
    fn advance(&self, state: &Self::State, token: u32) -> (Self::State, Vec<f64>);
}

struct Alive<S> {
    state: S,
    ids: Vec<u32>,
    score: f64,
    next_logprobs: Vec<f64>,
}

/// Standard beam search. Candidates are ordered by cumulative score with
/// ties broken by token id ascending, then parent index; finished
/// hypotheses compete via the configured ranking score. Deterministic.
pub fn beam_search_with<S: TokenScorer>(
    scorer: &S,
    dcfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if dcfg.beam_size == 0 || dcfg.max_len == 0 {
        return Err(DecodeError::BadConfig("beam_size and max_len must be >= 1".into()));
    }
    let vocab = scorer.vocab_size();
    let (state0, lp0) = scorer.init();
    let mut alive: Vec<Alive<S::State>> =
        vec![Alive { state: state0, ids: Vec::new(), score: 0.0, next_logprobs: lp0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..dcfg.max_len {
        // Expand every alive hypothesis over the full vocabulary. Scan the
        // top 2*beam candidates so finishing extensions are captured even
        // when they rank below the continuations; only the top beam
        // non-finished candidates stay alive.
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(alive.len() * vocab);
        for (ai, a) in alive.iter().enumerate() {
            for (t, &lp) in a.next_logprobs.iter().enumerate() {
                let s = a.score + lp;
                if s > f64::NEG_INFINITY {
                    cands.push((s, t as u32, ai));
                }
            }
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .expect("non-finite beam score")
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        cands.truncate(2 * dcfg.beam_size);

        let mut next_alive: Vec<Alive<S::State>> = Vec::with_capacity(dcfg.beam_size);
        for (score, token, ai) in cands {
            let parent = &alive[ai];
            if token == EOS {
                let mut ids = parent.ids.clone();
                ids.push(EOS);
                let len = ids.len() as f64;
                finished.push(Hypothesis {
                    ids: TokenSeq(ids),
                    score,
                    normalized_score: score / len,
                    truncated: false,
                });
            } else if next_alive.len() < dcfg.beam_size {
                let (state, lp) = scorer.advance(&parent.state, token);
                let mut ids = parent.ids.clone();
                ids.push(token);
                next_alive.push(Alive { state, ids, score, next_logprobs: lp });
            }
        }
        alive = next_alive;

        // Keep the finished pool at beam size by rank.
        if finished.len() > dcfg.beam_size {
            finished.sort_by(|a, b| {
                b.rank_score(dcfg.length_norm)
                    .partial_cmp(&a.rank_score(dcfg.length_norm))
                    .expect("non-finite rank score")
                    .then(a.ids.0.cmp(&b.ids.0))
            });
            finished.truncate(dcfg.beam_size);
        }
        if alive.is_empty() {
            break;
        }
        // Early stop: an alive prefix with raw score s (s <= 0) can reach a
        // raw score of at most s and a normalized score of at most
        // s / max_len; once the full finished beam outranks that bound no
        // alive continuation can change the result.
        if finished.len() >= dcfg.beam_size {
            let worst = finished
                .iter()
                .map(|h| h.rank_score(dcfg.length_norm))
                .fold(f64::INFINITY, f64::min);
            let best_alive = alive
                .iter()
                .map(|a| a.score)
                .fold(f64::NEG_INFINITY, f64::max);
            let bound = match dcfg.length_norm {
                LengthNorm::None => best_alive,
                LengthNorm::ByLength => {
                    if best_alive <= 0.0 {
                        best_alive / dcfg.max_len as f64
                    } else {
                        best_alive
                    }
                }
            };
            if worst >= bound {
                break;
            }
        }
    }

    if finished.is_empty() {
        // Nothing terminated within the budget: force `</s>` and flag it.
        for a in &alive {
            let mut ids = a.ids.clone();
            let score = a.score + a.next_logprobs[EOS as usize];
            ids.push(EOS);
            let len = ids.len() as f64;
            finished.push(Hypothesis {
                ids: TokenSeq(ids),
                score,
                normalized_score: score / len,
                truncated: true,
            });
        }
    }
    finished.sort_by(|a, b| {
        b.rank_score(dcfg.length_norm)
            .partial_cmp(&a.rank_score(dcfg.length_norm))
            .expect("non-finite rank score")
            .then(a.ids.0.cmp(&b.ids.0))
    });
    finished.truncate(dcfg.beam_size);
    Ok(finished)
}

/// Transformer-backed scorer for one source sentence. Control tokens other
/// than `</s>` and `<unk>` are barred from generation.
pub struct ModelScorer<'a, F: Scalar> {
    params: &'a Parameters<F>,
    config: &'a ModelConfig,
    enc: EncoderCache<F>,
    banned_below: u32,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    pub fn new(
        params: &'a Parameters<F>,
        config: &'a ModelConfig,
        vocab: &Vocabulary,
        src_ids: &[u32],
    ) -> Result<Self, NnetError> {
        if config.vocab_size != vocab.size() {
            return Err(NnetError::ShapeMismatch(format!(
                "model vocab {} vs vocabulary {} pieces",
                config.vocab_size,
                vocab.size()
            )));
        }
        let enc = encode_source(params, config, src_ids)?;
        Ok(ModelScorer { params, config, enc, banned_below: vocab.n_control() })
    }

    fn logprobs(&self, logits: &[F]) -> Vec<f64> {
        let mut row: Vec<f64> = logits.iter().map(|&x| Scalar::to_f64(x)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        for (t, x) in row.iter_mut().enumerate() {
            let t = t as u32;
            if t < self.banned_below && t != EOS && t != UNK {
                *x = f64::NEG_INFINITY;
            } else {
                *x = *x - max - z + max; // log softmax
            }
        }
        row
    }
}

impl<'a, F: Scalar> TokenScorer for ModelScorer<'a, F> {
    type State = DecoderState<F>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn init(&self) -> (Self::State, Vec<f64>) {
        let mut state = DecoderState::new(self.config);
        let logits = decoder_step(self.params, self.config, &self.enc, &mut state, BOS)
            .expect("BOS step cannot exceed max_len");
        let lp = self.logprobs(&logits);
        (state, lp)
    }

    fn advance(&self, state: &Self::State, token: u32) -> (Self::State, Vec<f64>) {
        let mut next = state.clone();
        let logits = decoder_step(self.params, self.config, &self.enc, &mut next, token)
            .expect("beam length bounded by max_len");
        let lp = self.logprobs(&logits);
        (next, lp)
    }
}

/// Beam-search one encoded source sequence with the transformer.
pub fn beam_search<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    src_ids: &[u32],
    dcfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if dcfg.max_len >= config.max_len {
        return Err(DecodeError::BadConfig(format!(
            "decode max_len {} must stay below model max_len {}",
            dcfg.max_len, config.max_len
        )));
    }
    let scorer = ModelScorer::new(params, config, vocab, src_ids)?;
    beam_search_with(&scorer, dcfg)
}

/// Build the model-ready source ids for one sentence of a direction:
/// optional `<2tgt>` language tag (multilingual checkpoints only), the
/// encoded text, and `</s>`. Back-translation tagging is a training-data
/// concern and never happens at inference.
pub fn source_ids_for(
    vocab: &Vocabulary,
    meta: &CheckpointMeta,
    sentence: &str,
    tgt_lang: &LangId,
) -> Result<Vec<u32>, DecodeError> {
    let mut ids = Vec::new();
    if meta.multilingual {
        ids.push(vocab.lang_token_id(tgt_lang)?);
    }
    ids.extend_from_slice(&vocab.encode(sentence).0);
    ids.push(EOS);
    Ok(ids)
}

/// Render a hypothesis as text (strips the trailing `</s>`).
pub fn hypothesis_text(vocab: &Vocabulary, hyp: &Hypothesis) -> Result<String, DecodeError> {
    let ids: Vec<u32> =
        hyp.ids.iter().copied().filter(|&t| t != EOS).collect();
    Ok(vocab.decode(&TokenSeq(ids))?)
}

/// Translate a corpus, order-preserving, parallel over sentence chunks.
/// Returns the best hypothesis per sentence.
pub fn translate_corpus<F: Scalar>(
    params: &Parameters<F>,
    meta: &CheckpointMeta,
    vocab: &Vocabulary,
    sentences: &[String],
    tgt_lang: &LangId,
    dcfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    // Validate the language token once up front.
    if meta.multilingual {
        vocab.lang_token_id(tgt_lang)?;
    }
    let results: Vec<Result<Hypothesis, String>> = exec::map_chunks(sentences, 8, |chunk| {
        chunk
            .iter()
            .map(|sentence| {
                let src = source_ids_for(vocab, meta, sentence, tgt_lang)
                    .map_err(|e| e.to_string())?;
                let hyps = beam_search(params, &meta.model, vocab, &src, dcfg)
                    .map_err(|e| e.to_string())?;
                hyps.into_iter().next().ok_or_else(|| "empty beam".to_string())
            })
            .collect()
    });
    results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(DecodeError::BadConfig)
}

/// Translate and detokenize, returning one line per input sentence.
pub fn translate_corpus_text<F: Scalar>(
    params: &Parameters<F>,
    meta: &CheckpointMeta,
    vocab: &Vocabulary,
    sentences: &[String],
    tgt_lang: &LangId,
    dcfg: &DecodeConfig,
) -> Result<Vec<String>, DecodeError> {
    let hyps = translate_corpus(params, meta, vocab, sentences, tgt_lang, dcfg)?;
    hyps.iter().map(|h| hypothesis_text(vocab, h)).collect()
}

#[cfg(test)]
pub(crate) mod stub {
    use super::*;

    /// Deterministic pseudo-random scorer: the log-prob table for a state
    /// depends only on the consumed prefix, via hashing.
    pub struct StubScorer {
        pub vocab: usize,
        pub seed: u64,
    }

    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }

    impl StubScorer {
        pub fn logprobs_for(&self, prefix: &[u32]) -> Vec<f64> {
            let mut h = mix(self.seed);
            for &t in prefix {
                h = mix(h ^ t as u64);
            }
            let raw: Vec<f64> = (0..self.vocab)
                .map(|t| {
                    let u = mix(h ^ (t as u64).wrapping_mul(0x9e37)) >> 11;
                    u as f64 / (1u64 << 53) as f64 * 4.0
                })
                .collect();
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            raw.iter().map(|x| x - z).collect()
        }
    }

    impl TokenScorer for StubScorer {
        type State = Vec<u32>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn init(&self) -> (Self::State, Vec<f64>) {
            (Vec::new(), self.logprobs_for(&[]))
        }

        fn advance(&self, state: &Self::State, token: u32) -> (Self::State, Vec<f64>) {
            let mut next = state.clone();
            next.push(token);
            let lp = self.logprobs_for(&next);
            (next, lp)
        }
    }

    /// Stub with near-deterministic next-token distributions, the regime a
    /// trained translation model operates in.
    pub struct PeakedStubScorer {
        pub vocab: usize,
        pub seed: u64,
    }

    impl PeakedStubScorer {
        fn logprobs_for(&self, prefix: &[u32]) -> Vec<f64> {
            let mut h = mix(self.seed ^ 0xabcd);
            for &t in prefix {
                h = mix(h ^ t as u64);
            }
            let preferred = (mix(h) as usize) % self.vocab;
            let raw: Vec<f64> = (0..self.vocab)
                .map(|t| {
                    let u = mix(h ^ (t as u64).wrapping_mul(0x5bd1)) >> 11;
                    let noise = u as f64 / (1u64 << 53) as f64;
                    if t == preferred {
                        6.0 + noise
                    } else if t == EOS as usize {
                        // Ending is always plausible, as in a trained model.
                        3.0 + noise
                    } else {
                        noise
                    }
                })
                .collect();
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            raw.iter().map(|x| x - z).collect()
        }
    }

    impl TokenScorer for PeakedStubScorer {
        type State = Vec<u32>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn init(&self) -> (Self::State, Vec<f64>) {
            (Vec::new(), self.logprobs_for(&[]))
        }

        fn advance(&self, state: &Self::State, token: u32) -> (Self::State, Vec<f64>) {
            let mut next = state.clone();
            next.push(token);
            let lp = self.logprobs_for(&next);
            (next, lp)
        }
    }

    /// Exhaustive search over all complete sequences (ending in `</s>`,
    /// length <= max_len) — the independent oracle for the beam engine.
    pub fn exhaustive_best(scorer: &StubScorer, max_len: usize, norm: LengthNorm) -> Hypothesis {
        fn recurse(
            scorer: &StubScorer,
            prefix: &mut Vec<u32>,
            score: f64,
            max_len: usize,
            norm: LengthNorm,
            best: &mut Option<Hypothesis>,
        ) {
            if prefix.len() >= max_len {
                return;
            }
            let lp = scorer.logprobs_for(prefix);
            for t in 0..scorer.vocab as u32 {
                let s = score + lp[t as usize];
                if t == EOS {
                    let mut ids = prefix.clone();
                    ids.push(EOS);
                    let len = ids.len() as f64;
                    let h = Hypothesis {
                        ids: TokenSeq(ids),
                        score: s,
                        normalized_score: s / len,
                        truncated: false,
                    };
                    let better = match best {
                        None => true,
                        Some(b) => {
                            let (hb, bb) = (h.rank_score(norm), b.rank_score(norm));
                            hb > bb || (hb == bb && h.ids.0 < b.ids.0)
                        }
                    };
                    if better {
                        *best = Some(h);
                    }
                } else {
                    prefix.push(t);
                    recurse(scorer, prefix, s, max_len, norm, best);
                    prefix.pop();
                }
            }
        }
        let mut best = None;
        recurse(scorer, &mut Vec::new(), 0.0, max_len, norm, &mut best);
        best.expect("vocab contains </s>")
    }
}

#[cfg(test)]
mod tests {
    use super::stub::*;
    use super::*;
    use crate::nnet::{init, ModelConfig};

    /// A stub whose next-token distribution is deterministic (prob 1).
    struct ForcedScorer {
        sequence: Vec<u32>,
        vocab: usize,
    }

    impl TokenScorer for ForcedScorer {
        type State = usize;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn init(&self) -> (usize, Vec<f64>) {
            (0, self.row(0))
        }

        fn advance(&self, state: &usize, _token: u32) -> (usize, Vec<f64>) {
            (*state + 1, self.row(*state + 1))
        }
    }

    impl ForcedScorer {
        fn row(&self, pos: usize) -> Vec<f64> {
            let target = self.sequence.get(pos).copied().unwrap_or(EOS);
            (0..self.vocab as u32)
                .map(|t| if t == target { 0.0 } else { f64::NEG_INFINITY })
                .collect()
        }
    }

    #[test]
    fn forced_sequence_decodes_exactly() {
        let scorer = ForcedScorer { sequence: vec![7, 8, 9], vocab: 12 };
        let dcfg = DecodeConfig { beam_size: 3, max_len: 10, length_norm: LengthNorm::ByLength };
        let hyps = beam_search_with(&scorer, &dcfg).unwrap();
        assert_eq!(hyps[0].ids.0, vec![7, 8, 9, EOS]);
        assert_eq!(hyps[0].score, 0.0);
        assert!(!hyps[0].truncated);
    }

    #[test]
    fn beam_matches_exhaustive_oracle_raw_scores() {
        let max_len = 5;
        let vocab = 6;
        for seed in 0..50u64 {
            let scorer = StubScorer { vocab, seed };
            let dcfg = DecodeConfig {
                beam_size: vocab.pow(max_len as u32),
                max_len,
                length_norm: LengthNorm::None,
            };
            let beam_best = beam_search_with(&scorer, &dcfg).unwrap().remove(0);
            let oracle = exhaustive_best(&scorer, max_len, LengthNorm::None);
            assert_eq!(beam_best.ids.0, oracle.ids.0, "seed {seed}");
            assert!((beam_best.score - oracle.score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_matches_exhaustive_oracle_normalized() {
        let max_len = 4;
        let vocab = 5;
        for seed in 100..120u64 {
            let scorer = StubScorer { vocab, seed };
            let dcfg = DecodeConfig {
                beam_size: vocab.pow(max_len as u32),
                max_len,
                length_norm: LengthNorm::ByLength,
            };
            let beam_best = beam_search_with(&scorer, &dcfg).unwrap().remove(0);
            let oracle = exhaustive_best(&scorer, max_len, LengthNorm::ByLength);
            assert_eq!(beam_best.ids.0, oracle.ids.0, "seed {seed}");
        }
    }

    #[test]
    fn wider_beam_never_scores_worse_on_peaked_models() {
        // Beam-size monotonicity of the best raw score. This is not a
        // theorem of beam search on arbitrary models (a stronger prefix can
        // crowd a narrower beam's winning path out of the candidate set),
        // but it holds for peaked next-token distributions like those of
        // trained models; tested in that regime with length_norm None.
        for seed in 0..60u64 {
            let scorer = PeakedStubScorer { vocab: 8, seed };
            let mut prev = f64::NEG_INFINITY;
            for beam in [1usize, 2, 4, 8, 16] {
                let dcfg =
                    DecodeConfig { beam_size: beam, max_len: 6, length_norm: LengthNorm::None };
                let best = beam_search_with(&scorer, &dcfg).unwrap().remove(0);
                assert!(
                    best.score >= prev - 1e-9,
                    "seed {seed} beam {beam}: {} < {prev}",
                    best.score
                );
                prev = best.score;
            }
        }
    }

    #[test]
    fn beam_never_exceeds_exhaustive_optimum() {
        for seed in 0..20u64 {
            let scorer = StubScorer { vocab: 5, seed };
            let oracle = exhaustive_best(&scorer, 4, LengthNorm::None);
            for beam in [1usize, 2, 4] {
                let dcfg =
                    DecodeConfig { beam_size: beam, max_len: 4, length_norm: LengthNorm::None };
                let best = beam_search_with(&scorer, &dcfg).unwrap().remove(0);
                assert!(best.score <= oracle.score + 1e-12, "seed {seed} beam {beam}");
            }
        }
    }

    #[test]
    fn truncation_is_flagged_when_nothing_finishes() {
        // EOS has probability ~0 everywhere: the beam must force-truncate.
        struct NeverEnd;
        impl TokenScorer for NeverEnd {
            type State = ();
            fn vocab_size(&self) -> usize {
                5
            }
            fn init(&self) -> ((), Vec<f64>) {
                ((), self.row())
            }
            fn advance(&self, _: &(), _: u32) -> ((), Vec<f64>) {
                ((), self.row())
            }
        }
        impl NeverEnd {
            fn row(&self) -> Vec<f64> {
                // Nearly all mass on token 4; EOS astronomically unlikely
                // but finite so the forced score stays well-defined.
                vec![-80.0, -80.0, -80.0, -80.0, -0.001]
            }
        }
        let dcfg = DecodeConfig { beam_size: 2, max_len: 4, length_norm: LengthNorm::ByLength };
        let hyps = beam_search_with(&NeverEnd, &dcfg).unwrap();
        assert!(hyps.iter().all(|h| h.truncated));
        assert_eq!(hyps[0].ids.0.last(), Some(&EOS));
        assert_eq!(hyps[0].ids.len(), 5, "4 generated tokens + forced </s>");
    }

    #[test]
    fn scores_match_teacher_forced_recompute() {
        let vocab = test_vocab(16);
        let cfg = ModelConfig::tiny(vocab.size());
        let params = init::<f64>(&cfg, 21).unwrap();
        let src = vec![9u32, 10, 11, EOS];
        let dcfg = DecodeConfig { beam_size: 4, max_len: 8, length_norm: LengthNorm::ByLength };
        let hyps = beam_search(&params, &cfg, &vocab, &src, &dcfg).unwrap();
        assert!(!hyps.is_empty());
        for h in &hyps {
            // Teacher-force the hypothesis through the batched forward pass.
            let mut dec_in = vec![BOS];
            dec_in.extend(h.ids.iter().take(h.ids.len() - 1));
            let logits =
                crate::nnet::model::forward_mt(&params, &cfg, &[src.clone()], &[dec_in]).unwrap();
            let mut total = 0.0;
            for (pos, &t) in h.ids.iter().enumerate() {
                let row: Vec<f64> = (0..cfg.vocab_size).map(|v| logits[[0, pos, v]]).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                total += row[t as usize] - z;
            }
            assert!(
                (total - h.score).abs() < 1e-5,
                "beam score {} vs teacher-forced {total}",
                h.score
            );
        }
    }

    #[test]
    fn beam_hypotheses_are_distinct_and_sorted() {
        let scorer = StubScorer { vocab: 9, seed: 3 };
        let dcfg = DecodeConfig { beam_size: 5, max_len: 6, length_norm: LengthNorm::ByLength };
        let hyps = beam_search_with(&scorer, &dcfg).unwrap();
        assert_eq!(hyps.len(), 5);
        for w in hyps.windows(2) {
            assert!(w[0].normalized_score >= w[1].normalized_score);
            assert_ne!(w[0].ids, w[1].ids);
        }
    }

    #[test]
    fn empty_corpus_translates_to_empty() {
        let vocab = test_vocab(16);
        let cfg = ModelConfig::tiny(vocab.size());
        let params = init::<f64>(&cfg, 1).unwrap();
        let meta = CheckpointMeta { model: cfg, multilingual: false, directions: vec![] };
        let out = translate_corpus(
            &params,
            &meta,
            &vocab,
            &[],
            &LangId::new("sb").unwrap(),
            &DecodeConfig::default(),
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn unknown_language_token_errors() {
        let vocab = test_vocab(16);
        let cfg = ModelConfig::tiny(vocab.size());
        let params = init::<f64>(&cfg, 1).unwrap();
        let meta = CheckpointMeta { model: cfg, multilingual: true, directions: vec![] };
        let err = translate_corpus(
            &params,
            &meta,
            &vocab,
            &["ab".to_string()],
            &LangId::new("zz").unwrap(),
            &DecodeConfig::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn translation_is_deterministic() {
        let vocab = test_vocab(20);
        let cfg = ModelConfig::tiny(vocab.size());
        let params = init::<f64>(&cfg, 33).unwrap();
        let meta = CheckpointMeta { model: cfg, multilingual: false, directions: vec![] };
        let sents: Vec<String> = vec!["ab ba".into(), "ba".into(), "ab ab ba".into()];
        let dcfg = DecodeConfig { beam_size: 3, max_len: 10, length_norm: LengthNorm::ByLength };
        let lang = LangId::new("sb").unwrap();
        let a = translate_corpus_text(&params, &meta, &vocab, &sents, &lang, &dcfg).unwrap();
        let b = translate_corpus_text(&params, &meta, &vocab, &sents, &lang, &dcfg).unwrap();
        assert_eq!(a, b);
    }

    /// Tiny vocabulary over {a, b} words for decode tests.
    fn test_vocab(size: usize) -> Vocabulary {
        let lines: Vec<String> = vec!["ab ba ab".into(), "ba ab".into(), "ab".into()];
        let corpus = crate::corpus::MonoCorpus::new(LangId::new("sa").unwrap(), lines, "test");
        crate::subword::learn_vocab(&[corpus], size, &[LangId::new("sa").unwrap()]).unwrap()
    }
}
