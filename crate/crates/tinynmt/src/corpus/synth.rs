//! Synthetic language pairs with exactly invertible transforms.
//!
//! The base "language" is an order-k Markov chain over a closed word
//! inventory with a Zipf-like unigram skew; related languages are produced
//! by token-level substitution ciphers and positional swaps. Because every
//! transform is invertible, translation quality can be judged against a
//! known ground truth at any corpus size.

use super::{CorpusError, LangId, MonoCorpus, SentencePair};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const TWO_LETTER: u32 = 26 * 26;

/// Render a word id as a lowercase-letter surface form (2 letters for the
/// first 676 ids, 3 letters beyond).
pub fn word_surface(id: u32) -> String {
    let a = b'a';
    if id < TWO_LETTER {
        let c1 = (id / 26) as u8 + a;
        let c2 = (id % 26) as u8 + a;
        String::from_utf8(vec![c1, c2]).unwrap()
    } else {
        let r = id - TWO_LETTER;
        let c1 = (r / TWO_LETTER % 26) as u8 + a;
        let c2 = (r / 26 % 26) as u8 + a;
        let c3 = (r % 26) as u8 + a;
        String::from_utf8(vec![c1, c2, c3]).unwrap()
    }
}

fn word_id(surface: &str) -> Option<u32> {
    let bytes = surface.as_bytes();
    if !bytes.iter().all(|b| b.is_ascii_lowercase()) {
        return None;
    }
    let d = |b: u8| (b - b'a') as u32;
    match bytes.len() {
        2 => Some(d(bytes[0]) * 26 + d(bytes[1])),
        3 => Some(TWO_LETTER + d(bytes[0]) * TWO_LETTER + d(bytes[1]) * 26 + d(bytes[2])),
        _ => None,
    }
}

/// Token-level permutation over the base word inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherTable {
    forward: Vec<u32>,
}

impl CipherTable {
    pub fn identity(n: usize) -> Self {
        CipherTable { forward: (0..n as u32).collect() }
    }

    pub fn from_seed(seed: u64, n: usize) -> Self {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut forward: Vec<u32> = (0..n as u32).collect();
        forward.shuffle(&mut rng);
        CipherTable { forward }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn map(&self, id: u32) -> Option<u32> {
        self.forward.get(id as usize).copied()
    }

    pub fn inverted(&self) -> CipherTable {
        let mut inv = vec![0u32; self.forward.len()];
        for (i, &t) in self.forward.iter().enumerate() {
            inv[t as usize] = i as u32;
        }
        CipherTable { forward: inv }
    }

    /// Fraction of entries equal to `other`'s.
    pub fn overlap(&self, other: &CipherTable) -> f64 {
        let same = self
            .forward
            .iter()
            .zip(&other.forward)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.forward.len().max(1) as f64
    }
}

/// Build a cipher that agrees with `base` on a seeded `shared_fraction` of
/// entries and permutes the rest among themselves. `shared_fraction = 1.0`
/// reproduces `base` exactly.
pub fn derive_shared_cipher(base: &CipherTable, shared_fraction: f64, seed: u64) -> CipherTable {
    use rand::seq::SliceRandom;
    assert!((0.0..=1.0).contains(&shared_fraction), "shared_fraction must be in [0,1]");
    let n = base.forward.len();
    let k = (shared_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let shared: std::collections::BTreeSet<usize> = idx.into_iter().take(k).collect();

    let mut forward = vec![u32::MAX; n];
    let mut free_targets = Vec::new();
    let mut free_slots = Vec::new();
    for i in 0..n {
        if shared.contains(&i) {
            forward[i] = base.forward[i];
        } else {
            free_slots.push(i);
            free_targets.push(base.forward[i]);
        }
    }
    free_targets.shuffle(&mut rng);
    for (slot, tgt) in free_slots.into_iter().zip(free_targets) {
        forward[slot] = tgt;
    }
    CipherTable { forward }
}

/// Declarative transform description, materialized by [`Transform::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    SubstitutionCipher { seed: u64 },
    AdjacentSwap,
    Composed { parts: Vec<TransformSpec> },
}

/// Materialized invertible sentence transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Cipher(CipherTable),
    AdjacentSwap,
    Composed(Vec<Transform>),
}

impl Transform {
    pub fn build(spec: &TransformSpec, base_vocab_size: usize) -> Transform {
        match spec {
            TransformSpec::SubstitutionCipher { seed } => {
                Transform::Cipher(CipherTable::from_seed(*seed, base_vocab_size))
            }
            TransformSpec::AdjacentSwap => Transform::AdjacentSwap,
            TransformSpec::Composed { parts } => {
                Transform::Composed(parts.iter().map(|p| Transform::build(p, base_vocab_size)).collect())
            }
        }
    }

    /// Apply to a whitespace-tokenized sentence. Tokens outside the word
    /// inventory pass through unchanged.
    pub fn apply(&self, sentence: &str) -> String {
        match self {
            Transform::Cipher(table) => sentence
                .split_whitespace()
                .map(|tok| match word_id(tok).and_then(|id| table.map(id)) {
                    Some(mapped) => word_surface(mapped),
                    None => tok.to_string(),
                })
                .collect::<Vec<_>>()
                .join(" "),
            Transform::AdjacentSwap => {
                let toks: Vec<&str> = sentence.split_whitespace().collect();
                let mut out = Vec::with_capacity(toks.len());
                for chunk in toks.chunks(2) {
                    if chunk.len() == 2 {
                        out.push(chunk[1]);
                        out.push(chunk[0]);
                    } else {
                        out.push(chunk[0]);
                    }
                }
                out.join(" ")
            }
            Transform::Composed(parts) => {
                parts.iter().fold(sentence.to_string(), |s, t| t.apply(&s))
            }
        }
    }

    pub fn inverted(&self) -> Transform {
        match self {
            Transform::Cipher(t) => Transform::Cipher(t.inverted()),
            Transform::AdjacentSwap => Transform::AdjacentSwap,
            Transform::Composed(parts) => {
                Transform::Composed(parts.iter().rev().map(|t| t.inverted()).collect())
            }
        }
    }
}

/// Parameters of a synthetic task: base language shape plus the transform
/// relating source to target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub base_vocab_size: usize,
    /// Markov context length of the base language (sentences are sampled
    /// word-by-word conditioned on the previous `markov_order` words).
    pub markov_order: usize,
    pub transform: TransformSpec,
    /// Fraction of the cipher shared with a helper pair (used when deriving
    /// related tasks; see [`derive_shared_cipher`]).
    pub shared_fraction: f64,
}

impl SynthTaskSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.base_vocab_size < 2 || self.base_vocab_size > (TWO_LETTER * TWO_LETTER) as usize {
            return Err(CorpusError::BadSynthSpec(format!(
                "base_vocab_size {} out of range",
                self.base_vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(CorpusError::BadSynthSpec("shared_fraction must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Base-language sampler: order-k Markov chain with Zipf-like unigram skew.
pub(crate) struct MarkovLang {
    vocab: u32,
    order: usize,
    seed: u64,
    /// Unigram skew exponent; larger means more mass on low word ids.
    gamma: f64,
    /// Probability of drawing from the context-conditional distribution
    /// rather than the unigram one (given a full context window).
    context_prob: f64,
    slots: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl MarkovLang {
    pub fn new(vocab: u32, order: usize, seed: u64) -> Self {
        MarkovLang { vocab, order, seed, gamma: 2.0, context_prob: 0.7, slots: 8 }
    }

    fn zipf_from_u01(&self, u: f64) -> u32 {
        let id = (u.powf(self.gamma) * self.vocab as f64) as u32;
        id.min(self.vocab - 1)
    }

    fn context_word(&self, window: &[u32], slot: usize) -> u32 {
        let mut h = splitmix(self.seed ^ 0x5eed_c0de);
        for &w in window {
            h = splitmix(h ^ (w as u64).wrapping_mul(0x100000001b3));
        }
        h = splitmix(h ^ slot as u64);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.zipf_from_u01(u)
    }

    pub fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(4..=16usize);
        let mut words: Vec<u32> = Vec::with_capacity(len);
        for i in 0..len {
            let id = if i >= self.order && self.order > 0 && rng.gen_bool(self.context_prob) {
                // Truncated-geometric slot choice keeps frequent contexts
                // reusing the same few continuations.
                let mut slot = self.slots - 1;
                for k in 0..self.slots - 1 {
                    if rng.gen_bool(0.5) {
                        slot = k;
                        break;
                    }
                }
                self.context_word(&words[i - self.order..i], slot)
            } else {
                self.zipf_from_u01(rng.gen::<f64>())
            };
            words.push(id);
        }
        words.iter().map(|&w| word_surface(w)).collect::<Vec<_>>().join(" ")
    }
}

/// Generate a synthetic parallel corpus plus monolingual pools for both
/// sides. The target side of every parallel pair is exactly
/// `transform(source)`; mono pools come from fresh draws of the same base
/// sampler, so they never overlap the parallel data by construction.
#[allow(clippy::too_many_arguments)]
pub fn gen_synthetic(
    spec: &SynthTaskSpec,
    src_lang: &LangId,
    tgt_lang: &LangId,
    n_parallel: usize,
    n_mono_src: usize,
    n_mono_tgt: usize,
    seed: u64,
) -> Result<(Vec<SentencePair>, MonoCorpus, MonoCorpus), CorpusError> {
    spec.validate()?;
    let transform = Transform::build(&spec.transform, spec.base_vocab_size);
    gen_synthetic_with_transform(spec, &transform, src_lang, tgt_lang, n_parallel, n_mono_src, n_mono_tgt, seed)
}

/// As [`gen_synthetic`] but with an explicitly materialized transform, which
/// lets callers share or derive cipher tables across tasks.
#[allow(clippy::too_many_arguments)]
pub fn gen_synthetic_with_transform(
    spec: &SynthTaskSpec,
    transform: &Transform,
    src_lang: &LangId,
    tgt_lang: &LangId,
    n_parallel: usize,
    n_mono_src: usize,
    n_mono_tgt: usize,
    seed: u64,
) -> Result<(Vec<SentencePair>, MonoCorpus, MonoCorpus), CorpusError> {
    spec.validate()?;
    let lang = MarkovLang::new(spec.base_vocab_size as u32, spec.markov_order, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut parallel = Vec::with_capacity(n_parallel);
    for _ in 0..n_parallel {
        let src = lang.sample_sentence(&mut rng);
        let tgt = transform.apply(&src);
        parallel.push(SentencePair::genuine(src_lang.clone(), tgt_lang.clone(), src, tgt));
    }
    let mut mono_src_lines = Vec::with_capacity(n_mono_src);
    for _ in 0..n_mono_src {
        mono_src_lines.push(lang.sample_sentence(&mut rng));
    }
    let mut mono_tgt_lines = Vec::with_capacity(n_mono_tgt);
    for _ in 0..n_mono_tgt {
        mono_tgt_lines.push(transform.apply(&lang.sample_sentence(&mut rng)));
    }

    Ok((
        parallel,
        MonoCorpus::new(src_lang.clone(), mono_src_lines, "synthetic"),
        MonoCorpus::new(tgt_lang.clone(), mono_tgt_lines, "synthetic"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(s: &str) -> LangId {
        LangId::new(s).unwrap()
    }

    #[test]
    fn adjacent_swap_matches_definition() {
        let t = Transform::AdjacentSwap;
        assert_eq!(t.apply("a b c d"), "b a d c");
        assert_eq!(t.apply("a b c"), "b a c");
        assert_eq!(t.apply("a"), "a");
    }

    #[test]
    fn identity_cipher_is_identity() {
        let t = Transform::Cipher(CipherTable::identity(600));
        let s = "aa ab zz bc";
        assert_eq!(t.apply(s), s);
    }

    #[test]
    fn cipher_round_trips_through_inverse() {
        let t = Transform::Cipher(CipherTable::from_seed(9, 600));
        let inv = t.inverted();
        let s = "aa ab ac ad ae";
        let mapped = t.apply(s);
        assert_ne!(mapped, s);
        assert_eq!(inv.apply(&mapped), s);
    }

    #[test]
    fn composed_inverse_reverses_parts() {
        let t = Transform::Composed(vec![
            Transform::Cipher(CipherTable::from_seed(3, 600)),
            Transform::AdjacentSwap,
        ]);
        let inv = t.inverted();
        let s = "aa bb cc dd ee";
        assert_eq!(inv.apply(&t.apply(s)), s);
    }

    #[test]
    fn shared_fraction_one_copies_the_table() {
        let base = CipherTable::from_seed(5, 500);
        let derived = derive_shared_cipher(&base, 1.0, 99);
        assert_eq!(base, derived, "shared_fraction=1.0 reproduces the table field-by-field");
    }

    #[test]
    fn shared_fraction_half_overlaps_at_least_half() {
        let base = CipherTable::from_seed(5, 500);
        let derived = derive_shared_cipher(&base, 0.5, 99);
        assert!(derived.overlap(&base) >= 0.5);
        // Still a permutation.
        let mut seen = vec![false; 500];
        for i in 0..500u32 {
            let t = derived.map(i).unwrap() as usize;
            assert!(!seen[t]);
            seen[t] = true;
        }
    }

    #[test]
    fn generation_is_deterministic_and_invertible() {
        let spec = SynthTaskSpec {
            base_vocab_size: 500,
            markov_order: 2,
            transform: TransformSpec::Composed {
                parts: vec![
                    TransformSpec::SubstitutionCipher { seed: 11 },
                    TransformSpec::AdjacentSwap,
                ],
            },
            shared_fraction: 1.0,
        };
        let (p1, ms1, mt1) =
            gen_synthetic(&spec, &lang("sa"), &lang("sb"), 50, 20, 20, 42).unwrap();
        let (p2, ms2, mt2) =
            gen_synthetic(&spec, &lang("sa"), &lang("sb"), 50, 20, 20, 42).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(ms1.lines, ms2.lines);
        assert_eq!(mt1.lines, mt2.lines);

        let transform = Transform::build(&spec.transform, spec.base_vocab_size);
        let inv = transform.inverted();
        for pair in &p1 {
            assert_eq!(inv.apply(&pair.tgt), pair.src);
            assert_eq!(transform.apply(&pair.src), pair.tgt);
        }
    }

    #[test]
    fn sentences_have_expected_shape() {
        let spec = SynthTaskSpec {
            base_vocab_size: 500,
            markov_order: 2,
            transform: TransformSpec::AdjacentSwap,
            shared_fraction: 0.0,
        };
        let (pairs, _, _) = gen_synthetic(&spec, &lang("sa"), &lang("sb"), 200, 0, 0, 7).unwrap();
        for p in &pairs {
            let n = p.src.split_whitespace().count();
            assert!((4..=16).contains(&n), "length {n}");
        }
    }

    #[test]
    fn surface_codec_round_trips() {
        for id in [0u32, 1, 25, 26, 675, 676, 677, 5000, 18251] {
            assert_eq!(word_id(&word_surface(id)), Some(id));
        }
        assert_eq!(word_id("a"), None);
        assert_eq!(word_id("abcd"), None);
    }
}
