//! Joint subword vocabularies: greedy BPE with reserved control tokens.
//!
//! Pieces are learned on whitespace-pre-tokenized text; the single space
//! between words is itself a base piece, so decoding is plain concatenation
//! and `decode(encode(t)) == t` for any normalized sentence whose characters
//! were seen at learning time.

use crate::corpus::{LangId, MonoCorpus};
use crate::exec;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Deref;
use std::path::Path;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const BT: u32 = 5;
pub const HYP: u32 = 6;
pub const SRC: u32 = 7;

/// Surfaces of the eight fixed control tokens, in id order.
pub const SPECIALS: [&str; 8] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>", "<BT>", "<HYP>", "<SRC>"];

const MERGES_SENTINEL: &str = "#MERGES";
const UNK_SURFACE: &str = "\u{2047}"; // ⁇

/// Sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(pub Vec<u32>);

impl Deref for TokenSeq {
    type Target = Vec<u32>;
    fn deref(&self) -> &Vec<u32> {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocab size {requested} too small: minimum is {minimum} (specials + language tags + base characters)")]
    SizeTooSmall { requested: usize, minimum: usize },
    #[error("empty learning corpora")]
    EmptyCorpora,
    #[error("token id {0} out of range (vocab size {1})")]
    IdOutOfRange(u32, usize),
    #[error("unknown language {0:?} (no <2{0}> token registered)")]
    UnknownLanguage(String),
    #[error("malformed vocabulary file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Joint subword inventory with a fixed control-token prefix, one `<2xx>`
/// tag per registered language, base characters, then learned merges.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    piece_to_id: HashMap<String, u32>,
    langs: Vec<LangId>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), u32>,
}

fn lang_token(lang: &LangId) -> String {
    format!("<2{}>", lang.as_str())
}

fn reserved_surface(piece: &str) -> bool {
    (piece.len() > 1 && piece.starts_with('<') && piece.ends_with('>')) || piece == MERGES_SENTINEL
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    /// Number of reserved ids: fixed specials plus language tags.
    pub fn n_control(&self) -> u32 {
        SPECIALS.len() as u32 + self.langs.len() as u32
    }

    pub fn is_control(&self, id: u32) -> bool {
        id < self.n_control()
    }

    pub fn langs(&self) -> &[LangId] {
        &self.langs
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|s| s.as_str())
    }

    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.piece_to_id.get(piece).copied()
    }

    /// Id of the `<2xx>` target-language tag for `lang`.
    pub fn lang_token_id(&self, lang: &LangId) -> Result<u32, VocabError> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .map(|i| SPECIALS.len() as u32 + i as u32)
            .ok_or_else(|| VocabError::UnknownLanguage(lang.to_string()))
    }

    /// First id eligible as an MLM random-replacement target.
    pub fn first_regular_id(&self) -> u32 {
        self.n_control()
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        // Symbols: Some(piece) for known, None for an unknown character.
        let mut syms: Vec<Option<String>> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                if self.piece_to_id.contains_key(&s) {
                    Some(s)
                } else {
                    None
                }
            })
            .collect();
        // Repeatedly apply the lowest-rank merge present; leftmost on ties.
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let (Some(a), Some(b)) = (&syms[i], &syms[i + 1]) {
                    if let Some(&rank) = self.merge_rank.get(&(a.clone(), b.clone())) {
                        if best.is_none_or(|(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let merged = format!(
                "{}{}",
                syms[i].as_ref().unwrap(),
                syms[i + 1].as_ref().unwrap()
            );
            syms[i] = Some(merged);
            syms.remove(i + 1);
        }
        syms.into_iter()
            .map(|s| match s {
                Some(p) => self.piece_to_id[&p],
                None => UNK,
            })
            .collect()
    }

    /// Encode a sentence. Words are merged independently; the inter-word
    /// space is emitted as its own piece (or `<unk>` if no multi-word line
    /// was seen at learning time). Control-token surfaces in raw text encode
    /// as ordinary characters, never as their control ids.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        let space_id = self.piece_to_id.get(" ").copied();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 {
                ids.push(space_id.unwrap_or(UNK));
            }
            ids.extend(self.encode_word(word));
        }
        TokenSeq(ids)
    }

    /// Encode many lines, caching repeated words per chunk.
    pub fn encode_batch(&self, lines: &[String]) -> Vec<Vec<u32>> {
        exec::map_chunks(lines, 512, |chunk| {
            let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
            let space_id = self.piece_to_id.get(" ").copied();
            chunk
                .iter()
                .map(|line| {
                    let mut ids = Vec::new();
                    for (i, word) in line.split_whitespace().enumerate() {
                        if i > 0 {
                            ids.push(space_id.unwrap_or(UNK));
                        }
                        let enc =
                            cache.entry(word).or_insert_with(|| self.encode_word(word));
                        ids.extend(enc.iter().copied());
                    }
                    ids
                })
                .collect()
        })
    }

    /// Decode ids to text: pieces concatenate, control tokens render as
    /// whitespace-delimited surfaces, `<unk>` as a visible placeholder.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String, VocabError> {
        let mut out = String::new();
        let mut sep_pending = false;
        for &id in seq.iter() {
            if id as usize >= self.pieces.len() {
                return Err(VocabError::IdOutOfRange(id, self.pieces.len()));
            }
            if id == UNK {
                if sep_pending && !out.ends_with(' ') {
                    out.push(' ');
                }
                out.push_str(UNK_SURFACE);
                sep_pending = false;
            } else if self.is_control(id) {
                if !out.is_empty() && !out.ends_with(' ') {
                    out.push(' ');
                }
                out.push_str(&self.pieces[id as usize]);
                sep_pending = true;
            } else {
                let piece = &self.pieces[id as usize];
                if sep_pending && !piece.starts_with(' ') {
                    out.push(' ');
                }
                out.push_str(piece);
                sep_pending = false;
            }
        }
        Ok(out.trim_end().to_string())
    }

    /// Write the vocabulary: one piece per line, then the merge list after a
    /// sentinel. Reload is bit-exact.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut text = String::new();
        for p in &self.pieces {
            text.push_str(p);
            text.push('\n');
        }
        text.push_str(MERGES_SENTINEL);
        text.push('\n');
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push('\t');
            text.push_str(b);
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|e| VocabError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, VocabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VocabError::Io { path: path.display().to_string(), source: e })?;
        let malformed = |reason: &str| VocabError::Malformed {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut pieces: Vec<String> = Vec::new();
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut in_merges = false;
        for line in text.split('\n') {
            if !in_merges {
                if line == MERGES_SENTINEL {
                    in_merges = true;
                    continue;
                }
                // Optional tab-separated score column is ignored.
                pieces.push(line.split('\t').next().unwrap_or("").to_string());
            } else {
                if line.is_empty() {
                    continue;
                }
                let mut it = line.split('\t');
                let a = it.next().ok_or_else(|| malformed("merge missing left part"))?;
                let b = it.next().ok_or_else(|| malformed("merge missing right part"))?;
                merges.push((a.to_string(), b.to_string()));
            }
        }
        if !in_merges {
            return Err(malformed("missing #MERGES sentinel"));
        }
        if pieces.len() < SPECIALS.len() {
            return Err(malformed("fewer pieces than fixed control tokens"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces[i] != *s {
                return Err(malformed(&format!("piece {i} must be {s:?}, found {:?}", pieces[i])));
            }
        }
        let mut langs = Vec::new();
        for p in pieces.iter().skip(SPECIALS.len()) {
            if let Some(code) = p.strip_prefix("<2").and_then(|s| s.strip_suffix('>')) {
                match LangId::new(code) {
                    Ok(l) => langs.push(l),
                    Err(_) => break,
                }
            } else {
                break;
            }
        }
        Vocabulary::assemble(pieces, langs, merges).map_err(|e| match e {
            VocabError::Malformed { reason, .. } => malformed(&reason),
            other => other,
        })
    }

    fn assemble(
        pieces: Vec<String>,
        langs: Vec<LangId>,
        merges: Vec<(String, String)>,
    ) -> Result<Vocabulary, VocabError> {
        let mut piece_to_id = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if piece_to_id.insert(p.clone(), i as u32).is_some() {
                return Err(VocabError::Malformed {
                    path: String::new(),
                    reason: format!("duplicate piece {p:?}"),
                });
            }
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i as u32))
            .collect();
        Ok(Vocabulary { pieces, piece_to_id, langs, merges, merge_rank })
    }
}

/// Learn a joint BPE vocabulary of at most `size` pieces over the given
/// corpora. Greedy merges on whitespace-pre-tokenized text; ties break
/// toward the lexicographically smallest merged piece; learning stops early
/// when no pair occurs at least twice.
pub fn learn_vocab(
    corpora: &[MonoCorpus],
    size: usize,
    langs: &[LangId],
) -> Result<Vocabulary, VocabError> {
    if corpora.iter().all(|c| c.lines.is_empty()) {
        return Err(VocabError::EmptyCorpora);
    }

    // Word frequencies; the inter-word space becomes a base piece whenever
    // any line has two or more words.
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    let mut chars: BTreeSet<char> = BTreeSet::new();
    for corpus in corpora {
        for line in &corpus.lines {
            let mut n_words = 0usize;
            for w in line.split_whitespace() {
                *word_freq.entry(w.to_string()).or_insert(0) += 1;
                chars.extend(w.chars());
                n_words += 1;
            }
            if n_words >= 2 {
                chars.insert(' ');
            }
        }
    }

    let minimum = SPECIALS.len() + langs.len() + chars.len();
    if size <= minimum.saturating_sub(1) {
        return Err(VocabError::SizeTooSmall { requested: size, minimum });
    }

    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(langs.iter().map(lang_token));
    pieces.extend(chars.iter().map(|c| c.to_string()));
    let mut piece_set: BTreeSet<String> = pieces.iter().cloned().collect();

    // Working state: each distinct word as its current symbol sequence.
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), f))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while pieces.len() < size {
        // Deterministic parallel pair count: per-chunk maps merged by key.
        let partials = exec::map_chunks(&words, 2048, |chunk| {
            let mut counts: HashMap<(String, String), u64> = HashMap::new();
            for (syms, freq) in chunk {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += freq;
                }
            }
            vec![counts]
        });
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for partial in partials {
            for (k, v) in partial {
                *counts.entry(k).or_insert(0) += v;
            }
        }

        // Highest count wins; ties break toward the smaller merged string.
        let mut best: Option<(u64, String, (String, String))> = None;
        for (pair, count) in counts {
            if count < 2 {
                continue;
            }
            let merged = format!("{}{}", pair.0, pair.1);
            if reserved_surface(&merged) || piece_set.contains(&merged) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bc, bm, _)) => count > *bc || (count == *bc && merged < *bm),
            };
            if better {
                best = Some((count, merged, pair));
            }
        }
        let Some((_, merged, pair)) = best else { break };

        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        piece_set.insert(merged.clone());
        pieces.push(merged);
        merges.push(pair);
    }

    Vocabulary::assemble(pieces, langs.to_vec(), merges)
}
