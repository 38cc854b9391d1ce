//! Corpus ingestion, cleaning, and synthetic language-pair generation.

mod lid;
mod synth;

pub use lid::{train_lid, LidError, LidModel};
pub use synth::{
    derive_shared_cipher, gen_synthetic, CipherTable, SynthTaskSpec, Transform, TransformSpec,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Short lowercase language identifier, e.g. `"bn"`, `"hi"`, `"syn_a"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LangId(String);

impl LangId {
    pub fn new(code: impl Into<String>) -> Result<Self, CorpusError> {
        let code = code.into();
        if code.is_empty()
            || !code
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            return Err(CorpusError::BadLangId(code));
        }
        Ok(LangId(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where a sentence pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Genuine,
    BackTranslated,
    Distilled,
}

/// One (source, target) training example. `origin` is fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_lang: LangId,
    pub tgt_lang: LangId,
    pub src: String,
    pub tgt: String,
    pub origin: Origin,
}

impl SentencePair {
    pub fn genuine(src_lang: LangId, tgt_lang: LangId, src: String, tgt: String) -> Self {
        SentencePair { src_lang, tgt_lang, src, tgt, origin: Origin::Genuine }
    }
}

/// Monolingual pool: ordered sentences of one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoCorpus {
    pub lang: LangId,
    pub lines: Vec<String>,
    pub provenance: String,
}

impl MonoCorpus {
    pub fn new(lang: LangId, lines: Vec<String>, provenance: impl Into<String>) -> Self {
        MonoCorpus { lang, lines, provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// Per-language corpus statistics, mirrored to JSON by the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub lang: String,
    pub raw_lines: usize,
    pub kept_lines: usize,
    pub dropped_lines: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language id {0:?}: must be nonempty lowercase ASCII")]
    BadLangId(String),
    #[error("line count mismatch: {src_path} has {src_lines} lines, {tgt_path} has {tgt_lines}")]
    LineCountMismatch { src_path: String, src_lines: usize, tgt_path: String, tgt_lines: usize },
    #[error("{path}: invalid UTF-8 on line {line}")]
    InvalidUtf8 { path: String, line: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("language identification: {0}")]
    Lid(#[from] LidError),
    #[error("invalid synthetic task spec: {0}")]
    BadSynthSpec(String),
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(s) => lines.push(s.to_string()),
            Err(_) => {
                return Err(CorpusError::InvalidUtf8 { path: path.display().to_string(), line: i + 1 })
            }
        }
    }
    // A trailing newline yields one empty final element; it is not a line.
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

/// Collapse interior whitespace runs and trim. All ingestion goes through
/// this so round trips and tokenization see canonical single-space text.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Read an aligned parallel corpus: one sentence per line, equal line counts.
/// Pairs where either side is empty after trimming are dropped and counted.
pub fn read_parallel(
    path_src: &Path,
    path_tgt: &Path,
    src_lang: LangId,
    tgt_lang: LangId,
) -> Result<(Vec<SentencePair>, usize), CorpusError> {
    let src_lines = read_lines(path_src)?;
    let tgt_lines = read_lines(path_tgt)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            src_path: path_src.display().to_string(),
            src_lines: src_lines.len(),
            tgt_path: path_tgt.display().to_string(),
            tgt_lines: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    let mut dropped = 0usize;
    for (s, t) in src_lines.into_iter().zip(tgt_lines) {
        let s = normalize_ws(&s);
        let t = normalize_ws(&t);
        if s.is_empty() || t.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair::genuine(src_lang.clone(), tgt_lang.clone(), s, t));
    }
    Ok((pairs, dropped))
}

/// Write the two sides of a parallel corpus as aligned text files.
pub fn write_parallel(pairs: &[SentencePair], path_src: &Path, path_tgt: &Path) -> Result<(), CorpusError> {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in pairs {
        src.push_str(&p.src);
        src.push('\n');
        tgt.push_str(&p.tgt);
        tgt.push('\n');
    }
    write_text(path_src, &src)?;
    write_text(path_tgt, &tgt)
}

/// Read a monolingual corpus, dropping (and counting) empty lines.
pub fn read_mono(path: &Path, lang: LangId) -> Result<(MonoCorpus, usize), CorpusError> {
    let lines = read_lines(path)?;
    let mut kept = Vec::with_capacity(lines.len());
    let mut dropped = 0usize;
    for l in lines {
        let l = normalize_ws(&l);
        if l.is_empty() {
            dropped += 1;
        } else {
            kept.push(l);
        }
    }
    let provenance = path.display().to_string();
    Ok((MonoCorpus::new(lang, kept, provenance), dropped))
}

/// Write one sentence per line, LF endings.
pub fn write_mono(corpus: &MonoCorpus, path: &Path) -> Result<(), CorpusError> {
    let mut text = String::new();
    for l in &corpus.lines {
        text.push_str(l);
        text.push('\n');
    }
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })?;
    f.write_all(text.as_bytes())
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), source: e })
}

/// Drop pairs whose source/target token-count ratio exceeds `max_ratio`.
pub fn filter_length_ratio(pairs: Vec<SentencePair>, max_ratio: f64) -> (Vec<SentencePair>, usize) {
    let mut kept = Vec::with_capacity(pairs.len());
    let mut dropped = 0usize;
    for p in pairs {
        let s = p.src.split_whitespace().count().max(1) as f64;
        let t = p.tgt.split_whitespace().count().max(1) as f64;
        if s / t > max_ratio || t / s > max_ratio {
            dropped += 1;
        } else {
            kept.push(p);
        }
    }
    (kept, dropped)
}

/// Keep the lines predicted as `expected`; preserves order.
/// Returns the kept corpus and the number of dropped lines.
pub fn filter_mono(
    corpus: &MonoCorpus,
    model: &LidModel,
    expected: &LangId,
) -> Result<(MonoCorpus, usize), CorpusError> {
    if !model.knows(expected) {
        return Err(LidError::UnknownLanguage(expected.to_string()).into());
    }
    let verdicts = crate::exec::map(&corpus.lines, |line| model.classify(line) == *expected);
    let mut kept = Vec::with_capacity(corpus.lines.len());
    for (line, keep) in corpus.lines.iter().zip(&verdicts) {
        if *keep {
            kept.push(line.clone());
        }
    }
    let dropped = corpus.lines.len() - kept.len();
    Ok((MonoCorpus::new(corpus.lang.clone(), kept, corpus.provenance.clone()), dropped))
}

/// Uniformly subsample a monolingual pool to at most `max_lines`, seeded.
/// Selection keeps the original line order.
pub fn subsample_mono(corpus: &MonoCorpus, max_lines: usize, seed: u64) -> MonoCorpus {
    if corpus.lines.len() <= max_lines {
        return corpus.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..corpus.lines.len()).collect();
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(max_lines).collect();
    chosen.sort_unstable();
    let lines = chosen.iter().map(|&i| corpus.lines[i].clone()).collect();
    MonoCorpus::new(corpus.lang.clone(), lines, corpus.provenance.clone())
}
