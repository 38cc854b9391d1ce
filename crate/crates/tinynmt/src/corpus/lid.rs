//! Character n-gram Naive Bayes language identification.
//!
//! Self-trained stand-in for off-the-shelf LID: a multinomial model over
//! character n-grams with add-1 smoothing. Good enough to filter monolingual
//! pools, and fully reproducible from the training sample alone.

use super::LangId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LidError {
    #[error("need at least 2 languages to train, got {0}")]
    TooFewLanguages(usize),
    #[error("language {0:?} unknown to the model")]
    UnknownLanguage(String),
}

/// Multinomial char-n-gram Naive Bayes classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LidModel {
    pub ngram_order: usize,
    langs: Vec<LangId>,
    class_log_priors: Vec<f64>,
    /// Per class: log p(ngram | class) with add-1 smoothing.
    ngram_log_lik: Vec<BTreeMap<String, f64>>,
    /// Per class: log-likelihood of an n-gram never seen in that class.
    unseen_log_lik: Vec<f64>,
}

fn ngrams(line: &str, order: usize) -> Vec<String> {
    // Pad with spaces so word-boundary grams carry signal.
    let padded: Vec<char> = std::iter::once(' ')
        .chain(line.chars())
        .chain(std::iter::once(' '))
        .collect();
    if padded.len() < order {
        return vec![padded.iter().collect()];
    }
    padded.windows(order).map(|w| w.iter().collect()).collect()
}

/// Train the classifier on labeled sentences. Deterministic given input order.
pub fn train_lid(samples: &[(LangId, String)]) -> Result<LidModel, LidError> {
    train_lid_with_order(samples, 3)
}

pub fn train_lid_with_order(
    samples: &[(LangId, String)],
    ngram_order: usize,
) -> Result<LidModel, LidError> {
    let mut langs: Vec<LangId> = Vec::new();
    for (lang, _) in samples {
        if !langs.contains(lang) {
            langs.push(lang.clone());
        }
    }
    if langs.len() < 2 {
        return Err(LidError::TooFewLanguages(langs.len()));
    }

    let mut class_counts = vec![0usize; langs.len()];
    let mut gram_counts: Vec<BTreeMap<String, u64>> = vec![BTreeMap::new(); langs.len()];
    let mut gram_totals = vec![0u64; langs.len()];
    for (lang, line) in samples {
        let c = langs.iter().position(|l| l == lang).unwrap();
        class_counts[c] += 1;
        for g in ngrams(line, ngram_order) {
            *gram_counts[c].entry(g).or_insert(0) += 1;
            gram_totals[c] += 1;
        }
    }

    // Smoothing vocabulary: union of n-grams observed in any class.
    let mut vocab: std::collections::BTreeSet<&String> = std::collections::BTreeSet::new();
    for counts in &gram_counts {
        vocab.extend(counts.keys());
    }
    let v = vocab.len() as f64;

    let total = samples.len() as f64;
    let class_log_priors = class_counts.iter().map(|&c| (c as f64 / total).ln()).collect();
    let mut ngram_log_lik = Vec::with_capacity(langs.len());
    let mut unseen_log_lik = Vec::with_capacity(langs.len());
    for c in 0..langs.len() {
        let denom = gram_totals[c] as f64 + v;
        let map: BTreeMap<String, f64> = gram_counts[c]
            .iter()
            .map(|(g, &n)| (g.clone(), ((n as f64 + 1.0) / denom).ln()))
            .collect();
        ngram_log_lik.push(map);
        unseen_log_lik.push((1.0 / denom).ln());
    }

    Ok(LidModel { ngram_order, langs, class_log_priors, ngram_log_lik, unseen_log_lik })
}

impl LidModel {
    pub fn knows(&self, lang: &LangId) -> bool {
        self.langs.contains(lang)
    }

    pub fn languages(&self) -> &[LangId] {
        &self.langs
    }

    /// Argmax class for a sentence. Ties break toward the earlier language
    /// in training order, which keeps classification deterministic.
    pub fn classify(&self, line: &str) -> LangId {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.langs.len() {
            let mut score = self.class_log_priors[c];
            for g in ngrams(line, self.ngram_order) {
                score += self.ngram_log_lik[c].get(&g).copied().unwrap_or(self.unseen_log_lik[c]);
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        self.langs[best].clone()
    }
}
