//! Corpus-level BLEU and the experiment report.

use crate::exec;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis/reference length mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    Whitespace,
    /// Splits punctuation from words, roughly like the common international
    /// BLEU tokenizers; adequate for real text at desk scale.
    Intl13aLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// The k-th consecutive zero precision is replaced by 1/2^k.
    ExpDecay,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub tokenization: Tokenization,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig { max_order: 4, tokenization: Tokenization::Whitespace, smoothing: Smoothing::ExpDecay }
    }
}

/// Score plus the component breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    /// Modified n-gram precisions p1..p_max (after smoothing). Orders beyond
    /// `effective_order` never occur in the hypothesis corpus; they are
    /// reported as 0 but excluded from the geometric mean.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub effective_order: usize,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn tokenize(line: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Whitespace => line.split_whitespace().map(|s| s.to_string()).collect(),
        Tokenization::Intl13aLike => {
            let mut out = Vec::new();
            let mut cur = String::new();
            for c in line.chars() {
                if c.is_whitespace() {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                } else if c.is_alphanumeric() {
                    cur.push(c);
                } else {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(c.to_string());
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
            out
        }
    }
}

type Counts = (Vec<u64>, Vec<u64>, usize, usize); // matches[n], totals[n], hyp_len, ref_len

fn pair_counts(hyp: &str, reference: &str, cfg: &BleuConfig) -> Counts {
    let h = tokenize(hyp, cfg.tokenization);
    let r = tokenize(reference, cfg.tokenization);
    let mut matches = vec![0u64; cfg.max_order];
    let mut totals = vec![0u64; cfg.max_order];
    for n in 1..=cfg.max_order {
        if h.len() < n {
            continue;
        }
        let mut ref_grams: HashMap<&[String], u64> = HashMap::new();
        if r.len() >= n {
            for g in r.windows(n) {
                *ref_grams.entry(g).or_insert(0) += 1;
            }
        }
        for g in h.windows(n) {
            totals[n - 1] += 1;
            if let Some(c) = ref_grams.get_mut(g) {
                if *c > 0 {
                    *c -= 1;
                    matches[n - 1] += 1;
                }
            }
        }
    }
    (matches, totals, h.len(), r.len())
}

/// Corpus BLEU in [0, 100]: geometric mean of modified n-gram precisions
/// times the brevity penalty.
pub fn bleu(hyps: &[String], refs: &[String], cfg: &BleuConfig) -> Result<BleuScore, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }

    let pairs: Vec<(String, String)> =
        hyps.iter().cloned().zip(refs.iter().cloned()).collect();
    let counts = exec::map(&pairs, |(h, r)| pair_counts(h, r, cfg));

    let mut matches = vec![0u64; cfg.max_order];
    let mut totals = vec![0u64; cfg.max_order];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (m, t, hl, rl) in counts {
        for n in 0..cfg.max_order {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += hl;
        ref_len += rl;
    }

    // Orders with no hypothesis n-grams at all are excluded from the mean;
    // zero precisions among the remaining orders are smoothed.
    let effective_order = totals.iter().take_while(|&&t| t > 0).count();
    let mut precisions = vec![0.0f64; cfg.max_order];
    let mut consecutive_zeros = 0u32;
    for n in 0..effective_order {
        let p = matches[n] as f64 / totals[n] as f64;
        precisions[n] = if p > 0.0 {
            consecutive_zeros = 0;
            p
        } else {
            match cfg.smoothing {
                Smoothing::None => 0.0,
                Smoothing::ExpDecay => {
                    consecutive_zeros += 1;
                    0.5f64.powi(consecutive_zeros as i32)
                }
            }
        };
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let included = &precisions[..effective_order];
    let bleu = if hyp_len == 0 || effective_order == 0 || included.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = included.iter().map(|p| p.ln()).sum::<f64>() / effective_order as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };

    Ok(BleuScore { bleu, precisions, brevity_penalty, effective_order, hyp_len, ref_len })
}

/// Canonical system rows of the final report, in table order.
pub const REPORT_ROWS: [&str; 8] = [
    "bilingual_baseline",
    "multi_mt",
    "multi_mt_mlm",
    "multi_mt_dae",
    "multi_mt_mlm_dae",
    "multi_mt_dae_bt1",
    "bilingual_mt_kd_bt2",
    "ensemble",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub dev_bleu: Option<f64>,
    pub test_bleu: Option<f64>,
}

/// Machine-readable experiment report: fixed rows, one column per direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub directions: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Rows that were requested but had no score; mirrored as nulls above.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub cells: Vec<ReportCell>,
}

impl Report {
    /// Assemble the fixed row set from per-(system, direction) scores.
    /// Key format: `scores[(system, direction)] = (dev, test)`.
    pub fn build(
        directions: &[String],
        scores: &HashMap<(String, String), (Option<f64>, Option<f64>)>,
    ) -> Report {
        let mut rows = Vec::new();
        let mut missing = Vec::new();
        for system in REPORT_ROWS {
            let mut cells = Vec::new();
            let mut any = false;
            for dir in directions {
                let got = scores.get(&(system.to_string(), dir.clone()));
                if got.is_some() {
                    any = true;
                }
                cells.push(ReportCell {
                    dev_bleu: got.and_then(|s| s.0),
                    test_bleu: got.and_then(|s| s.1),
                });
            }
            if !any {
                missing.push(system.to_string());
            }
            rows.push(ReportRow { system: system.to_string(), cells });
        }
        Report { directions: directions.to_vec(), rows, missing }
    }

    pub fn cell(&self, system: &str, direction: &str) -> Option<&ReportCell> {
        let d = self.directions.iter().position(|x| x == direction)?;
        self.rows.iter().find(|r| r.system == system).map(|r| &r.cells[d])
    }

    /// Human-readable table; numbers to two decimals, `-` for missing.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.2}"),
            None => "-".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("{:<22}", "system"));
        for d in &self.directions {
            out.push_str(&format!(" | {:>16} dev/test", d));
        }
        out.push('\n');
        let width = 22 + self.directions.len() * (3 + 16 + 9);
        out.push_str(&"-".repeat(width));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<22}", row.system));
            for c in &row.cells {
                out.push_str(&format!(
                    " | {:>12} / {:>10}",
                    fmt(c.dev_bleu),
                    fmt(c.test_bleu)
                ));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_corpora_score_100() {
        let h = s(&["a b c d", "e f g h i"]);
        let score = bleu(&h, &h, &BleuConfig::default()).unwrap();
        assert_eq!(score.bleu, 100.0);
        assert_eq!(score.brevity_penalty, 1.0);
    }

    #[test]
    fn hand_computed_four_token_example() {
        // hyp "a b c d" vs ref "a b c e": p = (3/4, 2/3, 1/2, 0 -> 1/2),
        // BP = 1; BLEU = 100 * (3/4 * 2/3 * 1/2 * 1/2)^(1/4) = 59.46.
        let score = bleu(&s(&["a b c d"]), &s(&["a b c e"]), &BleuConfig::default()).unwrap();
        assert!((score.bleu - 59.46).abs() < 0.005, "bleu {}", score.bleu);
        assert!((score.precisions[0] - 0.75).abs() < 1e-12);
        assert!((score.precisions[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((score.precisions[2] - 0.5).abs() < 1e-12);
        assert!((score.precisions[3] - 0.5).abs() < 1e-12);
        assert_eq!(score.brevity_penalty, 1.0);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let score = bleu(&s(&[""]), &s(&["a b c"]), &BleuConfig::default()).unwrap();
        assert_eq!(score.bleu, 0.0);
        assert_eq!(score.brevity_penalty, 0.0);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(bleu(&s(&["a"]), &s(&["a", "b"]), &BleuConfig::default()).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let hyps = s(&["a b c d", "x y z", "q w e r t", "m n"]);
        let refs = s(&["a b c e", "x y w", "q w e r u", "m o"]);
        let base = bleu(&hyps, &refs, &BleuConfig::default()).unwrap().bleu;
        let perm = [2usize, 0, 3, 1];
        let ph: Vec<String> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let pr: Vec<String> = perm.iter().map(|&i| refs[i].clone()).collect();
        let permuted = bleu(&ph, &pr, &BleuConfig::default()).unwrap().bleu;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn appending_correct_pair_never_lowers_score() {
        let mut hyps = s(&["a b c d e f", "g h i j"]);
        let mut refs = s(&["a b c d x y", "g h i j"]);
        let before = bleu(&hyps, &refs, &BleuConfig::default()).unwrap().bleu;
        hyps.push("k l m n o p".into());
        refs.push("k l m n o p".into());
        let after = bleu(&hyps, &refs, &BleuConfig::default()).unwrap().bleu;
        assert!(after >= before - 1e-12, "{before} -> {after}");
    }

    #[test]
    fn intl_tokenization_splits_punctuation() {
        assert_eq!(
            tokenize("hi, there.", Tokenization::Intl13aLike),
            vec!["hi", ",", "there", "."]
        );
        let score = bleu(
            &s(&["hi, there."]),
            &s(&["hi , there ."]),
            &BleuConfig {
                tokenization: Tokenization::Intl13aLike,
                ..BleuConfig::default()
            },
        )
        .unwrap();
        assert_eq!(score.bleu, 100.0);
    }

    #[test]
    fn perfect_score_iff_equal_under_tokenization() {
        let cfg = BleuConfig::default();
        let score = bleu(&s(&["a a"]), &s(&["a"]), &cfg).unwrap();
        assert!(score.bleu < 100.0, "longer hyp with clipped matches must not be 100");
        let score2 = bleu(&s(&["a b", "c"]), &s(&["a b", "c"]), &cfg).unwrap();
        assert_eq!(score2.bleu, 100.0);
    }

    #[test]
    fn report_has_fixed_rows_and_nulls() {
        let mut scores = HashMap::new();
        scores.insert(
            ("bilingual_baseline".to_string(), "sa->sb".to_string()),
            (Some(10.0), Some(9.5)),
        );
        let report = Report::build(&["sa->sb".to_string(), "sb->sa".to_string()], &scores);
        assert_eq!(report.rows.len(), 8);
        assert_eq!(report.missing.len(), 7);
        let cell = report.cell("bilingual_baseline", "sa->sb").unwrap();
        assert_eq!(cell.dev_bleu, Some(10.0));
        assert!(report.cell("ensemble", "sa->sb").unwrap().dev_bleu.is_none());
        // JSON and the rendered table agree to two decimals.
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("10.0"));
        assert!(report.render_table().contains("10.00"));
    }
}
