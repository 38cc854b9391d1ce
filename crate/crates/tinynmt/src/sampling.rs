//! Temperature-based language balancing, the MT/MLM/DAE task schedule, and
//! batch construction.

use crate::corpus::LangId;
use crate::subword::BT;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("language weights need nonempty positive sizes and T > 0 (got T = {t})")]
    BadTemperature { t: f64 },
    #[error("size for {0} must be positive")]
    NonPositiveSize(String),
    #[error("empty pool for sampled {0}")]
    EmptyPool(String),
    #[error("invalid task schedule: {0}")]
    BadSchedule(String),
}

/// Sampling probabilities proportional to `(n_l / sum n)^(1/T)`. Higher
/// temperature flattens toward uniform; `T = 1` reproduces the data shares.
pub fn language_weights<K: Clone>(
    sizes: &[(K, f64)],
    temperature: f64,
) -> Result<Vec<(K, f64)>, SamplingError>
where
    K: std::fmt::Debug,
{
    if sizes.is_empty() || temperature <= 0.0 {
        return Err(SamplingError::BadTemperature { t: temperature });
    }
    let total: f64 = sizes.iter().map(|(_, n)| n).sum();
    for (k, n) in sizes {
        if *n <= 0.0 {
            return Err(SamplingError::NonPositiveSize(format!("{k:?}")));
        }
        let _ = total;
    }
    let exps: Vec<f64> = sizes.iter().map(|(_, n)| (n / total).powf(1.0 / temperature)).collect();
    let z: f64 = exps.iter().sum();
    Ok(sizes
        .iter()
        .zip(&exps)
        .map(|((k, _), e)| (k.clone(), e / z))
        .collect())
}

/// Piecewise-linear MT/MLM/DAE mixing weights over training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    /// `(step, (w_mt, w_mlm, w_dae))`, steps strictly increasing from 0,
    /// each triple summing to 1.
    pub knots: Vec<(u64, [f64; 3])>,
}

impl TaskSchedule {
    /// Default schedule: monolingual objectives carry weight early, pure MT
    /// from 80% of the budget onward.
    pub fn default_multitask(total_steps: u64) -> Self {
        let switch = (total_steps as f64 * 0.8) as u64;
        TaskSchedule { knots: vec![(0, [0.4, 0.3, 0.3]), (switch.max(1), [1.0, 0.0, 0.0])] }
    }

    /// MT-only schedule (bilingual baselines, students, combiners).
    pub fn mt_only() -> Self {
        TaskSchedule { knots: vec![(0, [1.0, 0.0, 0.0])] }
    }

    /// Zero out the named tasks and renormalize each knot.
    pub fn restrict(&self, use_mlm: bool, use_dae: bool) -> Result<TaskSchedule, SamplingError> {
        let knots = self
            .knots
            .iter()
            .map(|(s, w)| {
                let mut w = *w;
                if !use_mlm {
                    w[1] = 0.0;
                }
                if !use_dae {
                    w[2] = 0.0;
                }
                let z: f64 = w.iter().sum();
                if z <= 0.0 {
                    return Err(SamplingError::BadSchedule(
                        "restricting removed all task weight".into(),
                    ));
                }
                Ok((*s, [w[0] / z, w[1] / z, w[2] / z]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TaskSchedule { knots })
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.knots.is_empty() {
            return Err(SamplingError::BadSchedule("no knots".into()));
        }
        if self.knots[0].0 != 0 {
            return Err(SamplingError::BadSchedule("first knot must be at step 0".into()));
        }
        for w in self.knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SamplingError::BadSchedule("knot steps must strictly increase".into()));
            }
        }
        for (s, w) in &self.knots {
            if w.iter().any(|&x| x < 0.0) || ((w.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
                return Err(SamplingError::BadSchedule(format!(
                    "weights at step {s} must be nonnegative and sum to 1"
                )));
            }
        }
        Ok(())
    }
}

/// Interpolated `(w_mt, w_mlm, w_dae)` at `step`; constant after the last
/// knot.
pub fn task_weights(schedule: &TaskSchedule, step: u64) -> [f64; 3] {
    let knots = &schedule.knots;
    if step >= knots.last().unwrap().0 {
        return knots.last().unwrap().1;
    }
    let mut prev = &knots[0];
    for knot in &knots[1..] {
        if step < knot.0 {
            let span = (knot.0 - prev.0) as f64;
            let t = (step - prev.0) as f64 / span;
            let mut w = [0.0; 3];
            for i in 0..3 {
                w[i] = prev.1[i] + t * (knot.1[i] - prev.1[i]);
            }
            return w;
        }
        prev = knot;
    }
    knots.last().unwrap().1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mt,
    Mlm,
    Dae,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Mt => write!(f, "mt"),
            Task::Mlm => write!(f, "mlm"),
            Task::Dae => write!(f, "dae"),
        }
    }
}

/// One encoded MT example: training-time source ids (language tag and `<BT>`
/// already applied, no `</s>`) and raw target ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// Pools the sampler draws from.
#[derive(Debug, Clone, Default)]
pub struct TrainingPools {
    /// Per direction: label like "sa->sb" plus the encoded pairs.
    pub mt: Vec<(String, Vec<EncodedPair>)>,
    /// Per language: lang plus encoded monolingual rows (no `</s>`), and the
    /// language-token id used for DAE inputs (None for bilingual training).
    pub mono: Vec<(LangId, Option<u32>, Vec<Vec<u32>>)>,
}

/// One sampled batch. Rows carry no `</s>`; the loss builders append it.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub task: Task,
    /// Direction label for MT, language code for MLM/DAE.
    pub tag: String,
    pub src_rows: Vec<Vec<u32>>,
    pub tgt_rows: Vec<Vec<u32>>,
    /// DAE only: the `<2xx>` token to prepend to the corrupted input.
    pub lang_token: Option<u32>,
}

fn draw_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Sample the next batch: the task follows the schedule at `step`; the MT
/// direction (or MLM/DAE language) follows temperature-balanced weights over
/// pool sizes; rows are drawn uniformly with replacement. Deterministic
/// given the rng state.
pub fn next_batch(
    pools: &TrainingPools,
    temperature: f64,
    schedule: &TaskSchedule,
    step: u64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch, SamplingError> {
    let w = task_weights(schedule, step);
    let task = match draw_index(&w, rng) {
        0 => Task::Mt,
        1 => Task::Mlm,
        _ => Task::Dae,
    };
    match task {
        Task::Mt => {
            if pools.mt.is_empty() || pools.mt.iter().all(|(_, p)| p.is_empty()) {
                return Err(SamplingError::EmptyPool("mt bitext".into()));
            }
            let sizes: Vec<(String, f64)> = pools
                .mt
                .iter()
                .map(|(d, p)| (d.clone(), p.len() as f64))
                .collect();
            let lw = language_weights(&sizes, temperature)?;
            let di = draw_index(&lw.iter().map(|(_, p)| *p).collect::<Vec<_>>(), rng);
            let (tag, pool) = &pools.mt[di];
            let mut src_rows = Vec::with_capacity(batch_size);
            let mut tgt_rows = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let ex = &pool[rng.gen_range(0..pool.len())];
                src_rows.push(ex.src.clone());
                tgt_rows.push(ex.tgt.clone());
            }
            Ok(TrainBatch { task, tag: tag.clone(), src_rows, tgt_rows, lang_token: None })
        }
        Task::Mlm | Task::Dae => {
            if pools.mono.is_empty() || pools.mono.iter().all(|(_, _, p)| p.is_empty()) {
                return Err(SamplingError::EmptyPool(format!("{task} monolingual")));
            }
            let sizes: Vec<(String, f64)> = pools
                .mono
                .iter()
                .map(|(l, _, p)| (l.to_string(), p.len() as f64))
                .collect();
            let lw = language_weights(&sizes, temperature)?;
            let li = draw_index(&lw.iter().map(|(_, p)| *p).collect::<Vec<_>>(), rng);
            let (lang, lang_token, pool) = &pools.mono[li];
            let mut rows = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                rows.push(pool[rng.gen_range(0..pool.len())].clone());
            }
            Ok(TrainBatch {
                task,
                tag: lang.to_string(),
                src_rows: rows.clone(),
                tgt_rows: rows,
                lang_token: if task == Task::Dae { *lang_token } else { None },
            })
        }
    }
}

/// Training-time source ids for a pair: `<BT>` tag first (back-translated
/// data only), then the `<2xx>` target-language token (multilingual models
/// only), then the encoded source.
pub fn tag_source(ids: &[u32], back_translated: bool, lang_token: Option<u32>) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    if back_translated {
        out.push(BT);
    }
    if let Some(t) = lang_token {
        out.push(t);
    }
    out.extend_from_slice(ids);
    out
}
