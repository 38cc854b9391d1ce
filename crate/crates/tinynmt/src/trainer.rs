//! The shared training loop: sample a batch, build the loss graph, take an
//! Adam step, log one JSON line per step.

use crate::nnet::model::Graph;
use crate::nnet::{adam_step, AdamConfig, ModelConfig, NnetError, OptState, Parameters, Scalar, Tape};
use crate::objectives::{
    dae_loss_graph, mlm_loss_graph, mt_loss_graph, DaeNoiseConfig, MlmNoiseConfig, NoiseVocab,
    LABEL_SMOOTHING,
};
use crate::sampling::{next_batch, SamplingError, Task, TaskSchedule, TrainingPools};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Nnet(#[from] NnetError),
    #[error("sampling: {0}")]
    Sampling(#[from] SamplingError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 3000,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_steps: 400,
            clip_norm: 1.0,
            temperature: 5.0,
            seed: 0,
        }
    }
}

/// One training-step record, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub task: Task,
    pub tag: String,
    pub loss: f64,
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// MLM batches whose noise selected no position (loss 0 by convention).
    pub empty_mlm_batches: u64,
}

impl TrainReport {
    pub fn mean_loss_first(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().take(k).map(|r| r.loss).sum::<f64>() / k as f64
    }

    pub fn mean_loss_last(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(k).map(|r| r.loss).sum::<f64>() / k as f64
    }
}

/// Train `params` in place. Deterministic given `settings.seed` (batching,
/// noise, and dropout all derive from it).
pub fn train_model<F: Scalar>(
    params: &mut Parameters<F>,
    config: &ModelConfig,
    pools: &TrainingPools,
    schedule: &TaskSchedule,
    mlm_cfg: &MlmNoiseConfig,
    dae_cfg: &DaeNoiseConfig,
    noise_vocab: &NoiseVocab,
    settings: &TrainSettings,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    schedule.validate()?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9e3779b9).wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9e3779b9).wrapping_add(2));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9e3779b9).wrapping_add(3));
    let mut opt = OptState::new(
        params,
        AdamConfig { peak_lr: settings.peak_lr, warmup_steps: settings.warmup_steps },
    );
    let mut report = TrainReport::default();

    for step in 0..settings.steps {
        let batch = next_batch(
            pools,
            settings.temperature,
            schedule,
            step,
            settings.batch_size,
            &mut sample_rng,
        )?;
        let mut tape: Tape<F> = Tape::new();
        let graph = Graph::register(&mut tape, params);
        let dropout = if config.dropout > 0.0 { Some(&mut dropout_rng) } else { None };
        let loss_var = match batch.task {
            Task::Mt => mt_loss_graph(
                &mut tape,
                &graph,
                config,
                &batch.src_rows,
                &batch.tgt_rows,
                LABEL_SMOOTHING,
                dropout,
            )?,
            Task::Mlm => {
                let (var, n_targets) = mlm_loss_graph(
                    &mut tape,
                    &graph,
                    config,
                    &batch.src_rows,
                    mlm_cfg,
                    noise_vocab,
                    &mut noise_rng,
                )?;
                if n_targets == 0 {
                    report.empty_mlm_batches += 1;
                }
                var
            }
            Task::Dae => dae_loss_graph(
                &mut tape,
                &graph,
                config,
                &batch.src_rows,
                batch.lang_token,
                dae_cfg,
                &mut noise_rng,
            )?,
        };
        let loss = tape.scalar_value(loss_var);
        let grads = tape.backward(loss_var, params.len())?;
        adam_step(params, &grads, &mut opt, settings.clip_norm)?;
        report.losses.push(LossRecord { step, task: batch.task, tag: batch.tag, loss });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::init;
    use crate::sampling::EncodedPair;

    fn toy_pools(n: usize) -> TrainingPools {
        // A trivially learnable mapping: src token t -> tgt token t + 5.
        let pairs: Vec<EncodedPair> = (0..n)
            .map(|i| {
                let a = 10 + (i % 5) as u32;
                let b = 10 + ((i + 1) % 5) as u32;
                EncodedPair { src: vec![a, b], tgt: vec![a + 5, b + 5] }
            })
            .collect();
        TrainingPools {
            mt: vec![("toy".into(), pairs)],
            mono: vec![(
                crate::corpus::LangId::new("sa").unwrap(),
                None,
                (0..n).map(|i| vec![10 + (i % 5) as u32, 10 + ((i + 2) % 5) as u32]).collect(),
            )],
        }
    }

    #[test]
    fn loss_decreases_on_toy_dataset() {
        let cfg = ModelConfig {
            d_model: 32,
            d_ff: 64,
            n_heads: 2,
            max_len: 16,
            ..ModelConfig::tiny(20)
        };
        let mut params = init::<f64>(&cfg, 42).unwrap();
        let pools = toy_pools(50);
        let settings = TrainSettings {
            steps: 200,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_steps: 40,
            ..Default::default()
        };
        let report = train_model(
            &mut params,
            &cfg,
            &pools,
            &TaskSchedule::mt_only(),
            &MlmNoiseConfig::default(),
            &DaeNoiseConfig::default(),
            &NoiseVocab { first_regular: 10, vocab_size: 20 },
            &settings,
        )
        .unwrap();
        let first = report.mean_loss_first(20);
        let last = report.mean_loss_last(20);
        assert!(
            last < 0.5 * first,
            "loss should at least halve on the toy set: {first} -> {last}"
        );
        assert!(params.all_finite());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = ModelConfig::tiny(20);
        let pools = toy_pools(20);
        let run = || {
            let mut params = init::<f64>(&cfg, 7).unwrap();
            let settings = TrainSettings { steps: 30, batch_size: 4, ..Default::default() };
            train_model(
                &mut params,
                &cfg,
                &pools,
                &TaskSchedule::default_multitask(30),
                &MlmNoiseConfig::default(),
                &DaeNoiseConfig::default(),
                &NoiseVocab { first_regular: 10, vocab_size: 20 },
                &settings,
            )
            .unwrap();
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn multitask_schedule_trains_all_tasks() {
        let cfg = ModelConfig::tiny(20);
        let mut params = init::<f64>(&cfg, 3).unwrap();
        let pools = toy_pools(20);
        let settings = TrainSettings { steps: 60, batch_size: 2, ..Default::default() };
        let report = train_model(
            &mut params,
            &cfg,
            &pools,
            &TaskSchedule { knots: vec![(0, [0.34, 0.33, 0.33])] },
            &MlmNoiseConfig::default(),
            &DaeNoiseConfig::default(),
            &NoiseVocab { first_regular: 10, vocab_size: 20 },
            &settings,
        )
        .unwrap();
        let seen: std::collections::BTreeSet<String> =
            report.losses.iter().map(|r| r.task.to_string()).collect();
        assert_eq!(seen.len(), 3, "all three tasks sampled: {seen:?}");
    }
}
