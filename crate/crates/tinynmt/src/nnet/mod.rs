//! Transformer encoder-decoder: parameters, autodiff, optimizer, checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod infer;
pub mod model;
pub mod scalar;
pub mod tape;

pub use adam::{adam_step, AdamConfig, OptState};
pub use checkpoint::{
    load_checkpoint, peek_dtype, save_checkpoint, Checkpoint, CheckpointMeta,
};
pub use model::{forward_mlm, forward_mt, BatchIds};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, Var};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss")]
    NanLoss,
    #[error("non-finite gradient in {0}")]
    NanGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Transformer hyperparameters. A checkpoint embeds this, so saved models
/// are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub share_embeddings: bool,
    pub tie_output_projection: bool,
    pub max_len: usize,
}

impl ModelConfig {
    /// The paper-scale multilingual shape: 12 encoder + 6 decoder layers.
    pub fn paper_multilingual(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 6,
            d_model: 512,
            d_ff: 2048,
            n_heads: 8,
            vocab_size,
            dropout: 0.1,
            share_embeddings: true,
            tie_output_projection: true,
            max_len: 256,
        }
    }

    /// The paper-scale bilingual/combiner shape: 6 + 6 layers.
    pub fn paper_bilingual(vocab_size: usize) -> Self {
        ModelConfig { enc_layers: 6, dec_layers: 6, ..Self::paper_multilingual(vocab_size) }
    }

    /// Desk-scale shape used by the tests and the synthetic benchmark.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size,
            dropout: 0.0,
            share_embeddings: true,
            tie_output_projection: true,
            max_len: 96,
        }
    }

    /// Minimal shape for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size,
            dropout: 0.0,
            share_embeddings: true,
            tie_output_projection: true,
            max_len: 32,
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(NnetError::InvalidConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(NnetError::InvalidConfig("need at least 1 encoder and 1 decoder layer".into()));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(NnetError::InvalidConfig("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnetError::InvalidConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    Gain,
}

fn attn_specs(prefix: &str, d: usize, specs: &mut Vec<(String, (usize, usize), ParamKind)>) {
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push((format!("{prefix}.{w}.weight"), (d, d), ParamKind::Weight));
        specs.push((format!("{prefix}.{w}.bias"), (1, d), ParamKind::Bias));
    }
}

fn ln_specs(prefix: &str, d: usize, specs: &mut Vec<(String, (usize, usize), ParamKind)>) {
    specs.push((format!("{prefix}.gain"), (1, d), ParamKind::Gain));
    specs.push((format!("{prefix}.bias"), (1, d), ParamKind::Bias));
}

fn ffn_specs(prefix: &str, d: usize, ff: usize, specs: &mut Vec<(String, (usize, usize), ParamKind)>) {
    specs.push((format!("{prefix}.w1.weight"), (d, ff), ParamKind::Weight));
    specs.push((format!("{prefix}.w1.bias"), (1, ff), ParamKind::Bias));
    specs.push((format!("{prefix}.w2.weight"), (ff, d), ParamKind::Weight));
    specs.push((format!("{prefix}.w2.bias"), (1, d), ParamKind::Bias));
}

fn param_specs(config: &ModelConfig) -> Vec<(String, (usize, usize), ParamKind)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let mut specs = Vec::new();
    if config.share_embeddings {
        specs.push(("embed.weight".to_string(), (v, d), ParamKind::Weight));
    } else {
        specs.push(("src_embed.weight".to_string(), (v, d), ParamKind::Weight));
        specs.push(("tgt_embed.weight".to_string(), (v, d), ParamKind::Weight));
    }
    for i in 0..config.enc_layers {
        ln_specs(&format!("encoder.{i}.ln1"), d, &mut specs);
        attn_specs(&format!("encoder.{i}.attn"), d, &mut specs);
        ln_specs(&format!("encoder.{i}.ln2"), d, &mut specs);
        ffn_specs(&format!("encoder.{i}.ffn"), d, ff, &mut specs);
    }
    ln_specs("encoder.norm", d, &mut specs);
    for i in 0..config.dec_layers {
        ln_specs(&format!("decoder.{i}.ln1"), d, &mut specs);
        attn_specs(&format!("decoder.{i}.self_attn"), d, &mut specs);
        ln_specs(&format!("decoder.{i}.ln2"), d, &mut specs);
        attn_specs(&format!("decoder.{i}.cross_attn"), d, &mut specs);
        ln_specs(&format!("decoder.{i}.ln3"), d, &mut specs);
        ffn_specs(&format!("decoder.{i}.ffn"), d, ff, &mut specs);
    }
    ln_specs("decoder.norm", d, &mut specs);
    if !config.tie_output_projection {
        specs.push(("out_proj.weight".to_string(), (d, v), ParamKind::Weight));
    }
    specs.push(("mlm_head.weight".to_string(), (d, v), ParamKind::Weight));
    specs.push(("mlm_head.bias".to_string(), (1, v), ParamKind::Bias));
    specs
}

/// Named trainable tensors in a deterministic, config-derived order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Array2<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Parameters<F> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, idx: usize) -> &Array2<F> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Array2<F> {
        &mut self.tensors[idx]
    }

    pub fn index(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        &self.tensors[self.index(name)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn from_named(named: Vec<(String, Array2<F>)>) -> Result<Self, NnetError> {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut by_name = HashMap::with_capacity(named.len());
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            if by_name.insert(name.clone(), i).is_some() {
                return Err(NnetError::ShapeMismatch(format!("duplicate parameter {name:?}")));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Parameters { names, tensors, by_name })
    }

    /// Number of scalar parameters.
    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Deterministic initialization: truncated normal (sigma 0.02, cut at 2
/// sigma) for weights, zeros for biases, ones for layer-norm gains.
pub fn init<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<F>, NnetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    let mut named = Vec::new();
    for (name, (r, c), kind) in param_specs(config) {
        let tensor = match kind {
            ParamKind::Weight => Array2::from_shape_fn((r, c), |_| {
                let mut x = normal.sample(&mut rng);
                while x.abs() > 0.04 {
                    x = normal.sample(&mut rng);
                }
                F::from_f64(x)
            }),
            ParamKind::Bias => Array2::zeros((r, c)),
            ParamKind::Gain => Array2::ones((r, c)),
        };
        named.push((name, tensor));
    }
    Parameters::from_named(named)
}
