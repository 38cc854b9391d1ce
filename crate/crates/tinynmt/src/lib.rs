//! Desk-scale laboratory for low-resource neural machine translation.
//!
//! The crate covers the full pipeline: corpus ingestion and synthetic task
//! generation, language-identification filtering, joint subword vocabularies,
//! a from-scratch transformer with reverse-mode autodiff, multitask training
//! (MT + MLM + DAE) with temperature-based language balancing, beam-search
//! decoding, tagged back-translation, sequence-level knowledge distillation,
//! seq2seq system combination, and BLEU evaluation.
//!
//! Everything is deterministic given explicit seeds: the parallel code paths
//! (enabled by the default `parallel` feature) produce bit-identical results
//! to the sequential fallback.

pub mod augment;
pub mod combine;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod exec;
pub mod nnet;
pub mod objectives;
pub mod pipeline;
pub mod sampling;
pub mod subword;
pub mod trainer;
