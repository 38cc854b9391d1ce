//! Adam with global-norm clipping and inverse-sqrt warmup.

use super::scalar::Scalar;
use super::{NnetError, Parameters};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { peak_lr: 3e-3, warmup_steps: 400 }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F: Scalar> {
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<F: Scalar> OptState<F> {
    pub fn new(params: &Parameters<F>, config: AdamConfig) -> Self {
        let m = (0..params.len()).map(|i| Array2::zeros(params.tensor(i).dim())).collect();
        let v = (0..params.len()).map(|i| Array2::zeros(params.tensor(i).dim())).collect();
        OptState { m, v, step: 0, config }
    }

    /// Learning rate after `step` updates: linear ramp to `peak_lr` over the
    /// warmup, then inverse-sqrt decay.
    pub fn lr_at(config: &AdamConfig, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = config.warmup_steps.max(1) as f64;
        config.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// One optimizer update. Gradients are first scaled so their global L2 norm
/// does not exceed `clip_norm`; missing gradients count as zero and leave
/// their parameters untouched. NaN/Inf gradients abort the step.
pub fn adam_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &[Option<Array2<F>>],
    opt: &mut OptState<F>,
    clip_norm: f64,
) -> Result<(), NnetError> {
    if grads.len() != params.len() {
        return Err(NnetError::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut sq_sum = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if g.dim() != params.tensor(i).dim() {
            return Err(NnetError::ShapeMismatch(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.dim(),
                params.tensor(i).dim()
            )));
        }
        for &x in g.iter() {
            let x = x.to_f64();
            if !x.is_finite() {
                return Err(NnetError::NanGradient(params.names()[i].clone()));
            }
            sq_sum += x * x;
        }
    }
    let norm = sq_sum.sqrt();
    let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };

    opt.step += 1;
    let lr = OptState::<F>::lr_at(&opt.config, opt.step);
    let b1 = F::from_f64(BETA1);
    let b2 = F::from_f64(BETA2);
    let one_m_b1 = F::from_f64(1.0 - BETA1);
    let one_m_b2 = F::from_f64(1.0 - BETA2);
    let bc1 = F::from_f64(1.0 - BETA1.powi(opt.step as i32));
    let bc2 = F::from_f64(1.0 - BETA2.powi(opt.step as i32));
    let eps = F::from_f64(EPSILON);
    let lr_f = F::from_f64(lr);
    let scale_f = F::from_f64(scale);

    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        let p = params.tensor_mut(i);
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                let g = g * scale_f;
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
