//! AdamW, the cosine schedule, and layerwise learning-rate decay.

use super::{ParamSet, TrainError};
use crate::encoders::ParamKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    /// 0.98 rather than Adam's 0.999, for stability at contrastive scales.
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: f64,
    pub warmup_epochs: f64,
    pub grad_accum_steps: usize,
    pub min_lr: f64,
    /// Desk runs are usually specified in steps; when set these override
    /// the epoch-derived counts.
    pub total_steps: Option<u64>,
    pub warmup_steps: Option<u64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.1,
            batch_size: 64,
            epochs: 25.0,
            warmup_epochs: 1.0,
            grad_accum_steps: 1,
            min_lr: 0.0,
            total_steps: None,
            warmup_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.base_lr <= 0.0 || self.beta1 <= 0.0 || self.beta2 <= 0.0 || self.eps <= 0.0 {
            return Err(TrainError::Contract("optimizer rates must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::Contract("betas must be < 1".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(TrainError::Contract("batch_size and grad_accum_steps must be >= 1".into()));
        }
        match (self.total_steps, self.warmup_steps) {
            (Some(t), Some(w)) if w >= t => {
                return Err(TrainError::Contract("warmup_steps must be < total_steps".into()));
            }
            (None, _) | (_, None) if self.warmup_epochs >= self.epochs => {
                return Err(TrainError::Contract("warmup_epochs must be < epochs".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolves `(total_steps, warmup_steps)` given the corpus-derived
    /// steps-per-epoch.
    pub fn schedule(&self, steps_per_epoch: u64) -> (u64, u64) {
        let total = self
            .total_steps
            .unwrap_or_else(|| (self.epochs * steps_per_epoch as f64).ceil() as u64)
            .max(1);
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_epochs * steps_per_epoch as f64).round() as u64)
            .min(total.saturating_sub(1));
        (total, warmup)
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    base_lr: f64,
    min_lr: f64,
) -> Result<f64, TrainError> {
    if step > total_steps || warmup_steps >= total_steps {
        return Err(TrainError::Contract(format!(
            "invalid schedule position: step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First/second moment state, keyed by parameter path.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

fn decayed(kind: ParamKind) -> bool {
    // gains, biases, and the logit scale are excluded from weight decay
    matches!(kind, ParamKind::Weight)
}

/// One decoupled-weight-decay Adam update over every parameter of the
/// set.
///
/// Parameters absent from `grads` are treated as zero-gradient (their
/// moments decay and weight decay still applies). Inner arithmetic runs
/// in f64 so a single step matches the closed-form update to f32
/// rounding.
pub fn adamw_step(
    params: &mut dyn ParamSet,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<(), TrainError> {
    adamw_step_scaled(params, grads, state, lr, &|_| 1.0, cfg)
}

/// [`adamw_step`] with a per-parameter learning-rate multiplier (the
/// layerwise-decay hook used by finetuning). The multiplier scales the
/// whole update, weight decay included.
pub fn adamw_step_scaled(
    params: &mut dyn ParamSet,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    lr_scale: &dyn Fn(&str) -> f64,
    cfg: &OptimConfig,
) -> Result<(), TrainError> {
    for (path, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NanGradient {
                param: path.clone(),
                step: state.step,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let wd = cfg.weight_decay;
    let eps = cfg.eps;

    let mut result = Ok(());
    let (m_map, v_map) = (&mut state.m, &mut state.v);
    params.visit_mut(&mut |path, tensor, kind| {
        if result.is_err() {
            return;
        }
        let n = tensor.len();
        let m = m_map.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = v_map.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            result = Err(TrainError::Contract(format!(
                "optimizer state for {path} has stale shape"
            )));
            return;
        }
        let zero = vec![0.0f32; n];
        let g = grads.get(path).map_or(&zero[..], Vec::as_slice);
        let lr = lr * lr_scale(path);
        let mut data = tensor.data().to_vec();
        for i in 0..n {
            let gi = f64::from(g[i]);
            let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
            let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let mut p = f64::from(data[i]);
            let decay = if decayed(kind) { wd * p } else { 0.0 };
            p -= lr * (mhat / (vhat.sqrt() + eps) + decay);
            data[i] = p as f32;
        }
        match crate::tensor::Tensor::from_vec(tensor.shape().to_vec(), data) {
            Ok(t) => *tensor = t,
            Err(e) => result = Err(e.into()),
        }
    });
    result
}

/// Exponential layerwise multiplier for finetuning: embeddings sit at
/// depth 0, block `k` at `k+1`, the classifier head (and final norm) at
/// `num_blocks + 1`, and the multiplier is `decay^(num_blocks+1 - depth)`.
pub fn layerwise_lr_scale(path: &str, num_blocks: usize, decay: f64) -> Result<f64, TrainError> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(TrainError::Contract(format!("layer decay {decay} outside (0, 1]")));
    }
    let top = num_blocks + 1;
    let depth = if path.starts_with("image.patch.")
        || path == "image.cls"
        || path == "image.pos"
    {
        0
    } else if let Some(rest) = path.strip_prefix("image.blocks.") {
        let k: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::UnknownParamPath(path.to_string()))?;
        if k >= num_blocks {
            return Err(TrainError::UnknownParamPath(path.to_string()));
        }
        k + 1
    } else if path.starts_with("image.ln_f.") || path.starts_with("head.") {
        top
    } else {
        return Err(TrainError::UnknownParamPath(path.to_string()));
    };
    Ok(decay.powi((top - depth) as i32))
}
