//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcheck::{GradMap, ParamStore};
use crate::train::TrainConfig;

/// Linear warmup to `peak_lr` over `warmup_steps`, then cosine decay to
/// `final_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond schedule end {}",
            cfg.total_steps
        )));
    }
    if step <= cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.final_lr
        + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First/second moment state, lazily allocated per parameter.
#[derive(Debug, Default, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Euclidean norm over all gradient buffers.
pub fn global_grad_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grads(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// One bias-corrected AdamW update. Decoupled decay `lr·wd·θ` applies to
/// rank-2 weight matrices only, which leaves norm gains and the key-reuse
/// gate untouched. Missing gradients are treated as zero (moment decay still
/// runs). Non-finite gradients abort with diagnostics.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - cfg.adam_beta1.powf(t);
    let bias2 = 1.0 - cfg.adam_beta2.powf(t);
    let names: Vec<String> = params.names().cloned().collect();
    let zero: Vec<f64> = Vec::new();
    for name in names {
        let tensor = params.get_mut(&name)?;
        let numel = tensor.numel();
        let decay = tensor.shape().len() == 2;
        let g = grads.get(&name).map(Vec::as_slice).unwrap_or(&zero);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
        let data = tensor.data_mut();
        for i in 0..numel {
            let gi = g.get(i).copied().unwrap_or(0.0);
            if decay {
                data[i] -= lr * cfg.weight_decay * data[i];
            }
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * gi;
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
