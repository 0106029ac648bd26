//! Learning-rate schedule and a decoupled-weight-decay Adam optimizer with
//! global-norm clipping.

use crate::nn::Params;
use crate::{ModelError, Result};
use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub huber_delta: f64,
    pub ma_epochs: usize,
    pub freeze_encoders_ma: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cut gradients between consecutive windows of a stream.
    pub detach_stream: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            warmup_epochs: 13,
            lr_start: 1e-5,
            lr_peak: 1e-2,
            lr_end: 1e-5,
            batch_size: 32,
            weight_decay: 1e-2,
            grad_clip_norm: 5.0,
            huber_delta: 1.0,
            ma_epochs: 35,
            freeze_encoders_ma: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            detach_stream: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return Err(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        let rates = [self.lr_start, self.lr_peak, self.lr_end, self.grad_clip_norm, self.huber_delta, self.eps];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err("learning rates, clip norm, huber delta and eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("weight_decay must be >= 0 and betas in [0, 1)".into());
        }
        Ok(())
    }

    /// Schedule used for multi-agent fine-tuning: no warmup.
    pub fn multi_agent(&self) -> Self {
        Self { epochs: self.ma_epochs, warmup_epochs: 0, ..self.clone() }
    }
}

/// Linear warmup from `lr_start` to `lr_peak`, then a single cosine decay
/// that reaches `lr_end` exactly at the final step.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    let warm = cfg.warmup_epochs * steps_per_epoch;
    if step < warm {
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1 + warm);
    let progress = if span == 0 { 1.0 } else { ((step - warm) as f64 / span as f64).min(1.0) };
    cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moments are kept in `f64` by parameter
/// name so they can be checkpointed and survive parameter-set changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Parameters whose name starts with one of these are never updated.
    pub frozen_prefixes: Vec<String>,
    pub steps: u64,
    pub moments: Vec<MomentState>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.grad_clip_norm,
            frozen_prefixes: Vec::new(),
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn moment(&mut self, name: &str, n: usize) -> &mut MomentState {
        let idx = match self.moments.iter().position(|m| m.name == name) {
            Some(i) => i,
            None => {
                self.moments.push(MomentState { name: name.into(), m: vec![0.0; n], v: vec![0.0; n] });
                self.moments.len() - 1
            }
        };
        &mut self.moments[idx]
    }

    /// Clips the gradients of the trainable parameters to the global norm
    /// limit and applies one update. Parameters without a gradient are left
    /// untouched.
    pub fn step(&mut self, params: &[&Params], grads: &GradStore, lr: f64) -> Result<StepStats> {
        let mut work: Vec<(String, candle_core::Var, Vec<f64>)> = Vec::new();
        for ps in params {
            for (name, var) in ps.iter() {
                if self.is_frozen(name) {
                    continue;
                }
                if let Some(g) = grads.get(var.as_tensor()) {
                    let g = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                    work.push((name.clone(), var.clone(), g));
                }
            }
        }
        let norm = work.iter().flat_map(|(_, _, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ModelError::NonFinite(format!("gradient norm is {norm}")));
        }
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut clipped_sq = 0.0;
        for (name, var, g) in work {
            let p = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let st = self.moment(&name, p.len());
            if st.m.len() != p.len() {
                return Err(ModelError::Checkpoint(format!("optimizer state for {name} has the wrong size")));
            }
            let mut out = Vec::with_capacity(p.len());
            for i in 0..p.len() {
                let gi = g[i] * scale;
                clipped_sq += gi * gi;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let upd = (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                out.push(p[i] - lr * wd * p[i] - lr * upd);
            }
            let new = Tensor::from_vec(out, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&new)?;
        }
        Ok(StepStats { grad_norm: norm, clipped_norm: clipped_sq.sqrt() })
    }
}
