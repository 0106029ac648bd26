//! Winner-takes-all regression, mode classification and auxiliary losses.

use crate::model::ForwardOutput;
use crate::nn::log_softmax_last;
use crate::ops::smooth_l1;
use candle_core::{DType, Device, Tensor};
use seam_core::metrics::{ade, Point};
use seam_core::FutureTargets;
use serde::{Deserialize, Serialize};

type Result<T> = candle_core::Result<T>;

/// Mode with the smallest masked mean displacement, lowest index on ties;
/// `None` without any valid ground-truth step.
pub fn wta_select(modes: &[Vec<Point>], gt: &[Point], mask: &[bool]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (k, m) in modes.iter().enumerate() {
        let a = ade(m, gt, mask)?;
        if best.is_none_or(|(b, _)| a < b) {
            best = Some((a, k));
        }
    }
    best.map(|(_, k)| k)
}

/// Loss components of one batch, averaged over the samples that contributed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reg: f64,
    pub cls: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.reg + self.cls + self.aux
    }

    pub fn add(&mut self, other: &LossParts, w: f64) {
        self.reg += w * other.reg;
        self.cls += w * other.cls;
        self.aux += w * other.aux;
    }
}

pub struct LossOutput {
    pub reg: Tensor,
    pub cls: Tensor,
    pub aux: Tensor,
    pub parts: LossParts,
    /// Winner per sample, `None` for skipped samples.
    pub winners: Vec<Option<usize>>,
}

impl LossOutput {
    pub fn total(&self) -> Result<Tensor> {
        (&self.reg + &self.cls)? + &self.aux
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

fn trajectories(traj: &Tensor) -> Result<Vec<Vec<Vec<Point>>>> {
    let (b, k, h, _) = traj.dims4()?;
    let v = traj.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| {
            (0..k)
                .map(|m| {
                    (0..h)
                        .map(|t| {
                            let o = ((i * k + m) * h + t) * 2;
                            [v[o], v[o + 1]]
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Huber regression of selected rows against targets.
///
/// `rows: [R, L]`; `weights` holds one weight per element (zero where the
/// target is invalid). Invalid residuals are zeroed before the loss so they
/// contribute neither value nor gradient.
fn weighted_huber(rows: &Tensor, target: Vec<f64>, weights: Vec<f64>, delta: f64) -> Result<Tensor> {
    let shape = rows.shape().clone();
    let dtype = rows.dtype();
    let valid: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect();
    let target = Tensor::from_vec(target, &shape, &Device::Cpu)?.to_dtype(dtype)?;
    let valid = Tensor::from_vec(valid, &shape, &Device::Cpu)?.to_dtype(dtype)?;
    let weights = Tensor::from_vec(weights, &shape, &Device::Cpu)?.to_dtype(dtype)?;
    let residual = ((rows - target)? * valid)?;
    (smooth_l1(&residual, delta)? * weights)?.sum_all()
}

/// Winner-takes-all regression on `traj: [B, K, H, 2]`; samples without
/// valid ground truth are skipped. The winner rows are gathered with an index
/// select, so every other mode receives an exactly zero gradient.
pub fn regression_loss(traj: &Tensor, gts: &[Vec<Point>], masks: &[Vec<bool>], delta: f64) -> Result<(Tensor, Vec<Option<usize>>)> {
    let (b, k, h, _) = traj.dims4()?;
    let modes = trajectories(traj)?;
    let winners: Vec<Option<usize>> = (0..b).map(|i| wta_select(&modes[i], &gts[i], &masks[i])).collect();
    let used: Vec<usize> = (0..b).filter(|&i| winners[i].is_some()).collect();
    if used.is_empty() {
        return Ok((Tensor::zeros((), traj.dtype(), &Device::Cpu)?, winners));
    }
    let idx: Vec<u32> = used.iter().map(|&i| (i * k + winners[i].unwrap()) as u32).collect();
    let idx = Tensor::from_vec(idx, used.len(), &Device::Cpu)?;
    let rows = traj.reshape((b * k, h * 2))?.index_select(&idx, 0)?;
    let mut target = vec![0.0; used.len() * h * 2];
    let mut weights = vec![0.0; used.len() * h * 2];
    for (r, &i) in used.iter().enumerate() {
        let n_valid = masks[i].iter().take(h).filter(|&&m| m).count();
        let w = 1.0 / (2.0 * n_valid as f64 * used.len() as f64);
        for (t, (&m, g)) in masks[i].iter().zip(&gts[i]).take(h).enumerate() {
            if m {
                for c in 0..2 {
                    target[(r * h + t) * 2 + c] = g[c];
                    weights[(r * h + t) * 2 + c] = w;
                }
            }
        }
    }
    Ok((weighted_huber(&rows, target, weights, delta)?, winners))
}

/// Cross-entropy of the scores against the winners.
pub fn classification_loss(logits: &Tensor, winners: &[Option<usize>]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    let idx: Vec<u32> = (0..b).filter_map(|i| winners[i].map(|w| (i * k + w) as u32)).collect();
    if idx.is_empty() {
        return Tensor::zeros((), logits.dtype(), &Device::Cpu);
    }
    let n = idx.len();
    let logp = log_softmax_last(logits)?.reshape(b * k)?;
    let picked = logp.index_select(&Tensor::from_vec(idx, n, &Device::Cpu)?, 0)?;
    picked.sum_all()?.affine(-1.0 / n as f64, 0.0)
}

/// Full objective of one window for a batch.
pub fn loss_total(out: &ForwardOutput, targets: &[&FutureTargets], focal_index: &[usize], t_f: usize, delta: f64) -> Result<LossOutput> {
    let gts: Vec<Vec<Point>> = targets
        .iter()
        .zip(focal_index)
        .map(|(t, &f)| (0..t.positions.shape()[1]).map(|j| [t.positions[[f, j, 0]], t.positions[[f, j, 1]]]).collect())
        .collect();
    let masks: Vec<Vec<bool>> = targets.iter().zip(focal_index).map(|(t, &f)| t.mask.row(f).to_vec()).collect();
    let (reg, winners) = regression_loss(&out.traj, &gts, &masks, delta)?;
    let cls = classification_loss(&out.logits, &winners)?;
    let aux = match &out.aux {
        Some(a) => aux_loss(a, &out.aux_rows, targets, t_f, delta)?,
        None => Tensor::zeros((), out.traj.dtype(), &Device::Cpu)?,
    };
    let parts = LossParts { reg: scalar(&reg)?, cls: scalar(&cls)?, aux: scalar(&aux)? };
    Ok(LossOutput { reg, cls, aux, parts, winners })
}

/// Huber loss of the single-mode predictions of non-focal agents, averaged
/// over valid elements per sample and then over samples.
pub fn aux_loss(aux: &Tensor, rows: &[(usize, usize)], targets: &[&FutureTargets], t_f: usize, delta: f64) -> Result<Tensor> {
    let mut per_sample = vec![0usize; targets.len()];
    for &(b, i) in rows {
        per_sample[b] += targets[b].mask.row(i).iter().take(t_f).filter(|&&m| m).count();
    }
    let contributing = per_sample.iter().filter(|&&n| n > 0).count();
    if contributing == 0 {
        return Tensor::zeros((), aux.dtype(), &Device::Cpu);
    }
    let mut target = vec![0.0; rows.len() * t_f * 2];
    let mut weights = vec![0.0; rows.len() * t_f * 2];
    for (r, &(b, i)) in rows.iter().enumerate() {
        let w = 1.0 / (2.0 * per_sample[b].max(1) as f64 * contributing as f64);
        for t in 0..t_f.min(targets[b].mask.shape()[1]) {
            if targets[b].mask[[i, t]] {
                for c in 0..2 {
                    target[(r * t_f + t) * 2 + c] = targets[b].positions[[i, t, c]];
                    weights[(r * t_f + t) * 2 + c] = w;
                }
            }
        }
    }
    weighted_huber(&aux.reshape((rows.len(), t_f * 2))?, target, weights, delta)
}
