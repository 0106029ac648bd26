//! Optimization loops over streams of consecutive windows.

use crate::loss::{loss_total, LossParts};
use crate::nn::{Ctx, Params};
use crate::optim::{lr_schedule, AdamW, TrainConfig};
use crate::stream::{run_stream_batch, StreamFrame};
use crate::{ForwardOptions, ModelError, Result, SeamModel};
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seam_core::FutureTargets;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Optimizer state plus the global step counter.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples.div_ceil(batch_size.max(1)).max(1)
}

/// Sample order of an epoch; a pure function of seed and epoch so resumed
/// runs see the same batches.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate().map_err(ModelError::Config)?;
        let opt = AdamW::new(&cfg);
        Ok(Self { cfg, opt, step: 0 })
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.cfg.epochs * steps_per_epoch(n_samples, self.cfg.batch_size)
    }

    /// Runs up to `max_steps` optimizer steps (stopping at the end of the
    /// schedule). `loss_fn` maps sample indices to a scalar loss.
    pub fn run<F, C>(
        &mut self,
        params: &[&Params],
        n_samples: usize,
        max_steps: usize,
        mut loss_fn: F,
        mut on_step: C,
    ) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&[usize], &Ctx) -> Result<(Tensor, LossParts)>,
        C: FnMut(&StepRecord),
    {
        if n_samples == 0 {
            return Err(ModelError::Config("training set is empty".into()));
        }
        let spe = steps_per_epoch(n_samples, self.cfg.batch_size);
        let end = self.total_steps(n_samples).min(self.step.saturating_add(max_steps));
        let mut history = Vec::new();
        while self.step < end {
            let epoch = self.step / spe;
            let order = epoch_order(n_samples, self.cfg.seed, epoch);
            let j = self.step % spe;
            let idx = &order[j * self.cfg.batch_size..((j + 1) * self.cfg.batch_size).min(n_samples)];
            let ctx = Ctx::train(self.cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(self.step as u64));
            let (loss, parts) = loss_fn(idx, &ctx)?;
            let total = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !total.is_finite() {
                return Err(ModelError::NonFinite(format!(
                    "step {} (epoch {epoch}): loss {total} from reg {} cls {} aux {}; samples {idx:?}",
                    self.step, parts.reg, parts.cls, parts.aux
                )));
            }
            let grads = loss.backward()?;
            let lr = lr_schedule(self.step, spe, &self.cfg);
            let st = self.opt.step(params, &grads, lr)?;
            let rec = StepRecord { step: self.step, epoch, lr, loss: parts, total, grad_norm: st.grad_norm, clipped_norm: st.clipped_norm };
            on_step(&rec);
            history.push(rec);
            self.step += 1;
        }
        Ok(history)
    }
}

/// Mean of the per-window objective over a batch of streams.
pub fn stream_loss(model: &SeamModel, streams: &[&[StreamFrame]], cfg: &TrainConfig, ctx: &Ctx) -> Result<(Tensor, LossParts)> {
    let outs = run_stream_batch(model, streams, &ForwardOptions::default(), cfg.detach_stream, ctx)?;
    let n = outs.len() as f64;
    let mut total: Option<Tensor> = None;
    let mut parts = LossParts::default();
    for (f, (batch, out)) in outs.iter().enumerate() {
        let targets: Vec<&FutureTargets> = streams.iter().map(|s| &s[f].targets).collect();
        let l = loss_total(out, &targets, &batch.focal_index, model.cfg.t_f, cfg.huber_delta)?;
        parts.add(&l.parts, 1.0 / n);
        let t = l.total()?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    let total = total.ok_or_else(|| ModelError::Stream("stream without frames".into()))?;
    Ok((total.affine(1.0 / n, 0.0)?, parts))
}

/// Streaming training of the single-agent model.
pub fn train_stream<C: FnMut(&StepRecord)>(
    model: &SeamModel,
    data: &[Vec<StreamFrame>],
    trainer: &mut Trainer,
    max_steps: usize,
    on_step: C,
) -> Result<Vec<StepRecord>> {
    let cfg = trainer.cfg.clone();
    let params = model.params.clone();
    trainer.run(
        &[&params],
        data.len(),
        max_steps,
        |idx, ctx| {
            let streams: Vec<&[StreamFrame]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            stream_loss(model, &streams, &cfg, ctx)
        },
        on_step,
    )
}
