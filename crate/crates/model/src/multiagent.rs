//! Joint predictions: every scored agent is predicted as focal agent once and
//! a consistency module assembles the marginal modes into scored worlds.

use crate::loss::{loss_total, LossParts};
use crate::model::{ForwardOutput, Prediction, ENCODER_PREFIXES};
use crate::nn::{pose_features, Act, Block, Ctx, Embedding, Mlp, ParamBuilder, Params, Scope};
use crate::optim::TrainConfig;
use crate::stream::{run_stream_batch, StreamFrame};
use crate::train::{StepRecord, Trainer};
use crate::{Batch, ForwardOptions, ModelError, Result, SeamModel};
use candle_core::{DType, Device, Tensor};
use seam_core::metrics::{ade, MetricAccumulator, MetricReport, Point, WorldSet};
use seam_core::tensorize::focal_frame;
use seam_core::{extract_window, streaming_schedule, tensorize, Pose2D, Protocol, Scenario};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

type CResult<T> = candle_core::Result<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentCategory {
    Focal,
    Driving,
    Parked,
}

impl AgentCategory {
    pub const COUNT: usize = 3;

    pub fn id(self) -> u32 {
        match self {
            AgentCategory::Focal => 0,
            AgentCategory::Driving => 1,
            AgentCategory::Parked => 2,
        }
    }
}

pub const PARKED_THRESHOLD_M: f64 = 1.0;

/// Parked iff the most probable mode ends less than `threshold` from the
/// agent's current position after `t_f` steps. The focal tag wins.
pub fn classify_agent_category(pred: &Prediction, current: Point, t_f: usize, threshold: f64, is_focal: bool) -> AgentCategory {
    if is_focal {
        return AgentCategory::Focal;
    }
    let best = &pred.trajectories[pred.most_probable()];
    let end = best[t_f.min(best.len()) - 1];
    if (end[0] - current[0]).hypot(end[1] - current[1]) < threshold {
        AgentCategory::Parked
    } else {
        AgentCategory::Driving
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiAgentConfig {
    pub mode_blocks: usize,
    pub agent_blocks: usize,
    /// Worlds are the stacked k-th most probable marginal modes, with the
    /// consistency heads switched off.
    pub naive_worlds: bool,
    /// Use every agent valid at the final window instead of the scored ones.
    pub all_agents: bool,
    pub parked_threshold_m: f64,
}

impl Default for MultiAgentConfig {
    fn default() -> Self {
        Self { mode_blocks: 2, agent_blocks: 2, naive_worlds: false, all_agents: false, parked_threshold_m: PARKED_THRESHOLD_M }
    }
}

/// Joint trajectories of one scenario in the global frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldPrediction {
    pub scenario_id: String,
    pub t_now: u32,
    pub agent_ids: Vec<String>,
    pub categories: Vec<AgentCategory>,
    /// `[K][N_s][T_f]`.
    pub trajectories: Vec<Vec<Vec<Point>>>,
    pub probabilities: Vec<f64>,
    /// Requested agents that could not be predicted.
    pub excluded: Vec<String>,
}

/// Per-agent streams of one scenario.
#[derive(Debug, Clone)]
pub struct AgentStreams {
    pub scenario_id: String,
    pub agent_ids: Vec<String>,
    pub streams: Vec<Vec<StreamFrame>>,
    pub excluded: Vec<String>,
    pub focal_id: String,
    /// Focal frame at the final window; the shared frame of the global poses.
    pub scene_pose: Pose2D,
}

impl AgentStreams {
    pub fn build(scenario: &Scenario, protocol: &Protocol, model: &SeamModel, all_agents: bool) -> Result<Self> {
        let window = model.window_config();
        let tcfg = model.tensorize_config();
        let steps = streaming_schedule(scenario, protocol, &window)?;
        let last = *steps.last().expect("schedule is never empty");
        let windows = steps.iter().map(|&t| extract_window(scenario, t, &window)).collect::<seam_core::Result<Vec<_>>>()?;
        let mut ids: Vec<String> = if all_agents {
            scenario.tracks.iter().filter(|t| t.valid_at(last).is_some()).map(|t| t.id.clone()).collect()
        } else {
            let mut v = scenario.scored_track_ids.clone();
            if !v.contains(&scenario.focal_track_id) {
                v.push(scenario.focal_track_id.clone());
            }
            v
        };
        ids.sort();
        ids.dedup();
        let (mut agent_ids, mut streams, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
        for id in ids {
            let frames: std::result::Result<Vec<StreamFrame>, String> = windows
                .iter()
                .map(|w| {
                    let (bundle, targets) = tensorize(&w.with_focal(&id), &tcfg).map_err(|e| e.to_string())?;
                    Ok(StreamFrame { t_now: w.t_now, bundle, targets })
                })
                .collect();
            match frames {
                Ok(f) => {
                    agent_ids.push(id);
                    streams.push(f);
                }
                Err(e) => {
                    log::warn!("{}: agent {id} excluded: {e}", scenario.id);
                    excluded.push(id);
                }
            }
        }
        if agent_ids.is_empty() {
            return Err(ModelError::Stream(format!("{}: no predictable agent", scenario.id)));
        }
        let scene_pose = focal_frame(windows.last().expect("non-empty"))?;
        Ok(Self { scenario_id: scenario.id.clone(), agent_ids, streams, excluded, focal_id: scenario.focal_track_id.clone(), scene_pose })
    }

    pub fn len(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_ids.is_empty()
    }
}

/// Snapshot marginal predictions of several agents of one window, batched
/// with the agents sorted by id.
pub struct MarginalBatch {
    pub agent_ids: Vec<String>,
    /// Focal-frame predictions.
    pub predictions: Vec<Prediction>,
    /// `[N_s, K, D]`.
    pub q: Tensor,
    pub focal_poses: Vec<Pose2D>,
    pub excluded: Vec<String>,
}

pub fn marginal_batch(model: &SeamModel, window: &seam_core::ObservationWindow, agent_ids: &[String]) -> Result<MarginalBatch> {
    let mut ids = agent_ids.to_vec();
    ids.sort();
    ids.dedup();
    let tcfg = model.tensorize_config();
    let (mut kept, mut bundles, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
    for id in ids {
        match tensorize(&window.with_focal(&id), &tcfg) {
            Ok((b, _)) => {
                kept.push(id);
                bundles.push(b);
            }
            Err(e) => {
                log::warn!("{}: agent {id} excluded: {e}", window.scenario_id);
                excluded.push(id);
            }
        }
    }
    if bundles.is_empty() {
        return Err(ModelError::Stream(format!("{}: no predictable agent", window.scenario_id)));
    }
    let refs: Vec<_> = bundles.iter().collect();
    let batch = model.batch(&refs)?;
    let out = model.forward(&batch, None, &ForwardOptions::default(), &Ctx::eval())?;
    let predictions = (0..batch.size).map(|b| out.prediction(b)).collect::<CResult<Vec<_>>>()?;
    Ok(MarginalBatch { agent_ids: kept, predictions, q: out.q_dec, focal_poses: batch.focal_poses, excluded })
}

/// Attention across the modes of each agent, then across the agents of
/// each mode, followed by residual trajectory and world score heads.
#[derive(Clone)]
pub struct ConsistencyModule {
    pos: Mlp,
    category: Embedding,
    mode_blocks: Vec<Block>,
    agent_blocks: Vec<Block>,
    traj_head: Mlp,
    score_head: Mlp,
    t_f: usize,
}

/// Inputs of one scenario for the consistency module.
pub struct WorldInput {
    /// `[N, K, D]`, modes ordered by descending marginal probability.
    pub q: Tensor,
    /// `[N, K, T_f, 2]` in each agent's own frame, same mode order.
    pub base: Tensor,
    /// `[N, K]` sorted marginal probabilities.
    pub base_probs: Vec<Vec<f64>>,
    pub poses: Vec<Pose2D>,
    pub categories: Vec<AgentCategory>,
}

impl ConsistencyModule {
    pub fn new(s: &Scope, model_cfg: &crate::ModelConfig, cfg: &MultiAgentConfig) -> CResult<Self> {
        let d = model_cfg.d_model;
        let (h, ff, p) = (model_cfg.n_heads, model_cfg.ffn_mult, model_cfg.dropout);
        let blocks = |name: &str, n: usize| -> CResult<Vec<Block>> {
            (0..n).map(|i| Block::new(&s.child(name).child(&i.to_string()), d, h, ff, p, false)).collect()
        };
        Ok(Self {
            pos: Mlp::new(&s.child("pos"), 4, d, d, Act::Gelu)?,
            category: Embedding::new(&s.child("category"), AgentCategory::COUNT, d)?,
            mode_blocks: blocks("mode_blocks", cfg.mode_blocks)?,
            agent_blocks: blocks("agent_blocks", cfg.agent_blocks)?,
            traj_head: Mlp::zero_output(&s.child("traj_head"), d, 2 * d, 2 * model_cfg.t_f, Act::Relu)?,
            score_head: Mlp::new(&s.child("score_head"), d, 2 * d, 1, Act::Relu)?,
            t_f: model_cfg.t_f,
        })
    }

    /// Returns `(traj [K, N, T_f, 2] per-agent frames, logits [K])`.
    pub fn forward(&self, input: &WorldInput, naive: bool, ctx: &Ctx) -> CResult<(Tensor, Tensor)> {
        let (n, k, _) = input.q.dims3()?;
        let base = input.base.permute((1, 0, 2, 3))?.contiguous()?;
        if naive {
            let mut pw: Vec<f64> = (0..k).map(|m| input.base_probs.iter().map(|p| p[m]).sum::<f64>() / n as f64).collect();
            let z: f64 = pw.iter().sum();
            pw.iter_mut().for_each(|p| *p = (*p / z).max(f64::MIN_POSITIVE).ln());
            let logits = Tensor::from_vec(pw, k, &Device::Cpu)?.to_dtype(input.q.dtype())?;
            return Ok((base, logits));
        }
        let feats: Vec<[f64; 4]> = input.poses.iter().map(|p| p.to_features()).collect();
        let r = self.pos.forward(&pose_features(&feats, input.q.dtype())?)?.unsqueeze(1)?;
        let cats: Vec<u32> = input.categories.iter().map(|c| c.id()).collect();
        let c = self.category.forward(&cats)?.unsqueeze(1)?;
        let mut x = input.q.broadcast_add(&r)?.broadcast_add(&c)?;
        let all = Arc::new(vec![true; n * k]);
        for b in &self.mode_blocks {
            x = b.forward_self(&x, &all, ctx)?;
        }
        let mut x = x.transpose(0, 1)?.contiguous()?;
        for b in &self.agent_blocks {
            x = b.forward_self(&x, &all, ctx)?;
        }
        let delta = self.traj_head.forward(&x)?.reshape((k, n, self.t_f, 2))?;
        let traj = (base + delta)?;
        let logits = self.score_head.forward(&x)?.reshape((k, n))?.mean(1)?;
        Ok((traj, logits))
    }
}

/// Marginal model plus consistency module.
pub struct MultiAgentModel {
    pub marginal: SeamModel,
    pub consistency: ConsistencyModule,
    /// Parameters of the consistency module (names prefixed `consistency.`).
    pub params: Params,
    pub cfg: MultiAgentConfig,
}

impl MultiAgentModel {
    pub fn new(marginal: SeamModel, cfg: MultiAgentConfig, seed: u64) -> Result<Self> {
        if !(cfg.parked_threshold_m.is_finite() && cfg.parked_threshold_m >= 0.0) {
            return Err(ModelError::Config("parked_threshold_m must be finite and >= 0".into()));
        }
        let pb = ParamBuilder::new(seed, marginal.dtype);
        let consistency = ConsistencyModule::new(&pb.root().child("consistency"), &marginal.cfg, &cfg)?;
        Ok(Self { marginal, consistency, params: pb.finish(), cfg })
    }

    pub fn all_params(&self) -> [&Params; 2] {
        [&self.marginal.params, &self.params]
    }

    /// Consistency inputs for the rows `rows` (one scenario) of a batched
    /// final-window output.
    pub fn world_input(
        &self,
        batch: &Batch,
        out: &ForwardOutput,
        rows: std::ops::Range<usize>,
        focal_id: &str,
        agent_ids: &[String],
        scene: &Pose2D,
    ) -> Result<WorldInput> {
        let k = self.marginal.cfg.k_modes;
        let t_f = self.marginal.cfg.t_f;
        let mut order_idx = Vec::with_capacity(rows.len() * k);
        let mut base_probs = Vec::new();
        let mut categories = Vec::new();
        let mut poses = Vec::new();
        for (a, b) in rows.clone().enumerate() {
            let pred = out.prediction(b)?;
            let order = seam_core::metrics::top_k(&pred.probabilities, k);
            base_probs.push(order.iter().map(|&m| pred.probabilities[m]).collect());
            order_idx.extend(order.iter().map(|&m| (b * k + m) as u32));
            categories.push(classify_agent_category(&pred, [0.0, 0.0], t_f, self.cfg.parked_threshold_m, agent_ids[a] == focal_id));
            poses.push(scene.relative(&batch.focal_poses[b]));
        }
        let n = rows.len();
        let idx = Tensor::from_vec(order_idx, n * k, &Device::Cpu)?;
        let (bn, _, h, _) = out.traj.dims4()?;
        let d = self.marginal.cfg.d_model;
        let q = out.q_dec.reshape((bn * k, d))?.index_select(&idx, 0)?.reshape((n, k, d))?;
        let base = out.traj.reshape((bn * k, h, 2))?.index_select(&idx, 0)?.narrow(1, 0, t_f)?.reshape((n, k, t_f, 2))?;
        Ok(WorldInput { q, base, base_probs, poses, categories })
    }

    /// Streams the agents of several scenarios together; returns per-window
    /// outputs and the final-window world results per scenario.
    pub fn run(&self, scenes: &[&AgentStreams], detach: bool, ctx: &Ctx) -> Result<MultiRun> {
        let streams: Vec<&[StreamFrame]> = scenes.iter().flat_map(|s| s.streams.iter().map(Vec::as_slice)).collect();
        let outs = run_stream_batch(&self.marginal, &streams, &ForwardOptions::default(), detach, ctx)?;
        let (batch, out) = outs.last().ok_or_else(|| ModelError::Stream("no windows".into()))?;
        let mut worlds = Vec::with_capacity(scenes.len());
        let mut off = 0;
        for s in scenes {
            let input = self.world_input(batch, out, off..off + s.len(), &s.focal_id, &s.agent_ids, &s.scene_pose)?;
            let (traj, logits) = self.consistency.forward(&input, self.cfg.naive_worlds, ctx)?;
            worlds.push(WorldOutput { traj, logits, rows: off..off + s.len(), categories: input.categories });
            off += s.len();
        }
        Ok(MultiRun { windows: outs, worlds })
    }

    /// Global-frame joint prediction of each scenario.
    pub fn predict(&self, scenes: &[&AgentStreams]) -> Result<Vec<WorldPrediction>> {
        let run = self.run(scenes, true, &Ctx::eval())?;
        let (batch, _) = run.windows.last().expect("non-empty");
        scenes
            .iter()
            .zip(&run.worlds)
            .map(|(s, w)| {
                let traj = w.traj.to_dtype(DType::F64)?;
                let (k, n, t, _) = traj.dims4()?;
                let flat = traj.flatten_all()?.to_vec1::<f64>()?;
                let trajectories = (0..k)
                    .map(|m| {
                        (0..n)
                            .map(|a| {
                                let pose = batch.focal_poses[w.rows.start + a];
                                (0..t)
                                    .map(|j| {
                                        let o = ((m * n + a) * t + j) * 2;
                                        pose.transform_point([flat[o], flat[o + 1]])
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                let probabilities = crate::nn::softmax_last(&w.logits)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok(WorldPrediction {
                    scenario_id: s.scenario_id.clone(),
                    t_now: batch.t_now[w.rows.start],
                    agent_ids: s.agent_ids.clone(),
                    categories: w.categories.clone(),
                    trajectories,
                    probabilities,
                    excluded: s.excluded.clone(),
                })
            })
            .collect()
    }
}

pub struct WorldOutput {
    pub traj: Tensor,
    pub logits: Tensor,
    pub rows: std::ops::Range<usize>,
    pub categories: Vec<AgentCategory>,
}

pub struct MultiRun {
    pub windows: Vec<(Batch, ForwardOutput)>,
    pub worlds: Vec<WorldOutput>,
}

/// World with the lowest mean per-agent ADE (agents without valid ground
/// truth ignored), lowest index on ties.
pub fn best_world(worlds: &[Vec<Vec<Point>>], gts: &[Vec<Point>], masks: &[Vec<bool>]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (k, w) in worlds.iter().enumerate() {
        let ades: Vec<f64> = w.iter().zip(gts.iter().zip(masks)).filter_map(|(t, (g, m))| ade(t, g, m)).collect();
        if ades.is_empty() {
            return None;
        }
        let mean = ades.iter().sum::<f64>() / ades.len() as f64;
        if best.is_none_or(|(b, _)| mean < b) {
            best = Some((mean, k));
        }
    }
    best.map(|(_, k)| k)
}

/// Regression on every trajectory of the best world plus cross-entropy of the
/// world scores; `traj: [K, N, T, 2]`, ground truth in the same frames.
pub fn loss_world(
    traj: &Tensor,
    logits: &Tensor,
    gts: &[Vec<Point>],
    masks: &[Vec<bool>],
    delta: f64,
) -> Result<Option<(Tensor, Tensor, usize)>> {
    let (k, n, t, _) = traj.dims4()?;
    let flat = traj.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let worlds: Vec<Vec<Vec<Point>>> = (0..k)
        .map(|m| {
            (0..n)
                .map(|a| {
                    (0..t)
                        .map(|j| {
                            let o = ((m * n + a) * t + j) * 2;
                            [flat[o], flat[o + 1]]
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let Some(w) = best_world(&worlds, gts, masks) else { return Ok(None) };
    let sel = traj.get(w)?.reshape((n, t * 2))?;
    let agents: Vec<usize> = (0..n).filter(|&a| masks[a].iter().take(t).any(|&m| m)).collect();
    let mut target = vec![0.0; n * t * 2];
    let mut weight = vec![0.0; n * t * 2];
    for &a in &agents {
        let nv = masks[a].iter().take(t).filter(|&&m| m).count() as f64;
        for j in 0..t.min(gts[a].len()) {
            if masks[a][j] {
                for c in 0..2 {
                    target[(a * t + j) * 2 + c] = gts[a][j][c];
                    weight[(a * t + j) * 2 + c] = 1.0 / (2.0 * nv * agents.len() as f64);
                }
            }
        }
    }
    let dt = traj.dtype();
    let valid: Vec<f64> = weight.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
    let shape = (n, t * 2);
    let residual = ((sel - Tensor::from_vec(target, shape, &Device::Cpu)?.to_dtype(dt)?)?
        * Tensor::from_vec(valid, shape, &Device::Cpu)?.to_dtype(dt)?)?;
    let reg = (crate::ops::smooth_l1(&residual, delta)? * Tensor::from_vec(weight, shape, &Device::Cpu)?.to_dtype(dt)?)?.sum_all()?;
    let logp = crate::nn::log_softmax_last(logits)?;
    let cls = logp.get(w)?.neg()?;
    Ok(Some((reg, cls, w)))
}

/// Focal-frame ground truth of row `focal_index` over the first `t_f` steps.
fn agent_truth(frame: &StreamFrame, t_f: usize) -> (Vec<Point>, Vec<bool>) {
    let f = frame.bundle.focal_index;
    let t = &frame.targets;
    let n = t_f.min(t.mask.shape()[1]);
    ((0..n).map(|j| [t.positions[[f, j, 0]], t.positions[[f, j, 1]]]).collect(), (0..n).map(|j| t.mask[[f, j]]).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiLossParts {
    pub marginal: LossParts,
    pub world_reg: f64,
    pub world_cls: f64,
}

/// Marginal objective averaged over windows plus the world objective at the
/// final window averaged over scenarios.
pub fn multi_agent_loss(
    model: &MultiAgentModel,
    scenes: &[&AgentStreams],
    cfg: &TrainConfig,
    ctx: &Ctx,
) -> Result<(Tensor, MultiLossParts)> {
    let run = model.run(scenes, cfg.detach_stream, ctx)?;
    let t_f = model.marginal.cfg.t_f;
    let n_win = run.windows.len() as f64;
    let streams: Vec<&[StreamFrame]> = scenes.iter().flat_map(|s| s.streams.iter().map(Vec::as_slice)).collect();
    let mut parts = MultiLossParts::default();
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(a) => (a + t)?,
            None => t,
        });
        Ok(())
    };
    for (f, (batch, out)) in run.windows.iter().enumerate() {
        let targets: Vec<_> = streams.iter().map(|s| &s[f].targets).collect();
        let l = loss_total(out, &targets, &batch.focal_index, t_f, cfg.huber_delta)?;
        parts.marginal.add(&l.parts, 1.0 / n_win);
        add(l.total()?.affine(1.0 / n_win, 0.0)?)?;
    }
    let mut world_terms = Vec::new();
    for (s, w) in scenes.iter().zip(&run.worlds) {
        let (gts, masks): (Vec<_>, Vec<_>) = s.streams.iter().map(|st| agent_truth(st.last().expect("non-empty"), t_f)).unzip();
        if let Some(x) = loss_world(&w.traj, &w.logits, &gts, &masks, cfg.huber_delta)? {
            world_terms.push(x);
        }
    }
    let nw = world_terms.len().max(1) as f64;
    for (reg, cls, _) in world_terms {
        parts.world_reg += reg.to_dtype(DType::F64)?.to_scalar::<f64>()? / nw;
        parts.world_cls += cls.to_dtype(DType::F64)?.to_scalar::<f64>()? / nw;
        add(((reg + cls)? / nw)?)?;
    }
    Ok((total.expect("at least one window"), parts))
}

/// Multi-agent fine-tuning; encoders stay frozen when configured.
pub fn train_multi_agent<C: FnMut(&StepRecord)>(
    model: &MultiAgentModel,
    data: &[AgentStreams],
    trainer: &mut Trainer,
    max_steps: usize,
    on_step: C,
) -> Result<Vec<StepRecord>> {
    if trainer.cfg.freeze_encoders_ma {
        trainer.opt.frozen_prefixes = ENCODER_PREFIXES.iter().map(|s| s.to_string()).collect();
    }
    let cfg = trainer.cfg.clone();
    let params = model.all_params();
    trainer.run(
        &params,
        data.len(),
        max_steps,
        |idx, ctx| {
            let scenes: Vec<&AgentStreams> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, p) = multi_agent_loss(model, &scenes, &cfg, ctx)?;
            let mut parts = p.marginal;
            parts.reg += p.world_reg;
            parts.cls += p.world_cls;
            Ok((loss, parts))
        },
        on_step,
    )
}

/// World metrics at k = 1 and k = K on the final window.
pub fn evaluate_worlds(model: &MultiAgentModel, data: &[AgentStreams], batch_size: usize) -> Result<(MetricReport, Vec<WorldPrediction>)> {
    if data.is_empty() {
        return Err(ModelError::Config("evaluation set is empty".into()));
    }
    let t_f = model.marginal.cfg.t_f;
    let mut acc = MetricAccumulator::new(true);
    let mut preds = Vec::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let scenes: Vec<&AgentStreams> = chunk.iter().collect();
        for (s, wp) in scenes.iter().zip(model.predict(&scenes)?) {
            let (gts, masks): (Vec<_>, Vec<_>) = s
                .streams
                .iter()
                .map(|st| {
                    let last = st.last().expect("non-empty");
                    let (g, m) = agent_truth(last, t_f);
                    (g.iter().map(|p| last.bundle.focal_pose.transform_point(*p)).collect::<Vec<_>>(), m)
                })
                .unzip();
            let set = WorldSet { worlds: wp.trajectories.clone(), probabilities: wp.probabilities.clone() };
            let mut values = seam_core::metrics::world_sample(&set, &gts, &masks, 1);
            values.extend(seam_core::metrics::world_sample(&set, &gts, &masks, set.probabilities.len()));
            acc.add(&s.scenario_id, values);
            preds.push(wp);
        }
    }
    Ok((acc.finish(), preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(endpoint: Point) -> Prediction {
        Prediction {
            trajectories: vec![vec![[0.0, 0.0], endpoint], vec![[9.0, 9.0], [99.0, 0.0]]],
            probabilities: vec![0.7, 0.3],
            q_decoded: vec![],
            aux: vec![],
        }
    }

    #[test]
    fn parked_rule_is_strict() {
        let c = |e| classify_agent_category(&pred(e), [0.0, 0.0], 2, 1.0, false);
        assert_eq!(c([0.0, 0.0]), AgentCategory::Parked);
        assert_eq!(c([50.0, 0.0]), AgentCategory::Driving);
        assert_eq!(c([0.6, 0.8]), AgentCategory::Driving);
        assert_eq!(classify_agent_category(&pred([0.0, 0.0]), [0.0, 0.0], 2, 1.0, true), AgentCategory::Focal);
    }

    #[test]
    fn best_world_ties_and_choice() {
        let gt = vec![vec![[0.0, 0.0], [1.0, 0.0]]; 2];
        let masks = vec![vec![true; 2]; 2];
        let same = vec![vec![vec![[0.0, 1.0], [1.0, 1.0]]; 2]; 3];
        assert_eq!(best_world(&same, &gt, &masks), Some(0));
        let mut w = same.clone();
        w[2] = gt.clone();
        assert_eq!(best_world(&w, &gt, &masks), Some(2));
        let (reg, _, k) = loss_world(
            &Tensor::from_vec(w.iter().flatten().flatten().flatten().copied().collect::<Vec<f64>>(), (3, 2, 2, 2), &Device::Cpu).unwrap(),
            &Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap(),
            &gt,
            &masks,
            1.0,
        )
        .unwrap()
        .unwrap();
        assert_eq!(k, 2);
        assert_eq!(reg.to_scalar::<f64>().unwrap(), 0.0);
    }
}
