//! Cross-frame state: ego-motion alignment, motion-aware normalization,
//! context referencing, trajectory relay and the sliding-window driver.

use crate::batch::Batch;
use crate::model::{ForwardOptions, ForwardOutput, Prediction, SeamModel};
use crate::nn::{pose_features, Act, Block, Ctx, Linear, Mlp, Scope};
use crate::ops::{self, KeyMask};
use crate::{ModelError, Result};
use candle_core::{Device, Tensor};
use seam_core::tensorize::{tensorize, FutureTargets, TensorizeConfig};
use seam_core::window::{extract_window, streaming_schedule, Protocol, WindowConfig};
use seam_core::{Pose2D, Scenario, TensorBundle};
use std::sync::Arc;

/// The previous focal frame expressed in the current one.
pub fn relative_motion(prev: &Pose2D, cur: &Pose2D) -> Pose2D {
    cur.inverse().compose(prev)
}

/// Layer normalization whose scale and shift are predicted from ego motion.
#[derive(Clone)]
pub struct Mln {
    motion: Mlp,
    gamma: Linear,
    beta: Linear,
}

impl Mln {
    pub fn new(s: &Scope, d: usize) -> candle_core::Result<Self> {
        Ok(Self {
            motion: Mlp::new(&s.child("motion"), 4, d, d, Act::Gelu)?,
            gamma: Linear::zeros(&s.child("gamma"), d, d)?,
            beta: Linear::zeros(&s.child("beta"), d, d)?,
        })
    }

    /// `x: [B, N, D]`, `motion: [B, 4]` pose features.
    pub fn forward(&self, x: &Tensor, motion: &Tensor) -> candle_core::Result<Tensor> {
        let m = self.motion.forward(motion)?;
        let g = (self.gamma.forward(&m)? + 1.0)?.unsqueeze(1)?;
        let b = self.beta.forward(&m)?.unsqueeze(1)?;
        ops::layer_norm(x)?.broadcast_mul(&g)?.broadcast_add(&b)
    }
}

#[derive(Clone)]
pub struct ContextReferencing {
    pub mln: Mln,
    agent: Block,
    lane: Block,
}

impl ContextReferencing {
    pub fn new(s: &Scope, d: usize, heads: usize, ffn: usize, dropout: f64) -> candle_core::Result<Self> {
        Ok(Self {
            mln: Mln::new(&s.child("mln"), d)?,
            agent: Block::new(&s.child("agent"), d, heads, ffn, dropout, true)?,
            lane: Block::new(&s.child("lane"), d, heads, ffn, dropout, true)?,
        })
    }

    /// Agent tokens attend to every previous token, lane tokens to previous
    /// lanes only. Tokens without any admissible key pass through unchanged.
    pub fn forward(&self, c: &Tensor, batch: &Batch, prev: &AlignedState, pos_embed: &Mlp, ctx: &Ctx) -> candle_core::Result<Tensor> {
        let keys = (self.mln.forward(&prev.scene, &prev.motion_feats)? + pos_embed.forward(&prev.pose_feats)?)?;
        let np = prev.n_tok;
        let any_prev: Vec<bool> = (0..batch.size).map(|b| prev.mask[b * np..(b + 1) * np].iter().any(|&m| m)).collect();
        let any_lane: Vec<bool> = (0..batch.size).map(|b| prev.lane_mask[b * np..(b + 1) * np].iter().any(|&m| m)).collect();
        let n = batch.n_tok;
        let gate_a: Vec<bool> = (0..batch.size * n).map(|i| batch.token_mask[i] && batch.token_is_agent[i] && any_prev[i / n]).collect();
        let gate_l: Vec<bool> = (0..batch.size * n).map(|i| batch.token_mask[i] && !batch.token_is_agent[i] && any_lane[i / n]).collect();
        let mut out = c.clone();
        if gate_a.iter().any(|&g| g) {
            let a = self.agent.forward_cross(c, &keys, KeyMask::PerKey(prev.mask.clone()), Some(&gate_a), ctx)?;
            out = (&out + (a - c)?)?;
        }
        if gate_l.iter().any(|&g| g) {
            let l = self.lane.forward_cross(c, &keys, KeyMask::PerKey(prev.lane_mask.clone()), Some(&gate_l), ctx)?;
            out = (&out + (l - c)?)?;
        }
        Ok(out)
    }
}

#[derive(Clone)]
pub struct TrajectoryRelay {
    embed: Mlp,
    block: Block,
    pub offset: Mlp,
    t_f: usize,
}

impl TrajectoryRelay {
    pub fn new(s: &Scope, d: usize, heads: usize, ffn: usize, dropout: f64, t_f: usize, horizon: usize) -> candle_core::Result<Self> {
        Ok(Self {
            embed: Mlp::new(&s.child("embed"), 2 * t_f, d, d, Act::Gelu)?,
            block: Block::new(&s.child("block"), d, heads, ffn, dropout, true)?,
            offset: Mlp::zero_output(&s.child("offset"), d, 2 * d, 2 * horizon, Act::Relu)?,
            t_f,
        })
    }

    /// `traj: [B, K, H, 2]`, `q_dec: [B, K, D]`, `f_prev: [B, K', T_f, 2]`.
    pub fn forward(&self, traj: &Tensor, q_dec: &Tensor, f_prev: &Tensor, ctx: &Ctx) -> candle_core::Result<Tensor> {
        let (b, kp, _, _) = f_prev.dims4()?;
        let e = self.embed.forward(&f_prev.reshape((b, kp, 2 * self.t_f))?)?;
        let mask = KeyMask::PerKey(Arc::new(vec![true; b * kp]));
        let q = self.block.forward_cross(q_dec, &e, mask, None, ctx)?;
        let delta = self.offset.forward(&q)?.reshape(traj.shape())?;
        traj + delta
    }
}

/// Everything carried from one prediction frame to the next.
#[derive(Clone)]
pub struct StreamState {
    /// `t_now` of the frame that produced this state, per sample.
    pub frame: Vec<u32>,
    pub scenario_ids: Vec<String>,
    /// `[B, N_prev, D]`.
    pub scene: Tensor,
    pub n_tok: usize,
    pub token_mask: Arc<Vec<bool>>,
    pub token_is_agent: Vec<bool>,
    /// Real-token poses in the previous focal frame.
    pub token_poses: Vec<Vec<Pose2D>>,
    /// `[B, K, H, 2]` in the previous focal frame.
    pub traj: Tensor,
    pub focal_poses: Vec<Pose2D>,
}

impl StreamState {
    pub fn capture(batch: &Batch, out: &ForwardOutput, detach: bool) -> Self {
        let keep = |t: &Tensor| if detach { t.detach() } else { t.clone() };
        Self {
            frame: batch.t_now.clone(),
            scenario_ids: batch.scenario_ids.clone(),
            scene: keep(&out.scene),
            n_tok: batch.n_tok,
            token_mask: batch.token_mask.clone(),
            token_is_agent: batch.token_is_agent.clone(),
            token_poses: batch.token_poses.clone(),
            traj: keep(&out.traj),
            focal_poses: batch.focal_poses.clone(),
        }
    }

    /// Re-expresses the state in the focal frames of `batch`.
    pub fn align(&self, batch: &Batch, t_f: usize) -> Result<AlignedState> {
        if batch.size != self.focal_poses.len() {
            return Err(ModelError::Stream(format!("state holds {} samples, batch has {}", self.focal_poses.len(), batch.size)));
        }
        for (b, id) in batch.scenario_ids.iter().enumerate() {
            if *id != self.scenario_ids[b] || self.frame[b] >= batch.t_now[b] {
                return Err(ModelError::Stream(format!(
                    "sample {b}: state from {} at step {} cannot feed {} at step {}",
                    self.scenario_ids[b], self.frame[b], id, batch.t_now[b]
                )));
            }
        }
        let motions: Vec<Pose2D> = self.focal_poses.iter().zip(&batch.focal_poses).map(|(p, c)| relative_motion(p, c)).collect();
        let np = self.n_tok;
        let mut feats = vec![[0.0, 0.0, 0.0, 1.0]; batch.size * np];
        let mut token_poses = Vec::with_capacity(batch.size);
        for (b, poses) in self.token_poses.iter().enumerate() {
            let aligned: Vec<Pose2D> = poses.iter().map(|p| motions[b].compose(p)).collect();
            for (j, p) in aligned.iter().enumerate() {
                feats[b * np + j] = p.to_features();
            }
            token_poses.push(aligned);
        }
        let dtype = self.scene.dtype();
        let pose_feats = pose_features(&feats, dtype)?.reshape((batch.size, np, 4))?;
        let motion_feats = pose_features(&motions.iter().map(|m| m.to_features()).collect::<Vec<_>>(), dtype)?;
        let f_prev = align_points(&self.traj.narrow(2, 0, t_f)?, &motions)?;
        let lane_mask: Vec<bool> = self.token_mask.iter().zip(&self.token_is_agent).map(|(&m, &a)| m && !a).collect();
        Ok(AlignedState {
            scene: self.scene.clone(),
            n_tok: np,
            mask: self.token_mask.clone(),
            lane_mask: Arc::new(lane_mask),
            token_poses,
            pose_feats,
            motions,
            motion_feats,
            f_prev,
        })
    }
}

/// A [`StreamState`] mapped into the current focal frames.
pub struct AlignedState {
    pub scene: Tensor,
    pub n_tok: usize,
    pub mask: Arc<Vec<bool>>,
    pub lane_mask: Arc<Vec<bool>>,
    pub token_poses: Vec<Vec<Pose2D>>,
    /// `[B, N_prev, 4]`.
    pub pose_feats: Tensor,
    pub motions: Vec<Pose2D>,
    /// `[B, 4]`.
    pub motion_feats: Tensor,
    /// `[B, K, T_f, 2]` previous trajectories in the current frame.
    pub f_prev: Tensor,
}

/// Applies one rigid motion per sample to points `[B, K, T, 2]`, keeping
/// the graph so gradients can flow across frames.
pub fn align_points(points: &Tensor, motions: &[Pose2D]) -> candle_core::Result<Tensor> {
    let (b, k, t, _) = points.dims4()?;
    let mut rot = Vec::with_capacity(b * 4);
    let mut shift = Vec::with_capacity(b * 2);
    for m in motions {
        let (s, c) = m.yaw.sin_cos();
        // row-vector convention: p' = p · Rᵀ + t
        rot.extend_from_slice(&[c, s, -s, c]);
        shift.extend_from_slice(&[m.x, m.y]);
    }
    let dtype = points.dtype();
    let rot = Tensor::from_vec(rot, (b, 2, 2), &Device::Cpu)?.to_dtype(dtype)?;
    let shift = Tensor::from_vec(shift, (b, 1, 2), &Device::Cpu)?.to_dtype(dtype)?;
    points.reshape((b, k * t, 2))?.matmul(&rot)?.broadcast_add(&shift)?.reshape((b, k, t, 2))
}

/// One scheduled frame of a stream.
#[derive(Debug, Clone)]
pub struct StreamFrame {
    pub t_now: u32,
    pub bundle: TensorBundle,
    pub targets: FutureTargets,
}

/// Tensorizes every scheduled window of a scenario.
pub fn stream_frames(scenario: &Scenario, protocol: &Protocol, window: &WindowConfig, tcfg: &TensorizeConfig) -> Result<Vec<StreamFrame>> {
    let steps = streaming_schedule(scenario, protocol, window)?;
    steps
        .into_iter()
        .map(|t| {
            let w = extract_window(scenario, t, window)?;
            let (bundle, targets) =
                tensorize(&w, tcfg).map_err(|e| ModelError::Stream(format!("{} at step {t}: tensorization failed: {e}", scenario.id)))?;
            Ok(StreamFrame { t_now: t, bundle, targets })
        })
        .collect()
}

/// Runs the streams of several scenarios in lockstep; all must share the
/// same number of frames. Returns per-frame batched outputs and batches.
pub fn run_stream_batch(
    model: &SeamModel,
    streams: &[&[StreamFrame]],
    opts: &ForwardOptions,
    detach: bool,
    ctx: &Ctx,
) -> Result<Vec<(Batch, ForwardOutput)>> {
    let n_frames = streams.first().map_or(0, |s| s.len());
    if streams.iter().any(|s| s.len() != n_frames) {
        return Err(ModelError::Stream("streams in one batch need equal frame counts".into()));
    }
    let mut state: Option<StreamState> = None;
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let bundles: Vec<&TensorBundle> = streams.iter().map(|s| &s[f].bundle).collect();
        let batch = model.batch(&bundles)?;
        let o = model.forward(&batch, state.as_ref(), opts, ctx)?;
        state = Some(StreamState::capture(&batch, &o, detach));
        out.push((batch, o));
    }
    Ok(out)
}

/// Streams one scenario and returns global-frame predictions per step.
pub fn run_stream(model: &SeamModel, scenario: &Scenario, protocol: &Protocol, opts: &ForwardOptions) -> Result<Vec<(u32, Prediction)>> {
    let window = model.window_config();
    let frames = stream_frames(scenario, protocol, &window, &model.tensorize_config())?;
    let ctx = Ctx::eval();
    let outs = run_stream_batch(model, &[&frames], opts, true, &ctx)?;
    outs.iter()
        .map(|(batch, o)| {
            let p = o.prediction(0)?;
            Ok((batch.t_now[0], p.to_global(&batch.focal_poses[0])))
        })
        .collect()
}
