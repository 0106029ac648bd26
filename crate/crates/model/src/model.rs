//! The predictor: encoders, endpoint-aware target path, dual-context decoder
//! and output heads.

use crate::batch::Batch;
use crate::config::{AgentPooling, ModelConfig, TargetSource};
use crate::nn::{pose_features, softmax_last, Act, Block, Ctx, Embedding, Init, LayerNorm, Linear, Mlp, ParamBuilder, Params, Scope};
use crate::ops::{self, KeyMask};
use crate::stream::{AlignedState, ContextReferencing, StreamState, TrajectoryRelay};
use crate::target::{EndpointNoise, TargetContext};
use crate::{ModelError, Result};
use candle_core::{DType, Device, Tensor};
use seam_core::tensorize::TensorizeConfig;
use seam_core::window::WindowConfig;
use seam_core::{Pose2D, RigidTransform, TensorBundle};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

type CResult<T> = candle_core::Result<T>;

/// Per-call switches that are not part of the architecture.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub endpoint_noise: EndpointNoise,
    pub noise_seed: u64,
}

/// Batched forward results; all trajectories in each sample's focal frame.
pub struct ForwardOutput {
    /// `[B, K, T_f + T_a, 2]`.
    pub traj: Tensor,
    /// `[B, K]`.
    pub logits: Tensor,
    pub probs: Tensor,
    /// `[B, K, D]`.
    pub q_dec: Tensor,
    /// `[R, T_f, 2]` for every non-focal agent, absent when there are none.
    pub aux: Option<Tensor>,
    /// `(sample, agent index)` of each aux row.
    pub aux_rows: Vec<(usize, usize)>,
    /// `[B, N, D]` scene encoding.
    pub scene: Tensor,
    pub target: Option<TargetContext>,
    pub decoder_cross_calls: usize,
}

impl ForwardOutput {
    pub fn prediction(&self, b: usize) -> CResult<Prediction> {
        let traj = self.traj.get(b)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let probs = self.probs.get(b)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let q_decoded = self.q_dec.get(b)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut aux = Vec::new();
        if let Some(a) = &self.aux {
            for (r, &(s, _)) in self.aux_rows.iter().enumerate() {
                if s == b {
                    aux.push(a.get(r)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
                }
            }
        }
        Ok(Prediction {
            trajectories: traj.into_iter().map(|m| m.into_iter().map(|p| [p[0], p[1]]).collect()).collect(),
            probabilities: probs,
            q_decoded,
            aux: aux.into_iter().map(|m| m.into_iter().map(|p| [p[0], p[1]]).collect()).collect(),
        })
    }
}

/// Multimodal output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `[K][T_f + T_a]` points.
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub probabilities: Vec<f64>,
    /// `[K][D]`.
    pub q_decoded: Vec<Vec<f64>>,
    /// `[N_a − 1][T_f]` single-mode trajectories of the other agents.
    pub aux: Vec<Vec<[f64; 2]>>,
}

impl Prediction {
    /// Maps focal-frame coordinates to the global frame.
    pub fn to_global(&self, focal_pose: &Pose2D) -> Prediction {
        self.apply_se2(focal_pose)
    }

    pub fn most_probable(&self) -> usize {
        seam_core::metrics::top_k(&self.probabilities, 1)[0]
    }
}

impl RigidTransform for Prediction {
    fn apply_se2(&self, t: &Pose2D) -> Self {
        let map = |v: &Vec<Vec<[f64; 2]>>| -> Vec<Vec<[f64; 2]>> {
            v.iter().map(|m| m.iter().map(|p| t.transform_point(*p)).collect()).collect()
        };
        Prediction {
            trajectories: map(&self.trajectories),
            probabilities: self.probabilities.clone(),
            q_decoded: self.q_decoded.clone(),
            aux: map(&self.aux),
        }
    }
}

pub struct SeamModel {
    pub cfg: ModelConfig,
    pub params: Params,
    pub dtype: DType,
    agent_in: Linear,
    agent_blocks: Vec<Block>,
    lane_point: Mlp,
    lane_global: Mlp,
    type_embed: Embedding,
    pos_embed: Mlp,
    scene_blocks: Vec<Block>,
    target_rel_pose: Mlp,
    target_focal_pose: Mlp,
    target_blocks: Vec<Block>,
    queries: Tensor,
    dec_scene: Vec<Block>,
    dec_target: Vec<Block>,
    dec_norm: LayerNorm,
    traj_head: Mlp,
    score_head: Mlp,
    aux_head: Linear,
    pub context_ref: ContextReferencing,
    pub relay: TrajectoryRelay,
}

/// Parameter-name prefixes of the agent and lane encoders.
pub const ENCODER_PREFIXES: [&str; 3] = ["agent_in.", "agent_blocks.", "lane_"];

impl SeamModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate().map_err(ModelError::Config)?;
        let pb = ParamBuilder::new(seed, dtype);
        let model = Self::build(cfg, &pb.root(), dtype)?;
        Ok(Self { params: pb.finish(), ..model })
    }

    fn build(cfg: ModelConfig, s: &Scope, dtype: DType) -> Result<Self> {
        let d = cfg.d_model;
        let (h, ff, p) = (cfg.n_heads, cfg.ffn_mult, cfg.dropout);
        let blocks = |name: &str, n: usize, cross: bool| -> CResult<Vec<Block>> {
            (0..n).map(|i| Block::new(&s.child(name).child(&i.to_string()), d, h, ff, p, cross)).collect()
        };
        let horizon = cfg.horizon();
        Ok(Self {
            agent_in: Linear::new(&s.child("agent_in"), 5, d)?,
            agent_blocks: blocks("agent_blocks", cfg.blocks_fa, false)?,
            lane_point: Mlp::new(&s.child("lane_point"), 3, d, d, Act::Gelu)?,
            lane_global: Mlp::new(&s.child("lane_global"), 2 * d, d, d, Act::Gelu)?,
            type_embed: Embedding::new(&s.child("type_embed"), cfg.n_agent_types + cfg.n_lane_types, d)?,
            pos_embed: Mlp::new(&s.child("pos_embed"), 4, d, d, Act::Gelu)?,
            scene_blocks: blocks("scene_blocks", cfg.blocks_fs, false)?,
            target_rel_pose: Mlp::new(&s.child("target_rel_pose"), 4, d, d, Act::Gelu)?,
            target_focal_pose: Mlp::new(&s.child("target_focal_pose"), 4, d, d, Act::Gelu)?,
            target_blocks: blocks("target_blocks", cfg.blocks_ft, false)?,
            queries: s.param("queries", &[cfg.k_modes, d], Init::Normal(1.0))?,
            dec_scene: blocks("dec_scene", cfg.decoder_stages, true)?,
            dec_target: blocks("dec_target", cfg.decoder_stages, true)?,
            dec_norm: LayerNorm::new(&s.child("dec_norm"), d)?,
            traj_head: Mlp::new(&s.child("traj_head"), d, 2 * d, 2 * horizon, Act::Relu)?,
            score_head: Mlp::new(&s.child("score_head"), d, 2 * d, 1, Act::Relu)?,
            aux_head: Linear::new(&s.child("aux_head"), d, 2 * cfg.t_f)?,
            context_ref: ContextReferencing::new(&s.child("context_ref"), d, h, ff, p)?,
            relay: TrajectoryRelay::new(&s.child("relay"), d, h, ff, p, cfg.t_f, horizon)?,
            params: Params::default(),
            dtype,
            cfg,
        })
    }

    /// Same architecture with a different number of target-encoder blocks,
    /// sharing every other parameter. Missing blocks are identity blocks.
    pub fn with_target_depth(&self, depth: usize) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.blocks_ft = depth;
        let pb = ParamBuilder::new(0, self.dtype);
        let fresh = Self::build(cfg.clone(), &pb.root(), self.dtype)?;
        let fresh_params = pb.finish();
        let mut model = Self { params: fresh_params, ..fresh };
        for (name, var) in model.params.iter() {
            if let Some(src) = self.params.get(name) {
                var.set(src.as_tensor())?;
            } else if name.starts_with("target_blocks.") {
                // set below through make_identity
            } else {
                return Err(ModelError::Config(format!("parameter {name} missing from source model")));
            }
        }
        for b in model.target_blocks.iter().skip(self.cfg.blocks_ft) {
            b.make_identity()?;
        }
        model.cfg = cfg;
        Ok(model)
    }

    /// A copy with different streaming switches, pooling or radius; weights shared.
    pub fn with_config(&self, cfg: ModelConfig) -> Result<Self> {
        let shape_keys =
            |c: &ModelConfig| (c.d_model, c.n_heads, c.ffn_mult, c.blocks_fa, c.blocks_fs, c.blocks_ft, c.decoder_stages, c.k_modes);
        let io_keys = |c: &ModelConfig| (c.t_h, c.t_f, c.t_a, c.p_l, c.n_agent_types, c.n_lane_types);
        if shape_keys(&cfg) != shape_keys(&self.cfg) || io_keys(&cfg) != io_keys(&self.cfg) {
            return Err(ModelError::Config("config changes parameter shapes".into()));
        }
        cfg.validate().map_err(ModelError::Config)?;
        let mut m = self.shallow_clone();
        m.cfg = cfg;
        Ok(m)
    }

    fn shallow_clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            dtype: self.dtype,
            agent_in: self.agent_in.clone(),
            agent_blocks: self.agent_blocks.clone(),
            lane_point: self.lane_point.clone(),
            lane_global: self.lane_global.clone(),
            type_embed: self.type_embed.clone(),
            pos_embed: self.pos_embed.clone(),
            scene_blocks: self.scene_blocks.clone(),
            target_rel_pose: self.target_rel_pose.clone(),
            target_focal_pose: self.target_focal_pose.clone(),
            target_blocks: self.target_blocks.clone(),
            queries: self.queries.clone(),
            dec_scene: self.dec_scene.clone(),
            dec_target: self.dec_target.clone(),
            dec_norm: self.dec_norm.clone(),
            traj_head: self.traj_head.clone(),
            score_head: self.score_head.clone(),
            aux_head: self.aux_head.clone(),
            context_ref: self.context_ref.clone(),
            relay: self.relay.clone(),
        }
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig { t_h: self.cfg.t_h as u32, t_f: self.cfg.t_f as u32, t_a: self.cfg.t_a as u32 }
    }

    pub fn tensorize_config(&self) -> TensorizeConfig {
        TensorizeConfig { lane_points: self.cfg.p_l, ..TensorizeConfig::default() }
    }

    pub fn batch(&self, bundles: &[&TensorBundle]) -> Result<Batch> {
        for b in bundles {
            if b.agents.shape()[1] != self.cfg.t_h || b.lanes.shape()[1] != self.cfg.p_l {
                return Err(ModelError::Config(format!(
                    "bundle {} has T_h {} and P_l {}, model expects {} and {}",
                    b.scenario_id,
                    b.agents.shape()[1],
                    b.lanes.shape()[1],
                    self.cfg.t_h,
                    self.cfg.p_l
                )));
            }
        }
        Ok(Batch::new(bundles, self.cfg.n_agent_types, self.dtype)?)
    }

    /// `[x, y, sin yaw, cos yaw]` rows through the scene pose MLP.
    pub fn embed_pose(&self, poses: &[Pose2D]) -> CResult<Tensor> {
        let f: Vec<[f64; 4]> = poses.iter().map(|p| p.to_features()).collect();
        self.pos_embed.forward(&pose_features(&f, self.dtype)?)
    }

    /// `[Σ N_a, D]` agent embeddings.
    pub fn encode_agents(&self, batch: &Batch, ctx: &Ctx) -> CResult<Tensor> {
        let mut x = self.agent_in.forward(&batch.agents)?;
        for b in &self.agent_blocks {
            x = b.forward_self(&x, &batch.agent_steps, ctx)?;
        }
        match self.cfg.agent_pooling {
            AgentPooling::Max => ops::masked_max(&x, batch.agent_steps.clone()),
            AgentPooling::LastValid => {
                let (n, t, d) = x.dims3()?;
                let idx = Tensor::from_slice(&batch.last_valid, batch.last_valid.len(), &Device::Cpu)?;
                x.reshape((n * t, d))?.index_select(&idx, 0)
            }
        }
    }

    /// `[Σ N_l, D]` lane embeddings, absent without lanes.
    pub fn encode_lanes(&self, batch: &Batch) -> CResult<Option<Tensor>> {
        let Some(lanes) = &batch.lanes else { return Ok(None) };
        let (n, p, _) = lanes.dims3()?;
        let d = self.cfg.d_model;
        let h = self.lane_point.forward(lanes)?;
        let g = ops::masked_max(&h, batch.lane_points.clone())?;
        let g = g.unsqueeze(1)?.broadcast_as((n, p, d))?;
        let h2 = self.lane_global.forward(&Tensor::cat(&[&h, &g], 2)?)?;
        Ok(Some(ops::masked_max(&h2, batch.lane_points.clone())?))
    }

    /// Scene-token layout `[B, N, D]` of agent and lane embeddings plus the
    /// type embedding, before any positional information.
    pub fn context_tokens(&self, batch: &Batch, ctx: &Ctx) -> CResult<Tensor> {
        let d = self.cfg.d_model;
        let a = self.encode_agents(batch, ctx)?;
        let mut parts = vec![a];
        if let Some(l) = self.encode_lanes(batch)? {
            parts.push(l);
        }
        parts.push(Tensor::zeros((1, d), self.dtype, &Device::Cpu)?);
        let src = Tensor::cat(&parts, 0)?;
        let idx = Tensor::from_slice(&batch.token_source, batch.token_source.len(), &Device::Cpu)?;
        let c = (src.index_select(&idx, 0)? + self.type_embed.forward(&batch.type_ids)?)?;
        c.reshape((batch.size, batch.n_tok, d))
    }

    pub fn encode_scene(&self, c: &Tensor, batch: &Batch, ctx: &Ctx) -> CResult<Tensor> {
        let mut s = c.clone();
        for b in &self.scene_blocks {
            s = b.forward_self(&s, &batch.token_mask, ctx)?;
        }
        Ok(s)
    }

    /// Anchors from the aligned previous predictions, perturbed as configured.
    pub fn target_frames(&self, batch: &Batch, prev: &AlignedState, opts: &ForwardOptions) -> CResult<Vec<Vec<Pose2D>>> {
        let vals = prev.f_prev.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (b_n, k, t, _) = prev.f_prev.dims4()?;
        let mut frames = Vec::with_capacity(b_n);
        for b in 0..b_n {
            let mut modes: Vec<Vec<[f64; 2]>> = (0..k)
                .map(|m| {
                    (0..t)
                        .map(|s| {
                            let o = ((b * k + m) * t + s) * 2;
                            [vals[o], vals[o + 1]]
                        })
                        .collect()
                })
                .collect();
            opts.endpoint_noise.perturb(&mut modes, opts.noise_seed, noise_stream(batch, b));
            frames.push(crate::target::build_target_frames(&modes));
        }
        Ok(frames)
    }

    /// `[B·K, N', D]` encoded regions with their masks; `None` when every
    /// region is empty.
    pub fn encode_targets(&self, target: &TargetContext, source: &Tensor, ctx: &Ctx) -> CResult<Option<(Tensor, Arc<Vec<bool>>)>> {
        let nt = target.max_members();
        if nt == 0 {
            return Ok(None);
        }
        let (bn, n, d) = source.dims3()?;
        let k = self.cfg.k_modes;
        let zero_row = (bn * n) as u32;
        let mut idx = vec![zero_row; bn * k * nt];
        let mut mask = vec![false; bn * k * nt];
        let mut rel = vec![[0.0, 0.0, 0.0, 1.0]; bn * k * nt];
        let mut focal = Vec::with_capacity(bn * k);
        for b in 0..bn {
            for m in 0..k {
                let region = (b * k + m) * nt;
                for (j, (&tok, pose)) in target.members[b][m].iter().zip(&target.relative_poses[b][m]).enumerate() {
                    idx[region + j] = (b * n + tok) as u32;
                    mask[region + j] = true;
                    rel[region + j] = pose.to_features();
                }
                focal.push(target.frames[b][m].to_features());
            }
        }
        let flat = Tensor::cat(&[source.reshape((bn * n, d))?, Tensor::zeros((1, d), self.dtype, &Device::Cpu)?], 0)?;
        let idx_t = Tensor::from_vec(idx, bn * k * nt, &Device::Cpu)?;
        let x = flat.index_select(&idx_t, 0)?.reshape((bn * k, nt, d))?;
        let rel = self.target_rel_pose.forward(&pose_features(&rel, self.dtype)?)?.reshape((bn * k, nt, d))?;
        let foc = self.target_focal_pose.forward(&pose_features(&focal, self.dtype)?)?.unsqueeze(1)?;
        let mut t = (x + rel)?.broadcast_add(&foc)?;
        let mask = Arc::new(mask);
        for blk in &self.target_blocks {
            t = blk.forward_self(&t, &mask, ctx)?;
        }
        Ok(Some((t, mask)))
    }

    /// Dual-context decoding; returns `(traj, logits, q_dec)`.
    pub fn decode(
        &self,
        scene: &Tensor,
        batch: &Batch,
        target: Option<(&Tensor, &Arc<Vec<bool>>)>,
        ctx: &Ctx,
    ) -> CResult<(Tensor, Tensor, Tensor)> {
        let (bn, _, d) = scene.dims3()?;
        let k = self.cfg.k_modes;
        let mut q = self.queries.unsqueeze(0)?.broadcast_as((bn, k, d))?.contiguous()?;
        let gate: Option<Vec<bool>> = target.map(|(t, mask)| {
            let nt = t.dim(1).unwrap_or(0);
            (0..bn * k).map(|r| mask[r * nt..(r + 1) * nt].iter().any(|&m| m)).collect()
        });
        for stage in 0..self.cfg.decoder_stages {
            q = self.dec_scene[stage].forward_cross(&q, scene, KeyMask::PerKey(batch.token_mask.clone()), None, ctx)?;
            ctx.count_decoder_cross();
            if let (Some((t, mask)), Some(g)) = (target, &gate) {
                let qk = q.reshape((bn * k, 1, d))?;
                let qk = self.dec_target[stage].forward_cross(&qk, t, KeyMask::PerKey((*mask).clone()), Some(g), ctx)?;
                q = qk.reshape((bn, k, d))?;
                ctx.count_decoder_cross();
            }
        }
        let q_dec = self.dec_norm.forward(&q)?;
        let h = self.cfg.horizon();
        let traj = self.traj_head.forward(&q_dec)?.reshape((bn, k, h, 2))?;
        let logits = self.score_head.forward(&q_dec)?.reshape((bn, k))?;
        Ok((traj, logits, q_dec))
    }

    /// Single-mode futures of every non-focal agent from its scene row.
    pub fn aux_head(&self, scene: &Tensor, batch: &Batch) -> CResult<(Option<Tensor>, Vec<(usize, usize)>)> {
        let (bn, n, d) = scene.dims3()?;
        let mut rows = Vec::new();
        let mut idx = Vec::new();
        for b in 0..bn {
            for i in (0..batch.n_agents[b]).filter(|&i| i != batch.focal_index[b]) {
                rows.push((b, i));
                idx.push((b * n + i) as u32);
            }
        }
        if idx.is_empty() {
            return Ok((None, rows));
        }
        let idx = Tensor::from_vec(idx, rows.len(), &Device::Cpu)?;
        let sel = scene.reshape((bn * n, d))?.index_select(&idx, 0)?;
        let out = self.aux_head.forward(&sel)?.reshape((rows.len(), self.cfg.t_f, 2))?;
        Ok((Some(out), rows))
    }

    pub fn forward(&self, batch: &Batch, state: Option<&StreamState>, opts: &ForwardOptions, ctx: &Ctx) -> Result<ForwardOutput> {
        ctx.take_decoder_cross_calls();
        let prev = match state {
            Some(s) => Some(s.align(batch, self.cfg.t_f)?),
            None => None,
        };
        let c_raw = self.context_tokens(batch, ctx)?;
        let mut c = c_raw.broadcast_add(&self.pos_embed.forward(&batch.pose_feats)?)?;
        if let (true, Some(p)) = (self.cfg.context_referencing, &prev) {
            c = self.context_ref.forward(&c, batch, p, &self.pos_embed, ctx)?;
        }
        let scene = self.encode_scene(&c, batch, ctx)?;

        let mut target_ctx = None;
        let mut encoded = None;
        if let (true, Some(p)) = (self.cfg.endpoint_aware, &prev) {
            let frames = self.target_frames(batch, p, opts)?;
            let valid: Vec<Vec<bool>> =
                (0..batch.size).map(|b| batch.token_mask[b * batch.n_tok..b * batch.n_tok + batch.token_poses[b].len()].to_vec()).collect();
            let tc = TargetContext::build(frames, &batch.token_poses, &valid, self.cfg.r_target_m, self.cfg.max_target_tokens);
            let source = match self.cfg.target_source {
                TargetSource::Context => &c_raw,
                TargetSource::Scene => &scene,
            };
            encoded = self.encode_targets(&tc, source, ctx)?;
            target_ctx = Some(tc);
        }
        let (mut traj, logits, q_dec) = self.decode(&scene, batch, encoded.as_ref().map(|(t, m)| (t, m)), ctx)?;
        if let (true, Some(p)) = (self.cfg.trajectory_relay, &prev) {
            traj = self.relay.forward(&traj, &q_dec, &p.f_prev, ctx)?;
        }
        let (aux, aux_rows) = self.aux_head(&scene, batch)?;
        let probs = softmax_last(&logits)?;
        let out = ForwardOutput {
            traj,
            logits,
            probs,
            q_dec,
            aux,
            aux_rows,
            scene,
            target: target_ctx,
            decoder_cross_calls: ctx.take_decoder_cross_calls(),
        };
        Ok(out)
    }

    /// Snapshot prediction for one bundle, in the focal frame.
    pub fn predict(&self, bundle: &TensorBundle) -> Result<Prediction> {
        let batch = self.batch(&[bundle])?;
        let out = self.forward(&batch, None, &ForwardOptions::default(), &Ctx::eval())?;
        Ok(out.prediction(0)?)
    }
}

fn noise_stream(batch: &Batch, b: usize) -> u64 {
    // distinct per scenario and frame, independent of batch composition
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in batch.scenario_ids[b].bytes() {
        h = (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h ^ ((batch.t_now[b] as u64) << 40)
}
