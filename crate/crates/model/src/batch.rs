//! Packing tensor bundles of different sizes into one padded batch.

use crate::nn::pose_features;
use candle_core::{DType, Device, Tensor};
use seam_core::{Pose2D, TensorBundle};
use std::sync::Arc;

type Result<T> = candle_core::Result<T>;

/// Padded model input for `size` samples.
///
/// Agents and lanes are encoded as packed rows without padding; the scene
/// token layout (agents first, then lanes, then padding) is produced by
/// gathering those rows through `token_source`.
#[derive(Clone)]
pub struct Batch {
    pub size: usize,
    pub dtype: DType,
    /// `[Σ N_a, T_h, 5]`.
    pub agents: Tensor,
    /// `[Σ N_a · T_h]` step validity.
    pub agent_steps: Arc<Vec<bool>>,
    /// Flat `row · T_h + step` index of each agent's last valid step.
    pub last_valid: Vec<u32>,
    /// `[Σ N_l, P_l, 3]`, absent when no sample has lanes.
    pub lanes: Option<Tensor>,
    pub lane_points: Arc<Vec<bool>>,
    pub n_agents: Vec<usize>,
    pub n_lanes: Vec<usize>,
    /// Token slots per sample (max over the batch).
    pub n_tok: usize,
    /// `[size · n_tok]` rows of `cat(agent rows, lane rows, zero row)`.
    pub token_source: Vec<u32>,
    pub token_mask: Arc<Vec<bool>>,
    pub token_is_agent: Vec<bool>,
    pub type_ids: Vec<u32>,
    /// Focal-frame poses of the real tokens of each sample.
    pub token_poses: Vec<Vec<Pose2D>>,
    /// `[size, n_tok, 4]`.
    pub pose_feats: Tensor,
    pub focal_index: Vec<usize>,
    pub focal_poses: Vec<Pose2D>,
    pub t_now: Vec<u32>,
    pub scenario_ids: Vec<String>,
}

impl Batch {
    pub fn new(bundles: &[&TensorBundle], n_agent_types: usize, dtype: DType) -> Result<Self> {
        if bundles.is_empty() {
            candle_core::bail!("empty batch");
        }
        let t_h = bundles[0].agents.shape()[1];
        let p_l = bundles[0].lanes.shape()[1];
        let total_a: usize = bundles.iter().map(|b| b.num_agents()).sum();
        let total_l: usize = bundles.iter().map(|b| b.num_lanes()).sum();
        let n_tok = bundles.iter().map(|b| b.num_tokens()).max().unwrap_or(0);

        let mut agents = Vec::with_capacity(total_a * t_h * 5);
        let mut agent_steps = Vec::with_capacity(total_a * t_h);
        let mut last_valid = Vec::with_capacity(total_a);
        let mut lanes = Vec::with_capacity(total_l * p_l * 3);
        let mut lane_points = Vec::with_capacity(total_l * p_l);
        let mut token_source = vec![(total_a + total_l) as u32; bundles.len() * n_tok];
        let mut token_mask = vec![false; bundles.len() * n_tok];
        let mut token_is_agent = vec![false; bundles.len() * n_tok];
        let mut type_ids = vec![0u32; bundles.len() * n_tok];
        let mut feats = vec![[0.0, 0.0, 0.0, 1.0]; bundles.len() * n_tok];
        let (mut a_off, mut l_off) = (0usize, 0usize);
        for (b, bundle) in bundles.iter().enumerate() {
            if bundle.agents.shape()[1] != t_h || bundle.lanes.shape()[1] != p_l {
                candle_core::bail!("bundles disagree on T_h or P_l");
            }
            let na = bundle.num_agents();
            for i in 0..na {
                let mut last = None;
                for t in 0..t_h {
                    let valid = bundle.agents[[i, t, 4]] != 0.0;
                    agent_steps.push(valid);
                    if valid {
                        last = Some(t);
                    }
                    for f in 0..5 {
                        agents.push(bundle.agents[[i, t, f]]);
                    }
                }
                let last =
                    last.ok_or_else(|| candle_core::Error::Msg(format!("{}: agent {i} has no valid history step", bundle.scenario_id)))?;
                last_valid.push(((a_off + i) * t_h + last) as u32);
            }
            for i in 0..bundle.num_lanes() {
                for p in 0..p_l {
                    lane_points.push(bundle.lanes[[i, p, 2]] != 0.0);
                    for f in 0..3 {
                        lanes.push(bundle.lanes[[i, p, f]]);
                    }
                }
            }
            let poses = bundle.token_poses();
            for (j, pose) in poses.iter().enumerate() {
                let slot = b * n_tok + j;
                if j < na {
                    token_source[slot] = (a_off + j) as u32;
                    token_mask[slot] = bundle.agent_mask[j];
                    token_is_agent[slot] = true;
                    type_ids[slot] = bundle.agent_types[j];
                } else {
                    let l = j - na;
                    token_source[slot] = (total_a + l_off + l) as u32;
                    token_mask[slot] = bundle.lane_mask[l];
                    type_ids[slot] = n_agent_types as u32 + bundle.lane_types[l];
                }
                feats[slot] = pose.to_features();
            }
            a_off += na;
            l_off += bundle.num_lanes();
        }
        let dev = Device::Cpu;
        let agents = Tensor::from_vec(agents, (total_a, t_h, 5), &dev)?.to_dtype(dtype)?;
        let lanes = if total_l > 0 { Some(Tensor::from_vec(lanes, (total_l, p_l, 3), &dev)?.to_dtype(dtype)?) } else { None };
        let pose_feats = pose_features(&feats, dtype)?.reshape((bundles.len(), n_tok, 4))?;
        Ok(Self {
            size: bundles.len(),
            dtype,
            agents,
            agent_steps: Arc::new(agent_steps),
            last_valid,
            lanes,
            lane_points: Arc::new(lane_points),
            n_agents: bundles.iter().map(|b| b.num_agents()).collect(),
            n_lanes: bundles.iter().map(|b| b.num_lanes()).collect(),
            n_tok,
            token_source,
            token_mask: Arc::new(token_mask),
            token_is_agent,
            type_ids,
            token_poses: bundles.iter().map(|b| b.token_poses()).collect(),
            pose_feats,
            focal_index: bundles.iter().map(|b| b.focal_index).collect(),
            focal_poses: bundles.iter().map(|b| b.focal_pose).collect(),
            t_now: bundles.iter().map(|b| b.t_now).collect(),
            scenario_ids: bundles.iter().map(|b| b.scenario_id.clone()).collect(),
        })
    }

    pub fn total_agents(&self) -> usize {
        self.n_agents.iter().sum()
    }

    pub fn total_lanes(&self) -> usize {
        self.n_lanes.iter().sum()
    }
}
