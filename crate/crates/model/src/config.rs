use serde::{Deserialize, Serialize};

/// Temporal pooling used by the agent encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPooling {
    Max,
    LastValid,
}

/// Which tokens the target-centric context is gathered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Encoded agents and lanes plus type embedding, before the scene encoder.
    Context,
    /// Rows of the scene encoding.
    Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub blocks_fa: usize,
    pub blocks_fs: usize,
    pub blocks_ft: usize,
    pub decoder_stages: usize,
    pub k_modes: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub t_a: usize,
    pub p_l: usize,
    pub r_target_m: f64,
    pub max_target_tokens: usize,
    pub n_agent_types: usize,
    pub n_lane_types: usize,
    pub agent_pooling: AgentPooling,
    pub target_source: TargetSource,
    /// Streaming mechanisms; all parameters exist regardless so one
    /// checkpoint serves every combination.
    pub context_referencing: bool,
    pub trajectory_relay: bool,
    pub endpoint_aware: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 8,
            dropout: 0.2,
            ffn_mult: 4,
            blocks_fa: 4,
            blocks_fs: 4,
            blocks_ft: 2,
            decoder_stages: 3,
            k_modes: 6,
            t_h: 30,
            t_f: 60,
            t_a: 20,
            p_l: 20,
            r_target_m: 30.0,
            max_target_tokens: 64,
            n_agent_types: 4,
            n_lane_types: 3,
            agent_pooling: AgentPooling::Max,
            target_source: TargetSource::Context,
            context_referencing: true,
            trajectory_relay: true,
            endpoint_aware: true,
        }
    }
}

impl ModelConfig {
    pub fn horizon(&self) -> usize {
        self.t_f + self.t_a
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.k_modes == 0 {
            return Err("k_modes must be at least 1".into());
        }
        if !(self.r_target_m > 0.0) {
            return Err("r_target_m must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        if self.t_h == 0 || self.t_f < 2 || self.p_l < 2 {
            return Err("t_h must be positive, t_f and p_l at least 2".into());
        }
        if self.decoder_stages == 0 || self.ffn_mult == 0 {
            return Err("decoder_stages and ffn_mult must be positive".into());
        }
        Ok(())
    }

    /// The three streaming switches, in the order context referencing,
    /// trajectory relay, endpoint-aware targets.
    pub fn with_streaming(mut self, cs: bool, tr: bool, eam: bool) -> Self {
        self.context_referencing = cs;
        self.trajectory_relay = tr;
        self.endpoint_aware = eam;
        self
    }
}
