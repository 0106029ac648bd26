//! Run configuration file (TOML). Every section is optional and unknown keys
//! are rejected.

use anyhow::{bail, Context, Result};
use seam_core::generator::{AgentCount, Template};
use seam_core::Protocol;
use seam_model::evaluate::{Harness, SweepGrid};
use seam_model::multiagent::MultiAgentConfig;
use seam_model::optim::TrainConfig;
use seam_model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_scenarios: usize,
    /// Cycled in order over the scenarios.
    pub templates: Vec<Template>,
    pub n_agents: AgentCount,
    pub duration_steps: Option<u32>,
    pub noise_std_m: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 100,
            templates: vec![
                Template::Straight,
                Template::Curve,
                Template::Intersection,
                Template::CarFollowing,
                Template::UnprotectedTurn,
                Template::PedestrianCrossing,
            ],
            n_agents: AgentCount::Range([4, 12]),
            duration_steps: None,
            noise_std_m: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub protocol: Protocol,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 32, protocol: Protocol::Av2Like, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch_sizes: vec![1, 32, 64], repetitions: 10, warmup: 2 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Checkpoint interval in optimizer steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub multi_agent: MultiAgentConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    /// Grids per harness; missing harnesses use the default grid.
    pub sweep: Vec<SweepGrid>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            multi_agent: MultiAgentConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            sweep: Vec::new(),
        }
    }
}

pub const SEED_ENV: &str = "SEAM_SEED";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise the defaults; then applies the seed
    /// override (`--seed`, else `SEAM_SEED`).
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.parse::<u64>().with_context(|| format!("{SEED_ENV}={v:?} is not an integer"))?),
            Err(_) => None,
        };
        if let Some(s) = seed.or(env_seed) {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(anyhow::Error::msg).context("[model]")?;
        self.train.validate().map_err(anyhow::Error::msg).context("[train]")?;
        if self.generate.templates.is_empty() {
            bail!("[generate] templates must not be empty");
        }
        if self.eval.batch_size == 0 || self.eval.workers == 0 {
            bail!("[eval] batch_size and workers must be positive");
        }
        if self.bench.batch_sizes.is_empty() || self.bench.batch_sizes.contains(&0) || self.bench.repetitions == 0 {
            bail!("[bench] needs positive batch sizes and repetitions");
        }
        if self.bench.warmup == 0 {
            bail!("[bench] warmup must be at least 1");
        }
        Ok(())
    }

    pub fn grid(&self, harness: Harness) -> SweepGrid {
        self.sweep.iter().find(|g| g.harness() == harness).cloned().unwrap_or_else(|| SweepGrid::default_for(harness))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the effective configuration into an output directory.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml()?).with_context(|| format!("writing {}", p.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nd_modle = 3").is_err());
        let cfg = RunConfig::from_toml("[model]\nd_model = 32\nn_heads = 4").unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.epochs, 80);
    }

    #[test]
    fn sweep_grid_override() {
        let cfg = RunConfig::from_toml("[[sweep]]\nharness = \"target_radius\"\nradii = [5.0]").unwrap();
        assert_eq!(cfg.grid(Harness::TargetRadius), SweepGrid::TargetRadius { radii: vec![5.0] });
        assert_eq!(cfg.grid(Harness::EncoderDepth), SweepGrid::default_for(Harness::EncoderDepth));
    }
}
