//! Dataset directories: one JSON file per scenario plus `index.json`.

use crate::config::GenerateConfig;
use anyhow::{bail, Context, Result};
use seam_core::generator::{generate_with_windows, GeneratorSpec, Template};
use seam_core::{load_scenario, save_scenario, Protocol, Scenario, WindowConfig};
use seam_model::multiagent::AgentStreams;
use seam_model::stream::{stream_frames, StreamFrame};
use seam_model::SeamModel;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const INDEX: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub file: String,
    pub template: Template,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub scenarios: Vec<IndexEntry>,
}

/// Creates `dir`, refusing a non-empty directory unless `force` is set (in
/// which case the directory is emptied first).
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty {
            if !force {
                bail!("{} exists and is not empty; pass --force to overwrite", dir.display());
            }
            std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn scenario_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Writes the generated scenarios and the index; `dir` must be prepared.
pub fn generate(dir: &Path, cfg: &GenerateConfig, window: &WindowConfig, seed: u64) -> Result<DatasetIndex> {
    let mut entries = Vec::with_capacity(cfg.n_scenarios);
    for i in 0..cfg.n_scenarios {
        let template = cfg.templates[i % cfg.templates.len()];
        let mut spec = GeneratorSpec::new(template, 0);
        spec.n_agents = cfg.n_agents;
        spec.noise_std_m = cfg.noise_std_m;
        if let Some(d) = cfg.duration_steps {
            spec.duration_steps = d;
        }
        let s = scenario_seed(seed, i);
        let scenario = generate_with_windows(s, &spec, window).with_context(|| format!("scenario {i} (seed {s})"))?;
        let file = format!("{}.json", scenario.id);
        save_scenario(&scenario, dir.join(&file))?;
        entries.push(IndexEntry { id: scenario.id, file, template, seed: s });
    }
    let index = DatasetIndex { seed, scenarios: entries };
    std::fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join(INDEX);
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let index: DatasetIndex = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    Ok(index)
}

pub fn scenario_path(dir: &Path, e: &IndexEntry) -> PathBuf {
    dir.join(&e.file)
}

pub fn load_scenarios(dir: &Path) -> Result<Vec<Scenario>> {
    let index = load_index(dir)?;
    index.scenarios.iter().map(|e| load_scenario(scenario_path(dir, e)).with_context(|| format!("loading scenario {}", e.id))).collect()
}

/// Stream frames of every scenario in input order, tensorized by `workers`
/// threads.
pub fn streams(model: &SeamModel, scenarios: &[Scenario], protocol: &Protocol, workers: usize) -> Result<Vec<Vec<StreamFrame>>> {
    let window = model.window_config();
    let tcfg = model.tensorize_config();
    let one = |s: &Scenario| stream_frames(s, protocol, &window, &tcfg).with_context(|| format!("streaming {}", s.id));
    let chunk = scenarios.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<Vec<StreamFrame>>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = scenarios.chunks(chunk).map(|c| sc.spawn(move || c.iter().map(one).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("tensorization worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(scenarios.len());
    for p in parts {
        out.extend(p?);
    }
    check_equal_lengths(&out)?;
    Ok(out)
}

fn check_equal_lengths(streams: &[Vec<StreamFrame>]) -> Result<()> {
    if let Some(first) = streams.first() {
        if streams.iter().any(|s| s.len() != first.len()) {
            bail!("all scenarios must yield the same number of streaming windows");
        }
    }
    Ok(())
}

pub fn agent_streams(model: &SeamModel, scenarios: &[Scenario], protocol: &Protocol, all_agents: bool) -> Result<Vec<AgentStreams>> {
    scenarios
        .iter()
        .map(|s| AgentStreams::build(s, protocol, model, all_agents).with_context(|| format!("agent streams of {}", s.id)))
        .collect()
}
