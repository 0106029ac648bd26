//! Streaming schedule and sliding observation windows.

use crate::error::{Error, Result};
use crate::scenario::{AgentState, AgentType, LaneSegment, Scenario};
use serde::{Deserialize, Serialize};

/// Window lengths in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub t_h: u32,
    pub t_f: u32,
    pub t_a: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { t_h: 30, t_f: 60, t_a: 20 }
    }
}

/// Gap between consecutive predictions of the AV2-like protocol (1 s).
pub const AV2_GAP_STEPS: u32 = 10;
pub const AV2_NUM_WINDOWS: u32 = 3;

impl WindowConfig {
    pub fn horizon(&self) -> u32 {
        self.t_f + self.t_a
    }

    /// Scenario length needed by the AV2-like protocol: the final window's
    /// evaluated future must fit.
    pub fn streaming_horizon(&self) -> u32 {
        self.t_h + (AV2_NUM_WINDOWS - 1) * AV2_GAP_STEPS + self.t_f
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Three predictions 1 s apart; the first sees exactly `t_h` steps.
    Av2Like,
    Custom(Vec<u32>),
}

pub fn streaming_schedule(scenario: &Scenario, protocol: &Protocol, cfg: &WindowConfig) -> Result<Vec<u32>> {
    let steps: Vec<u32> = match protocol {
        Protocol::Av2Like => (0..AV2_NUM_WINDOWS).map(|i| cfg.t_h + i * AV2_GAP_STEPS).collect(),
        Protocol::Custom(v) => v.clone(),
    };
    if steps.is_empty() {
        return Err(Error::Validation("schedule: no prediction steps".into()));
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("schedule: steps must be strictly increasing".into()));
    }
    let focal = scenario.focal_track();
    for &t in &steps {
        if t < cfg.t_h {
            return Err(Error::Validation(format!("schedule: step {t} precedes the first full history window (t_h = {})", cfg.t_h)));
        }
        if t + cfg.t_f > scenario.num_steps {
            return Err(Error::Validation(format!("schedule: step {t} + t_f {} exceeds num_steps {}", cfg.t_f, scenario.num_steps)));
        }
        if focal.valid_at(t).is_none() {
            return Err(Error::Validation(format!("schedule: focal track {:?} invalid at step {t}", focal.id)));
        }
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowTrack {
    pub id: String,
    pub agent_type: AgentType,
    /// Exactly `t_h` states for steps `t_now - t_h + 1 ..= t_now`.
    pub history: Vec<AgentState>,
    /// `t_f + t_a` states for steps after `t_now`; invalid past the scenario end.
    pub future: Vec<AgentState>,
}

impl WindowTrack {
    pub fn current(&self) -> &AgentState {
        self.history.last().expect("history is never empty")
    }

    pub fn num_valid_history(&self) -> usize {
        self.history.iter().filter(|s| s.valid).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub scenario_id: String,
    pub t_now: u32,
    pub config: WindowConfig,
    pub tracks: Vec<WindowTrack>,
    pub lanes: Vec<LaneSegment>,
    pub focal_track_id: String,
    pub scored_track_ids: Vec<String>,
}

impl ObservationWindow {
    pub fn track(&self, id: &str) -> Option<&WindowTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn focal(&self) -> Option<&WindowTrack> {
        self.track(&self.focal_track_id)
    }

    /// The same window with another track acting as the focal agent.
    pub fn with_focal(&self, id: &str) -> Self {
        let mut w = self.clone();
        w.focal_track_id = id.to_string();
        w
    }
}

pub fn extract_window(scenario: &Scenario, t_now: u32, cfg: &WindowConfig) -> Result<ObservationWindow> {
    if cfg.t_h == 0 || t_now < cfg.t_h {
        return Err(Error::Range(format!("t_now {t_now} leaves fewer than t_h = {} history steps", cfg.t_h)));
    }
    if t_now > scenario.num_steps {
        return Err(Error::Range(format!("t_now {t_now} beyond num_steps {}", scenario.num_steps)));
    }
    let first = t_now + 1 - cfg.t_h;
    let sample = |track: &crate::scenario::AgentTrack, step: u32| track.valid_at(step).copied().unwrap_or(AgentState::invalid(step));
    let tracks = scenario
        .tracks
        .iter()
        .map(|t| WindowTrack {
            id: t.id.clone(),
            agent_type: t.agent_type,
            history: (first..=t_now).map(|s| sample(t, s)).collect(),
            future: (t_now + 1..=t_now + cfg.horizon()).map(|s| sample(t, s)).collect(),
        })
        .filter(|t| t.num_valid_history() > 0)
        .collect();
    Ok(ObservationWindow {
        scenario_id: scenario.id.clone(),
        t_now,
        config: *cfg,
        tracks,
        lanes: scenario.lanes.clone(),
        focal_track_id: scenario.focal_track_id.clone(),
        scored_track_ids: scenario.scored_track_ids.clone(),
    })
}
