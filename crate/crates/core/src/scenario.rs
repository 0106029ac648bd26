//! Global-frame scenario records and their on-disk schema.
//!
//! Steps are integer indices `1..=num_steps` at a fixed 10 Hz. A track lists
//! only the steps at which it was observed; missing steps count as invalid.

use crate::error::{Error, Result};
use crate::geometry::{Pose2D, RigidTransform};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const SAMPLE_RATE_HZ: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl AgentType {
    pub const COUNT: usize = 4;

    pub fn id(self) -> u32 {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
            AgentType::Other => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Standard,
    Bike,
    Bus,
}

impl LaneType {
    pub const COUNT: usize = 3;

    pub fn id(self) -> u32 {
        match self {
            LaneType::Standard => 0,
            LaneType::Bike => 1,
            LaneType::Bus => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid(step: u32) -> Self {
        Self { step, x: 0.0, y: 0.0, vx: 0.0, vy: 0.0, valid: false }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: String,
    pub agent_type: AgentType,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    /// State recorded at `step`, if any (valid or not).
    pub fn state_at(&self, step: u32) -> Option<&AgentState> {
        self.states.binary_search_by_key(&step, |s| s.step).ok().map(|i| &self.states[i])
    }

    pub fn valid_at(&self, step: u32) -> Option<&AgentState> {
        self.state_at(step).filter(|s| s.valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegment {
    pub id: String,
    pub lane_type: LaneType,
    pub centerline: Vec<[f64; 2]>,
}

impl LaneSegment {
    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub sample_rate_hz: u32,
    pub num_steps: u32,
    pub tracks: Vec<AgentTrack>,
    pub lanes: Vec<LaneSegment>,
    pub focal_track_id: String,
    pub scored_track_ids: Vec<String>,
}

impl Scenario {
    pub fn track(&self, id: &str) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn focal_track(&self) -> &AgentTrack {
        self.track(&self.focal_track_id).expect("validated scenario always contains its focal track")
    }

    /// Checks every structural invariant of the record.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::Validation(format!("sample_rate_hz: expected {SAMPLE_RATE_HZ}, got {}", self.sample_rate_hz)));
        }
        if self.num_steps == 0 {
            return Err(Error::Validation("num_steps: must be positive".into()));
        }
        let mut ids = HashSet::new();
        for (i, t) in self.tracks.iter().enumerate() {
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Validation(format!("tracks[{i}].id: duplicate id {:?}", t.id)));
            }
            let mut prev = 0u32;
            for (j, s) in t.states.iter().enumerate() {
                if s.step <= prev && j > 0 || s.step == 0 {
                    return Err(Error::Validation(format!("tracks[{i}].step[{j}]: steps must be strictly increasing and >= 1")));
                }
                if s.step > self.num_steps {
                    return Err(Error::Validation(format!("tracks[{i}].step[{j}]: step {} exceeds num_steps {}", s.step, self.num_steps)));
                }
                prev = s.step;
                let vals = [s.x, s.y, s.vx, s.vy];
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("tracks[{i}] step {}: non-finite state", s.step)));
                }
                if !s.valid && vals.iter().any(|v| *v != 0.0) {
                    return Err(Error::Validation(format!("tracks[{i}] step {}: invalid state must carry zeroed kinematics", s.step)));
                }
            }
        }
        let mut lane_ids = HashSet::new();
        for (i, l) in self.lanes.iter().enumerate() {
            if !lane_ids.insert(l.id.as_str()) {
                return Err(Error::Validation(format!("lanes[{i}].id: duplicate id {:?}", l.id)));
            }
            if l.centerline.len() < 2 {
                return Err(Error::Validation(format!("lanes[{i}].centerline: needs at least 2 points")));
            }
            if l.centerline.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("lanes[{i}].centerline: non-finite point")));
            }
            if l.centerline.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!("lanes[{i}].centerline: consecutive points must differ")));
            }
        }
        if !ids.contains(self.focal_track_id.as_str()) {
            return Err(Error::Validation(format!("focal_track_id: {:?} not present in tracks", self.focal_track_id)));
        }
        for s in &self.scored_track_ids {
            if !ids.contains(s.as_str()) {
                return Err(Error::Validation(format!("scored_track_ids: {s:?} not present in tracks")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScenarioRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: ScenarioRecord = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let scenario = Scenario::try_from(record)?;
        scenario.validate()?;
        Ok(scenario)
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scenario::from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scenario.to_json()?).map_err(|e| Error::io(path, e))
}

impl RigidTransform for Scenario {
    fn apply_se2(&self, t: &Pose2D) -> Self {
        let mut out = self.clone();
        for track in &mut out.tracks {
            for s in track.states.iter_mut().filter(|s| s.valid) {
                let p = t.transform_point([s.x, s.y]);
                let v = t.rotate_vector([s.vx, s.vy]);
                s.x = p[0];
                s.y = p[1];
                s.vx = v[0];
                s.vy = v[1];
            }
        }
        for lane in &mut out.lanes {
            for p in &mut lane.centerline {
                *p = t.transform_point(*p);
            }
        }
        out
    }
}

// On-disk schema. Field names are normative.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    id: String,
    sample_rate_hz: u32,
    num_steps: u32,
    focal_track_id: String,
    scored_track_ids: Vec<String>,
    tracks: Vec<TrackRecord>,
    lanes: Vec<LaneRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    id: String,
    agent_type: AgentType,
    step: Vec<u32>,
    x: Vec<f64>,
    y: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    valid: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneRecord {
    id: String,
    lane_type: LaneType,
    centerline: Vec<[f64; 2]>,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            id: s.id.clone(),
            sample_rate_hz: s.sample_rate_hz,
            num_steps: s.num_steps,
            focal_track_id: s.focal_track_id.clone(),
            scored_track_ids: s.scored_track_ids.clone(),
            tracks: s
                .tracks
                .iter()
                .map(|t| TrackRecord {
                    id: t.id.clone(),
                    agent_type: t.agent_type,
                    step: t.states.iter().map(|s| s.step).collect(),
                    x: t.states.iter().map(|s| s.x).collect(),
                    y: t.states.iter().map(|s| s.y).collect(),
                    vx: t.states.iter().map(|s| s.vx).collect(),
                    vy: t.states.iter().map(|s| s.vy).collect(),
                    valid: t.states.iter().map(|s| s.valid).collect(),
                })
                .collect(),
            lanes: s
                .lanes
                .iter()
                .map(|l| LaneRecord { id: l.id.clone(), lane_type: l.lane_type, centerline: l.centerline.clone() })
                .collect(),
        }
    }
}

impl TryFrom<ScenarioRecord> for Scenario {
    type Error = Error;

    fn try_from(r: ScenarioRecord) -> Result<Self> {
        let mut tracks = Vec::with_capacity(r.tracks.len());
        for (i, t) in r.tracks.into_iter().enumerate() {
            let n = t.step.len();
            for (name, len) in [("x", t.x.len()), ("y", t.y.len()), ("vx", t.vx.len()), ("vy", t.vy.len()), ("valid", t.valid.len())] {
                if len != n {
                    return Err(Error::Parse(format!("tracks[{i}].{name}: length {len} does not match step length {n}")));
                }
            }
            let states =
                (0..n).map(|j| AgentState { step: t.step[j], x: t.x[j], y: t.y[j], vx: t.vx[j], vy: t.vy[j], valid: t.valid[j] }).collect();
            tracks.push(AgentTrack { id: t.id, agent_type: t.agent_type, states });
        }
        Ok(Scenario {
            id: r.id,
            sample_rate_hz: r.sample_rate_hz,
            num_steps: r.num_steps,
            tracks,
            lanes: r.lanes.into_iter().map(|l| LaneSegment { id: l.id, lane_type: l.lane_type, centerline: l.centerline }).collect(),
            focal_track_id: r.focal_track_id,
            scored_track_ids: r.scored_track_ids,
        })
    }
}

/// Seam for real-dataset ingestion. Implementations convert a native record
/// into a validated [`Scenario`]; none ships with this crate.
pub trait ScenarioSource {
    fn load(&self, path: &Path) -> Result<Scenario>;
}
