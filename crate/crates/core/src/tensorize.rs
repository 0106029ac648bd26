//! Focal-frame model inputs.
//!
//! Each agent history is expressed in its own track frame (the pose at its
//! first valid history step) and each lane in the frame of its arc-length
//! midpoint. The poses of those local frames are expressed in the focal frame
//! (the focal agent's pose at `t_now`), which is the only global anchor kept.

use crate::error::{Error, Result};
use crate::geometry::{heading_of, Pose2D, RigidTransform};
use crate::polyline::Polyline;
use crate::scenario::LaneSegment;
use crate::window::{ObservationWindow, WindowTrack};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub const AGENT_FEATURES: usize = 5;
pub const LANE_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorizeConfig {
    pub radius_m: f64,
    pub lane_points: usize,
}

impl Default for TensorizeConfig {
    fn default() -> Self {
        Self { radius_m: 150.0, lane_points: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBundle {
    pub scenario_id: String,
    pub t_now: u32,
    /// `[N_a, T_h, 5]`: local x, y, vx, vy, valid.
    pub agents: Array3<f64>,
    /// `[N_l, P_l, 3]`: local x, y, valid.
    pub lanes: Array3<f64>,
    /// `[N_a, 3]` track-frame poses in the focal frame.
    pub agent_poses: Array2<f64>,
    /// `[N_l, 3]` lane-midpoint poses in the focal frame.
    pub lane_poses: Array2<f64>,
    pub agent_types: Vec<u32>,
    pub lane_types: Vec<u32>,
    pub agent_mask: Vec<bool>,
    pub lane_mask: Vec<bool>,
    pub agent_ids: Vec<String>,
    pub focal_index: usize,
    /// Global pose of the focal frame.
    pub focal_pose: Pose2D,
    /// Lanes dropped for having zero length.
    pub degenerate_lanes: usize,
}

impl TensorBundle {
    pub fn num_agents(&self) -> usize {
        self.agents.shape()[0]
    }

    pub fn num_lanes(&self) -> usize {
        self.lanes.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.num_agents() + self.num_lanes()
    }

    /// Scene-token poses in the focal frame, agents first then lanes.
    pub fn token_poses(&self) -> Vec<Pose2D> {
        self.agent_poses.rows().into_iter().chain(self.lane_poses.rows()).map(|r| Pose2D { x: r[0], y: r[1], yaw: r[2] }).collect()
    }
}

impl RigidTransform for TensorBundle {
    fn apply_se2(&self, transform: &Pose2D) -> Self {
        let mut out = self.clone();
        out.focal_pose = self.focal_pose.apply_se2(transform);
        out
    }
}

/// Ground-truth futures in the focal frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureTargets {
    /// `[N_a, T_f + T_a, 2]`.
    pub positions: Array3<f64>,
    /// `[N_a, T_f + T_a]`.
    pub mask: Array2<bool>,
}

/// Heading at the last history step: velocity, else the most recent
/// displacement between valid states, else zero.
fn heading_at_end(history: &[crate::scenario::AgentState]) -> f64 {
    let cur = history.last().unwrap();
    if let Some(h) = heading_of(cur.velocity()) {
        return h;
    }
    let valid: Vec<_> = history.iter().filter(|s| s.valid).collect();
    for w in valid.windows(2).rev() {
        if let Some(h) = heading_of([w[1].x - w[0].x, w[1].y - w[0].y]) {
            return h;
        }
    }
    0.0
}

/// Heading at the first valid history step: velocity, else the first
/// displacement between valid states, else `fallback`.
fn heading_at_start(valid: &[&crate::scenario::AgentState], fallback: f64) -> f64 {
    if let Some(h) = heading_of(valid[0].velocity()) {
        return h;
    }
    for w in valid.windows(2) {
        if let Some(h) = heading_of([w[1].x - w[0].x, w[1].y - w[0].y]) {
            return h;
        }
    }
    fallback
}

pub fn focal_frame(window: &ObservationWindow) -> Result<Pose2D> {
    let focal = window.focal().ok_or_else(|| Error::Tensorization(format!("focal track {:?} has no history", window.focal_track_id)))?;
    let cur = focal.current();
    if !cur.valid {
        return Err(Error::Tensorization(format!("focal track {:?} invalid at t_now = {}", focal.id, window.t_now)));
    }
    Ok(Pose2D::new(cur.x, cur.y, heading_at_end(&focal.history)))
}

/// Indices of the tracks and lanes that fall within `radius_m` of the focal
/// agent (inclusive). The focal track is always kept.
pub fn select_context(window: &ObservationWindow, focal_pose: &Pose2D, radius_m: f64) -> (Vec<usize>, Vec<usize>) {
    let tracks = window
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let cur = t.current();
            t.id == window.focal_track_id || (cur.valid && focal_pose.distance_to(cur.position()) <= radius_m)
        })
        .map(|(i, _)| i)
        .collect();
    let lanes = window
        .lanes
        .iter()
        .enumerate()
        .filter(|(_, l)| l.centerline.iter().any(|p| focal_pose.distance_to(*p) <= radius_m))
        .map(|(i, _)| i)
        .collect();
    (tracks, lanes)
}

pub struct AgentTensors {
    pub agents: Array3<f64>,
    pub poses: Array2<f64>,
    pub types: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Global pose of a track's local frame. Tracks that never move inherit the
/// focal heading, which keeps their pose invariant to global motion.
pub fn track_frame(track: &WindowTrack, focal_pose: &Pose2D) -> Option<Pose2D> {
    let valid: Vec<_> = track.history.iter().filter(|s| s.valid).collect();
    let first = valid.first()?;
    Some(Pose2D::new(first.x, first.y, heading_at_start(&valid, focal_pose.yaw)))
}

pub fn build_agent_tensor(tracks: &[&WindowTrack], focal_pose: &Pose2D, t_h: usize) -> AgentTensors {
    let n = tracks.len();
    let mut agents = Array3::zeros((n, t_h, AGENT_FEATURES));
    let mut poses = Array2::zeros((n, 3));
    for (i, track) in tracks.iter().enumerate() {
        assert_eq!(track.history.len(), t_h, "history length mismatch");
        let frame = track_frame(track, focal_pose).expect("tracks without valid history are dropped upstream");
        for (t, s) in track.history.iter().enumerate().filter(|(_, s)| s.valid) {
            let p = frame.inverse_transform_point(s.position());
            let v = frame.inverse_rotate_vector(s.velocity());
            agents[[i, t, 0]] = p[0];
            agents[[i, t, 1]] = p[1];
            agents[[i, t, 2]] = v[0];
            agents[[i, t, 3]] = v[1];
            agents[[i, t, 4]] = 1.0;
        }
        let rel = focal_pose.relative(&frame);
        poses[[i, 0]] = rel.x;
        poses[[i, 1]] = rel.y;
        poses[[i, 2]] = rel.yaw;
    }
    AgentTensors { agents, poses, types: tracks.iter().map(|t| t.agent_type.id()).collect(), mask: vec![true; n] }
}

pub struct LaneTensors {
    pub lanes: Array3<f64>,
    pub poses: Array2<f64>,
    pub types: Vec<u32>,
    pub mask: Vec<bool>,
    /// Lanes dropped: zero length or no resampled point inside the region.
    pub dropped_degenerate: usize,
    pub dropped_outside: usize,
}

/// Frame at the arc-length midpoint, oriented along the tangent there. The
/// tangent is a short central chord so that it varies continuously when the
/// midpoint sits on a vertex.
pub fn lane_frame(line: &Polyline) -> Pose2D {
    let mid = 0.5 * line.length();
    let h = (0.01 * line.length()).min(0.5);
    let a = line.point_at(mid - h);
    let b = line.point_at(mid + h);
    let p = line.point_at(mid);
    Pose2D::new(p[0], p[1], (b[1] - a[1]).atan2(b[0] - a[0]))
}

pub fn build_lane_tensor(lanes: &[&LaneSegment], focal_pose: &Pose2D, lane_points: usize, radius_m: f64) -> LaneTensors {
    assert!(lane_points >= 2, "lanes need at least two points");
    let mut rows = Vec::new();
    let mut dropped_degenerate = 0;
    let mut dropped_outside = 0;
    for lane in lanes {
        let Some(line) = Polyline::new(&lane.centerline) else {
            dropped_degenerate += 1;
            continue;
        };
        let frame = lane_frame(&line);
        let pts = line.resample(lane_points);
        let inside: Vec<bool> = pts.iter().map(|p| focal_pose.distance_to(*p) <= radius_m).collect();
        if !inside.iter().any(|&b| b) {
            dropped_outside += 1;
            continue;
        }
        rows.push((lane.lane_type.id(), frame, pts, inside));
    }
    let n = rows.len();
    let mut tensor = Array3::zeros((n, lane_points, LANE_FEATURES));
    let mut poses = Array2::zeros((n, 3));
    let mut types = Vec::with_capacity(n);
    for (i, (ty, frame, pts, inside)) in rows.into_iter().enumerate() {
        for (j, p) in pts.iter().enumerate().filter(|(j, _)| inside[*j]) {
            let q = frame.inverse_transform_point(*p);
            tensor[[i, j, 0]] = q[0];
            tensor[[i, j, 1]] = q[1];
            tensor[[i, j, 2]] = 1.0;
        }
        let rel = focal_pose.relative(&frame);
        poses[[i, 0]] = rel.x;
        poses[[i, 1]] = rel.y;
        poses[[i, 2]] = rel.yaw;
        types.push(ty);
    }
    LaneTensors { lanes: tensor, poses, types, mask: vec![true; n], dropped_degenerate, dropped_outside }
}

/// Tensorizes a window with its focal track first.
pub fn tensorize(window: &ObservationWindow, cfg: &TensorizeConfig) -> Result<(TensorBundle, FutureTargets)> {
    let focal_pose = focal_frame(window)?;
    let (mut track_idx, lane_idx) = select_context(window, &focal_pose, cfg.radius_m);
    let focal_pos = track_idx.iter().position(|&i| window.tracks[i].id == window.focal_track_id).expect("focal is always selected");
    let f = track_idx.remove(focal_pos);
    track_idx.insert(0, f);
    let tracks: Vec<&WindowTrack> = track_idx.iter().map(|&i| &window.tracks[i]).collect();
    let lanes: Vec<&LaneSegment> = lane_idx.iter().map(|&i| &window.lanes[i]).collect();
    let a = build_agent_tensor(&tracks, &focal_pose, window.config.t_h as usize);
    let l = build_lane_tensor(&lanes, &focal_pose, cfg.lane_points, cfg.radius_m);

    let horizon = window.config.horizon() as usize;
    let mut positions = Array3::zeros((tracks.len(), horizon, 2));
    let mut mask = Array2::from_elem((tracks.len(), horizon), false);
    for (i, t) in tracks.iter().enumerate() {
        for (j, s) in t.future.iter().enumerate().filter(|(_, s)| s.valid) {
            let p = focal_pose.inverse_transform_point(s.position());
            positions[[i, j, 0]] = p[0];
            positions[[i, j, 1]] = p[1];
            mask[[i, j]] = true;
        }
    }
    let bundle = TensorBundle {
        scenario_id: window.scenario_id.clone(),
        t_now: window.t_now,
        agents: a.agents,
        lanes: l.lanes,
        agent_poses: a.poses,
        lane_poses: l.poses,
        agent_types: a.types,
        lane_types: l.types,
        agent_mask: a.mask,
        lane_mask: l.mask,
        agent_ids: tracks.iter().map(|t| t.id.clone()).collect(),
        focal_index: 0,
        focal_pose,
        degenerate_lanes: l.dropped_degenerate,
    };
    Ok((bundle, FutureTargets { positions, mask }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AgentState, AgentType, LaneType};
    use crate::window::WindowConfig;
    use std::f64::consts::PI;

    fn st(step: u32, x: f64, y: f64, vx: f64, vy: f64) -> AgentState {
        AgentState { step, x, y, vx, vy, valid: true }
    }

    fn window_with(history: Vec<AgentState>) -> ObservationWindow {
        let t_h = history.len() as u32;
        ObservationWindow {
            scenario_id: "t".into(),
            t_now: t_h,
            config: WindowConfig { t_h, t_f: 2, t_a: 0 },
            tracks: vec![WindowTrack { id: "f".into(), agent_type: AgentType::Vehicle, history, future: vec![AgentState::invalid(0); 2] }],
            lanes: vec![],
            focal_track_id: "f".into(),
            scored_track_ids: vec![],
        }
    }

    #[test]
    fn focal_frame_heading_cases() {
        let w = window_with(vec![st(1, 9.0, 5.0, 1.0, 0.0), st(2, 10.0, 5.0, 1.0, 0.0)]);
        assert_eq!(focal_frame(&w).unwrap(), Pose2D::new(10.0, 5.0, 0.0));
        let w = window_with(vec![st(1, 0.0, 0.0, 0.0, 2.0), st(2, 0.0, 0.2, 0.0, 2.0)]);
        assert_eq!(focal_frame(&w).unwrap().yaw, PI / 2.0);
        // stationary now, previously moved toward -x
        let w = window_with(vec![st(1, 5.0, 0.0, -1.0, 0.0), st(2, 4.0, 0.0, 0.0, 0.0), st(3, 4.0, 0.0, 0.0, 0.0)]);
        assert_eq!(focal_frame(&w).unwrap().yaw, PI);
        // fully stationary
        let w = window_with(vec![st(1, 4.0, 0.0, 0.0, 0.0), st(2, 4.0, 0.0, 0.0, 0.0)]);
        assert_eq!(focal_frame(&w).unwrap().yaw, 0.0);
    }

    #[test]
    fn focal_invalid_now_errors() {
        let mut w = window_with(vec![st(1, 0.0, 0.0, 1.0, 0.0), st(2, 0.1, 0.0, 1.0, 0.0)]);
        w.tracks[0].history[1] = AgentState::invalid(2);
        assert!(matches!(focal_frame(&w), Err(Error::Tensorization(_))));
    }

    #[test]
    fn agent_frame_origin_row() {
        let track = WindowTrack {
            id: "a".into(),
            agent_type: AgentType::Cyclist,
            history: vec![AgentState::invalid(1), st(2, 3.0, 4.0, 0.0, 2.0), st(3, 3.0, 4.2, 0.0, 2.0)],
            future: vec![],
        };
        let t = build_agent_tensor(&[&track], &Pose2D::identity(), 3);
        let expected = [0.0, 0.0, 2.0, 0.0, 1.0];
        for (k, e) in expected.iter().enumerate() {
            assert!((t.agents[[0, 1, k]] - e).abs() < 1e-12, "feature {k}");
        }
        assert!((0..5).all(|k| t.agents[[0, 0, k]] == 0.0));
        assert!((t.agents[[0, 2, 0]] - 0.2).abs() < 1e-12 && t.agents[[0, 2, 1]].abs() < 1e-12);
        assert_eq!(t.types, vec![2]);
    }

    #[test]
    fn straight_lane_resampled_in_midpoint_frame() {
        let lane = LaneSegment { id: "l".into(), lane_type: LaneType::Bus, centerline: vec![[0.0, 0.0], [10.0, 0.0]] };
        let t = build_lane_tensor(&[&lane], &Pose2D::identity(), 5, 150.0);
        let xs: Vec<f64> = (0..5).map(|j| t.lanes[[0, j, 0]]).collect();
        assert_eq!(xs, vec![-5.0, -2.5, 0.0, 2.5, 5.0]);
        assert!((0..5).all(|j| t.lanes[[0, j, 1]] == 0.0 && t.lanes[[0, j, 2]] == 1.0));
        assert_eq!(t.poses.row(0).to_vec(), vec![5.0, 0.0, 0.0]);
        assert_eq!(t.types, vec![2]);
    }

    #[test]
    fn lane_leaving_region_masks_trailing_points() {
        let lane = LaneSegment { id: "l".into(), lane_type: LaneType::Standard, centerline: vec![[100.0, 0.0], [200.0, 0.0]] };
        let t = build_lane_tensor(&[&lane], &Pose2D::identity(), 11, 150.0);
        let valid: Vec<f64> = (0..11).map(|j| t.lanes[[0, j, 2]]).collect();
        assert_eq!(valid, vec![1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0.]);
        for j in 6..11 {
            assert_eq!((t.lanes[[0, j, 0]], t.lanes[[0, j, 1]]), (0.0, 0.0));
        }
    }

    #[test]
    fn degenerate_lane_dropped_and_counted() {
        let lane = LaneSegment { id: "d".into(), lane_type: LaneType::Standard, centerline: vec![[1.0, 1.0], [1.0, 1.0]] };
        let t = build_lane_tensor(&[&lane], &Pose2D::identity(), 5, 150.0);
        assert_eq!(t.dropped_degenerate, 1);
        assert_eq!(t.lanes.shape()[0], 0);
    }

    #[test]
    fn context_boundary_inclusive() {
        let mk = |id: &str, x: f64| WindowTrack {
            id: id.into(),
            agent_type: AgentType::Vehicle,
            history: vec![st(1, x, 0.0, 1.0, 0.0)],
            future: vec![],
        };
        let w = ObservationWindow {
            scenario_id: "c".into(),
            t_now: 1,
            config: WindowConfig { t_h: 1, t_f: 1, t_a: 0 },
            tracks: vec![mk("f", 0.0), mk("in", 149.9), mk("edge", 150.0), mk("out", 150.1)],
            lanes: vec![LaneSegment { id: "far".into(), lane_type: LaneType::Standard, centerline: vec![[200.0, 0.0], [200.0, 10.0]] }],
            focal_track_id: "f".into(),
            scored_track_ids: vec![],
        };
        let (t, l) = select_context(&w, &Pose2D::identity(), 150.0);
        assert_eq!(t, vec![0, 1, 2]);
        assert!(l.is_empty());
    }

    #[test]
    fn identity_transform_bit_identical() {
        let w = window_with(vec![st(1, 9.0, 5.0, 1.0, 0.0), st(2, 10.0, 5.0, 1.0, 0.0)]);
        let (b, _) = tensorize(&w, &TensorizeConfig::default()).unwrap();
        assert_eq!(b.apply_se2(&Pose2D::identity()), b);
    }
}
