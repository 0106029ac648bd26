//! Endpoint anchors and the target-centric token regions around them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use seam_core::geometry::heading_of;
use seam_core::Pose2D;
use serde::{Deserialize, Serialize};

/// Displacements shorter than this do not define a heading.
pub const ENDPOINT_HEADING_EPS: f64 = 1e-4;

/// Frame at the end of a trajectory: origin at the last point, yaw along the
/// last displacement that exceeds [`ENDPOINT_HEADING_EPS`], else zero.
pub fn build_target_frame(traj: &[[f64; 2]]) -> Pose2D {
    let Some(&end) = traj.last() else { return Pose2D::identity() };
    let yaw = traj
        .windows(2)
        .rev()
        .find_map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            if d[0].hypot(d[1]) < ENDPOINT_HEADING_EPS {
                None
            } else {
                heading_of(d)
            }
        })
        .unwrap_or(0.0);
    Pose2D::new(end[0], end[1], yaw)
}

/// One frame per mode from `[K][T][2]` trajectories.
pub fn build_target_frames(modes: &[Vec<[f64; 2]>]) -> Vec<Pose2D> {
    modes.iter().map(|m| build_target_frame(m)).collect()
}

/// Indices of valid tokens whose origin lies within `radius` (inclusive) of
/// the frame origin, nearest first with index tie-break, capped at `cap`.
pub fn gather_members(token_poses: &[Pose2D], valid: &[bool], frame: &Pose2D, radius: f64, cap: usize) -> Vec<usize> {
    let mut hits: Vec<(f64, usize)> = token_poses
        .iter()
        .enumerate()
        .filter(|(i, _)| valid.get(*i).copied().unwrap_or(false))
        .map(|(i, p)| ((p.x - frame.x).hypot(p.y - frame.y), i))
        .filter(|(d, _)| *d <= radius)
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits.truncate(cap);
    hits.into_iter().map(|(_, i)| i).collect()
}

/// Gathered regions for every mode of every sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetContext {
    /// `[B][K]` anchor frames in the focal frame.
    pub frames: Vec<Vec<Pose2D>>,
    /// `[B][K]` member token indices (within the sample).
    pub members: Vec<Vec<Vec<usize>>>,
    /// `[B][K]` member poses relative to their anchor frame.
    pub relative_poses: Vec<Vec<Vec<Pose2D>>>,
}

impl TargetContext {
    pub fn build(frames: Vec<Vec<Pose2D>>, token_poses: &[Vec<Pose2D>], token_valid: &[Vec<bool>], radius: f64, cap: usize) -> Self {
        let mut members = Vec::with_capacity(frames.len());
        let mut relative_poses = Vec::with_capacity(frames.len());
        for (b, fs) in frames.iter().enumerate() {
            let mut mb = Vec::with_capacity(fs.len());
            let mut rb = Vec::with_capacity(fs.len());
            for f in fs {
                let m = gather_members(&token_poses[b], &token_valid[b], f, radius, cap);
                rb.push(m.iter().map(|&i| f.relative(&token_poses[b][i])).collect());
                mb.push(m);
            }
            members.push(mb);
            relative_poses.push(rb);
        }
        Self { frames, members, relative_poses }
    }

    /// Largest region size over the batch.
    pub fn max_members(&self) -> usize {
        self.members.iter().flatten().map(Vec::len).max().unwrap_or(0)
    }
}

/// Perturbation of the previous endpoints before anchors are built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointNoise {
    #[default]
    None,
    /// Independent per-coordinate U(−a, a).
    Uniform { a: f64 },
    /// Independent per-coordinate N(0, σ²).
    Gaussian { sigma: f64 },
}

impl EndpointNoise {
    pub fn label(&self) -> String {
        match self {
            EndpointNoise::None => "none".into(),
            EndpointNoise::Uniform { a } => format!("U(-{a},{a})"),
            EndpointNoise::Gaussian { sigma } => format!("N(0,{sigma})"),
        }
    }

    /// Adds noise to the final point of every mode; deterministic in
    /// `(seed, stream)`.
    pub fn perturb(&self, modes: &mut [Vec<[f64; 2]>], seed: u64, stream: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut draw: Box<dyn FnMut() -> f64> = match *self {
            EndpointNoise::None => return,
            EndpointNoise::Uniform { a } => {
                if a <= 0.0 {
                    return;
                }
                let u = Uniform::new_inclusive(-a, a).expect("positive width");
                Box::new(move || u.sample(&mut rng))
            }
            EndpointNoise::Gaussian { sigma } => {
                if sigma <= 0.0 {
                    return;
                }
                let n = Normal::new(0.0, sigma).expect("positive sigma");
                Box::new(move || n.sample(&mut rng))
            }
        };
        for m in modes.iter_mut() {
            if let Some(p) = m.last_mut() {
                p[0] += draw();
                p[1] += draw();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn straight_prediction_frame() {
        let traj: Vec<[f64; 2]> = (1..=60).map(|i| [i as f64 * 50.0 / 60.0, 0.0]).collect();
        let f = build_target_frame(&traj);
        assert!((f.x - 50.0).abs() < 1e-12 && f.y == 0.0 && f.yaw == 0.0);
    }

    #[test]
    fn curving_onto_plus_y() {
        let traj = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.5], [2.0, 1.5]];
        assert!((build_target_frame(&traj).yaw - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn stationary_and_stalled_endings() {
        assert_eq!(build_target_frame(&[[3.0, 4.0]; 10]).yaw, 0.0);
        // stops at the end: heading from the last real displacement
        let traj = vec![[0.0, 0.0], [0.0, -1.0], [0.0, -1.0 - 1e-6], [0.0, -1.0 - 1e-6]];
        assert!((build_target_frame(&traj).yaw + FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn gathering_is_inclusive_and_capped() {
        let frame = Pose2D::new(10.0, 0.0, 0.3);
        let poses = vec![
            Pose2D::new(10.0, 0.0, 1.0),
            Pose2D::new(40.1, 0.0, 0.0),
            Pose2D::new(40.0, 0.0, 0.0),
            Pose2D::new(12.0, 0.0, 0.0),
            Pose2D::new(11.0, 0.0, 0.0),
        ];
        let valid = vec![true; 5];
        assert_eq!(gather_members(&poses, &valid, &frame, 30.0, 64), vec![0, 4, 3, 2]);
        assert_eq!(gather_members(&poses, &valid, &frame, 30.0, 2), vec![0, 4]);
        let ctx = TargetContext::build(vec![vec![frame]], &[poses], &[valid], 30.0, 64);
        let rel = ctx.relative_poses[0][0][0];
        assert!(rel.x.abs() < 1e-12 && rel.y.abs() < 1e-12 && (rel.yaw - 0.7).abs() < 1e-12);
    }

    #[test]
    fn noise_moves_only_endpoints() {
        let mut modes = vec![vec![[0.0, 0.0], [1.0, 1.0]]; 3];
        EndpointNoise::Gaussian { sigma: 1.0 }.perturb(&mut modes, 1, 2);
        assert!(modes.iter().all(|m| m[0] == [0.0, 0.0] && m[1] != [1.0, 1.0]));
        let mut again = vec![vec![[0.0, 0.0], [1.0, 1.0]]; 3];
        EndpointNoise::Gaussian { sigma: 1.0 }.perturb(&mut again, 1, 2);
        assert_eq!(modes, again);
        let mut u = vec![vec![[0.0, 0.0]]; 50];
        EndpointNoise::Uniform { a: 3.0 }.perturb(&mut u, 4, 0);
        assert!(u.iter().all(|m| m[0][0].abs() <= 3.0 && m[0][1].abs() <= 3.0));
    }
}
