//! Planar rigid-body geometry.
//!
//! Every coordinate frame in the pipeline (global, focal, per-track, per-lane,
//! target-centric) is a [`Pose2D`]: the pose of the frame's origin expressed in
//! a parent frame.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Displacements or speeds below this magnitude carry no usable heading.
pub const HEADING_EPS: f64 = 1e-4;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw) }
    }

    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    /// `self ∘ other`: the pose `other` (given in this frame) expressed in the
    /// parent frame of `self`.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        Pose2D::new(self.x + c * other.x - s * other.y, self.y + s * other.x + c * other.y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        Pose2D::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// `self⁻¹ ∘ other`: `other` (a parent-frame pose) expressed in this frame.
    pub fn relative(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2D::new(c * dx + s * dy, -s * dx + c * dy, other.yaw - self.yaw)
    }

    /// Maps a point from this frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Maps a parent-frame point into this frame.
    pub fn inverse_transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn rotate_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn inverse_rotate_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.x).hypot(p[1] - self.y)
    }

    /// `(x, y, sin yaw, cos yaw)`.
    pub fn to_features(&self) -> [f64; 4] {
        let (s, c) = self.yaw.sin_cos();
        [self.x, self.y, s, c]
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.yaw]
    }
}

/// Heading of a vector, or `None` when it is too short to define one.
pub fn heading_of(v: [f64; 2]) -> Option<f64> {
    if v[0].hypot(v[1]) > HEADING_EPS {
        Some(v[1].atan2(v[0]))
    } else {
        None
    }
}

/// Types that carry global-frame quantities and can be moved rigidly.
pub trait RigidTransform {
    /// Applies `transform` (new global frame ← old global frame) to every
    /// global-frame quantity. Local-frame quantities are left untouched.
    fn apply_se2(&self, transform: &Pose2D) -> Self;
}

impl RigidTransform for Pose2D {
    fn apply_se2(&self, transform: &Pose2D) -> Self {
        transform.compose(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_range_is_half_open() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn identity_composition_is_exact() {
        let p = Pose2D::new(3.0, -2.0, 0.7);
        assert_eq!(p.apply_se2(&Pose2D::identity()), p);
    }

    #[test]
    fn heading_threshold() {
        assert_eq!(heading_of([0.0, 0.0]), None);
        assert_eq!(heading_of([0.0, 1.0]), Some(PI / 2.0));
    }

    proptest! {
        #[test]
        fn relative_then_compose_roundtrip(
            x0 in -500.0..500.0f64, y0 in -500.0..500.0f64, a0 in -4.0..4.0f64,
            x1 in -500.0..500.0f64, y1 in -500.0..500.0f64, a1 in -4.0..4.0f64,
        ) {
            let a = Pose2D::new(x0, y0, a0);
            let b = Pose2D::new(x1, y1, a1);
            let rel = a.relative(&b);
            let back = a.compose(&rel);
            prop_assert!((back.x - b.x).abs() < 1e-9);
            prop_assert!((back.y - b.y).abs() < 1e-9);
            prop_assert!(normalize_angle(back.yaw - b.yaw).abs() < 1e-9);
            let inv = a.compose(&a.inverse());
            prop_assert!(inv.x.abs() < 1e-9 && inv.y.abs() < 1e-9 && inv.yaw.abs() < 1e-12);
        }

        #[test]
        fn point_transform_inverts(x in -100.0..100.0f64, y in -100.0..100.0f64, a in -4.0..4.0f64,
                                   px in -100.0..100.0f64, py in -100.0..100.0f64) {
            let f = Pose2D::new(x, y, a);
            let q = f.inverse_transform_point(f.transform_point([px, py]));
            prop_assert!((q[0] - px).abs() < 1e-9 && (q[1] - py).abs() < 1e-9);
        }
    }
}
