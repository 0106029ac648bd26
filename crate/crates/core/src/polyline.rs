//! Arc-length parameterized polylines.

use crate::geometry::Pose2D;

#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline, discarding repeated points. Returns `None` when the
    /// result has zero length.
    pub fn new(points: &[[f64; 2]]) -> Option<Self> {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last() != Some(p) {
                pts.push(*p);
            }
        }
        if pts.len() < 2 {
            return None;
        }
        let mut cumulative = Vec::with_capacity(pts.len());
        cumulative.push(0.0);
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cumulative.push(cumulative.last().unwrap() + d);
        }
        if *cumulative.last().unwrap() <= 0.0 {
            return None;
        }
        Some(Self { points: pts, cumulative })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Index of the segment containing arc length `s` (clamped to the ends).
    /// A vertex belongs to the segment that starts at it.
    fn segment(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cumulative.partition_point(|&c| c <= s) {
            0 => 0,
            i => (i - 1).min(n - 1),
        }
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = ((s - self.cumulative[i]) / seg).clamp(0.0, 1.0);
        if t == 1.0 {
            return b;
        }
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
    }

    pub fn tangent_at(&self, s: f64) -> f64 {
        let i = self.segment(s.clamp(0.0, self.length()));
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    pub fn pose_at(&self, s: f64) -> Pose2D {
        let p = self.point_at(s);
        Pose2D::new(p[0], p[1], self.tangent_at(s))
    }

    /// `n ≥ 2` points spaced uniformly in arc length, endpoints included.
    pub fn resample(&self, n: usize) -> Vec<[f64; 2]> {
        assert!(n >= 2, "resampling needs at least two points");
        let len = self.length();
        (0..n).map(|i| if i == n - 1 { *self.points.last().unwrap() } else { self.point_at(len * i as f64 / (n - 1) as f64) }).collect()
    }

    /// Arc length of the point on the polyline closest to `p`.
    pub fn project(&self, p: [f64; 2]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let l2 = d[0] * d[0] + d[1] * d[1];
            let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0);
            let q = [a[0] + d[0] * t, a[1] + d[1] * t];
            let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
            if dist < best.0 {
                best = (dist, self.cumulative[i] + t * l2.sqrt());
            }
        }
        best.1
    }

    /// Concatenates polylines end to end (joint points deduplicated).
    pub fn concat(parts: &[&[[f64; 2]]]) -> Option<Self> {
        let all: Vec<[f64; 2]> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(&all)
    }
}
