//! Motion-forecasting metrics.
//!
//! Trajectories are slices of `[x, y]` points. Ground truth comes with a
//! per-step validity mask; predictions may be longer than the ground truth
//! (extra steps are ignored).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Endpoint radius for hits, inclusive.
pub const MISS_THRESHOLD_M: f64 = 2.0;

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mode indices sorted by descending probability, lower index first on ties,
/// truncated to `k`.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Masked mean displacement; `None` when no step is valid.
pub fn ade(traj: &[Point], gt: &[Point], mask: &[bool]) -> Option<f64> {
    let (sum, n) =
        gt.iter().zip(mask).zip(traj).filter(|((_, &m), _)| m).fold((0.0, 0usize), |(s, n), ((g, _), p)| (s + dist(*p, *g), n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Displacement at the final ground-truth step; `None` when that step is invalid.
pub fn fde(traj: &[Point], gt: &[Point], mask: &[bool]) -> Option<f64> {
    let last = gt.len().checked_sub(1)?;
    mask[last].then(|| dist(traj[last], gt[last]))
}

pub fn min_ade(trajs: &[&[Point]], gt: &[Point], mask: &[bool]) -> Option<f64> {
    trajs.iter().filter_map(|t| ade(t, gt, mask)).min_by(f64::total_cmp)
}

/// Minimum FDE and the position (within `trajs`) of the first minimizer.
pub fn min_fde_with_index(trajs: &[&[Point]], gt: &[Point], mask: &[bool]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, t) in trajs.iter().enumerate() {
        let d = fde(t, gt, mask)?;
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, i));
        }
    }
    best
}

pub fn min_fde(trajs: &[&[Point]], gt: &[Point], mask: &[bool]) -> Option<f64> {
    min_fde_with_index(trajs, gt, mask).map(|(d, _)| d)
}

/// minFDE plus `(1 - π)²`, π being the probability of the FDE-minimizing mode.
pub fn brier_min_fde(trajs: &[&[Point]], probs: &[f64], gt: &[Point], mask: &[bool]) -> Option<f64> {
    min_fde_with_index(trajs, gt, mask).map(|(d, i)| d + (1.0 - probs[i]).powi(2))
}

/// 1.0 when no endpoint lies within [`MISS_THRESHOLD_M`] of the ground truth.
pub fn miss_rate(trajs: &[&[Point]], gt: &[Point], mask: &[bool]) -> Option<f64> {
    min_fde(trajs, gt, mask).map(|d| if d <= MISS_THRESHOLD_M { 0.0 } else { 1.0 })
}

/// One multimodal prediction for one agent, truncated to the evaluated horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
}

impl ModeSet {
    fn top(&self, k: usize) -> (Vec<&[Point]>, Vec<f64>) {
        let idx = top_k(&self.probabilities, k);
        (idx.iter().map(|&i| self.trajectories[i].as_slice()).collect(), idx.iter().map(|&i| self.probabilities[i]).collect())
    }

    pub fn most_probable(&self) -> &[Point] {
        &self.trajectories[top_k(&self.probabilities, 1)[0]]
    }
}

/// Per-sample single-agent metric values at cut-off `k`.
pub fn single_agent_sample(pred: &ModeSet, gt: &[Point], mask: &[bool], k: usize) -> BTreeMap<String, f64> {
    let (trajs, probs) = pred.top(k);
    let mut out = BTreeMap::new();
    if let Some(v) = min_ade(&trajs, gt, mask) {
        out.insert(format!("minADE_{k}"), v);
    }
    if let Some(v) = min_fde(&trajs, gt, mask) {
        out.insert(format!("minFDE_{k}"), v);
    }
    if let Some(v) = brier_min_fde(&trajs, &probs, gt, mask) {
        out.insert(format!("brier-minFDE_{k}"), v);
    }
    if let Some(v) = miss_rate(&trajs, gt, mask) {
        out.insert(format!("MR_{k}"), v);
    }
    out
}

/// Joint prediction: `worlds[k][agent]` trajectories with one score per world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSet {
    pub worlds: Vec<Vec<Vec<Point>>>,
    pub probabilities: Vec<f64>,
}

/// Multi-agent metrics at cut-off `k` for one scenario. Each averaged
/// statistic picks its own best world among the top-`k` worlds; actorMR is
/// measured in the avgMinFDE-best world. The world probability enters every
/// actor's brier term.
pub fn world_sample(pred: &WorldSet, gts: &[Vec<Point>], masks: &[Vec<bool>], k: usize) -> BTreeMap<String, f64> {
    let idx = top_k(&pred.probabilities, k);
    let mut out = BTreeMap::new();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut best_ade: Option<f64> = None;
    let mut best_fde: Option<(f64, usize)> = None;
    let mut best_brier: Option<f64> = None;
    for &w in &idx {
        let world = &pred.worlds[w];
        let ades: Vec<f64> = world.iter().zip(gts.iter().zip(masks)).filter_map(|(t, (g, m))| ade(t, g, m)).collect();
        let fdes: Vec<f64> = world.iter().zip(gts.iter().zip(masks)).filter_map(|(t, (g, m))| fde(t, g, m)).collect();
        let penalty = (1.0 - pred.probabilities[w]).powi(2);
        let briers: Vec<f64> = fdes.iter().map(|f| f + penalty).collect();
        if let Some(a) = mean(ades) {
            best_ade = Some(best_ade.map_or(a, |b| b.min(a)));
        }
        if let Some(f) = mean(fdes) {
            if best_fde.is_none_or(|(b, _)| f < b) {
                best_fde = Some((f, w));
            }
        }
        if let Some(b) = mean(briers) {
            best_brier = Some(best_brier.map_or(b, |x| x.min(b)));
        }
    }
    if let Some(v) = best_ade {
        out.insert(format!("avgMinADE_{k}"), v);
    }
    if let Some((v, w)) = best_fde {
        out.insert(format!("avgMinFDE_{k}"), v);
        let misses: Vec<f64> = pred.worlds[w]
            .iter()
            .zip(gts.iter().zip(masks))
            .filter_map(|(t, (g, m))| fde(t, g, m))
            .map(|d| if d <= MISS_THRESHOLD_M { 0.0 } else { 1.0 })
            .collect();
        if let Some(mr) = mean(misses) {
            out.insert(format!("actorMR_{k}"), mr);
        }
    }
    if let Some(v) = best_brier {
        out.insert(format!("avgBrierMinFDE_{k}"), v);
    }
    out
}

/// One most-probable global-frame trajectory predicted at `t_now`; point `j`
/// belongs to absolute step `t_now + 1 + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub t_now: u32,
    pub trajectory: Vec<Point>,
}

/// Mean pointwise distance over the overlapping absolute steps of two
/// consecutive frames; `None` when they do not overlap.
pub fn pair_fluctuation(prev: &StreamFrame, cur: &StreamFrame) -> Option<f64> {
    let (a, b) = if prev.t_now <= cur.t_now { (prev, cur) } else { (cur, prev) };
    let shift = (b.t_now - a.t_now) as usize;
    let n = a.trajectory.len().saturating_sub(shift).min(b.trajectory.len());
    (n > 0).then(|| (0..n).map(|j| dist(a.trajectory[j + shift], b.trajectory[j])).sum::<f64>() / n as f64)
}

/// Average over consecutive frame pairs of one agent's stream.
pub fn fluctuation(frames: &[StreamFrame]) -> Option<f64> {
    let vals: Vec<f64> = frames.windows(2).filter_map(|w| pair_fluctuation(&w[0], &w[1])).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Aggregated metrics: each named value is averaged over the samples where it
/// was defined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_scenario: Vec<(String, BTreeMap<String, f64>)>,
}

#[derive(Debug, Default)]
pub struct MetricAccumulator {
    sums: BTreeMap<String, f64>,
    counts: BTreeMap<String, usize>,
    samples: usize,
    per_scenario: Vec<(String, BTreeMap<String, f64>)>,
    keep_breakdown: bool,
}

impl MetricAccumulator {
    pub fn new(keep_breakdown: bool) -> Self {
        Self { keep_breakdown, ..Default::default() }
    }

    pub fn add(&mut self, scenario_id: &str, values: BTreeMap<String, f64>) {
        self.samples += 1;
        for (k, v) in &values {
            *self.sums.entry(k.clone()).or_default() += v;
            *self.counts.entry(k.clone()).or_default() += 1;
        }
        if self.keep_breakdown {
            self.per_scenario.push((scenario_id.to_string(), values));
        }
    }

    pub fn merge(&mut self, other: MetricAccumulator) {
        for (k, v) in other.sums {
            *self.sums.entry(k).or_default() += v;
        }
        for (k, c) in other.counts {
            *self.counts.entry(k).or_default() += c;
        }
        self.samples += other.samples;
        self.per_scenario.extend(other.per_scenario);
    }

    pub fn finish(self) -> MetricReport {
        let metrics = self.sums.iter().map(|(k, s)| (k.clone(), s / self.counts[k] as f64)).collect();
        MetricReport { metrics, counts: self.counts, samples: self.samples, per_scenario: self.per_scenario }
    }
}

/// Aligned plain-text table.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = fmt_row(headers);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in rows {
        out.push_str(&fmt_row(r));
        out.push('\n');
    }
    out
}
