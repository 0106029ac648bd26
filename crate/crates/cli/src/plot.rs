//! Deterministic SVG panels of a streamed scenario: one panel per window.

use anyhow::{bail, Result};
use seam_core::metrics::top_k;
use seam_core::Scenario;
use seam_model::evaluate::PredictionRecord;
use std::fmt::Write;
use std::path::{Path, PathBuf};

const SIZE: f64 = 600.0;
const MARGIN_M: f64 = 15.0;
const MODE_COLORS: [&str; 6] = ["#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#bcbd22"];

struct View {
    x0: f64,
    y1: f64,
    scale: f64,
}

impl View {
    fn fit(points: &[[f64; 2]]) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let span = (x1 - x0).max(y1 - y0) + 2.0 * MARGIN_M;
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        View { x0: cx - 0.5 * span, y1: cy + 0.5 * span, scale: SIZE / span }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.x0) * self.scale, (self.y1 - p[1]) * self.scale)
    }

    fn path(&self, pts: &[[f64; 2]]) -> String {
        let mut s = String::new();
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = self.map(*p);
            let _ = write!(s, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
        }
        s
    }
}

fn polyline(out: &mut String, view: &View, pts: &[[f64; 2]], style: &str) {
    if pts.len() >= 2 {
        let _ = writeln!(out, r#"<path d="{}" fill="none" {style}/>"#, view.path(pts));
    }
}

/// Renders the panel of one window.
pub fn render_panel(scenario: &Scenario, rec: &PredictionRecord, t_h: usize, t_f: usize) -> String {
    let t = rec.t_now;
    let hist_start = t.saturating_sub(t_h as u32 - 1);
    let focal = scenario.focal_track();
    let history = |id: &str| -> Vec<[f64; 2]> {
        scenario
            .track(id)
            .map(|tr| tr.states.iter().filter(|s| s.valid && s.step >= hist_start && s.step <= t).map(|s| s.position()).collect())
            .unwrap_or_default()
    };
    let future: Vec<[f64; 2]> =
        focal.states.iter().filter(|s| s.valid && s.step > t && s.step <= t + t_f as u32).map(|s| s.position()).collect();
    let modes: Vec<Vec<[f64; 2]>> = rec.prediction.trajectories.iter().map(|m| m[..t_f.min(m.len())].to_vec()).collect();
    let mut frame: Vec<[f64; 2]> = history(&focal.id);
    frame.extend(&future);
    modes.iter().for_each(|m| frame.extend(m));
    let view = View::fit(&frame);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for lane in &scenario.lanes {
        polyline(&mut s, &view, &lane.centerline, r##"stroke="#c8c8c8" stroke-width="1.5""##);
    }
    for tr in &scenario.tracks {
        if tr.id == focal.id {
            continue;
        }
        let h = history(&tr.id);
        polyline(&mut s, &view, &h, r##"stroke="#7f7f7f" stroke-width="2""##);
        if let Some(p) = h.last() {
            let (x, y) = view.map(*p);
            let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#7f7f7f"/>"##);
        }
    }
    polyline(&mut s, &view, &future, r##"stroke="#2ca02c" stroke-width="2.5" stroke-dasharray="6,4""##);
    let order = top_k(&rec.prediction.probabilities, modes.len());
    for (rank, &m) in order.iter().enumerate().rev() {
        let color = MODE_COLORS[rank % MODE_COLORS.len()];
        polyline(&mut s, &view, &modes[m], &format!(r#"stroke="{color}" stroke-width="1.8""#));
        if let Some(p) = modes[m].last() {
            let (x, y) = view.map(*p);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="10" fill="{color}">{:.2}</text>"#,
                x + 3.0,
                y - 3.0,
                rec.prediction.probabilities[m]
            );
        }
    }
    let h = history(&focal.id);
    polyline(&mut s, &view, &h, r##"stroke="#1f77b4" stroke-width="3""##);
    if let Some(p) = h.last() {
        let (x, y) = view.map(*p);
        let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="#1f77b4"/>"##);
    }
    let _ = writeln!(s, r#"<text x="8" y="16" font-family="monospace" font-size="12">{} t={} ({:?})</text>"#, scenario.id, t, rec.mode);
    s.push_str("</svg>\n");
    s
}

/// Writes one SVG per window of `scenario` found in the prediction log.
pub fn plot(records: &[PredictionRecord], scenario: &Scenario, t_h: usize, t_f: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let mut recs: Vec<&PredictionRecord> =
        records.iter().filter(|r| r.scenario_id == scenario.id && r.agent_id == scenario.focal_track_id).collect();
    if recs.is_empty() {
        bail!("prediction log has no entries for scenario {}", scenario.id);
    }
    recs.sort_by_key(|r| r.t_now);
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for r in recs {
        let p = out.join(format!("{}_t{:03}.svg", scenario.id, r.t_now));
        std::fs::write(&p, render_panel(scenario, r, t_h, t_f))?;
        files.push(p);
    }
    Ok(files)
}
