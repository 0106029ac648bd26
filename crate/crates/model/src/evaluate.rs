//! Stream and snapshot evaluation at the final window, prediction logs and
//! the ablation sweeps.

use crate::model::Prediction;
use crate::nn::Ctx;
use crate::stream::{run_stream_batch, StreamFrame};
use crate::target::EndpointNoise;
use crate::{ForwardOptions, ModelError, Result, SeamModel};
use seam_core::metrics::{self, render_table, MetricAccumulator, MetricReport, ModeSet, Point};
use seam_core::Pose2D;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every window sees the state of the previous one.
    Stream,
    /// Every window is predicted from scratch.
    Snapshot,
}

/// One line of the prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scenario_id: String,
    pub agent_id: String,
    pub t_now: u32,
    pub mode: EvalMode,
    pub focal_pose: Pose2D,
    /// Global-frame prediction.
    pub prediction: Prediction,
}

pub struct EvalOutput {
    pub report: MetricReport,
    /// Predictions of every window, global frame.
    pub records: Vec<PredictionRecord>,
}

/// Predictions for every window of every stream, in the global frame.
pub fn predict_streams(
    model: &SeamModel,
    data: &[Vec<StreamFrame>],
    mode: EvalMode,
    opts: &ForwardOptions,
    batch_size: usize,
) -> Result<Vec<Vec<PredictionRecord>>> {
    let ctx = Ctx::eval();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let mut per: Vec<Vec<PredictionRecord>> = vec![Vec::new(); chunk.len()];
        let mut push = |b: usize, batch: &crate::Batch, o: &crate::ForwardOutput| -> Result<()> {
            let pose = batch.focal_poses[b];
            let frame = &chunk[b][per[b].len()];
            per[b].push(PredictionRecord {
                scenario_id: batch.scenario_ids[b].clone(),
                agent_id: frame.bundle.agent_ids[frame.bundle.focal_index].clone(),
                t_now: batch.t_now[b],
                mode,
                focal_pose: pose,
                prediction: o.prediction(b)?.to_global(&pose),
            });
            Ok(())
        };
        match mode {
            EvalMode::Stream => {
                let streams: Vec<&[StreamFrame]> = chunk.iter().map(Vec::as_slice).collect();
                for (batch, o) in run_stream_batch(model, &streams, opts, true, &ctx)? {
                    for b in 0..batch.size {
                        push(b, &batch, &o)?;
                    }
                }
            }
            EvalMode::Snapshot => {
                let n = chunk.first().map_or(0, Vec::len);
                if chunk.iter().any(|s| s.len() != n) {
                    return Err(ModelError::Stream("streams in one batch need equal frame counts".into()));
                }
                for f in 0..n {
                    let bundles: Vec<_> = chunk.iter().map(|s| &s[f].bundle).collect();
                    let batch = model.batch(&bundles)?;
                    let o = model.forward(&batch, None, opts, &ctx)?;
                    for b in 0..batch.size {
                        push(b, &batch, &o)?;
                    }
                }
            }
        }
        out.extend(per);
    }
    Ok(out)
}

/// Focal ground truth of a frame over the first `t_f` steps, global frame.
pub fn focal_truth(frame: &StreamFrame, t_f: usize) -> (Vec<Point>, Vec<bool>) {
    let f = frame.bundle.focal_index;
    let pose = frame.bundle.focal_pose;
    let t = &frame.targets;
    let n = t_f.min(t.mask.shape()[1]);
    let gt = (0..n).map(|j| pose.transform_point([t.positions[[f, j, 0]], t.positions[[f, j, 1]]])).collect();
    (gt, (0..n).map(|j| t.mask[[f, j]]).collect())
}

/// Metrics of one final-window prediction at k = 1 and k = K.
pub fn sample_metrics(pred: &Prediction, gt: &[Point], mask: &[bool], t_f: usize) -> BTreeMap<String, f64> {
    let modes = ModeSet {
        trajectories: pred.trajectories.iter().map(|m| m[..t_f.min(m.len())].to_vec()).collect(),
        probabilities: pred.probabilities.clone(),
    };
    let mut out = metrics::single_agent_sample(&modes, gt, mask, 1);
    out.extend(metrics::single_agent_sample(&modes, gt, mask, pred.probabilities.len()));
    out
}

/// Mean displacement between consecutive most-probable predictions of one
/// stream over their overlapping timestamps.
pub fn stream_fluctuation(records: &[PredictionRecord], t_f: usize) -> Option<f64> {
    let frames: Vec<metrics::StreamFrame> = records
        .iter()
        .map(|r| {
            let best = &r.prediction.trajectories[r.prediction.most_probable()];
            metrics::StreamFrame { t_now: r.t_now, trajectory: best[..t_f.min(best.len())].to_vec() }
        })
        .collect();
    metrics::fluctuation(&frames)
}

/// Metric accumulator and records for the final window of every stream;
/// `fluctuation` holds the per-stream value.
pub fn accumulate(
    model: &SeamModel,
    data: &[Vec<StreamFrame>],
    mode: EvalMode,
    opts: &ForwardOptions,
    batch_size: usize,
) -> Result<(MetricAccumulator, Vec<PredictionRecord>)> {
    let t_f = model.cfg.t_f;
    let preds = predict_streams(model, data, mode, opts, batch_size)?;
    let mut acc = MetricAccumulator::new(true);
    let mut records = Vec::new();
    for (frames, recs) in data.iter().zip(preds) {
        let last = frames.last().ok_or_else(|| ModelError::Stream("stream without frames".into()))?;
        let final_rec = recs.last().expect("one record per frame");
        let (gt, mask) = focal_truth(last, t_f);
        let mut values = sample_metrics(&final_rec.prediction, &gt, &mask, t_f);
        if let Some(f) = stream_fluctuation(&recs, t_f) {
            values.insert("fluctuation".into(), f);
        }
        acc.add(&final_rec.scenario_id, values);
        records.extend(recs);
    }
    Ok((acc, records))
}

/// Evaluates the final window of every stream.
pub fn evaluate(
    model: &SeamModel,
    data: &[Vec<StreamFrame>],
    mode: EvalMode,
    opts: &ForwardOptions,
    batch_size: usize,
) -> Result<EvalOutput> {
    if data.is_empty() {
        return Err(ModelError::Config("evaluation set is empty".into()));
    }
    let (acc, records) = accumulate(model, data, mode, opts, batch_size)?;
    Ok(EvalOutput { report: acc.finish(), records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Harness {
    StreamingMechanisms,
    TargetRadius,
    EndpointNoise,
    EncoderDepth,
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub report: MetricReport,
}

pub const SWEEP_COLUMNS: [&str; 3] = ["minADE_6", "minFDE_6", "brier-minFDE_6"];

pub fn default_noise_grid() -> Vec<EndpointNoise> {
    let mut g = vec![EndpointNoise::None];
    for s in [1.0, 3.0, 5.0] {
        g.push(EndpointNoise::Uniform { a: s });
        g.push(EndpointNoise::Gaussian { sigma: s });
    }
    g
}

pub const DEFAULT_RADII: [f64; 4] = [10.0, 15.0, 30.0, 45.0];
pub const DEFAULT_DEPTHS: [usize; 3] = [1, 2, 3];

/// The four switch combinations: none, CS+TR, EAM, CS+TR+EAM.
pub const STREAMING_ROWS: [(bool, bool, bool); 4] = [(false, false, false), (true, true, false), (false, false, true), (true, true, true)];

fn flag_label(cs: bool, tr: bool, eam: bool) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    format!("CS {} TR {} EAM {}", mark(cs), mark(tr), mark(eam))
}

/// Grid of a harness in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "harness", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepGrid {
    StreamingMechanisms { rows: Vec<[bool; 3]> },
    TargetRadius { radii: Vec<f64> },
    EndpointNoise { noise: Vec<EndpointNoise>, seed: u64 },
    EncoderDepth { depths: Vec<usize> },
}

impl SweepGrid {
    pub fn default_for(h: Harness) -> Self {
        match h {
            Harness::StreamingMechanisms => {
                SweepGrid::StreamingMechanisms { rows: STREAMING_ROWS.iter().map(|&(a, b, c)| [a, b, c]).collect() }
            }
            Harness::TargetRadius => SweepGrid::TargetRadius { radii: DEFAULT_RADII.to_vec() },
            Harness::EndpointNoise => SweepGrid::EndpointNoise { noise: default_noise_grid(), seed: 0 },
            Harness::EncoderDepth => SweepGrid::EncoderDepth { depths: DEFAULT_DEPTHS.to_vec() },
        }
    }

    pub fn harness(&self) -> Harness {
        match self {
            SweepGrid::StreamingMechanisms { .. } => Harness::StreamingMechanisms,
            SweepGrid::TargetRadius { .. } => Harness::TargetRadius,
            SweepGrid::EndpointNoise { .. } => Harness::EndpointNoise,
            SweepGrid::EncoderDepth { .. } => Harness::EncoderDepth,
        }
    }
}

/// Evaluates every grid point from one checkpoint in stream mode.
pub fn sweep(model: &SeamModel, grid: &SweepGrid, data: &[Vec<StreamFrame>], batch_size: usize) -> Result<Vec<SweepRow>> {
    let run = |m: &SeamModel, opts: &ForwardOptions| evaluate(m, data, EvalMode::Stream, opts, batch_size).map(|o| o.report);
    let plain = ForwardOptions::default();
    let mut rows = Vec::new();
    match grid {
        SweepGrid::StreamingMechanisms { rows: flags } => {
            for &[cs, tr, eam] in flags {
                let m = model.with_config(model.cfg.clone().with_streaming(cs, tr, eam))?;
                rows.push(SweepRow { label: flag_label(cs, tr, eam), report: run(&m, &plain)? });
            }
        }
        SweepGrid::TargetRadius { radii } => {
            for &r in radii {
                if !(r.is_finite() && r > 0.0) {
                    return Err(ModelError::Config(format!("target radius {r} must be positive")));
                }
                let m = model.with_config(crate::ModelConfig { r_target_m: r, ..model.cfg.clone() })?;
                rows.push(SweepRow { label: format!("{r}m"), report: run(&m, &plain)? });
            }
        }
        SweepGrid::EndpointNoise { noise, seed } => {
            for n in noise {
                let opts = ForwardOptions { endpoint_noise: *n, noise_seed: *seed };
                rows.push(SweepRow { label: n.label(), report: run(model, &opts)? });
            }
        }
        SweepGrid::EncoderDepth { depths } => {
            for &d in depths {
                if d == 0 {
                    return Err(ModelError::Config("target depth must be at least 1".into()));
                }
                let m = model.with_target_depth(d)?;
                rows.push(SweepRow { label: format!("{d}"), report: run(&m, &plain)? });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_table(harness: Harness, rows: &[SweepRow]) -> String {
    let first = match harness {
        Harness::StreamingMechanisms => "mechanisms",
        Harness::TargetRadius => "radius",
        Harness::EndpointNoise => "endpoint noise",
        Harness::EncoderDepth => "target depth",
    };
    let headers: Vec<String> = std::iter::once(first.to_string()).chain(SWEEP_COLUMNS.iter().map(|c| c.to_string())).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            std::iter::once(r.label.clone())
                .chain(SWEEP_COLUMNS.iter().map(|c| r.report.metrics.get(*c).map_or("n/a".into(), |v| format!("{v:.3}"))))
                .collect()
        })
        .collect();
    render_table(&headers, &body)
}
