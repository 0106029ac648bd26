//! Implementations of the subcommands. Every command writes its effective
//! configuration into its output directory.

use crate::config::RunConfig;
use crate::dataset::{self, prepare_out_dir};
use anyhow::{bail, Context, Result};
use seam_core::generator::{generate_with_windows, GeneratorSpec};
use seam_core::metrics::{render_table, MetricAccumulator, MetricReport};
use seam_core::tensorize::{tensorize, FutureTargets, TensorBundle};
use seam_core::{extract_window, load_scenario, streaming_schedule, Scenario};
use seam_model::checkpoint::{self, Checkpoint, CheckpointKind};
use seam_model::evaluate::{self, EvalMode, Harness, PredictionRecord, SweepRow};
use seam_model::multiagent;
use seam_model::optim::TrainConfig;
use seam_model::stream::{StreamFrame, StreamState};
use seam_model::train::{self, StepRecord, Trainer};
use seam_model::{Batch, Ctx, ForwardOptions, SeamModel};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<dataset::DatasetIndex> {
    prepare_out_dir(out, force)?;
    let window = seam_core::WindowConfig { t_h: cfg.model.t_h as u32, t_f: cfg.model.t_f as u32, t_a: cfg.model.t_a as u32 };
    let index = dataset::generate(out, &cfg.generate, &window, cfg.seed)?;
    cfg.snapshot(out)?;
    Ok(index)
}

/// Result of a training command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub total_steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

fn step_logger(path: &Path) -> Result<impl FnMut(&StepRecord)> {
    let mut f = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    Ok(move |r: &StepRecord| {
        if let Ok(line) = serde_json::to_string(r) {
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
        if r.step % 50 == 0 {
            log::info!("step {} epoch {} lr {:.2e} loss {:.4} |g| {:.3}", r.step, r.epoch, r.lr, r.total, r.grad_norm);
        }
    })
}

/// Runs `max_steps` (or the whole schedule) in chunks of `checkpoint_every`,
/// saving a checkpoint after each chunk.
fn run_chunks(
    trainer: &mut Trainer,
    n_samples: usize,
    max_steps: Option<usize>,
    every: usize,
    out: &Path,
    mut step_fn: impl FnMut(&mut Trainer, usize) -> Result<Vec<StepRecord>>,
    mut save: impl FnMut(&Path, &Trainer) -> Result<()>,
) -> Result<TrainSummary> {
    let total = trainer.total_steps(n_samples);
    let end = total.min(trainer.step.saturating_add(max_steps.unwrap_or(usize::MAX)));
    let mut last = None;
    while trainer.step < end {
        let chunk = if every == 0 { end - trainer.step } else { every.min(end - trainer.step) };
        let hist = step_fn(trainer, chunk)?;
        last = hist.last().map(|r| r.total).or(last);
        if every > 0 && trainer.step < end {
            save(&out.join("checkpoints").join(format!("step_{:07}", trainer.step)), trainer)?;
        }
    }
    let final_dir = out.join("checkpoint");
    save(&final_dir, trainer)?;
    Ok(TrainSummary { steps: trainer.step, total_steps: total, final_loss: last, checkpoint: final_dir })
}

/// Single-agent streaming training. With `resume`, parameters, optimizer
/// moments and the step counter continue from that checkpoint.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<usize>,
    force: bool,
) -> Result<TrainSummary> {
    let (model, mut trainer) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.manifest.kind != CheckpointKind::SingleAgent {
                bail!("{} is a multi-agent checkpoint", p.display());
            }
            let model = ck.model()?;
            let mut trainer = Trainer::new(cfg.train.clone())?;
            trainer.step = ck.manifest.step;
            if let Some(opt) = ck.optimizer.clone() {
                trainer.opt = opt;
            }
            (model, trainer)
        }
        None => (SeamModel::new(cfg.model.clone(), cfg.seed, cfg.precision.dtype())?, Trainer::new(cfg.train.clone())?),
    };
    prepare_out_dir(out, force)?;
    let mut snap = cfg.clone();
    snap.model = model.cfg.clone();
    snap.snapshot(out)?;
    let scenarios = dataset::load_scenarios(data_dir)?;
    let data = dataset::streams(&model, &scenarios, &cfg.eval.protocol, cfg.eval.workers)?;
    let mut logger = step_logger(&out.join("train_log.jsonl"))?;
    let summary = run_chunks(
        &mut trainer,
        data.len(),
        max_steps,
        cfg.checkpoint_every,
        out,
        |t, n| Ok(train::train_stream(&model, &data, t, n, &mut logger)?),
        |dir, t| Ok(checkpoint::save_model(dir, &model, t.step, Some(&t.opt))?),
    )?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Multi-agent fine-tuning from a single-agent checkpoint (or resumed from a
/// multi-agent one).
pub fn train_ma(cfg: &RunConfig, data_dir: &Path, init: &Path, out: &Path, max_steps: Option<usize>, force: bool) -> Result<TrainSummary> {
    let ck = Checkpoint::load(init)?;
    let ma_cfg = match ck.manifest.kind {
        CheckpointKind::SingleAgent => cfg.multi_agent.clone(),
        CheckpointKind::MultiAgent => ck.manifest.multi_agent.clone().unwrap_or_default(),
    };
    let model = ck.multi_agent_model(Some(ma_cfg), cfg.seed)?;
    let tcfg: TrainConfig = cfg.train.multi_agent();
    let mut trainer = Trainer::new(tcfg)?;
    if ck.manifest.kind == CheckpointKind::MultiAgent {
        trainer.step = ck.manifest.step;
        if let Some(opt) = ck.optimizer.clone() {
            trainer.opt = opt;
        }
    }
    prepare_out_dir(out, force)?;
    let mut snap = cfg.clone();
    snap.model = model.marginal.cfg.clone();
    snap.multi_agent = model.cfg.clone();
    snap.snapshot(out)?;
    let scenarios = dataset::load_scenarios(data_dir)?;
    let data = dataset::agent_streams(&model.marginal, &scenarios, &cfg.eval.protocol, model.cfg.all_agents)?;
    let mut logger = step_logger(&out.join("train_log.jsonl"))?;
    let summary = run_chunks(
        &mut trainer,
        data.len(),
        max_steps,
        cfg.checkpoint_every,
        out,
        |t, n| Ok(multiagent::train_multi_agent(&model, &data, t, n, &mut logger)?),
        |dir, t| Ok(checkpoint::save_multi_agent(dir, &model, t.step, Some(&t.opt))?),
    )?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Splits `data` over `workers` threads and merges the accumulators.
pub fn evaluate_parallel(
    model: &SeamModel,
    data: &[Vec<StreamFrame>],
    mode: EvalMode,
    opts: &ForwardOptions,
    batch_size: usize,
    workers: usize,
) -> Result<(MetricReport, Vec<PredictionRecord>)> {
    if data.is_empty() {
        bail!("evaluation set is empty");
    }
    let chunk = data.len().div_ceil(workers.max(1));
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = data.chunks(chunk).map(|c| s.spawn(move || evaluate::accumulate(model, c, mode, opts, batch_size))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut acc = MetricAccumulator::new(true);
    let mut records = Vec::new();
    for p in parts {
        let (a, r) = p?;
        acc.merge(a);
        records.extend(r);
    }
    Ok((acc.finish(), records))
}

pub fn report_table(report: &MetricReport) -> String {
    let headers = vec!["metric".to_string(), "value".to_string(), "samples".to_string()];
    let rows: Vec<Vec<String>> = report
        .metrics
        .iter()
        .map(|(k, v)| vec![k.clone(), format!("{v:.4}"), report.counts.get(k).map_or(String::new(), |c| c.to_string())])
        .collect();
    render_table(&headers, &rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    /// Timestamp of the evaluated window of every scenario.
    pub t_now: Vec<(String, u32)>,
    pub report: MetricReport,
    pub world_report: Option<MetricReport>,
}

fn load_marginal(path: &Path) -> Result<(Checkpoint, SeamModel)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

/// Evaluates the final window of every scenario in stream or snapshot mode
/// and writes the report, the table and the prediction log. Multi-agent
/// checkpoints also get world metrics.
pub fn eval(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, mode: EvalMode, out: &Path, force: bool) -> Result<EvalSummary> {
    let (ck, model) = load_marginal(ckpt)?;
    let scenarios = dataset::load_scenarios(data_dir)?;
    if scenarios.is_empty() {
        bail!("dataset {} has no scenarios", data_dir.display());
    }
    prepare_out_dir(out, force)?;
    let mut snap = cfg.clone();
    snap.model = model.cfg.clone();
    snap.snapshot(out)?;
    let data = dataset::streams(&model, &scenarios, &cfg.eval.protocol, cfg.eval.workers)?;
    let (report, records) = evaluate_parallel(&model, &data, mode, &ForwardOptions::default(), cfg.eval.batch_size, cfg.eval.workers)?;
    let t_now = data.iter().map(|s| (s[0].bundle.scenario_id.clone(), s.last().expect("non-empty").t_now)).collect();
    write_jsonl(&out.join("predictions.jsonl"), &records)?;
    std::fs::write(out.join("metrics.txt"), report_table(&report))?;
    let world_report = if ck.manifest.kind == CheckpointKind::MultiAgent {
        let ma = ck.multi_agent_model(None, cfg.seed)?;
        let streams = dataset::agent_streams(&model, &scenarios, &cfg.eval.protocol, ma.cfg.all_agents)?;
        let (wr, worlds) = multiagent::evaluate_worlds(&ma, &streams, cfg.eval.batch_size)?;
        write_jsonl(&out.join("worlds.jsonl"), &worlds)?;
        std::fs::write(out.join("world_metrics.txt"), report_table(&wr))?;
        Some(wr)
    } else {
        None
    };
    let summary = EvalSummary { mode, t_now, report, world_report };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

/// Runs the given harnesses from one checkpoint; writes one table per harness.
pub fn sweep(
    cfg: &RunConfig,
    ckpt: &Path,
    data_dir: &Path,
    harnesses: &[Harness],
    out: &Path,
    force: bool,
) -> Result<Vec<(Harness, Vec<SweepRow>)>> {
    let (_, model) = load_marginal(ckpt)?;
    let scenarios = dataset::load_scenarios(data_dir)?;
    prepare_out_dir(out, force)?;
    let mut snap = cfg.clone();
    snap.model = model.cfg.clone();
    snap.sweep = harnesses.iter().map(|&h| cfg.grid(h)).collect();
    snap.snapshot(out)?;
    let data = dataset::streams(&model, &scenarios, &cfg.eval.protocol, cfg.eval.workers)?;
    let mut all = Vec::new();
    for &h in harnesses {
        let rows = evaluate::sweep(&model, &cfg.grid(h), &data, cfg.eval.batch_size)?;
        let name = serde_json::to_value(h)?.as_str().unwrap_or("sweep").to_string();
        std::fs::write(out.join(format!("{name}.txt")), evaluate::sweep_table(h, &rows))?;
        write_json(&out.join(format!("{name}.json")), &rows)?;
        all.push((h, rows));
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub online_median_ms: f64,
    pub online_p95_ms: f64,
    pub offline_median_ms: f64,
    pub offline_p95_ms: f64,
    pub ratio: f64,
    /// Cross-attention invocations of one forward with previous state.
    pub cross_calls_with_state: usize,
    /// Same, for the first window of a stream.
    pub cross_calls_first_window: usize,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Batched windows of `b` synthetic streams; built once, outside timing.
fn bench_batches(model: &SeamModel, cfg: &RunConfig, b: usize) -> Result<Vec<Batch>> {
    let window = model.window_config();
    let scenarios: Vec<Scenario> = (0..b)
        .map(|i| {
            let t = cfg.generate.templates[i % cfg.generate.templates.len()];
            let mut spec = GeneratorSpec::new(t, 0);
            spec.n_agents = cfg.generate.n_agents;
            Ok(generate_with_windows(dataset::scenario_seed(cfg.seed, i), &spec, &window)?)
        })
        .collect::<Result<_>>()?;
    let data = dataset::streams(model, &scenarios, &cfg.eval.protocol, cfg.eval.workers)?;
    let n = data[0].len();
    (0..n)
        .map(|f| {
            let bundles: Vec<_> = data.iter().map(|s| &s[f].bundle).collect();
            Ok(model.batch(&bundles)?)
        })
        .collect()
}

/// Online latency is one forward with previous state; offline latency runs
/// the whole stream from scratch. Data preparation is excluded.
pub fn bench_model(model: &SeamModel, cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let ctx = Ctx::eval();
    let opts = ForwardOptions::default();
    let mut rows = Vec::new();
    for &b in &cfg.bench.batch_sizes {
        let batches = bench_batches(model, cfg, b)?;
        let last = batches.len() - 1;
        let mut state: Option<StreamState> = None;
        let mut first_calls = 0;
        for (f, batch) in batches[..last].iter().enumerate() {
            let o = model.forward(batch, state.as_ref(), &opts, &ctx)?;
            if f == 0 {
                first_calls = o.decoder_cross_calls;
            }
            state = Some(StreamState::capture(batch, &o, true));
        }
        let prev = state;
        let (mut online, mut offline) = (Vec::new(), Vec::new());
        let mut with_state_calls = 0;
        for rep in 0..cfg.bench.warmup + cfg.bench.repetitions {
            let t = Instant::now();
            let o = model.forward(&batches[last], prev.as_ref(), &opts, &ctx)?;
            let on = t.elapsed().as_secs_f64() * 1e3;
            with_state_calls = o.decoder_cross_calls;
            drop(o);
            let t = Instant::now();
            let mut st: Option<StreamState> = None;
            for batch in &batches {
                let o = model.forward(batch, st.as_ref(), &opts, &ctx)?;
                st = Some(StreamState::capture(batch, &o, true));
            }
            let off = t.elapsed().as_secs_f64() * 1e3;
            if rep >= cfg.bench.warmup {
                online.push(on);
                offline.push(off);
            }
        }
        let (on_med, off_med) = (median(&online), median(&offline));
        rows.push(BenchRow {
            batch_size: b,
            online_median_ms: on_med,
            online_p95_ms: percentile(&online, 95.0),
            offline_median_ms: off_med,
            offline_p95_ms: percentile(&offline, 95.0),
            ratio: off_med / on_med,
            cross_calls_with_state: with_state_calls,
            cross_calls_first_window: if last == 0 { with_state_calls } else { first_calls },
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let headers: Vec<String> = ["B", "online med ms", "online p95 ms", "offline med ms", "offline p95 ms", "offline/online", "cross-attn"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.batch_size.to_string(),
                format!("{:.2}", r.online_median_ms),
                format!("{:.2}", r.online_p95_ms),
                format!("{:.2}", r.offline_median_ms),
                format!("{:.2}", r.offline_p95_ms),
                format!("{:.2}", r.ratio),
                format!("{}/{}", r.cross_calls_with_state, r.cross_calls_first_window),
            ]
        })
        .collect();
    render_table(&headers, &body)
}

/// Latency benchmark of a checkpoint, or of a freshly initialized model of
/// the configured shape when no checkpoint is given.
pub fn bench(cfg: &RunConfig, ckpt: Option<&Path>, out: &Path, force: bool) -> Result<Vec<BenchRow>> {
    let model = match ckpt {
        Some(p) => load_marginal(p)?.1,
        None => SeamModel::new(cfg.model.clone(), cfg.seed, cfg.precision.dtype())?,
    };
    prepare_out_dir(out, force)?;
    let mut snap = cfg.clone();
    snap.model = model.cfg.clone();
    snap.snapshot(out)?;
    let rows = bench_model(&model, cfg)?;
    std::fs::write(out.join("bench.txt"), bench_table(&rows))?;
    write_json(&out.join("bench.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorDump<'a> {
    pub scenario_id: &'a str,
    pub t_now: u32,
    pub focal_track_id: &'a str,
    pub bundle: &'a TensorBundle,
    pub targets: &'a FutureTargets,
}

/// Tensorizes one window and writes it as pretty-printed JSON. `t_now`
/// defaults to the final scheduled window.
pub fn dump_tensors(cfg: &RunConfig, scenario: &Path, t_now: Option<u32>, focal: Option<&str>, out: &Path) -> Result<()> {
    let sc = load_scenario(scenario)?;
    let window = seam_core::WindowConfig { t_h: cfg.model.t_h as u32, t_f: cfg.model.t_f as u32, t_a: cfg.model.t_a as u32 };
    let t = match t_now {
        Some(t) => t,
        None => *streaming_schedule(&sc, &cfg.eval.protocol, &window)?.last().expect("schedule is never empty"),
    };
    let mut w = extract_window(&sc, t, &window)?;
    if let Some(id) = focal {
        w = w.with_focal(id);
    }
    let tcfg = seam_core::TensorizeConfig { lane_points: cfg.model.p_l, ..Default::default() };
    let (bundle, targets) = tensorize(&w, &tcfg)?;
    let dump = TensorDump { scenario_id: &sc.id, t_now: t, focal_track_id: &w.focal_track_id, bundle: &bundle, targets: &targets };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_json(out, &dump)
}

/// Resolves a scenario file from a dataset directory and id.
pub fn find_scenario(data_dir: &Path, id: &str) -> Result<PathBuf> {
    let index = dataset::load_index(data_dir)?;
    let e = index.scenarios.iter().find(|e| e.id == id).with_context(|| format!("scenario {id} not in {}", data_dir.display()))?;
    Ok(dataset::scenario_path(data_dir, e))
}
