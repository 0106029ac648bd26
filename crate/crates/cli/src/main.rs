use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use seam_cli::commands;
use seam_cli::config::RunConfig;
use seam_cli::plot;
use seam_model::evaluate::{EvalMode, Harness, PredictionRecord};
use std::path::PathBuf;

/// Streaming trajectory prediction: data generation, training, evaluation,
/// ablation sweeps, latency benchmarks and plots.
#[derive(Parser)]
#[command(name = "seam", version)]
struct Cli {
    /// TOML run configuration; defaults are used for missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Seed override; falls back to the SEAM_SEED environment variable, then
    /// to the config file.
    #[arg(long, global = true, env = "SEAM_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stream,
    Snapshot,
}

#[derive(Clone, Copy, ValueEnum)]
enum HarnessArg {
    StreamingMechanisms,
    TargetRadius,
    EndpointNoise,
    EncoderDepth,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic scenarios and an index file.
    Generate,
    /// Single-agent streaming training.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint (parameters, optimizer, step).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Multi-agent fine-tuning initialized from a checkpoint.
    TrainMa {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Metrics at the final window in stream or snapshot mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "stream")]
        mode: ModeArg,
        /// Scenario-level worker threads (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Ablation tables from one checkpoint.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        harness: HarnessArg,
    },
    /// Online and offline forward latency per batch size.
    Bench {
        /// Defaults to a freshly initialized model of the configured shape.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated batch sizes (overrides the config).
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Worker threads for preparing the benchmark data.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// SVG panels of one scenario from a prediction log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario: String,
    },
    /// Tensorize one window and write it as JSON (to `--out`, a file path).
    DumpTensors {
        /// Scenario file, or a dataset directory together with --scenario.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        t_now: Option<u32>,
        /// Agent used as focal agent instead of the scenario's.
        #[arg(long)]
        focal: Option<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::Generate => {
            let index = commands::generate(&cfg, out, cli.force)?;
            println!("wrote {} scenarios to {}", index.scenarios.len(), out.display());
        }
        Cmd::Train { data, resume, max_steps } => {
            let s = commands::train(&cfg, &data, out, resume.as_deref(), max_steps, cli.force)?;
            println!("{} of {} steps; checkpoint {}", s.steps, s.total_steps, s.checkpoint.display());
        }
        Cmd::TrainMa { data, init, max_steps } => {
            let s = commands::train_ma(&cfg, &data, &init, out, max_steps, cli.force)?;
            println!("{} of {} steps; checkpoint {}", s.steps, s.total_steps, s.checkpoint.display());
        }
        Cmd::Eval { checkpoint, data, mode, workers } => {
            if let Some(w) = workers {
                cfg.eval.workers = w;
            }
            cfg.validate()?;
            let mode = match mode {
                ModeArg::Stream => EvalMode::Stream,
                ModeArg::Snapshot => EvalMode::Snapshot,
            };
            let s = commands::eval(&cfg, &checkpoint, &data, mode, out, cli.force)?;
            print!("{}", commands::report_table(&s.report));
            if let Some(w) = &s.world_report {
                print!("{}", commands::report_table(w));
            }
        }
        Cmd::Sweep { checkpoint, data, harness } => {
            let hs = match harness {
                HarnessArg::StreamingMechanisms => vec![Harness::StreamingMechanisms],
                HarnessArg::TargetRadius => vec![Harness::TargetRadius],
                HarnessArg::EndpointNoise => vec![Harness::EndpointNoise],
                HarnessArg::EncoderDepth => vec![Harness::EncoderDepth],
                HarnessArg::All => {
                    vec![Harness::StreamingMechanisms, Harness::TargetRadius, Harness::EndpointNoise, Harness::EncoderDepth]
                }
            };
            for (h, rows) in commands::sweep(&cfg, &checkpoint, &data, &hs, out, cli.force)? {
                println!("{}", seam_model::evaluate::sweep_table(h, &rows));
            }
        }
        Cmd::Bench { checkpoint, batch_sizes, repetitions, workers } => {
            if let Some(b) = batch_sizes {
                cfg.bench.batch_sizes = b;
            }
            if let Some(r) = repetitions {
                cfg.bench.repetitions = r;
            }
            if let Some(w) = workers {
                cfg.eval.workers = w;
            }
            cfg.validate()?;
            let rows = commands::bench(&cfg, checkpoint.as_deref(), out, cli.force)?;
            print!("{}", commands::bench_table(&rows));
        }
        Cmd::Plot { log, data, scenario } => {
            let records: Vec<PredictionRecord> = commands::read_jsonl(&log)?;
            let sc = seam_core::load_scenario(commands::find_scenario(&data, &scenario)?)?;
            for f in plot::plot(&records, &sc, cfg.model.t_h, cfg.model.t_f, out)? {
                println!("{}", f.display());
            }
        }
        Cmd::DumpTensors { input, scenario, t_now, focal } => {
            let path = match scenario {
                Some(id) => commands::find_scenario(&input, &id)?,
                None => input,
            };
            commands::dump_tensors(&cfg, &path, t_now, focal.as_deref(), out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
