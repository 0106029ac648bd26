use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 7

[model]
d_model = 16
n_heads = 2
blocks_fa = 1
blocks_fs = 1
blocks_ft = 1
k_modes = 3
dropout = 0.0

[train]
epochs = 4
warmup_epochs = 1
batch_size = 4
ma_epochs = 2

[generate]
n_scenarios = 6
n_agents = [4, 6]

[eval]
batch_size = 4

[bench]
batch_sizes = [1, 2]
repetitions = 2
warmup = 1
"#;

struct Ws {
    dir: tempfile::TempDir,
}

impl Ws {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Ws { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_seam"))
            .current_dir(self.dir.path())
            .env_remove("SEAM_SEED")
            .env("RUST_LOG", "warn")
            .arg("--config")
            .arg(self.p("run.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "seam {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).into_owned()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.p(rel)).unwrap()).unwrap()
    }
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

fn bytes_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    files(dir).into_iter().map(|f| (f.clone(), std::fs::read(dir.join(&f)).unwrap())).collect()
}

#[test]
fn generate_is_deterministic_and_guards_the_output_directory() {
    let ws = Ws::new();
    ws.ok(&["--out", "a", "generate"]);
    ws.ok(&["--out", "b", "generate"]);
    let names = files(&ws.p("a"));
    assert_eq!(names.iter().filter(|f| f.ends_with(".json") && *f != "index.json").count(), 6);
    assert!(names.contains(&"index.json".to_string()) && names.contains(&"config.toml".to_string()));
    assert_eq!(bytes_of(&ws.p("a")), bytes_of(&ws.p("b")));

    let o = ws.run(&["--out", "a", "generate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    ws.ok(&["--out", "a", "--force", "--seed", "8", "generate"]);
    let ids = |d: &str| -> Vec<String> {
        ws.json(&format!("{d}/index.json"))["scenarios"].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap().to_string()).collect()
    };
    let (a, b) = (ids("a"), ids("b"));
    assert!(a.iter().all(|id| !b.contains(id)));
}

#[test]
fn seed_from_the_environment_is_used() {
    let ws = Ws::new();
    let o = Command::new(env!("CARGO_BIN_EXE_seam"))
        .current_dir(ws.dir.path())
        .env("SEAM_SEED", "8")
        .arg("--config")
        .arg(ws.p("run.toml"))
        .args(["--out", "e", "generate"])
        .output()
        .unwrap();
    assert!(o.status.success());
    ws.ok(&["--out", "s", "--seed", "8", "generate"]);
    assert_eq!(bytes_of(&ws.p("e")), bytes_of(&ws.p("s")));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Ws::new();
    std::fs::write(ws.p("bad.toml"), "[model]\nd_modle = 3\n").unwrap();
    let o =
        Command::new(env!("CARGO_BIN_EXE_seam")).current_dir(ws.dir.path()).args(["--config", "bad.toml", "generate"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_modle"));
}

#[test]
fn train_resume_eval_plot_and_sweep() {
    let ws = Ws::new();
    ws.ok(&["--out", "data", "generate"]);

    ws.ok(&["--out", "run1", "train", "--data", "data", "--max-steps", "3"]);
    let s1 = ws.json("run1/summary.json");
    assert_eq!(s1["steps"], 3);
    assert_eq!(s1["total_steps"], 8);
    assert_eq!(ws.json("run1/checkpoint/manifest.json")["step"], 3);
    ws.ok(&["--out", "run2", "train", "--data", "data", "--resume", "run1/checkpoint"]);
    assert_eq!(ws.json("run2/summary.json")["steps"], 8);
    let log = std::fs::read_to_string(ws.p("run2/train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![3, 4, 5, 6, 7]);

    ws.ok(&["--out", "ev_stream", "eval", "--checkpoint", "run2/checkpoint", "--data", "data", "--mode", "stream"]);
    ws.ok(&["--out", "ev_snap", "eval", "--checkpoint", "run2/checkpoint", "--data", "data", "--mode", "snapshot", "--workers", "2"]);
    let (a, b) = (ws.json("ev_stream/report.json"), ws.json("ev_snap/report.json"));
    assert_eq!(a["t_now"], b["t_now"]);
    assert_eq!(a["mode"], "stream");
    assert!(a["report"]["metrics"].as_object().unwrap().len() >= 4);
    assert!(std::fs::read_to_string(ws.p("ev_stream/metrics.txt")).unwrap().contains("minADE"));

    // plots: one panel per window, byte-identical across runs
    let id = ws.json("data/index.json")["scenarios"][0]["id"].as_str().unwrap().to_string();
    ws.ok(&["--out", "plots1", "plot", "--log", "ev_stream/predictions.jsonl", "--data", "data", "--scenario", &id]);
    ws.ok(&["--out", "plots2", "plot", "--log", "ev_stream/predictions.jsonl", "--data", "data", "--scenario", &id]);
    let panels = files(&ws.p("plots1"));
    assert_eq!(panels.len(), 3, "{panels:?}");
    assert!(panels.iter().all(|p| p.starts_with(&id) && p.ends_with(".svg")));
    assert_eq!(bytes_of(&ws.p("plots1")), bytes_of(&ws.p("plots2")));
    let o = ws.run(&["--out", "plots3", "plot", "--log", "ev_stream/predictions.jsonl", "--data", "data", "--scenario", "nope"]);
    assert!(!o.status.success());

    ws.ok(&["--out", "sw", "sweep", "--checkpoint", "run2/checkpoint", "--data", "data", "--harness", "target-radius"]);
    let rows = ws.json("sw/target_radius.json");
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn multi_agent_fine_tuning_keeps_encoders_frozen() {
    let ws = Ws::new();
    ws.ok(&["--out", "data", "generate"]);
    ws.ok(&["--out", "sa", "train", "--data", "data", "--max-steps", "2"]);
    ws.ok(&["--out", "ma", "train-ma", "--data", "data", "--init", "sa/checkpoint", "--max-steps", "2"]);
    let sa = seam_model::checkpoint::Checkpoint::load(&ws.p("sa/checkpoint")).unwrap().model().unwrap();
    let ma = seam_model::checkpoint::Checkpoint::load(&ws.p("ma/checkpoint")).unwrap();
    assert_eq!(ma.manifest.step, 2);
    let ma = ma.multi_agent_model(None, 0).unwrap();
    let values = |p: &seam_model::nn::Params| -> Vec<(String, Vec<f32>)> {
        p.iter()
            .filter(|(n, _)| seam_model::model::ENCODER_PREFIXES.iter().any(|e| n.starts_with(e)))
            .map(|(n, v)| (n.clone(), v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect()
    };
    let before = values(&sa.params);
    assert!(!before.is_empty());
    assert_eq!(before, values(&ma.marginal.params));

    ws.ok(&["--out", "ev", "eval", "--checkpoint", "ma/checkpoint", "--data", "data"]);
    assert!(ws.p("ev/worlds.jsonl").exists());
    assert!(ws.json("ev/report.json")["world_report"].is_object());
}

#[test]
fn eval_of_an_empty_dataset_fails() {
    let ws = Ws::new();
    std::fs::create_dir_all(ws.p("empty")).unwrap();
    std::fs::write(ws.p("empty/index.json"), r#"{"seed":0,"scenarios":[]}"#).unwrap();
    let model = seam_model::SeamModel::new(seam_cli::RunConfig::from_toml(TINY).unwrap().model, 0, candle_core::DType::F32).unwrap();
    seam_model::checkpoint::save_model(&ws.p("ck"), &model, 0, None).unwrap();
    let o = ws.run(&["--out", "ev", "eval", "--checkpoint", "ck", "--data", "empty"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no scenarios"));
}

#[test]
fn bench_reports_every_batch_size() {
    let ws = Ws::new();
    let out = ws.ok(&["--out", "b", "bench"]);
    let rows = ws.json("b/bench.json");
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["batch_size"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2]);
    for r in rows {
        assert!(r["online_median_ms"].as_f64().unwrap() > 0.0);
        assert!(r["offline_median_ms"].as_f64().unwrap() > r["online_median_ms"].as_f64().unwrap());
        assert_eq!(r["cross_calls_with_state"], 6);
        assert_eq!(r["cross_calls_first_window"], 3);
    }
    assert!(out.contains("offline/online"));
}

#[test]
fn dump_tensors_writes_the_requested_window() {
    let ws = Ws::new();
    ws.ok(&["--out", "data", "generate"]);
    let entry = ws.json("data/index.json")["scenarios"][2].clone();
    let id = entry["id"].as_str().unwrap();
    ws.ok(&["--out", "dump.json", "dump-tensors", "--input", "data", "--scenario", id, "--t-now", "40"]);
    let d = ws.json("dump.json");
    assert_eq!(d["t_now"], 40);
    assert_eq!(d["scenario_id"], id);
    let agents = &d["bundle"]["agents"];
    assert!(agents.is_object() || agents.is_array());
    let o = ws.run(&["--out", "dump2.json", "dump-tensors", "--input", "data", "--scenario", id, "--focal", "no-such-agent"]);
    assert!(!o.status.success());
}
