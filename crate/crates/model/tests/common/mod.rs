#![allow(dead_code)]

use candle_core::DType;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seam_core::generator::{generate_synthetic, GeneratorSpec, Template};
use seam_core::{Pose2D, Protocol, Scenario, TensorBundle};
use seam_model::stream::{stream_frames, StreamFrame};
use seam_model::{ModelConfig, SeamModel};

pub fn tiny_cfg(d: usize) -> ModelConfig {
    ModelConfig { d_model: d, n_heads: 2, dropout: 0.0, blocks_fa: 1, blocks_fs: 1, blocks_ft: 1, k_modes: 3, ..Default::default() }
}

/// A model whose heads are not zero-initialized, so every branch matters.
pub fn random_model(cfg: ModelConfig, seed: u64, dtype: DType) -> SeamModel {
    let m = SeamModel::new(cfg, seed, dtype).unwrap();
    m.params.randomize(seed + 1, 0.2).unwrap();
    m
}

pub fn scenario(seed: u64, template: Template, n_agents: u32) -> Scenario {
    generate_synthetic(seed, &GeneratorSpec::new(template, n_agents)).unwrap()
}

pub fn frames(model: &SeamModel, sc: &Scenario) -> Vec<StreamFrame> {
    stream_frames(sc, &Protocol::Av2Like, &model.window_config(), &model.tensorize_config()).unwrap()
}

pub const TEMPLATES: [Template; 6] = [
    Template::Straight,
    Template::Curve,
    Template::Intersection,
    Template::CarFollowing,
    Template::UnprotectedTurn,
    Template::PedestrianCrossing,
];

/// Random bundle with `n_a` agents (focal first) and `n_l` lanes.
pub fn random_bundle(rng: &mut ChaCha8Rng, id: &str, t_now: u32, n_a: usize, n_l: usize, cfg: &ModelConfig) -> TensorBundle {
    let (t_h, p_l) = (cfg.t_h, cfg.p_l);
    let mut agents = Array3::<f64>::zeros((n_a, t_h, 5));
    for i in 0..n_a {
        let first = if i == 0 { 0 } else { rng.random_range(0..t_h) };
        for t in first..t_h {
            agents[[i, t, 0]] = rng.random_range(-30.0..30.0);
            agents[[i, t, 1]] = rng.random_range(-30.0..30.0);
            agents[[i, t, 2]] = rng.random_range(-5.0..5.0);
            agents[[i, t, 3]] = rng.random_range(-5.0..5.0);
            agents[[i, t, 4]] = 1.0;
        }
    }
    let mut lanes = Array3::<f64>::zeros((n_l, p_l, 3));
    for i in 0..n_l {
        for p in 0..p_l {
            lanes[[i, p, 0]] = rng.random_range(-10.0..10.0);
            lanes[[i, p, 1]] = rng.random_range(-10.0..10.0);
            lanes[[i, p, 2]] = 1.0;
        }
    }
    let pose = |rng: &mut ChaCha8Rng| [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(-3.1..3.1)];
    let mut agent_poses = Array2::<f64>::zeros((n_a, 3));
    for i in 1..n_a {
        let p = pose(rng);
        agent_poses.row_mut(i).assign(&ndarray::arr1(&p));
    }
    let mut lane_poses = Array2::<f64>::zeros((n_l, 3));
    for i in 0..n_l {
        let p = pose(rng);
        lane_poses.row_mut(i).assign(&ndarray::arr1(&p));
    }
    TensorBundle {
        scenario_id: id.into(),
        t_now,
        agents,
        lanes,
        agent_poses,
        lane_poses,
        agent_types: (0..n_a).map(|_| rng.random_range(0..cfg.n_agent_types as u32)).collect(),
        lane_types: (0..n_l).map(|_| rng.random_range(0..cfg.n_lane_types as u32)).collect(),
        agent_mask: vec![true; n_a],
        lane_mask: vec![true; n_l],
        agent_ids: (0..n_a).map(|i| if i == 0 { "focal".into() } else { format!("a{i}") }).collect(),
        focal_index: 0,
        focal_pose: Pose2D::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-3.1..3.1)),
        degenerate_lanes: 0,
    }
}

pub fn to_vec(t: &candle_core::Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
