mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seam_core::generator::Template;
use seam_core::{extract_window, streaming_schedule, Pose2D, Protocol};
use seam_model::multiagent::*;
use seam_model::optim::TrainConfig;
use seam_model::train::Trainer;
use seam_model::Ctx;

fn ma_model(seed: u64, naive: bool) -> MultiAgentModel {
    let marginal = random_model(tiny_cfg(16), seed, DType::F64);
    let cfg = MultiAgentConfig { mode_blocks: 1, agent_blocks: 1, naive_worlds: naive, ..Default::default() };
    let m = MultiAgentModel::new(marginal, cfg, seed + 10).unwrap();
    m.params.randomize(seed + 20, 0.2).unwrap();
    m
}

fn world_input(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, t_f: usize) -> WorldInput {
    let q: Vec<f64> = (0..n * k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base: Vec<f64> = (0..n * k * t_f * 2).map(|_| rng.random_range(-20.0..20.0)).collect();
    let base_probs = (0..n)
        .map(|_| {
            let mut p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            p.sort_by(|a, b| b.partial_cmp(a).unwrap());
            p
        })
        .collect();
    let poses =
        (0..n).map(|_| Pose2D::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-3.0..3.0))).collect();
    let categories = (0..n)
        .map(|i| {
            if i == 0 {
                AgentCategory::Focal
            } else if rng.random_bool(0.5) {
                AgentCategory::Driving
            } else {
                AgentCategory::Parked
            }
        })
        .collect();
    WorldInput {
        q: Tensor::from_vec(q, (n, k, d), &Device::Cpu).unwrap(),
        base: Tensor::from_vec(base, (n, k, t_f, 2), &Device::Cpu).unwrap(),
        base_probs,
        poses,
        categories,
    }
}

fn permute(input: &WorldInput, perm: &[usize]) -> WorldInput {
    let idx = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), perm.len(), &Device::Cpu).unwrap();
    WorldInput {
        q: input.q.index_select(&idx, 0).unwrap(),
        base: input.base.index_select(&idx, 0).unwrap(),
        base_probs: perm.iter().map(|&i| input.base_probs[i].clone()).collect(),
        poses: perm.iter().map(|&i| input.poses[i]).collect(),
        categories: perm.iter().map(|&i| input.categories[i]).collect(),
    }
}

#[test]
fn consistency_shapes_and_world_simplex() {
    let m = ma_model(1, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1, 2, 5] {
        let input = world_input(&mut rng, n, 3, 16, m.marginal.cfg.t_f);
        let (traj, logits) = m.consistency.forward(&input, false, &Ctx::eval()).unwrap();
        assert_eq!(traj.dims(), &[3, n, m.marginal.cfg.t_f, 2]);
        assert_eq!(logits.dims(), &[3]);
        let l = to_vec(&logits);
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        let p: Vec<f64> = l.iter().map(|x| x.exp() / z).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn agent_permutation_permutes_worlds() {
    let m = ma_model(2, false);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = world_input(&mut rng, 4, 3, 16, m.marginal.cfg.t_f);
    let perm = [2, 0, 3, 1];
    let (ta, la) = m.consistency.forward(&input, false, &Ctx::eval()).unwrap();
    let (tb, lb) = m.consistency.forward(&permute(&input, &perm), false, &Ctx::eval()).unwrap();
    assert!(max_abs_diff(&to_vec(&la), &to_vec(&lb)) < 1e-9);
    let idx = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), 4, &Device::Cpu).unwrap();
    let ta_perm = ta.index_select(&idx, 1).unwrap();
    assert!(max_abs_diff(&to_vec(&ta_perm), &to_vec(&tb)) < 1e-9);
}

#[test]
fn naive_worlds_stack_sorted_marginal_modes() {
    let m = ma_model(3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = world_input(&mut rng, 3, 3, 16, m.marginal.cfg.t_f);
    let (traj, logits) = m.consistency.forward(&input, true, &Ctx::eval()).unwrap();
    let expect = input.base.permute((1, 0, 2, 3)).unwrap().contiguous().unwrap();
    assert_eq!(to_vec(&traj), to_vec(&expect));
    let l = to_vec(&logits);
    let z: f64 = l.iter().map(|x| x.exp()).sum();
    for k in 0..3 {
        let mean = input.base_probs.iter().map(|p| p[k]).sum::<f64>() / 3.0;
        assert!((l[k].exp() / z - mean).abs() < 1e-12);
    }
}

#[test]
fn untrained_residual_head_keeps_marginal_modes() {
    // the trajectory head starts at zero, so fresh worlds equal the stacked modes
    let marginal = random_model(tiny_cfg(16), 4, DType::F64);
    let m = MultiAgentModel::new(marginal, MultiAgentConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = world_input(&mut rng, 2, 3, 16, m.marginal.cfg.t_f);
    let (traj, _) = m.consistency.forward(&input, false, &Ctx::eval()).unwrap();
    let expect = input.base.permute((1, 0, 2, 3)).unwrap().contiguous().unwrap();
    assert!(max_abs_diff(&to_vec(&traj), &to_vec(&expect)) < 1e-12);
}

#[test]
fn marginal_batch_matches_single_agent_forwards() {
    let m = ma_model(6, false);
    let sc = scenario(31, Template::Intersection, 6);
    let window = m.marginal.window_config();
    let t = *streaming_schedule(&sc, &Protocol::Av2Like, &window).unwrap().last().unwrap();
    let w = extract_window(&sc, t, &window).unwrap();
    let mut ids: Vec<String> = sc.tracks.iter().filter(|tr| tr.valid_at(t).is_some()).map(|tr| tr.id.clone()).take(4).collect();
    let a = marginal_batch(&m.marginal, &w, &ids).unwrap();
    ids.reverse();
    let b = marginal_batch(&m.marginal, &w, &ids).unwrap();
    assert_eq!(a.agent_ids, b.agent_ids);
    let mut sorted = a.agent_ids.clone();
    sorted.sort();
    assert_eq!(a.agent_ids, sorted);
    let tcfg = m.marginal.tensorize_config();
    for (i, id) in a.agent_ids.iter().enumerate() {
        let (bundle, _) = seam_core::tensorize(&w.with_focal(id), &tcfg).unwrap();
        let single = m.marginal.predict(&bundle).unwrap();
        let flat = |p: &seam_model::Prediction| p.trajectories.iter().flatten().flatten().copied().collect::<Vec<f64>>();
        assert!(max_abs_diff(&flat(&single), &flat(&a.predictions[i])) < 1e-10);
        assert!(max_abs_diff(&single.probabilities, &a.predictions[i].probabilities) < 1e-10);
    }
}

#[test]
fn single_agent_scene_and_world_prediction_layout() {
    let m = ma_model(7, false);
    let sc = scenario(32, Template::PedestrianCrossing, 5);
    let s = AgentStreams::build(&sc, &Protocol::Av2Like, &m.marginal, false).unwrap();
    assert!(s.agent_ids.contains(&sc.focal_track_id));
    let preds = m.predict(&[&s]).unwrap();
    let wp = &preds[0];
    assert_eq!(wp.trajectories.len(), 3);
    assert!(wp.trajectories.iter().all(|w| w.len() == s.len() && w.iter().all(|t| t.len() == m.marginal.cfg.t_f)));
    assert!((wp.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let focal = s.agent_ids.iter().position(|id| *id == s.focal_id).unwrap();
    assert_eq!(wp.categories[focal], AgentCategory::Focal);

    // a one-agent scene still yields K worlds
    let only = AgentStreams { agent_ids: vec![s.agent_ids[focal].clone()], streams: vec![s.streams[focal].clone()], ..s.clone() };
    let p1 = m.predict(&[&only]).unwrap();
    assert_eq!(p1[0].trajectories.len(), 3);
    assert_eq!(p1[0].trajectories[0].len(), 1);
}

#[test]
fn world_loss_matches_hand_computation() {
    // two worlds, one agent with two steps; world 1 is closer to the truth
    let traj = Tensor::from_vec(vec![5.0, 0.0, 5.0, 0.0, 0.5, 0.0, 3.0, 0.0], (2, 1, 2, 2), &Device::Cpu).unwrap();
    let logits = Tensor::from_vec(vec![0.3, -0.2], 2, &Device::Cpu).unwrap();
    let gts = vec![vec![[0.0, 0.0], [1.0, 0.0]]];
    let masks = vec![vec![true, true]];
    let (reg, cls, w) = loss_world(&traj, &logits, &gts, &masks, 1.0).unwrap().unwrap();
    assert_eq!(w, 1);
    // Huber: 0.5*0.5^2 = 0.125 and 2.0 - 0.5 = 1.5 over 4 coordinates
    let expect_reg = (0.125 + 1.5) / 4.0;
    assert!((reg.to_scalar::<f64>().unwrap() - expect_reg).abs() < 1e-12);
    let lse = (0.3f64.exp() + (-0.2f64).exp()).ln();
    assert!((cls.to_scalar::<f64>().unwrap() - (lse + 0.2)).abs() < 1e-12);
    // no valid ground truth gives no world loss
    assert!(loss_world(&traj, &logits, &gts, &[vec![false, false]], 1.0).unwrap().is_none());
}

#[test]
fn frozen_encoders_stay_bit_identical() {
    let m = ma_model(8, false);
    let data: Vec<AgentStreams> = (0..2)
        .map(|i| AgentStreams::build(&scenario(40 + i, Template::CarFollowing, 4), &Protocol::Av2Like, &m.marginal, false).unwrap())
        .collect();
    let snapshot = |prefixes: &[&str]| -> Vec<(String, Vec<f64>)> {
        m.marginal
            .params
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, v)| (n.clone(), to_vec(v.as_tensor())))
            .collect()
    };
    let enc = seam_model::model::ENCODER_PREFIXES;
    let before = snapshot(&enc);
    assert!(!before.is_empty());
    let head_before = snapshot(&["traj_head"]);
    let tc = TrainConfig { epochs: 2, warmup_epochs: 0, batch_size: 2, freeze_encoders_ma: true, ..Default::default() };
    let mut tr = Trainer::new(tc).unwrap();
    let recs = seam_model::multiagent::train_multi_agent(&m, &data, &mut tr, usize::MAX, |_| {}).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(before, snapshot(&enc));
    if !head_before.is_empty() {
        assert_ne!(head_before, snapshot(&["traj_head"]));
    }
}
