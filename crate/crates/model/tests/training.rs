mod common;

use candle_core::DType;
use common::*;
use seam_model::checkpoint::{save_model, save_multi_agent, Checkpoint};
use seam_model::multiagent::{MultiAgentConfig, MultiAgentModel};
use seam_model::optim::{lr_schedule, TrainConfig};
use seam_model::train::{epoch_order, steps_per_epoch, train_stream, Trainer};
use seam_model::SeamModel;

fn data(model: &SeamModel, n: u64) -> Vec<Vec<seam_model::stream::StreamFrame>> {
    (0..n).map(|i| frames(model, &scenario(60 + i, TEMPLATES[i as usize % 6], 4))).collect()
}

fn params_of(model: &SeamModel) -> Vec<(String, Vec<f64>)> {
    model.params.iter().map(|(n, v)| (n.clone(), to_vec(v.as_tensor()))).collect()
}

#[test]
fn schedule_hits_its_anchor_points() {
    let cfg = TrainConfig { epochs: 10, warmup_epochs: 2, ..Default::default() };
    let spe = 7;
    assert_eq!(lr_schedule(0, spe, &cfg), 1e-5);
    assert!((lr_schedule(2 * spe, spe, &cfg) - 1e-2).abs() < 1e-15);
    assert!((lr_schedule(10 * spe - 1, spe, &cfg) - 1e-5).abs() < 1e-15);
    // warmup is linear
    let mid = lr_schedule(spe, spe, &cfg);
    assert!((mid - (1e-5 + 1e-2) / 2.0).abs() < 1e-15);
    // decay is monotone
    let lrs: Vec<f64> = (2 * spe..10 * spe).map(|s| lr_schedule(s, spe, &cfg)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn epoch_orders_are_permutations_and_reproducible() {
    let a = epoch_order(10, 3, 1);
    let mut s = a.clone();
    s.sort();
    assert_eq!(s, (0..10).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(10, 3, 1));
    assert_ne!(a, epoch_order(10, 3, 2));
    assert_eq!(steps_per_epoch(10, 4), 3);
}

#[test]
fn invalid_training_config_is_rejected() {
    assert!(Trainer::new(TrainConfig { warmup_epochs: 80, ..Default::default() }).is_err());
    assert!(Trainer::new(TrainConfig { batch_size: 0, ..Default::default() }).is_err());
    assert!(Trainer::new(TrainConfig { lr_peak: f64::NAN, ..Default::default() }).is_err());
}

#[test]
fn loss_decreases_and_gradients_are_clipped() {
    let model = SeamModel::new(tiny_cfg(16), 1, DType::F64).unwrap();
    let d = data(&model, 4);
    let tc = TrainConfig { epochs: 30, warmup_epochs: 3, batch_size: 4, lr_peak: 3e-3, grad_clip_norm: 1.0, ..Default::default() };
    let mut tr = Trainer::new(tc).unwrap();
    let recs = train_stream(&model, &d, &mut tr, usize::MAX, |_| {}).unwrap();
    assert_eq!(recs.len(), 30);
    assert_eq!(recs[0].lr, 1e-5);
    assert!(recs.iter().all(|r| r.clipped_norm <= 1.0 + 1e-9));
    assert!(recs.iter().any(|r| r.grad_norm > 1.0));
    let head = recs[..3].iter().map(|r| r.total).sum::<f64>();
    let tail = recs[27..].iter().map(|r| r.total).sum::<f64>();
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn empty_training_set_is_an_error() {
    let model = SeamModel::new(tiny_cfg(16), 1, DType::F32).unwrap();
    let mut tr = Trainer::new(TrainConfig { epochs: 2, warmup_epochs: 0, ..Default::default() }).unwrap();
    assert!(train_stream(&model, &[], &mut tr, usize::MAX, |_| {}).is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tc = TrainConfig { epochs: 4, warmup_epochs: 1, batch_size: 2, ..Default::default() };
    let straight = SeamModel::new(tiny_cfg(16), 2, DType::F64).unwrap();
    let d = data(&straight, 4);
    let mut tr = Trainer::new(tc.clone()).unwrap();
    train_stream(&straight, &d, &mut tr, usize::MAX, |_| {}).unwrap();
    assert_eq!(tr.step, 8);

    let first = SeamModel::new(tiny_cfg(16), 2, DType::F64).unwrap();
    let mut tr1 = Trainer::new(tc.clone()).unwrap();
    train_stream(&first, &d, &mut tr1, 3, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &first, tr1.step, Some(&tr1.opt)).unwrap();

    let ck = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(ck.manifest.step, 3);
    let resumed = ck.model().unwrap();
    let mut tr2 = Trainer::new(tc).unwrap();
    tr2.opt = ck.optimizer.clone().unwrap();
    tr2.step = ck.manifest.step;
    let recs = train_stream(&resumed, &d, &mut tr2, usize::MAX, |_| {}).unwrap();
    assert_eq!(recs.first().unwrap().step, 3);
    assert_eq!(tr2.step, 8);
    assert_eq!(params_of(&straight), params_of(&resumed));
}

#[test]
fn multi_agent_checkpoint_roundtrip_and_single_agent_init() {
    let marginal = random_model(tiny_cfg(16), 3, DType::F32);
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &marginal, 5, None).unwrap();
    let ck = Checkpoint::load(dir.path()).unwrap();
    let ma = ck.multi_agent_model(None, 9).unwrap();
    assert_eq!(params_of(&ma.marginal), params_of(&marginal));

    let ma = MultiAgentModel::new(marginal, MultiAgentConfig { mode_blocks: 1, ..Default::default() }, 4).unwrap();
    ma.params.randomize(4, 0.1).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_multi_agent(dir2.path(), &ma, 7, None).unwrap();
    let back = Checkpoint::load(dir2.path()).unwrap().multi_agent_model(None, 0).unwrap();
    assert_eq!(back.cfg, ma.cfg);
    let cons = |m: &MultiAgentModel| m.params.iter().map(|(n, v)| (n.clone(), to_vec(v.as_tensor()))).collect::<Vec<_>>();
    assert_eq!(cons(&back), cons(&ma));
    // a single-agent loader ignores the consistency parameters
    let single = Checkpoint::load(dir2.path()).unwrap().model().unwrap();
    assert_eq!(params_of(&single), params_of(&ma.marginal));
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let model = SeamModel::new(tiny_cfg(16), 5, DType::F32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &model, 0, None).unwrap();
    let ck = Checkpoint::load(dir.path()).unwrap();
    let other = SeamModel::new(tiny_cfg(8), 5, DType::F32).unwrap();
    let err = ck.apply(&other.params, None, None).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
    assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
}
