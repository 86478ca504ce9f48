mod common;

use common::{random_map, rng, straight_tube, tiny_config};
use iterseg::grid::{Dims, LabelMap, StopFlag};
use iterseg::segnet::{build, net_input, NetMode};
use iterseg::teach::*;
use iterseg::trajgen::TrajParams;
use iterseg::SegError;
use ndnum::{Group, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn prob_tensor(side: usize, fg: &[f64]) -> Tensor {
    let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    data.extend_from_slice(fg);
    Tensor::new(vec![1, 2, side, side], data).unwrap()
}

fn eval_loss(prob: Tensor, stop_p: Option<f64>, target: &LabelMap, stop: bool, w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(prob);
    let s = stop_p.map(|v| tape.leaf(Tensor::scalar(v)));
    let l = step_loss(&mut tape, p, s, target, StopFlag(stop), w, 1.0, 1.0).unwrap();
    tape.value(l).item()
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let target = random_map(&mut rng(1), 6, 0.3);
    let fg: Vec<f64> = target.labels().iter().map(|&l| l as f64).collect();
    let w = loss_weights(&target, StopFlag(true), &LossParams::default(), &TrajParams::default());
    let l = eval_loss(prob_tensor(6, &fg), Some(1.0), &target, true, &w);
    assert!(l.abs() < 1e-12, "{l}");
}

#[test]
fn uniform_prediction_costs_log_two() {
    let target = random_map(&mut rng(2), 6, 0.3);
    let lp = LossParams::default();
    let w = loss_weights(&target, StopFlag(false), &lp, &TrajParams::default());
    let l = eval_loss(prob_tensor(6, &[0.5; 36]), None, &target, false, &w);
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let l = eval_loss(prob_tensor(6, &[0.5; 36]), Some(0.5), &target, false, &w);
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_matches_a_naive_loop() {
    let mut r = rng(3);
    for trial in 0..20 {
        let side = 5;
        let target = random_map(&mut r, side, 0.4);
        let fg: Vec<f64> = (0..side * side).map(|_| r.random_range(0.01..0.99)).collect();
        let stop = trial % 2 == 0;
        let sp: f64 = r.random_range(0.01..0.99);
        let lp = LossParams::default();
        let w = loss_weights(&target, StopFlag(stop), &lp, &TrajParams::default());
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &t) in target.labels().iter().enumerate() {
            let p = if t == 1 { fg[i] } else { 1.0 - fg[i] };
            num += -w.voxel[i] * p.ln();
            den += w.voxel[i];
        }
        let stop_term = -w.stop * if stop { sp.ln() } else { (1.0 - sp).ln() };
        let expected = num / den + stop_term;
        let got = eval_loss(prob_tensor(side, &fg), Some(sp), &target, stop, &w);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
}

#[test]
fn stop_positive_weight_balances_the_mixture() {
    let target = LabelMap::empty(Dims::square(4), 2);
    let traj = TrajParams::default();
    let lp = LossParams::default();
    let pos = loss_weights(&target, StopFlag(true), &lp, &traj).stop;
    let neg = loss_weights(&target, StopFlag(false), &lp, &traj).stop;
    let p = traj.positive_prob;
    assert!((pos - (1.0 - p) / p).abs() < 1e-12);
    assert_eq!(neg, 1.0);
    // expected contributions of both outcomes are equal
    assert!((p * pos - (1.0 - p) * neg).abs() < 1e-12);
    let fixed = LossParams { stop_positive_weight: Some(2.0), ..lp };
    assert_eq!(loss_weights(&target, StopFlag(true), &fixed, &traj).stop, 2.0);
}

proptest! {
    #[test]
    fn class_weight_ratio_is_inverse_frequency(count in 1usize..99) {
        let dims = Dims::new(vec![10, 10]).unwrap();
        let mask: Vec<bool> = (0..100).map(|i| i < count).collect();
        let target = LabelMap::from_mask(dims, &mask).unwrap();
        let lp = LossParams { class_weight_min: 0.0, class_weight_max: f64::INFINITY, ..Default::default() };
        let cw = class_weights(&target, &lp);
        let f = count as f64 / 100.0;
        prop_assert!((cw[1] / cw[0] - (1.0 - f) / f).abs() < 1e-9);
        let half = LossParams { class_balance_power: 0.5, ..lp.clone() };
        let cw = class_weights(&target, &half);
        prop_assert!((cw[1] / cw[0] - ((1.0 - f) / f).sqrt()).abs() < 1e-9);
        let none = LossParams { class_balance_power: 0.0, ..lp };
        prop_assert_eq!(class_weights(&target, &none), vec![1.0, 1.0]);
    }
}

#[test]
fn boundary_band_is_upweighted() {
    let target = common::rect(&Dims::square(9), 2, 7, 2, 7);
    let lp = LossParams { class_balance_power: 0.0, ..Default::default() };
    let w = voxel_weights(&target, &lp);
    assert_eq!(w[0], 1.0);
    assert_eq!(w[4 * 9 + 4], 1.0);
    assert_eq!(w[2 * 9 + 4], lp.boundary_beta);
}

fn group_grads(seg_term: f64, stop_term: f64) -> Vec<(Group, f64)> {
    let cfg = tiny_config();
    let store = build(&cfg, &mut rng(4)).unwrap();
    let img = common::random_image(8, 5);
    let prev = random_map(&mut rng(6), 8, 0.3);
    let target = random_map(&mut rng(7), 8, 0.5);
    let input = net_input(&cfg, &img, Some(&prev), None).unwrap();
    let lp = LossParams { seg_term, stop_term, ..Default::default() };
    let w = loss_weights(&target, StopFlag(true), &lp, &TrajParams::default());
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.leaf(input);
    let (loss, _) = tuple_loss(&mut tape, &bound, &cfg, x, &target, StopFlag(true), &w, &lp).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = store.grads(&bound, &g);
    store
        .iter()
        .map(|p| {
            let n = grads.get(&p.name).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
            (p.group, n)
        })
        .collect()
}

#[test]
fn each_term_only_reaches_its_own_head() {
    for (g, n) in group_grads(1.0, 0.0) {
        if g == Group::S {
            assert_eq!(n, 0.0);
        }
    }
    for (g, n) in group_grads(0.0, 1.0) {
        if g == Group::Y {
            assert_eq!(n, 0.0);
        }
    }
    let both = group_grads(1.0, 1.0);
    for g in [Group::H, Group::Y, Group::S] {
        assert!(both.iter().filter(|(h, _)| *h == g).map(|(_, n)| n).sum::<f64>() > 0.0);
    }
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        net: tiny_config(),
        epochs,
        val_every: 1,
        traj: TrajParams { tube_step: 3, ..Default::default() },
        ..Default::default()
    }
}

fn tiny_cases() -> Vec<iterseg::synthgen::SynthCase> {
    (0..3).map(|i| straight_tube(16, 3, 2 + i, 14)).collect()
}

#[test]
fn one_step_per_tuple() {
    let cases = tiny_cases();
    let refs: Vec<_> = cases.iter().collect();
    let mut seen = Vec::new();
    let out = train(&refs, &refs[..1], &tiny_train_config(2), 1, None, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(out.steps, 6);
    assert_eq!(seen, vec![0, 1]);
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|r| r.val_dice.is_some() && r.stop_acc.is_some()));
}

#[test]
fn training_is_reproducible() {
    let cases = tiny_cases();
    let refs: Vec<_> = cases.iter().collect();
    let cfg = tiny_train_config(2);
    let a = train(&refs, &[], &cfg, 9, None, |_| {}).unwrap();
    let b = train(&refs, &[], &cfg, 9, None, |_| {}).unwrap();
    let c = train(&refs, &[], &cfg, 10, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bytes = |m: &iterseg::segnet::Model, name: &str| {
        let p = dir.path().join(name);
        m.save(&p).unwrap();
        std::fs::read(p).unwrap()
    };
    assert_eq!(bytes(&a.model, "a"), bytes(&b.model, "b"));
    assert_ne!(bytes(&a.model, "a"), bytes(&c.model, "c"));
    assert_eq!(a.history, b.history);
}

#[test]
fn direct_models_train_without_a_stop_head() {
    let cases = tiny_cases();
    let refs: Vec<_> = cases.iter().collect();
    let mut cfg = tiny_train_config(1);
    cfg.net.mode = NetMode::Direct;
    let out = train(&refs, &[], &cfg, 1, None, |_| {}).unwrap();
    assert!(out.history[0].stop_acc.is_none());
    assert_eq!(out.model.params.count(Some(Group::S)), 0);
}

#[test]
fn divergence_is_reported_with_last_good_checkpoint() {
    let cases = tiny_cases();
    let refs: Vec<_> = cases.iter().collect();
    let mut cfg = tiny_train_config(3);
    cfg.optim.lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    match train(&refs, &[], &cfg, 1, Some(dir.path()), |_| {}) {
        Err(SegError::Diverged { detail, .. }) => {
            assert!(detail.contains("last_good"), "{detail}");
            assert!(dir.path().join("last_good.ckpt").exists());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cases = tiny_cases();
    let refs: Vec<_> = cases.iter().collect();
    assert!(train(&[], &[], &tiny_train_config(1), 1, None, |_| {}).is_err());
    let odd = straight_tube(15, 3, 2, 13);
    assert!(train(&[&odd], &[], &tiny_train_config(1), 1, None, |_| {}).is_err());
    let mut cfg = tiny_train_config(1);
    cfg.traj.positive_prob = 1.5;
    assert!(train(&refs, &[], &cfg, 1, None, |_| {}).is_err());
}

#[test]
fn checkpoints_and_history_are_written() {
    let cases = tiny_cases();
    let refs: Vec<_> = cases.iter().collect();
    let mut cfg = tiny_train_config(2);
    cfg.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&refs, &[], &cfg, 1, Some(dir.path()), |_| {}).unwrap();
    assert!(dir.path().join("epoch_0001.ckpt").exists());
    assert!(dir.path().join("epoch_0002.ckpt").exists());
    let p = save_history(&dir.path().join("h.csv"), &out.history).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "epoch,loss,stop_acc,val_dice");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny_train_config(5);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
}

#[test]
fn lr_schedule_is_constant_then_linear_to_final_ratio() {
    let constant = iterseg::teach::OptimParams::default();
    assert!((0..10).all(|e| constant.lr_at(e, 10) == constant.lr));
    let o = iterseg::teach::OptimParams { lr: 1.0, anneal_start: 0.5, final_lr_ratio: 0.1, ..Default::default() };
    let lrs: Vec<f64> = (0..10).map(|e| o.lr_at(e, 10)).collect();
    assert!(lrs[..5].iter().all(|&l| l == 1.0));
    assert!(lrs[4..].windows(2).all(|w| w[1] < w[0]));
    assert!((lrs[9] - 0.1).abs() < 1e-12);
}
