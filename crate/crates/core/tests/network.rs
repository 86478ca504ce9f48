mod common;

use common::{random_image, random_map, rng, tiny_config};
use iterseg::grid::{Dims, LabelMap, Seed};
use iterseg::segnet::*;
use ndnum::gradcheck::{grad_check, random_probes};
use ndnum::{Group, NdError, Tape, Tensor};

#[test]
fn parameter_counts_follow_the_config() {
    let cfg = NetConfig::default();
    let a = build(&cfg, &mut rng(1)).unwrap();
    let b = build(&cfg, &mut rng(2)).unwrap();
    assert_eq!(a.count(None), b.count(None));
    assert_eq!(cfg.architecture_id(), cfg.clone().architecture_id());
    let c = cfg.base_channels;
    let l = cfg.num_labels as usize;
    assert_eq!(a.count(Some(Group::Y)), c * l + l);
    assert_eq!(a.count(Some(Group::S)), c * c * 9 + c + c * 9 + 1);
    assert_eq!(
        a.count(Some(Group::H)) + a.count(Some(Group::Y)) + a.count(Some(Group::S)),
        a.count(None)
    );
    // 2D, three levels, 24 base maps, two labels, 3 input channels
    let conv = |o: usize, i: usize| o * i * 9 + o;
    let enc = conv(24, 3) + conv(24, 24) + conv(48, 24) + conv(48, 48) + conv(96, 48) + conv(96, 96);
    let dec = 2 * conv(48, 96) + conv(48, 48) + 2 * conv(24, 48) + conv(24, 24);
    let heads = (2 * 24 + 2) + conv(24, 24) + conv(1, 24);
    assert_eq!(a.count(None), enc + dec + heads);
    let direct = NetConfig { mode: NetMode::Direct, ..cfg.clone() };
    assert_eq!(build(&direct, &mut rng(1)).unwrap().count(Some(Group::S)), 0);
    assert_ne!(direct.architecture_id(), cfg.architecture_id());
}

#[test]
fn config_validation() {
    assert!(NetConfig { levels: 1, ..tiny_config() }.validate().is_err());
    assert!(NetConfig { base_channels: 3, ..tiny_config() }.validate().is_err());
    assert!(NetConfig { pool: 1, ..tiny_config() }.validate().is_err());
    let cfg = NetConfig { levels: 3, pool: 3, ..tiny_config() };
    assert!(cfg.check_dims(&Dims::square(18)).is_ok());
    let err = cfg.check_dims(&Dims::square(16)).unwrap_err().to_string();
    assert!(err.contains("16") && err.contains("9"), "{err}");
}

#[test]
fn outputs_are_distributions_and_deterministic() {
    let cfg = tiny_config();
    let model = Model::new(cfg, &mut rng(3)).unwrap();
    let img = random_image(8, 4);
    let prev = random_map(&mut rng(5), 8, 0.3);
    let a = model.predict(&img, Some(&prev), None).unwrap();
    let b = model.predict(&img, Some(&prev), None).unwrap();
    assert_eq!(a, b);
    let vol = 64;
    for i in 0..vol {
        let s = a.seg_prob.data()[i] + a.seg_prob.data()[vol + i];
        assert!((s - 1.0).abs() < 1e-12);
    }
    let p = a.stop_prob.unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(a.features.shape(), &[1, 4, 8, 8]);
}

#[test]
fn zeroed_stop_head_gives_one_half() {
    let mut model = Model::new(tiny_config(), &mut rng(6)).unwrap();
    for name in ["stop.a.w", "stop.a.b", "stop.b.w", "stop.b.b"] {
        let t = model.params.value_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let img = random_image(8, 7);
    let out = model.predict(&img, Some(&LabelMap::empty(Dims::square(8), 2)), None).unwrap();
    assert_eq!(out.stop_prob, Some(0.5));
}

#[test]
fn inputs_are_validated() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), &mut rng(8)).unwrap();
    let img = random_image(8, 9);
    assert!(model.predict(&img, None, None).is_err());
    let wrong = LabelMap::empty(Dims::square(4), 2);
    assert!(model.predict(&img, Some(&wrong), None).is_err());
    let odd = random_image(7, 1);
    assert!(model.predict(&odd, Some(&LabelMap::empty(Dims::square(7), 2)), None).is_err());
    let dist = NetConfig { distance_channel: true, ..cfg };
    assert_eq!(dist.input_channels(), 4);
    let m = Model::new(dist, &mut rng(1)).unwrap();
    let prev = LabelMap::empty(Dims::square(8), 2);
    assert!(m.predict(&img, Some(&prev), None).is_err());
    assert!(m.predict(&img, Some(&prev), Some(&Seed::new(vec![3, 3], 1))).is_ok());
}

#[test]
fn forward_has_no_state_between_calls() {
    let model = Model::new(tiny_config(), &mut rng(10)).unwrap();
    let img = random_image(8, 11);
    let a = random_map(&mut rng(12), 8, 0.2);
    let b = random_map(&mut rng(13), 8, 0.5);
    let first = model.predict(&img, Some(&a), None).unwrap();
    let _ = model.predict(&img, Some(&b), None).unwrap();
    assert_eq!(model.predict(&img, Some(&a), None).unwrap(), first);
}

#[test]
fn trunk_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let store = build(&cfg, &mut rng(14)).unwrap();
    let img = random_image(8, 15);
    let prev = random_map(&mut rng(16), 8, 0.3);
    let target = random_map(&mut rng(17), 8, 0.4);
    let input = net_input(&cfg, &img, Some(&prev), None).unwrap();
    let lp = iterseg::teach::LossParams::default();
    let w = iterseg::teach::loss_weights(&target, iterseg::grid::StopFlag(true), &lp, &Default::default());
    let probes = random_probes(&store, Group::H, 10, &mut rng(18));
    let report = grad_check(&store, &probes, 1e-5, |tape: &mut Tape, bound| {
        let x = tape.leaf(input.clone());
        iterseg::teach::tuple_loss(tape, bound, &cfg, x, &target, iterseg::grid::StopFlag(true), &w, &lp)
            .map(|(l, _)| l)
            .map_err(|e| NdError::Shape { op: "net", detail: e.to_string() })
    })
    .unwrap();
    assert!(report.checked >= 5);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_embeds_the_config() {
    let cfg = NetConfig { distance_channel: true, ..tiny_config() };
    let model = Model::new(cfg.clone(), &mut rng(19)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, cfg);
    for p in model.params.iter() {
        assert_eq!(back.params.value(&p.name).unwrap(), &p.value);
    }
    // a store that does not match its config is rejected
    let mut other = ndnum::ParamStore::new();
    other.insert("x.w", Group::H, Tensor::zeros(&[1])).unwrap();
    let mut bytes = Vec::new();
    ndnum::write_checkpoint(&mut bytes, &other, &serde_json::to_string(&cfg).unwrap()).unwrap();
    std::fs::write(&path, bytes).unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn receptive_field_of_default_net() {
    let cfg = NetConfig::default();
    assert!(cfg.receptive_field() > 40);
    let desk = NetConfig { pool: 2, ..cfg };
    assert_eq!(desk.receptive_field(), 1 + 4 + 1 + 8 + 2 + 16 + 12 + 6);
}
