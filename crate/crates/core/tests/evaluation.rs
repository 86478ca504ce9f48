mod common;

use common::{map_from, random_map, rng, straight_tube, tiny_config};
use iterseg::evalx::*;
use iterseg::evolve::{evolve, AutoStop, EvolveOptions};
use iterseg::grid::{Dims, LabelMap, Seed};
use iterseg::segnet::{Model, NetMode};
use iterseg::synthgen::{Severity, StructureKind, SynthCase};
use proptest::prelude::*;

#[test]
fn dice_examples() {
    let a = map_from(&["##..", "##..", "....", "...."]);
    let b = map_from(&["#...", "#...", "#...", "#..."]);
    assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    let e = LabelMap::empty(Dims::square(4), 2);
    assert_eq!(dice(&e, &e).unwrap(), 1.0);
    assert_eq!(dice(&a, &e).unwrap(), 0.0);
    assert!(dice(&a, &LabelMap::empty(Dims::square(3), 2)).is_err());
    let ignore = map_from(&["....", "....", "#...", "#..."]);
    assert!((masked_dice(&a, &b, &ignore).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(leak_fraction(&a, &b).unwrap(), 0.5);
    assert_eq!(leak_fraction(&a, &e).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(s in any::<u64>(), d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
        let mut r = rng(s);
        let a = random_map(&mut r, 7, d1);
        let b = random_map(&mut r, 7, d2);
        let x = dice(&a, &b).unwrap();
        prop_assert_eq!(x, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        let none = LabelMap::empty(Dims::square(7), 2);
        prop_assert_eq!(masked_dice(&a, &b, &none).unwrap(), x);
    }
}

#[test]
fn mean_sd_uses_the_sample_deviation() {
    let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
    assert!(mean_sd(&[]).0.is_nan());
}

#[test]
fn stop_offset_measures_distance_to_best() {
    let m = common::fixed_stop_model(1, 50.0);
    let img = common::random_image(8, 2);
    let seed = Seed::new(vec![4, 4], 1);
    let opts = EvolveOptions { autostop: AutoStop::Off, max_steps: 4, ..Default::default() };
    let s = evolve(&m, &img, &seed, &opts).unwrap();
    let truth0 = s.map_at(0).unwrap().clone();
    let off = stop_offset(&s, &truth0).unwrap();
    assert!(off.stopped);
    let best = iterseg::evolve::best_step(&s, &truth0).unwrap();
    assert_eq!(off.offset, best.abs_diff(1));
    let never = common::fixed_stop_model(1, -50.0);
    let s = evolve(&never, &img, &seed, &opts).unwrap();
    let off = stop_offset(&s, s.map_at(0).unwrap()).unwrap();
    assert_eq!(off, StopOffset { offset: 4, stopped: false });
}

#[test]
fn arm_names_parse_back() {
    for arm in Arm::ALL {
        assert_eq!(Arm::parse(arm.name()), Some(arm));
        assert_eq!(serde_json::to_string(&arm).unwrap(), format!("\"{}\"", arm.name()));
    }
    assert_eq!(Arm::parse("ITER_MAX"), Some(Arm::IterMax));
    assert_eq!(Arm::parse("nope"), None);
    assert_eq!(Arm::IterSegAbl.model_kind(), ModelKind::IterAbl);
}

fn eval_cases() -> Vec<SynthCase> {
    let mut cases: Vec<SynthCase> = (0..4).map(|i| straight_tube(16, 3, 2 + i, 14)).collect();
    for (i, c) in cases.iter_mut().enumerate() {
        c.id = i;
        c.severity = if i == 3 { Severity::Severe } else { Severity::Mild };
        c.distractor = common::rect(c.truth.dims(), 0, 2, 6, 10);
    }
    cases
}

fn quick_opts() -> EvalOptions {
    let mut o = EvalOptions::default();
    o.evolve.max_steps = 6;
    o
}

#[test]
fn eval_seed_lies_in_the_seed_region() {
    for c in eval_cases() {
        let s = eval_seed(&c, 2).unwrap();
        assert!(c.seed_region.is_fg(s.index(c.image.dims())));
        assert_eq!(s.radius, 2);
    }
}

#[test]
fn best_step_dominates_the_stop_step() {
    let cases = eval_cases();
    let refs: Vec<_> = cases.iter().collect();
    for k in 0..3 {
        let m = Model::new(tiny_config(), &mut rng(20 + k)).unwrap();
        let set = ModelSet { iter: Some(&m), ..Default::default() };
        let stop = run_experiment(Arm::IterStop, &set, &refs, &quick_opts()).unwrap();
        let max = run_experiment(Arm::IterMax, &set, &refs, &quick_opts()).unwrap();
        for (a, b) in stop.iter().zip(&max) {
            assert!(b.dice >= a.dice);
            assert_eq!(a.stop_offset, b.stop_offset);
        }
    }
}

#[test]
fn experiments_are_deterministic_and_complete() {
    let cases = eval_cases();
    let refs: Vec<_> = cases.iter().collect();
    let iter = Model::new(tiny_config(), &mut rng(1)).unwrap();
    let mut dcfg = tiny_config();
    dcfg.mode = NetMode::Direct;
    let dir = Model::new(dcfg.clone(), &mut rng(2)).unwrap();
    dcfg.distance_channel = true;
    let dir_dist = Model::new(dcfg, &mut rng(3)).unwrap();
    let set = ModelSet {
        dir: Some(&dir),
        dir_dist: Some(&dir_dist),
        iter: Some(&iter),
        iter_abl: Some(&iter),
    };
    let mut rows = Vec::new();
    for arm in Arm::ALL {
        let a = run_experiment(arm, &set, &refs, &quick_opts()).unwrap();
        let b = run_experiment(arm, &set, &refs, &quick_opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let iterative = matches!(arm, Arm::IterStop | Arm::IterMax | Arm::IterSegAbl);
        assert!(a.iter().all(|r| r.stop_offset.is_some() == iterative));
        rows.extend(a);
    }
    let summary = summarize(&rows);
    assert_eq!(summary.len(), 2 * Arm::ALL.len());
    let first = &summary[0];
    assert_eq!((first.arm, first.structure, first.n), (Arm::Dir, StructureKind::Tube, 3));
    assert_eq!(summary[1].n, 1);
    let text = format_summary(&summary);
    assert!(text.contains("ITER_SEG_ABL") && text.contains("mild/mod.") && text.contains("severe"));
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows).unwrap();
    let csv = String::from_utf8(buf).unwrap();
    assert_eq!(csv.lines().count(), 1 + rows.len());
}

#[test]
fn missing_models_are_reported() {
    let cases = eval_cases();
    let refs: Vec<_> = cases.iter().collect();
    let err = run_experiment(Arm::DirDist, &ModelSet::default(), &refs, &quick_opts()).unwrap_err();
    assert!(err.to_string().contains("DIR_DIST") || err.to_string().contains("dir"), "{err}");
    let iter = Model::new(tiny_config(), &mut rng(1)).unwrap();
    let wrong = ModelSet { dir: Some(&iter), ..Default::default() };
    assert!(run_experiment(Arm::Dir, &wrong, &refs, &quick_opts()).is_err());
}

#[test]
fn corrupted_starts_are_reproducible() {
    let cases = eval_cases();
    let refs: Vec<_> = cases.iter().collect();
    let m = Model::new(tiny_config(), &mut rng(4)).unwrap();
    let a = corrupted_start_dice(&m, &refs, &quick_opts(), &stress_corruption(), 5).unwrap();
    let b = corrupted_start_dice(&m, &refs, &quick_opts(), &stress_corruption(), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
}
