mod common;

use common::{rng, straight_tube};
use iterseg::grid::{seed_to_map, Seed};
use iterseg::morpho::dilate;
use iterseg::rng::stream;
use iterseg::synthgen::{make_dataset, StructureKind, SynthParams};
use iterseg::trajgen::*;

#[test]
fn growth_saturates_into_the_truth() {
    let case = straight_tube(32, 4, 2, 30);
    let seed = Seed::new(vec![27, 16], 1);
    let extent = tube_extent(&case, &seed).unwrap();
    for d in [extent, extent + 5] {
        let t = tube_tuple_at(&case, &seed, d, 10).unwrap();
        assert_eq!(t.prev, case.truth);
        assert_eq!(t.target, case.truth);
        assert!(t.stop.is_set());
    }
}

#[test]
fn zero_growth_is_the_clipped_seed_ball() {
    let case = straight_tube(32, 4, 2, 30);
    let seed = Seed::new(vec![27, 15], 3);
    let t = tube_tuple_at(&case, &seed, 0, 10).unwrap();
    assert_eq!(t.prev, seed_to_map(&seed, case.truth.dims()).unwrap().intersect(&case.truth).unwrap());
}

#[test]
fn straight_tube_step_adds_step_times_width() {
    // seed at the bottom end: growth is one-directional
    for width in [2, 4, 6] {
        let case = straight_tube(64, width, 2, 62);
        let c0 = 32 - width / 2;
        let seed = Seed::new(vec![61, c0], 0);
        for d in [0, 5, 20] {
            let t = tube_tuple_at(&case, &seed, d, 10).unwrap();
            assert!(!t.stop.is_set());
            let gained = t.target.fg_count() - t.prev.fg_count();
            // BFS oracle: rows reached at depth k from the corner voxel
            let rows = |depth: usize| -> usize {
                (0..60)
                    .map(|r| (0..width).filter(|&c| r + c <= depth).count())
                    .sum()
            };
            assert_eq!(t.prev.fg_count(), rows(d as usize), "width {width} d {d}");
            assert_eq!(gained, rows(d as usize + 10) - rows(d as usize));
            if d >= width as u32 {
                assert_eq!(gained, 10 * width);
            }
        }
    }
}

#[test]
fn chamber_tuples_follow_clipped_dilation() {
    let ds = make_dataset(3, StructureKind::Chamber, 6, 3, &SynthParams::default()).unwrap();
    for case in &ds.cases {
        let seed = draw_seed(case, &mut rng(case.id as u64), 2).unwrap();
        let sat = chamber_saturation(case, &seed).unwrap();
        let t = chamber_tuple_at(case, &seed, 0, 3).unwrap();
        assert_eq!(t.target, dilate(&t.prev, 3).intersect(&case.truth).unwrap());
        for k in 0..=sat + 2 {
            let t = chamber_tuple_at(case, &seed, k, 3).unwrap();
            assert!(t.prev.fg_subset_of(&t.target));
            assert_eq!(t.stop.is_set(), t.target == case.truth);
            assert_eq!(t.stop.is_set(), k + 3 >= sat);
        }
        let t = chamber_tuple_at(case, &seed, sat + 1, 3).unwrap();
        assert!(t.stop.is_set() && t.target == case.truth);
    }
}

#[test]
fn sampled_tuples_stay_inside_truth() {
    let p = TrajParams::default();
    for kind in StructureKind::ALL {
        let ds = make_dataset(4, kind, 9, 3, &SynthParams::default()).unwrap();
        let mut r = stream(0, "traj-test", 0);
        for _ in 0..10 {
            for case in &ds.cases {
                let s = sample_tuple(case, &mut r, &p).unwrap();
                let t = &s.tuple;
                assert!(t.prev.fg_subset_of(&case.truth));
                assert!(t.target.fg_subset_of(&case.truth));
                assert!(t.prev.fg_subset_of(&t.target));
                assert_eq!(t.stop.is_set(), t.target == case.truth);
                assert!(case.seed_region.is_fg(s.seed.index(case.truth.dims())));
            }
        }
    }
}

#[test]
fn epoch_gives_one_fresh_tuple_per_image() {
    let ds = make_dataset(6, StructureKind::Tube, 20, 5, &SynthParams::default()).unwrap();
    let (train, _) = ds.split(0).unwrap();
    let p = TrajParams::default();
    let epochs: Vec<Vec<Sample>> = (0..10)
        .map(|e| epoch_tuples(&train, &mut stream(1, "epoch-test", e), &p).unwrap())
        .collect();
    assert!(epochs.iter().all(|e| e.len() == 15));
    for a in 0..10 {
        for b in a + 1..10 {
            assert_ne!(epochs[a], epochs[b]);
        }
    }
}

#[test]
fn stop_positive_frequency_matches_the_mixture() {
    let p = TrajParams::default();
    for kind in StructureKind::ALL {
        let ds = make_dataset(7, kind, 10, 5, &SynthParams::default()).unwrap();
        let mut r = stream(2, "freq", 0);
        let draws = 1000;
        let positives = (0..draws)
            .filter(|i| sample_tuple(&ds.cases[i % 10], &mut r, &p).unwrap().tuple.stop.is_set())
            .count();
        let f = positives as f64 / draws as f64;
        assert!((f - p.positive_prob).abs() <= 0.05, "{kind}: positive rate {f}");
    }
}

#[test]
fn kind_mismatch_is_an_error() {
    let case = straight_tube(32, 4, 2, 30);
    assert!(sample_chamber_tuple(&case, &mut rng(0), &TrajParams::default()).is_err());
    let bad = TrajParams { positive_prob: 1.5, ..TrajParams::default() };
    assert!(bad.validate().is_err());
}
