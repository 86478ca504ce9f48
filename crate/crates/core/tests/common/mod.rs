#![allow(dead_code)]

pub mod oracles;

use iterseg::grid::{Dims, Image, LabelMap};
use iterseg::synthgen::{Severity, StructureKind, SynthCase};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, side: usize, density: f64) -> LabelMap {
    let dims = Dims::square(side);
    let mask: Vec<bool> = (0..side * side).map(|_| rng.random_bool(density)).collect();
    LabelMap::from_mask(dims, &mask).unwrap()
}

pub fn map_from(rows: &[&str]) -> LabelMap {
    let dims = Dims::new(vec![rows.len(), rows[0].len()]).unwrap();
    let mask: Vec<bool> = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
    LabelMap::from_mask(dims, &mask).unwrap()
}

pub fn rect(dims: &Dims, r0: usize, r1: usize, c0: usize, c1: usize) -> LabelMap {
    let w = dims.as_slice()[1];
    let mask: Vec<bool> = (0..dims.volume())
        .map(|i| (r0..r1).contains(&(i / w)) && (c0..c1).contains(&(i % w)))
        .collect();
    LabelMap::from_mask(dims.clone(), &mask).unwrap()
}

/// Hand-built case whose truth and seed region are given directly.
pub fn manual_case(kind: StructureKind, truth: LabelMap, seed_region: LabelMap) -> SynthCase {
    let dims = truth.dims().clone();
    let data: Vec<f64> = truth.labels().iter().map(|&l| l as f64).collect();
    SynthCase {
        id: 0,
        kind,
        severity: Severity::Mild,
        image: Image::normalized(dims.clone(), data).unwrap(),
        truth,
        seed_region,
        distractor: LabelMap::empty(dims.clone(), 2),
        ignore: LabelMap::empty(dims, 2),
    }
}

/// Straight vertical tube of `width` columns spanning rows `r0..r1`.
pub fn straight_tube(side: usize, width: usize, r0: usize, r1: usize) -> SynthCase {
    let dims = Dims::square(side);
    let c0 = side / 2 - width / 2;
    let truth = rect(&dims, r0, r1, c0, c0 + width);
    let seed_row = r1 - 3;
    let seed_region = rect(&dims, seed_row, seed_row + 1, c0 + width / 2, c0 + width / 2 + 1);
    manual_case(StructureKind::Tube, truth, seed_region)
}

pub fn tiny_config() -> iterseg::segnet::NetConfig {
    iterseg::segnet::NetConfig {
        levels: 2,
        base_channels: 4,
        pool: 2,
        ..Default::default()
    }
}

pub fn random_image(side: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let data = (0..side * side).map(|_| r.random_range(-1.0..1.0)).collect();
    Image::new(Dims::square(side), data).unwrap()
}

/// Tiny iterative model whose stop head always outputs `sigmoid(bias)`.
pub fn fixed_stop_model(seed: u64, bias: f64) -> iterseg::segnet::Model {
    let mut m = iterseg::segnet::Model::new(tiny_config(), &mut rng(seed)).unwrap();
    m.params.value_mut("stop.b.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.params.value_mut("stop.b.b").unwrap().data_mut()[0] = bias;
    m
}
