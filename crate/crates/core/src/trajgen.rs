//! Teacher-forcing tuples sampled from complete segmentations.
//!
//! Tube trajectories grow geodesically inside the truth by a fixed step;
//! chamber trajectories grow by unconstrained dilation clipped to the truth.
//! The growth amount is drawn from a two-part mixture so that a fixed
//! fraction of tuples are stop-positive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::{seed_to_map, LabelMap, Seed, StopFlag, TrajectoryTuple};
use crate::morpho::{self, distance_map, UNREACHED};
use crate::synthgen::{StructureKind, SynthCase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajParams {
    /// Geodesic growth per step on tube cases.
    pub tube_step: u32,
    /// Dilations per step on chamber cases.
    pub chamber_step: u32,
    /// Probability that a sampled tuple is stop-positive.
    pub positive_prob: f64,
    pub seed_radius: u32,
}

impl Default for TrajParams {
    fn default() -> Self {
        Self {
            tube_step: 10,
            chamber_step: 3,
            positive_prob: 0.25,
            seed_radius: 2,
        }
    }
}

impl TrajParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_prob) {
            return Err(SegError::Param(format!("positive_prob {} outside [0, 1]", self.positive_prob)));
        }
        if self.tube_step == 0 || self.chamber_step == 0 {
            return Err(SegError::Param("trajectory steps must be positive".into()));
        }
        Ok(())
    }

    pub fn step_for(&self, kind: StructureKind) -> u32 {
        match kind {
            StructureKind::Tube => self.tube_step,
            StructureKind::Chamber => self.chamber_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tuple: TrajectoryTuple,
    pub seed: Seed,
}

pub fn draw_seed<R: Rng + ?Sized>(case: &SynthCase, rng: &mut R, radius: u32) -> Result<Seed> {
    let region = case.seed_region.fg_indices();
    if region.is_empty() {
        return Err(SegError::Param(format!("case {} has an empty seed region", case.id)));
    }
    let i = region[rng.random_range(0..region.len())];
    Ok(Seed::new(case.truth.dims().coord(i), radius))
}

/// Growth amount: with probability `positive_prob` from the saturating
/// tail `[extent - step, extent]`, otherwise from `[0, extent - step)`.
fn draw_amount<R: Rng + ?Sized>(rng: &mut R, extent: u32, step: u32, positive_prob: f64) -> u32 {
    let tail_start = extent.saturating_sub(step);
    if tail_start == 0 || rng.random_bool(positive_prob) {
        rng.random_range(tail_start..=extent)
    } else {
        rng.random_range(0..tail_start)
    }
}

/// Seed ball clipped to the truth.
pub fn seed_ball(case: &SynthCase, seed: &Seed) -> Result<LabelMap> {
    seed_to_map(seed, case.truth.dims())?.intersect(&case.truth)
}

/// Geodesic distance from the seed component to the farthest truth voxel.
pub fn tube_extent(case: &SynthCase, seed: &Seed) -> Result<u32> {
    morpho::geodesic_extent(&seed_ball(case, seed)?, &case.truth, seed)
}

/// Number of dilations of the seed ball after which the clipped dilation
/// equals the truth.
pub fn chamber_saturation(case: &SynthCase, seed: &Seed) -> Result<u32> {
    let ball = seed_to_map(seed, case.truth.dims())?;
    let dist = distance_map(case.truth.dims(), &ball.mask(), None, UNREACHED - 1);
    Ok(case.truth.fg_indices().into_iter().map(|i| dist[i]).max().unwrap_or(0))
}

/// Tuple for a given seed and growth distance `d`.
pub fn tube_tuple_at(case: &SynthCase, seed: &Seed, d: u32, step: u32) -> Result<TrajectoryTuple> {
    let ball = seed_ball(case, seed)?;
    let extent = morpho::geodesic_extent(&ball, &case.truth, seed)?;
    let prev = morpho::geodesic_grow(&ball, &case.truth, seed, d)?;
    let (target, stop) = if d + step < extent {
        (morpho::geodesic_grow(&ball, &case.truth, seed, d + step)?, false)
    } else {
        (case.truth.clone(), true)
    };
    Ok(TrajectoryTuple {
        prev,
        target,
        stop: StopFlag(stop),
    })
}

/// Tuple for a given seed and dilation count `k`.
pub fn chamber_tuple_at(case: &SynthCase, seed: &Seed, k: u32, step: u32) -> Result<TrajectoryTuple> {
    let ball = seed_to_map(seed, case.truth.dims())?;
    let prev = morpho::dilate(&ball, k).intersect(&case.truth)?;
    let target = morpho::dilate(&ball, k + step).intersect(&case.truth)?;
    let stop = target == case.truth;
    Ok(TrajectoryTuple {
        prev,
        target,
        stop: StopFlag(stop),
    })
}

pub fn sample_tube_tuple<R: Rng + ?Sized>(case: &SynthCase, rng: &mut R, params: &TrajParams) -> Result<Sample> {
    if case.kind != StructureKind::Tube {
        return Err(SegError::Param(format!("case {} is not a tube case", case.id)));
    }
    let seed = draw_seed(case, rng, params.seed_radius)?;
    let extent = tube_extent(case, &seed)?;
    let d = draw_amount(rng, extent, params.tube_step, params.positive_prob);
    let tuple = tube_tuple_at(case, &seed, d, params.tube_step)?;
    Ok(Sample { tuple, seed })
}

pub fn sample_chamber_tuple<R: Rng + ?Sized>(case: &SynthCase, rng: &mut R, params: &TrajParams) -> Result<Sample> {
    if case.kind != StructureKind::Chamber {
        return Err(SegError::Param(format!("case {} is not a chamber case", case.id)));
    }
    let seed = draw_seed(case, rng, params.seed_radius)?;
    let sat = chamber_saturation(case, &seed)?;
    let k = draw_amount(rng, sat, params.chamber_step, params.positive_prob);
    let tuple = chamber_tuple_at(case, &seed, k, params.chamber_step)?;
    Ok(Sample { tuple, seed })
}

pub fn sample_tuple<R: Rng + ?Sized>(case: &SynthCase, rng: &mut R, params: &TrajParams) -> Result<Sample> {
    match case.kind {
        StructureKind::Tube => sample_tube_tuple(case, rng, params),
        StructureKind::Chamber => sample_chamber_tuple(case, rng, params),
    }
}

/// One tuple per case, in case order.
pub fn epoch_tuples<R: Rng + ?Sized>(cases: &[&SynthCase], rng: &mut R, params: &TrajParams) -> Result<Vec<Sample>> {
    cases.iter().map(|c| sample_tuple(c, rng, params)).collect()
}
