//! Binary morphology on face-connected grids (4-neighbourhood in 2D, 6 in
//! 3D). Dilation, geodesic distance and island labelling all use the same
//! connectivity.

use std::collections::VecDeque;

use crate::error::{Result, SegError};
use crate::grid::{Dims, LabelMap, Seed};

pub const UNREACHED: u32 = u32::MAX;

/// Breadth-first step distance from `sources`, moving only through voxels
/// where `passable` holds (everywhere when `None`). Expansion stops past
/// `limit`; voxels beyond it stay [`UNREACHED`].
pub fn distance_map(dims: &Dims, sources: &[bool], passable: Option<&[bool]>, limit: u32) -> Vec<u32> {
    let mut dist = vec![UNREACHED; dims.volume()];
    let mut queue = VecDeque::new();
    for (i, &s) in sources.iter().enumerate() {
        if s && passable.is_none_or(|p| p[i]) {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let d = dist[i];
        if d >= limit {
            continue;
        }
        dims.for_each_neighbor(i, |j| {
            if dist[j] == UNREACHED && passable.is_none_or(|p| p[j]) {
                dist[j] = d + 1;
                queue.push_back(j);
            }
        });
    }
    dist
}

/// `n`-fold dilation by the face structuring element.
pub fn dilate(map: &LabelMap, n: u32) -> LabelMap {
    let dist = distance_map(map.dims(), &map.mask(), None, n);
    let mask: Vec<bool> = dist.iter().map(|&d| d <= n).collect();
    LabelMap::from_mask(map.dims().clone(), &mask).expect("same grid")
}

/// `n`-fold erosion (dual of [`dilate`]; voxels outside the grid do not
/// count as background).
pub fn erode(map: &LabelMap, n: u32) -> LabelMap {
    let bg: Vec<bool> = map.labels().iter().map(|&l| l == 0).collect();
    let dist = distance_map(map.dims(), &bg, None, n);
    let mask: Vec<bool> = (0..map.len()).map(|i| map.is_fg(i) && dist[i] > n).collect();
    LabelMap::from_mask(map.dims().clone(), &mask).expect("same grid")
}

/// Face-connected component of `mask` containing voxel `start`.
fn component_of(dims: &Dims, mask: &[bool], start: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    if !mask[start] {
        return out;
    }
    let mut queue = VecDeque::from([start]);
    out[start] = true;
    while let Some(i) = queue.pop_front() {
        dims.for_each_neighbor(i, |j| {
            if mask[j] && !out[j] {
                out[j] = true;
                queue.push_back(j);
            }
        });
    }
    out
}

/// Source component for geodesic growth: the part of `mask ∩ region`
/// connected to the seed voxel.
pub fn seed_component(mask: &LabelMap, region: &LabelMap, seed: &Seed) -> Result<Vec<bool>> {
    let dims = region.dims();
    if mask.dims() != dims {
        return Err(SegError::Shape("mask and region grids differ".into()));
    }
    seed.check_in(dims)?;
    let s = seed.index(dims);
    if !region.is_fg(s) {
        return Err(SegError::OutOfBounds {
            what: "seed",
            detail: format!("seed {:?} lies outside the growth region", seed.coord),
        });
    }
    let both: Vec<bool> = (0..region.len()).map(|i| mask.is_fg(i) && region.is_fg(i)).collect();
    if !both[s] {
        // the seed voxel alone still defines a valid source
        let mut only = vec![false; region.len()];
        only[s] = true;
        return Ok(only);
    }
    Ok(component_of(dims, &both, s))
}

/// All voxels of `region` within geodesic (in-region, face-step) distance
/// `length` of the seed component of `mask ∩ region`.
pub fn geodesic_grow(mask: &LabelMap, region: &LabelMap, seed: &Seed, length: u32) -> Result<LabelMap> {
    let sources = seed_component(mask, region, seed)?;
    let passable = region.mask();
    let dist = distance_map(region.dims(), &sources, Some(&passable), length);
    let out: Vec<bool> = dist.iter().map(|&d| d <= length).collect();
    LabelMap::from_mask(region.dims().clone(), &out)
}

/// Largest geodesic distance from the seed component to any reachable
/// voxel of `region`; growing by this amount reaches the whole connected
/// region.
pub fn geodesic_extent(mask: &LabelMap, region: &LabelMap, seed: &Seed) -> Result<u32> {
    let sources = seed_component(mask, region, seed)?;
    let passable = region.mask();
    let dist = distance_map(region.dims(), &sources, Some(&passable), UNREACHED - 1);
    Ok(dist.into_iter().filter(|&d| d != UNREACHED).max().unwrap_or(0))
}

/// Face-connected foreground components, each as sorted voxel indices,
/// ordered by their first voxel in scan order.
pub fn islands(map: &LabelMap) -> Vec<Vec<usize>> {
    let dims = map.dims();
    let mut seen = vec![false; map.len()];
    let mut out = Vec::new();
    for start in 0..map.len() {
        if !map.is_fg(start) || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            dims.for_each_neighbor(i, |j| {
                if map.is_fg(j) && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            });
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IslandPolicy {
    Largest,
    ContainingSeed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeepOutcome {
    Kept,
    EmptyInput,
    /// `ContainingSeed` was requested but the seed voxel is background.
    SeedInBackground,
}

/// Keeps a single island. Largest-island ties go to the first in scan order.
pub fn keep_island(map: &LabelMap, policy: IslandPolicy, seed: Option<&Seed>) -> Result<(LabelMap, KeepOutcome)> {
    let dims = map.dims().clone();
    let empty = LabelMap::from_mask(dims.clone(), &vec![false; map.len()])?;
    let comps = islands(map);
    if comps.is_empty() {
        return Ok((empty, KeepOutcome::EmptyInput));
    }
    let chosen = match policy {
        IslandPolicy::Largest => comps
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(_, c)| c),
        IslandPolicy::ContainingSeed => {
            let seed = seed.ok_or_else(|| SegError::Param("containing_seed policy needs a seed".into()))?;
            seed.check_in(&dims)?;
            let s = seed.index(&dims);
            if !map.is_fg(s) {
                return Ok((empty, KeepOutcome::SeedInBackground));
            }
            comps.iter().find(|c| c.binary_search(&s).is_ok())
        }
    };
    let mut mask = vec![false; map.len()];
    for &i in chosen.expect("non-empty component list") {
        mask[i] = true;
    }
    Ok((LabelMap::from_mask(dims, &mask)?, KeepOutcome::Kept))
}

/// Voxels within `width` face steps of the foreground/background interface,
/// on both sides.
pub fn boundary_band(map: &LabelMap, width: u32) -> LabelMap {
    let dims = map.dims();
    let fg = map.mask();
    let bg: Vec<bool> = fg.iter().map(|&f| !f).collect();
    let to_bg = distance_map(dims, &bg, None, width);
    let to_fg = distance_map(dims, &fg, None, width);
    let band: Vec<bool> = (0..map.len())
        .map(|i| if fg[i] { to_bg[i] <= width } else { to_fg[i] <= width })
        .collect();
    LabelMap::from_mask(dims.clone(), &band).expect("same grid")
}
