use iterseg::grid::{Dims, LabelMap, Seed};
use rand::Rng;

pub const SIDE: usize = 16;

/// Dilation by explicit L1-ball scan.
pub fn dilate_oracle(m: &LabelMap, n: usize) -> LabelMap {
    let d = m.dims();
    let mask: Vec<bool> = (0..m.len())
        .map(|i| {
            let a = d.coord(i);
            m.fg_indices().iter().any(|&j| {
                let b = d.coord(j);
                a[0].abs_diff(b[0]) + a[1].abs_diff(b[1]) <= n
            })
        })
        .collect();
    LabelMap::from_mask(d.clone(), &mask).unwrap()
}

/// Components by repeated depth-first labelling with an explicit stack.
pub fn components_oracle(m: &LabelMap) -> Vec<usize> {
    let (h, w) = (m.dims().as_slice()[0], m.dims().as_slice()[1]);
    let mut label = vec![0usize; m.len()];
    let mut sizes = Vec::new();
    for start in 0..m.len() {
        if !m.is_fg(start) || label[start] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            sizes[id - 1] += 1;
            let (r, c) = (i / w, i % w);
            let mut nb = Vec::new();
            if r > 0 { nb.push(i - w); }
            if r + 1 < h { nb.push(i + w); }
            if c > 0 { nb.push(i - 1); }
            if c + 1 < w { nb.push(i + 1); }
            for j in nb {
                if m.is_fg(j) && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
    }
    sizes
}

/// Band by scanning every voxel's L1 neighbourhood for an opposite-class voxel.
pub fn band_oracle(m: &LabelMap, width: usize) -> LabelMap {
    let d = m.dims();
    let mask: Vec<bool> = (0..m.len())
        .map(|i| {
            let a = d.coord(i);
            (0..m.len()).any(|j| {
                let b = d.coord(j);
                m.is_fg(j) != m.is_fg(i) && a[0].abs_diff(b[0]) + a[1].abs_diff(b[1]) <= width
            })
        })
        .collect();
    LabelMap::from_mask(d.clone(), &mask).unwrap()
}


/// Geodesic distances from `sources` inside `region` by relaxing
/// `d(v) = min(d(u)) + 1` over neighbours until nothing changes.
pub fn geodesic_oracle(region: &LabelMap, sources: &[bool]) -> Vec<Option<u32>> {
    let (h, w) = (region.dims().as_slice()[0], region.dims().as_slice()[1]);
    let mut d: Vec<Option<u32>> = (0..region.len()).map(|i| sources[i].then_some(0)).collect();
    loop {
        let mut changed = false;
        for i in 0..region.len() {
            if !region.is_fg(i) || sources[i] {
                continue;
            }
            let (r, c) = (i / w, i % w);
            let nbr = [
                (r > 0).then(|| i - w),
                (r + 1 < h).then(|| i + w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
            ];
            let best = nbr.iter().flatten().filter_map(|&j| d[j]).min().map(|x| x + 1);
            if best.is_some() && (d[i].is_none() || best < d[i]) {
                d[i] = best;
                changed = true;
            }
        }
        if !changed {
            return d;
        }
    }
}

/// Random-walk tube of 60 steps and its start point.
pub fn random_tube(r: &mut impl Rng) -> (LabelMap, Seed) {
    let dims = Dims::square(SIDE);
    let mut mask = vec![false; dims.volume()];
    let (mut y, mut x) = (r.random_range(0..SIDE), r.random_range(0..SIDE));
    let start = Seed::new(vec![y, x], 1);
    for _ in 0..60 {
        mask[y * SIDE + x] = true;
        match r.random_range(0..4) {
            0 if y > 0 => y -= 1,
            1 if y + 1 < SIDE => y += 1,
            2 if x > 0 => x -= 1,
            3 if x + 1 < SIDE => x += 1,
            _ => {}
        }
    }
    (LabelMap::from_mask(dims, &mask).unwrap(), start)
}

