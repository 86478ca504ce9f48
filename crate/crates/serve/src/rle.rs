//! Run-length encoding of label maps for transport.

use iterseg::grid::{Dims, LabelMap};
use serde::{Deserialize, Serialize};

/// Label map as `(label, count)` runs in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMap {
    pub dims: Vec<usize>,
    pub num_labels: u8,
    pub runs: Vec<(u8, u32)>,
}

pub fn encode(map: &LabelMap) -> RleMap {
    let mut runs: Vec<(u8, u32)> = Vec::new();
    for &v in map.labels() {
        match runs.last_mut() {
            Some((l, n)) if *l == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    RleMap {
        dims: map.dims().as_slice().to_vec(),
        num_labels: map.num_labels(),
        runs,
    }
}

pub fn decode(rle: &RleMap) -> iterseg::Result<LabelMap> {
    let dims = Dims::new(rle.dims.clone())?;
    let total: u64 = rle.runs.iter().map(|&(_, n)| u64::from(n)).sum();
    if total != dims.volume() as u64 {
        return Err(iterseg::SegError::Shape(format!(
            "runs cover {total} voxels, grid has {}",
            dims.volume()
        )));
    }
    let mut labels = Vec::with_capacity(dims.volume());
    for &(l, n) in &rle.runs {
        labels.extend(std::iter::repeat_n(l, n as usize));
    }
    LabelMap::new(dims, labels, rle.num_labels)
}
