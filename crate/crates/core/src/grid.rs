//! Images, label maps, seeds and training tuples on regular 2D/3D grids.
//!
//! Coordinates are row-major: `[row, col]` in 2D, `[slice, row, col]` in 3D.

use ndnum::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Dims {
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Dims {
    type Error = SegError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Dims::new(v)
    }
}

impl From<Dims> for Vec<usize> {
    fn from(d: Dims) -> Self {
        d.dims
    }
}

impl Dims {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(SegError::Grid(format!("rank must be 2 or 3, got {dims:?}")));
        }
        if dims.contains(&0) {
            return Err(SegError::Grid(format!("zero-length axis in {dims:?}")));
        }
        let mut strides = vec![1; dims.len()];
        for d in (0..dims.len() - 1).rev() {
            strides[d] = strides[d + 1] * dims[d + 1];
        }
        Ok(Self { dims, strides })
    }

    pub fn square(side: usize) -> Self {
        Self::new(vec![side, side]).expect("positive side")
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn index(&self, coord: &[usize]) -> usize {
        coord.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    pub fn coord(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0; self.dims.len()];
        for (a, &s) in self.strides.iter().enumerate() {
            c[a] = idx / s;
            idx %= s;
        }
        c
    }

    pub fn contains(&self, coord: &[usize]) -> bool {
        coord.len() == self.dims.len() && coord.iter().zip(&self.dims).all(|(c, d)| c < d)
    }

    /// Calls `f` for each face neighbour (4 in 2D, 6 in 3D) inside the grid.
    #[inline]
    pub fn for_each_neighbor(&self, idx: usize, mut f: impl FnMut(usize)) {
        for (a, &s) in self.strides.iter().enumerate() {
            let c = (idx / s) % self.dims[a];
            if c > 0 {
                f(idx - s);
            }
            if c + 1 < self.dims[a] {
                f(idx + s);
            }
        }
    }

    /// Spatial tensor shape `[1, channels, dims...]`.
    pub fn tensor_shape(&self, channels: usize) -> Vec<usize> {
        let mut s = vec![1, channels];
        s.extend_from_slice(&self.dims);
        s
    }

    /// Distance between opposite corner voxel centres.
    pub fn diagonal(&self) -> f64 {
        self.dims.iter().map(|&d| ((d - 1) * (d - 1)) as f64).sum::<f64>().sqrt()
    }
}

/// Scalar intensity field.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: Dims,
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.volume() {
            return Err(SegError::Shape(format!(
                "image data has {} values for grid {:?}",
                data.len(),
                dims.as_slice()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SegError::Grid(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { dims, data })
    }

    /// Builds an image and rescales it to zero mean, unit variance. A constant
    /// field is only centred.
    pub fn normalized(dims: Dims, data: Vec<f64>) -> Result<Self> {
        let mut img = Self::new(dims, data)?;
        img.normalize();
        Ok(img)
    }

    pub fn normalize(&mut self) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for v in &mut self.data {
            *v = (*v - mean) * scale;
        }
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims.tensor_shape(1), self.data.clone()).expect("image tensor")
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-voxel labels in `0..num_labels`; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u8>,
    num_labels: u8,
}

impl LabelMap {
    pub fn new(dims: Dims, labels: Vec<u8>, num_labels: u8) -> Result<Self> {
        if num_labels < 2 {
            return Err(SegError::Param(format!("need at least 2 labels, got {num_labels}")));
        }
        if labels.len() != dims.volume() {
            return Err(SegError::Shape(format!(
                "label map has {} values for grid {:?}",
                labels.len(),
                dims.as_slice()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(SegError::Label { label, num_labels });
        }
        Ok(Self {
            dims,
            labels,
            num_labels,
        })
    }

    pub fn empty(dims: Dims, num_labels: u8) -> Self {
        let n = dims.volume();
        Self::new(dims, vec![0; n], num_labels.max(2)).expect("empty map")
    }

    /// Binary map (two labels) from a foreground mask.
    pub fn from_mask(dims: Dims, mask: &[bool]) -> Result<Self> {
        Self::new(dims, mask.iter().map(|&m| m as u8).collect(), 2)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_labels(&self) -> u8 {
        self.num_labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn is_fg(&self, i: usize) -> bool {
        self.labels[i] != 0
    }

    pub fn set(&mut self, i: usize, label: u8) {
        assert!(label < self.num_labels, "label {label} >= {}", self.num_labels);
        self.labels[i] = label;
    }

    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn fg_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn fg_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != 0).collect()
    }

    fn check_same(&self, other: &LabelMap) -> Result<()> {
        if self.dims != other.dims {
            return Err(SegError::Shape(format!(
                "grids differ: {:?} vs {:?}",
                self.dims.as_slice(),
                other.dims.as_slice()
            )));
        }
        Ok(())
    }

    /// Foreground of `self` is contained in foreground of `other`.
    pub fn fg_subset_of(&self, other: &LabelMap) -> bool {
        self.dims == other.dims && self.labels.iter().zip(&other.labels).all(|(&a, &b)| a == 0 || b != 0)
    }

    /// Binary intersection of foregrounds.
    pub fn intersect(&self, other: &LabelMap) -> Result<LabelMap> {
        self.check_same(other)?;
        let mask: Vec<bool> = self.labels.iter().zip(&other.labels).map(|(&a, &b)| a != 0 && b != 0).collect();
        LabelMap::from_mask(self.dims.clone(), &mask)
    }

    /// Binary union of foregrounds.
    pub fn union(&self, other: &LabelMap) -> Result<LabelMap> {
        self.check_same(other)?;
        let mask: Vec<bool> = self.labels.iter().zip(&other.labels).map(|(&a, &b)| a != 0 || b != 0).collect();
        LabelMap::from_mask(self.dims.clone(), &mask)
    }

    /// Centroid of the foreground in voxel coordinates.
    pub fn fg_centroid(&self) -> Option<Vec<f64>> {
        let fg = self.fg_indices();
        if fg.is_empty() {
            return None;
        }
        let mut c = vec![0.0; self.dims.rank()];
        for &i in &fg {
            for (a, v) in self.dims.coord(i).into_iter().enumerate() {
                c[a] += v as f64;
            }
        }
        Some(c.into_iter().map(|v| v / fg.len() as f64).collect())
    }
}

/// User-placed seed: voxel coordinate plus ball radius.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    pub coord: Vec<usize>,
    pub radius: u32,
}

impl Seed {
    pub fn new(coord: Vec<usize>, radius: u32) -> Self {
        Self { coord, radius }
    }

    pub fn check_in(&self, dims: &Dims) -> Result<()> {
        if self.coord.len() != dims.rank() {
            return Err(SegError::OutOfBounds {
                what: "seed",
                detail: format!("seed has rank {} but grid has rank {}", self.coord.len(), dims.rank()),
            });
        }
        for (a, (&c, &d)) in self.coord.iter().zip(dims.as_slice()).enumerate() {
            if c >= d {
                return Err(SegError::OutOfBounds {
                    what: "seed",
                    detail: format!("coordinate {c} on axis {a} is outside 0..{d}"),
                });
            }
        }
        Ok(())
    }

    pub fn index(&self, dims: &Dims) -> usize {
        dims.index(&self.coord)
    }
}

/// Completion indicator of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StopFlag(pub bool);

impl StopFlag {
    pub fn is_set(self) -> bool {
        self.0
    }
}

/// One teacher-forcing sample: input map, target map, target stop flag.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTuple {
    pub prev: LabelMap,
    pub target: LabelMap,
    pub stop: StopFlag,
}

/// `[1, L, dims...]` indicator channels.
pub fn one_hot(map: &LabelMap, num_labels: u8) -> Result<Tensor> {
    if let Some(&label) = map.labels.iter().find(|&&l| l >= num_labels) {
        return Err(SegError::Label { label, num_labels });
    }
    let vol = map.len();
    let mut t = Tensor::zeros(&map.dims.tensor_shape(num_labels as usize));
    for (i, &l) in map.labels.iter().enumerate() {
        t.data_mut()[l as usize * vol + i] = 1.0;
    }
    Ok(t)
}

/// Per-voxel most probable label of a `[1, L, dims...]` tensor; ties go to
/// the lower label.
pub fn argmax(prob: &Tensor, dims: &Dims) -> Result<LabelMap> {
    let shape = prob.shape();
    if shape.len() != dims.rank() + 2 || shape[0] != 1 || &shape[2..] != dims.as_slice() {
        return Err(SegError::Shape(format!(
            "probability tensor {:?} does not match grid {:?}",
            shape,
            dims.as_slice()
        )));
    }
    let l = shape[1];
    let vol = dims.volume();
    let d = prob.data();
    let labels = (0..vol)
        .map(|i| {
            let mut best = 0;
            for c in 1..l {
                if d[c * vol + i] > d[best * vol + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(dims.clone(), labels, l.max(2) as u8)
}

/// Ball of radius `seed.radius` (Euclidean, inclusive) around the seed.
pub fn seed_to_map(seed: &Seed, dims: &Dims) -> Result<LabelMap> {
    seed.check_in(dims)?;
    let r2 = u64::from(seed.radius) * u64::from(seed.radius);
    let mask: Vec<bool> = (0..dims.volume())
        .map(|i| {
            let c = dims.coord(i);
            let d2: u64 = c
                .iter()
                .zip(&seed.coord)
                .map(|(&a, &b)| {
                    let d = a.abs_diff(b) as u64;
                    d * d
                })
                .sum();
            d2 <= r2
        })
        .collect();
    LabelMap::from_mask(dims.clone(), &mask)
}

/// Euclidean distance to the seed centre divided by the grid diagonal,
/// as a `[1, 1, dims...]` tensor.
pub fn distance_channel(seed: &Seed, dims: &Dims) -> Result<Tensor> {
    seed.check_in(dims)?;
    let diag = dims.diagonal().max(1.0);
    let data = (0..dims.volume())
        .map(|i| {
            let c = dims.coord(i);
            let d2: f64 = c
                .iter()
                .zip(&seed.coord)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            d2.sqrt() / diag
        })
        .collect();
    Ok(Tensor::new(dims.tensor_shape(1), data)?)
}
