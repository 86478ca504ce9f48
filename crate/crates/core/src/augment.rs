//! Training-time augmentation: spatial warps, intensity jitter, mirror
//! flips, and corruption of the input segmentation.
//!
//! Warps are 2D only. Images and float fields are resampled bilinearly,
//! label maps by nearest neighbour.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::{Dims, Image, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpParams {
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale: (f64, f64),
    /// Maximum displacement of the smooth random field, in voxels.
    pub elastic_amplitude: f64,
    /// Gaussian smoothing width of the random field.
    pub elastic_sigma: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            translation: 5.0,
            scale: (0.9, 1.1),
            elastic_amplitude: 4.0,
            elastic_sigma: 8.0,
        }
    }
}

impl WarpParams {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: 0.0,
            scale: (1.0, 1.0),
            elastic_amplitude: 0.0,
            elastic_sigma: 8.0,
        }
    }
}

/// A sampled 2D transform. Output voxel `p` reads from
/// `A (p - c) + c - t + field(p)`, where `c` is the grid centre.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    dims: Dims,
    matrix: [[f64; 2]; 2],
    shift: [f64; 2],
    field: Option<Vec<[f64; 2]>>,
}

fn random_sym<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a 2D field with clamped borders.
fn blur2d(h: usize, w: usize, data: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * data[y * w + (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[(y as isize + j as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

/// Smooth random displacement field whose largest vector has length `amplitude`.
fn smooth_field<R: Rng + ?Sized>(rng: &mut R, dims: &Dims, amplitude: f64, sigma: f64) -> Vec<[f64; 2]> {
    let (h, w) = (dims.as_slice()[0], dims.as_slice()[1]);
    let mut comps = [0usize, 1].map(|_| {
        let raw: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
        blur2d(h, w, &raw, sigma)
    });
    let peak = (0..h * w)
        .map(|i| comps[0][i].hypot(comps[1][i]))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for c in &mut comps {
        for v in c.iter_mut() {
            *v *= amplitude / peak;
        }
    }
    (0..h * w).map(|i| [comps[0][i], comps[1][i]]).collect()
}

fn require_2d(dims: &Dims) -> Result<()> {
    if dims.rank() != 2 {
        return Err(SegError::Param(format!("spatial warps support 2D grids only, got {:?}", dims.as_slice())));
    }
    Ok(())
}

impl Warp {
    pub fn identity(dims: &Dims) -> Result<Self> {
        require_2d(dims)?;
        Ok(Self {
            dims: dims.clone(),
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            shift: [0.0, 0.0],
            field: None,
        })
    }

    /// Pure translation by `(rows, cols)`: content moves by this amount.
    pub fn translation(dims: &Dims, rows: f64, cols: f64) -> Result<Self> {
        let mut w = Self::identity(dims)?;
        w.shift = [rows, cols];
        Ok(w)
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dims: &Dims, params: &WarpParams) -> Result<Self> {
        require_2d(dims)?;
        let theta = random_sym(rng, params.rotation_deg).to_radians();
        let (lo, hi) = params.scale;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SegError::Param(format!("scale range ({lo}, {hi}) must be positive and ordered")));
        }
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let shift = [random_sym(rng, params.translation), random_sym(rng, params.translation)];
        let (s, c) = theta.sin_cos();
        // inverse of scale * rotation
        let matrix = [[c / scale, s / scale], [-s / scale, c / scale]];
        let field = if params.elastic_amplitude > 0.0 {
            let amp = rng.random_range(0.0..=params.elastic_amplitude);
            Some(smooth_field(rng, dims, amp, params.elastic_sigma.max(1.0)))
        } else {
            None
        };
        Ok(Self {
            dims: dims.clone(),
            matrix,
            shift,
            field,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == [[1.0, 0.0], [0.0, 1.0]] && self.shift == [0.0, 0.0] && self.field.is_none()
    }

    fn source(&self, i: usize) -> (f64, f64) {
        let w = self.dims.as_slice()[1];
        let (h, wf) = (self.dims.as_slice()[0] as f64, w as f64);
        let (cy, cx) = ((h - 1.0) / 2.0, (wf - 1.0) / 2.0);
        let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
        let m = &self.matrix;
        let mut sy = m[0][0] * y + m[0][1] * x + cy - self.shift[0];
        let mut sx = m[1][0] * y + m[1][1] * x + cx - self.shift[1];
        if let Some(f) = &self.field {
            sy += f[i][0];
            sx += f[i][1];
        }
        (sy, sx)
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        if dims != &self.dims {
            return Err(SegError::Shape(format!(
                "warp sampled for {:?} applied to {:?}",
                self.dims.as_slice(),
                dims.as_slice()
            )));
        }
        Ok(())
    }

    /// Bilinear resampling; samples outside the grid read `fill`.
    pub fn apply_field(&self, data: &[f64], fill: f64) -> Vec<f64> {
        if self.is_identity() {
            return data.to_vec();
        }
        let (h, w) = (self.dims.as_slice()[0], self.dims.as_slice()[1]);
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                fill
            } else {
                data[y as usize * w + x as usize]
            }
        };
        (0..h * w)
            .map(|i| {
                let (sy, sx) = self.source(i);
                if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
                    return fill;
                }
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
            })
            .collect()
    }

    pub fn apply_image(&self, img: &Image, fill: f64) -> Result<Image> {
        self.check(img.dims())?;
        Image::new(img.dims().clone(), self.apply_field(img.data(), fill))
    }

    /// Nearest-neighbour resampling; samples outside the grid are background.
    pub fn apply_labels(&self, map: &LabelMap) -> Result<LabelMap> {
        self.check(map.dims())?;
        if self.is_identity() {
            return Ok(map.clone());
        }
        let (h, w) = (self.dims.as_slice()[0], self.dims.as_slice()[1]);
        let labels = (0..h * w)
            .map(|i| {
                let (sy, sx) = self.source(i);
                let (y, x) = (sy.round(), sx.round());
                if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                    0
                } else {
                    map.labels()[y as usize * w + x as usize]
                }
            })
            .collect();
        LabelMap::new(map.dims().clone(), labels, map.num_labels())
    }
}

/// Mean intensity of the outermost voxel ring, used as out-of-grid fill.
pub fn border_fill(img: &Image) -> f64 {
    let d = img.dims();
    let (sum, n) = (0..d.volume())
        .filter(|&i| {
            let c = d.coord(i);
            c.iter().zip(d.as_slice()).any(|(&a, &n)| a == 0 || a + 1 == n)
        })
        .fold((0.0, 0usize), |(s, n), i| (s + img.data()[i], n + 1));
    sum / n.max(1) as f64
}

/// Samples one warp and applies it to the image and every map.
pub fn spatial_augment<R: Rng + ?Sized>(
    img: &Image,
    maps: &[&LabelMap],
    rng: &mut R,
    params: &WarpParams,
) -> Result<(Image, Vec<LabelMap>)> {
    let warp = Warp::sample(rng, img.dims(), params)?;
    let out = warp.apply_image(img, border_fill(img))?;
    let maps = maps.iter().map(|m| warp.apply_labels(m)).collect::<Result<Vec<_>>>()?;
    Ok((out, maps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityParams {
    pub max_shift: f64,
    pub max_noise_sigma: f64,
}

impl Default for IntensityParams {
    fn default() -> Self {
        Self {
            max_shift: 0.3,
            max_noise_sigma: 0.15,
        }
    }
}

/// `x + c + N(0, sigma²)` per voxel.
pub fn shift_and_noise<R: Rng + ?Sized>(img: &Image, shift: f64, sigma: f64, rng: &mut R) -> Result<Image> {
    let mut out = img.clone();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| SegError::Param(e.to_string()))?;
        for v in out.data_mut() {
            *v += shift + noise.sample(rng);
        }
    } else {
        for v in out.data_mut() {
            *v += shift;
        }
    }
    Ok(out)
}

pub fn intensity_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R, params: &IntensityParams) -> Result<Image> {
    let shift = random_sym(rng, params.max_shift);
    let sigma = if params.max_noise_sigma > 0.0 {
        rng.random_range(0.0..=params.max_noise_sigma)
    } else {
        0.0
    };
    shift_and_noise(img, shift, sigma, rng)
}

/// Mirror `data` (laid out on `dims`) along `axis`.
pub fn flip_values<T: Copy>(dims: &Dims, data: &[T], axis: usize) -> Vec<T> {
    let n = dims.as_slice()[axis];
    let stride = dims.strides()[axis];
    (0..data.len())
        .map(|i| {
            let a = (i / stride) % n;
            data[i - a * stride + (n - 1 - a) * stride]
        })
        .collect()
}

pub fn flip_image(img: &Image, axis: usize) -> Image {
    Image::new(img.dims().clone(), flip_values(img.dims(), img.data(), axis)).expect("same grid")
}

pub fn flip_labels(map: &LabelMap, axis: usize) -> LabelMap {
    LabelMap::new(map.dims().clone(), flip_values(map.dims(), map.labels(), axis), map.num_labels()).expect("same grid")
}

/// Axes chosen for mirroring, each enabled axis with probability 0.5.
pub fn sample_flips<R: Rng + ?Sized>(rng: &mut R, enabled: &[bool]) -> Vec<usize> {
    enabled
        .iter()
        .enumerate()
        .filter_map(|(a, &on)| (on && rng.random_bool(0.5)).then_some(a))
        .collect()
}

pub fn flip_augment<R: Rng + ?Sized>(
    img: &Image,
    maps: &[&LabelMap],
    rng: &mut R,
    enabled: &[bool],
) -> Result<(Image, Vec<LabelMap>)> {
    if enabled.len() > img.dims().rank() {
        return Err(SegError::Param(format!(
            "{} flip axes given for a rank-{} grid",
            enabled.len(),
            img.dims().rank()
        )));
    }
    let axes = sample_flips(rng, enabled);
    let mut out = img.clone();
    let mut maps: Vec<LabelMap> = maps.iter().map(|&m| m.clone()).collect();
    for &a in &axes {
        out = flip_image(&out, a);
        for m in &mut maps {
            *m = flip_labels(m, a);
        }
    }
    Ok((out, maps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptParams {
    pub blob_count: (usize, usize),
    pub blob_radius: (f64, f64),
    /// Probability that a blob is centred on the current foreground.
    pub attach_prob: f64,
    pub elastic_amplitude: f64,
    pub elastic_sigma: f64,
}

impl Default for CorruptParams {
    fn default() -> Self {
        Self {
            blob_count: (0, 4),
            blob_radius: (1.0, 5.0),
            attach_prob: 0.5,
            elastic_amplitude: 3.0,
            elastic_sigma: 8.0,
        }
    }
}

impl CorruptParams {
    pub fn none() -> Self {
        Self {
            blob_count: (0, 0),
            blob_radius: (1.0, 1.0),
            attach_prob: 0.0,
            elastic_amplitude: 0.0,
            elastic_sigma: 8.0,
        }
    }
}

/// Disc of `radius` around `center`, unioned into `mask`.
pub fn stamp_blob(dims: &Dims, mask: &mut [bool], center: &[usize], radius: f64) {
    let r2 = radius * radius;
    for (i, m) in mask.iter_mut().enumerate() {
        let d2: f64 = dims
            .coord(i)
            .iter()
            .zip(center)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        if d2 <= r2 {
            *m = true;
        }
    }
}

/// Deforms `prev` and unions random blobs into it. Only the input map of a
/// tuple is corrupted; the caller keeps the target untouched.
pub fn corrupt_segmentation<R: Rng + ?Sized>(prev: &LabelMap, rng: &mut R, params: &CorruptParams) -> Result<LabelMap> {
    let dims = prev.dims().clone();
    let deformed = if params.elastic_amplitude > 0.0 {
        require_2d(&dims)?;
        let amp = rng.random_range(0.0..=params.elastic_amplitude);
        let warp = Warp {
            dims: dims.clone(),
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            shift: [0.0, 0.0],
            field: Some(smooth_field(rng, &dims, amp, params.elastic_sigma.max(1.0))),
        };
        warp.apply_labels(prev)?
    } else {
        prev.clone()
    };
    let (lo, hi) = params.blob_count;
    let count = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if count == 0 {
        return Ok(deformed);
    }
    let fg = deformed.fg_indices();
    let mut mask = deformed.mask();
    for _ in 0..count {
        let (rlo, rhi) = params.blob_radius;
        let radius = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
        let attach = !fg.is_empty() && rng.random_bool(params.attach_prob.clamp(0.0, 1.0));
        let center = if attach {
            dims.coord(fg[rng.random_range(0..fg.len())])
        } else {
            dims.as_slice().iter().map(|&n| rng.random_range(0..n)).collect()
        };
        stamp_blob(&dims, &mut mask, &center, radius);
    }
    let labels = mask.iter().map(|&m| u8::from(m)).collect();
    LabelMap::new(dims, labels, prev.num_labels())
}

/// All augmentation settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub spatial: bool,
    pub warp: WarpParams,
    pub intensity: bool,
    pub intensity_params: IntensityParams,
    /// Per-axis flip enables, e.g. `[true, true]` for both axes of a 2D grid.
    pub flips: Vec<bool>,
    pub corrupt: bool,
    pub corruption: CorruptParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            spatial: true,
            warp: WarpParams::default(),
            intensity: true,
            intensity_params: IntensityParams::default(),
            flips: vec![true, true],
            corrupt: true,
            corruption: CorruptParams::default(),
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            spatial: false,
            warp: WarpParams::none(),
            intensity: false,
            intensity_params: IntensityParams::default(),
            flips: vec![],
            corrupt: false,
            corruption: CorruptParams::none(),
        }
    }
}

/// Augmented training sample: image, optional float side channel (moved
/// with the image), input map and target map.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSample {
    pub image: Image,
    pub field: Option<Vec<f64>>,
    pub prev: LabelMap,
    pub target: LabelMap,
}

/// Spatial warp and flips act on everything jointly; intensity jitter acts
/// on the image; corruption acts on `prev` last.
pub fn augment_sample<R: Rng + ?Sized>(
    image: &Image,
    field: Option<&[f64]>,
    prev: &LabelMap,
    target: &LabelMap,
    rng: &mut R,
    params: &AugmentParams,
) -> Result<AugSample> {
    let mut img = image.clone();
    let mut field = field.map(|f| f.to_vec());
    let mut prev = prev.clone();
    let mut target = target.clone();
    if params.spatial {
        let warp = Warp::sample(rng, img.dims(), &params.warp)?;
        let fill = border_fill(&img);
        img = warp.apply_image(&img, fill)?;
        if let Some(f) = &mut field {
            let edge = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *f = warp.apply_field(f, edge);
        }
        prev = warp.apply_labels(&prev)?;
        target = warp.apply_labels(&target)?;
    }
    if params.flips.len() > img.dims().rank() {
        return Err(SegError::Param(format!("{} flip axes for a rank-{} grid", params.flips.len(), img.dims().rank())));
    }
    for a in sample_flips(rng, &params.flips) {
        img = flip_image(&img, a);
        if let Some(f) = &mut field {
            *f = flip_values(img.dims(), f, a);
        }
        prev = flip_labels(&prev, a);
        target = flip_labels(&target, a);
    }
    if params.intensity {
        img = intensity_augment(&img, rng, &params.intensity_params)?;
    }
    if params.corrupt {
        prev = corrupt_segmentation(&prev, rng, &params.corruption)?;
    }
    Ok(AugSample { image: img, field, prev, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution_on_each_axis() {
        let dims = Dims::new(vec![3, 4, 5]).unwrap();
        let data: Vec<usize> = (0..60).collect();
        for a in 0..3 {
            let f = flip_values(&dims, &data, a);
            assert_ne!(f, data);
            assert_eq!(flip_values(&dims, &f, a), data);
        }
    }

    #[test]
    fn gaussian_kernel_normalized() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
