//! Synthetic seeded-segmentation cases.
//!
//! Tube cases: a bright curved tube enters from the bottom border and ends
//! inside a round blob of the same intensity. The truth is the tube up to the
//! blob, so the end of the truth is not an intensity edge.
//!
//! Chamber cases: a bright deformed ellipse next to a second ellipse of the
//! same intensity, separated by a dark wall with a narrow bright gap. The
//! truth is the primary chamber only.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::{Dims, Image, LabelMap};
use crate::gridio;
use crate::morpho::{self, distance_map, UNREACHED};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Tube,
    Chamber,
}

impl StructureKind {
    pub const ALL: [StructureKind; 2] = [StructureKind::Tube, StructureKind::Chamber];
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureKind::Tube => "tube",
            StructureKind::Chamber => "chamber",
        })
    }
}

/// Ordered mild < moderate < severe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceParams {
    /// Structure intensity above the background level.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Amplitude of the smooth background field.
    pub texture_amplitude: f64,
    pub texture_waves: usize,
}

impl Default for AppearanceParams {
    fn default() -> Self {
        Self {
            contrast: 1.0,
            noise_sigma: 0.15,
            texture_amplitude: 0.25,
            texture_waves: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeParams {
    pub width_min: f64,
    pub width_max: f64,
    pub length_min: f64,
    pub length_max: f64,
    /// Total turning angle range in radians, per severity.
    pub turn_mild: (f64, f64),
    pub turn_moderate: (f64, f64),
    pub turn_severe: (f64, f64),
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    /// Truth stops this many rows short of the entry border (upper bound).
    pub max_cut: usize,
}

impl Default for TubeParams {
    fn default() -> Self {
        Self {
            width_min: 6.0,
            width_max: 9.0,
            length_min: 30.0,
            length_max: 40.0,
            turn_mild: (0.2, 0.7),
            turn_moderate: (0.7, 1.2),
            turn_severe: (1.1, 1.6),
            blob_radius_min: 8.0,
            blob_radius_max: 11.0,
            max_cut: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChamberParams {
    pub primary_rows: (f64, f64),
    pub primary_cols: (f64, f64),
    pub distractor_rows: (f64, f64),
    pub distractor_cols: (f64, f64),
    /// Wall thickness range between the chambers (inclusive integers).
    pub wall: (usize, usize),
    /// Width range of the bright gap through the wall.
    pub gap: (usize, usize),
    /// Harmonic boundary deformation amplitude per severity.
    pub deform_mild: f64,
    pub deform_moderate: f64,
    pub deform_severe: f64,
    pub seed_erosion: u32,
}

impl Default for ChamberParams {
    fn default() -> Self {
        Self {
            primary_rows: (10.0, 14.0),
            primary_cols: (8.0, 11.0),
            distractor_rows: (8.0, 12.0),
            distractor_cols: (7.0, 10.0),
            wall: (3, 4),
            gap: (2, 3),
            deform_mild: 0.03,
            deform_moderate: 0.07,
            deform_severe: 0.12,
            seed_erosion: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub side: usize,
    pub appearance: AppearanceParams,
    pub tube: TubeParams,
    pub chamber: ChamberParams,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            side: 64,
            appearance: AppearanceParams::default(),
            tube: TubeParams::default(),
            chamber: ChamberParams::default(),
        }
    }
}

/// One generated case. `distractor` marks the same-intensity region the
/// segmentation must not enter; `ignore` marks voxels excluded from scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub id: usize,
    pub kind: StructureKind,
    pub severity: Severity,
    pub image: Image,
    pub truth: LabelMap,
    pub seed_region: LabelMap,
    pub distractor: LabelMap,
    pub ignore: LabelMap,
}

const MAX_ATTEMPTS: usize = 200;

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn uniform_int<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi.max(lo))
}

fn check_range(name: &str, lo: f64, hi: f64, min: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo < min || hi < lo {
        return Err(SegError::Param(format!("{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi")));
    }
    Ok(())
}

/// Builds the intensity image: background field plus noise, raised by
/// `contrast` on `bright` voxels.
fn render<R: Rng + ?Sized>(rng: &mut R, dims: &Dims, bright: &[bool], p: &AppearanceParams) -> Result<Image> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..p.texture_waves)
        .map(|_| {
            let wavelength = rng.random_range(12.0..48.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (2.0 * PI / wavelength, angle, phase, amp)
        })
        .collect();
    let norm = (p.texture_waves.max(1) as f64).sqrt();
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| SegError::Param(e.to_string()))?;
    let side_c = dims.as_slice()[dims.rank() - 1];
    let data = (0..dims.volume())
        .map(|i| {
            let (r, c) = ((i / side_c) as f64, (i % side_c) as f64);
            let field: f64 = waves
                .iter()
                .map(|&(k, a, ph, amp)| amp * (k * (r * a.cos() + c * a.sin()) + ph).sin())
                .sum::<f64>()
                / norm;
            let base = if bright[i] { p.contrast } else { 0.0 };
            base + p.texture_amplitude * field + noise.sample(rng)
        })
        .collect();
    Image::normalized(dims.clone(), data)
}

fn mirror_cols(map: &LabelMap) -> LabelMap {
    let d = map.dims().as_slice();
    let (h, w) = (d[0], d[1]);
    let mut labels = vec![0u8; map.len()];
    for r in 0..h {
        for c in 0..w {
            labels[r * w + c] = map.labels()[r * w + (w - 1 - c)];
        }
    }
    LabelMap::new(map.dims().clone(), labels, map.num_labels()).expect("same grid")
}

fn mirror_mask(dims: &Dims, mask: &[bool]) -> Vec<bool> {
    let w = dims.as_slice()[1];
    (0..mask.len()).map(|i| mask[(i / w) * w + (w - 1 - i % w)]).collect()
}

fn single_component(map: &LabelMap) -> bool {
    morpho::islands(map).len() == 1
}

/// Tube case on a `side × side` grid.
pub fn make_tube_case<R: Rng + ?Sized>(rng: &mut R, params: &SynthParams, severity: Severity) -> Result<SynthCase> {
    let tp = &params.tube;
    check_range("tube width", tp.width_min, tp.width_max, 2.0)?;
    check_range("tube length", tp.length_min, tp.length_max, 1.0)?;
    check_range("blob radius", tp.blob_radius_min, tp.blob_radius_max, 1.0)?;
    if params.side < 16 {
        return Err(SegError::Param(format!("grid side {} too small for tube cases", params.side)));
    }
    let side = params.side;
    let s = side as f64;
    let dims = Dims::square(side);
    let turn_range = match severity {
        Severity::Mild => tp.turn_mild,
        Severity::Moderate => tp.turn_moderate,
        Severity::Severe => tp.turn_severe,
    };
    for _ in 0..MAX_ATTEMPTS {
        let width = uniform(rng, (tp.width_min, tp.width_max));
        let length = uniform(rng, (tp.length_min, tp.length_max));
        let turn = uniform(rng, turn_range);
        let wobble = rng.random_range(0.0..0.5);
        let wobble_phase = rng.random_range(0.0..2.0 * PI);
        let radius = uniform(rng, (tp.blob_radius_min, tp.blob_radius_max));
        let cut = rng.random_range(0..=tp.max_cut);
        // start just below the bottom border so the tube touches it
        let mut pos = (s + 1.0, rng.random_range(0.25 * s..0.5 * s));
        let mut heading = 0.0f64;
        let ds = 0.25;
        let n = (length / ds).ceil() as usize;
        let mut line = Vec::with_capacity(n + 1);
        line.push(pos);
        for k in 0..n {
            let u = k as f64 / n as f64;
            let kappa = turn / length * (1.0 + wobble * (2.0 * PI * u + wobble_phase).sin());
            heading += kappa * ds;
            pos = (pos.0 - heading.cos() * ds, pos.1 + heading.sin() * ds);
            line.push(pos);
        }
        let center = (pos.0 - heading.cos() * 0.6 * radius, pos.1 + heading.sin() * 0.6 * radius);
        let margin = 2.0;
        if center.0 < radius + margin
            || center.0 > s - radius - margin
            || center.1 < radius + margin
            || center.1 > s - radius - margin
        {
            continue;
        }
        if line.iter().any(|&(_, c)| c < width || c > s - width) {
            continue;
        }
        let half = width / 2.0;
        let mut tube = vec![false; dims.volume()];
        let mut blob = vec![false; dims.volume()];
        for i in 0..dims.volume() {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            blob[i] = (r - center.0).powi(2) + (c - center.1).powi(2) <= radius * radius;
            tube[i] = line.iter().any(|&(lr, lc)| (r - lr).powi(2) + (c - lc).powi(2) <= half * half);
        }
        let cut_row = side - cut;
        let truth_mask: Vec<bool> = (0..dims.volume()).map(|i| tube[i] && !blob[i] && i / side < cut_row).collect();
        let ignore_mask: Vec<bool> = (0..dims.volume()).map(|i| tube[i] && !blob[i] && i / side >= cut_row).collect();
        let mut truth = LabelMap::from_mask(dims.clone(), &truth_mask)?;
        if truth.fg_count() == 0 || !single_component(&truth) {
            continue;
        }
        // seed region: interior voxels a short distance up from the truth's open end
        let open_end: Vec<bool> = (0..dims.volume()).map(|i| truth_mask[i] && i / side == cut_row - 1).collect();
        let along = distance_map(&dims, &open_end, Some(&truth_mask), 10);
        let outside: Vec<bool> = truth_mask.iter().map(|&t| !t).collect();
        let depth = distance_map(&dims, &outside, None, 3);
        let pick = |min_depth: u32| -> Vec<bool> {
            (0..dims.volume())
                .map(|i| truth_mask[i] && along[i] != UNREACHED && (3..=10).contains(&along[i]) && depth[i] >= min_depth)
                .collect()
        };
        let mut region = pick(3);
        if !region.iter().any(|&b| b) {
            region = pick(2);
        }
        if !region.iter().any(|&b| b) {
            continue;
        }
        let bright: Vec<bool> = (0..dims.volume()).map(|i| tube[i] || blob[i]).collect();
        let mut seed_region = LabelMap::from_mask(dims.clone(), &region)?;
        let mut distractor = LabelMap::from_mask(dims.clone(), &blob)?;
        let mut ignore = LabelMap::from_mask(dims.clone(), &ignore_mask)?;
        let bright = if severity == Severity::Severe {
            truth = mirror_cols(&truth);
            seed_region = mirror_cols(&seed_region);
            distractor = mirror_cols(&distractor);
            ignore = mirror_cols(&ignore);
            mirror_mask(&dims, &bright)
        } else {
            bright
        };
        let image = render(rng, &dims, &bright, &params.appearance)?;
        return Ok(SynthCase {
            id: 0,
            kind: StructureKind::Tube,
            severity,
            image,
            truth,
            seed_region,
            distractor,
            ignore,
        });
    }
    Err(SegError::Param(format!(
        "could not place a tube case on a {side}x{side} grid in {MAX_ATTEMPTS} attempts"
    )))
}

/// Deformed ellipse membership: normalized radius ≤ 1.
fn in_shape(r: f64, c: f64, center: (f64, f64), axes: (f64, f64), harmonics: &[(f64, f64); 2]) -> bool {
    let (dr, dc) = (r - center.0, c - center.1);
    let phi = dr.atan2(dc);
    let scale = 1.0 + harmonics[0].0 * (2.0 * phi + harmonics[0].1).cos() + harmonics[1].0 * (3.0 * phi + harmonics[1].1).cos();
    (dr / axes.0).powi(2) + (dc / axes.1).powi(2) <= scale * scale
}

/// Chamber case on a `side × side` grid.
pub fn make_chamber_case<R: Rng + ?Sized>(rng: &mut R, params: &SynthParams, severity: Severity) -> Result<SynthCase> {
    let cp = &params.chamber;
    check_range("primary rows", cp.primary_rows.0, cp.primary_rows.1, 2.0)?;
    check_range("primary cols", cp.primary_cols.0, cp.primary_cols.1, 2.0)?;
    check_range("distractor rows", cp.distractor_rows.0, cp.distractor_rows.1, 2.0)?;
    check_range("distractor cols", cp.distractor_cols.0, cp.distractor_cols.1, 2.0)?;
    if cp.gap.0 < 1 || cp.gap.1 < cp.gap.0 || cp.wall.0 < 1 || cp.wall.1 < cp.wall.0 {
        return Err(SegError::Param("chamber wall and gap ranges must be positive and ordered".into()));
    }
    let side = params.side;
    let s = side as f64;
    let dims = Dims::square(side);
    let amp = match severity {
        Severity::Mild => cp.deform_mild,
        Severity::Moderate => cp.deform_moderate,
        Severity::Severe => cp.deform_severe,
    };
    for _ in 0..MAX_ATTEMPTS {
        let pa = (uniform(rng, cp.primary_rows), uniform(rng, cp.primary_cols));
        let qa = (uniform(rng, cp.distractor_rows), uniform(rng, cp.distractor_cols));
        let ph: [(f64, f64); 2] = [
            (amp * rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)),
            (amp * rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)),
        ];
        let qh: [(f64, f64); 2] = [
            (amp * rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)),
            (amp * rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)),
        ];
        let wall = uniform_int(rng, cp.wall) as f64;
        let gap = uniform_int(rng, cp.gap);
        let total = 2.0 * pa.1 + wall + 2.0 * qa.1;
        let left = (s - total) / 2.0 + rng.random_range(-3.0..3.0);
        let pc = (s / 2.0 + rng.random_range(-4.0..4.0), left + pa.1);
        let qc = (pc.0 + rng.random_range(-4.0..4.0), left + 2.0 * pa.1 + wall + qa.1);
        let mut primary = vec![false; dims.volume()];
        let mut other = vec![false; dims.volume()];
        for i in 0..dims.volume() {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            primary[i] = in_shape(r, c, pc, pa, &ph);
            other[i] = !primary[i] && in_shape(r, c, qc, qa, &qh);
        }
        // both chambers must keep a background margin to the border
        let touches = |m: &[bool]| {
            (0..dims.volume()).any(|i| m[i] && {
                let (r, c) = (i / side, i % side);
                r < 2 || c < 2 || r + 2 >= side || c + 2 >= side
            })
        };
        if touches(&primary) || touches(&other) {
            continue;
        }
        // the chambers must be separated before the gap is cut
        let pmap = LabelMap::from_mask(dims.clone(), &primary)?;
        let near = morpho::dilate(&pmap, 2);
        if (0..dims.volume()).any(|i| other[i] && near.is_fg(i)) {
            continue;
        }
        // bright gap: horizontal band from the primary centre to the distractor centre
        let row0 = (pc.0.min(qc.0) + (pc.0 - qc.0).abs() / 2.0 + rng.random_range(-2.0..2.0)).round() as usize;
        let (c0, c1) = (pc.1.round() as usize, qc.1.round() as usize);
        let mut channel = vec![false; dims.volume()];
        for r in row0..(row0 + gap).min(side) {
            for c in c0..=c1 {
                let i = r * side + c;
                channel[i] = !primary[i] && !other[i];
            }
        }
        let mut distractor_mask: Vec<bool> = (0..dims.volume()).map(|i| other[i] || channel[i]).collect();
        let bright: Vec<bool> = (0..dims.volume()).map(|i| primary[i] || distractor_mask[i]).collect();
        // the primary and distractor must actually connect through the gap
        let bright_map = LabelMap::from_mask(dims.clone(), &bright)?;
        if !single_component(&bright_map) {
            continue;
        }
        let mut truth = pmap;
        if !single_component(&truth) {
            continue;
        }
        let core = morpho::erode(&truth, cp.seed_erosion);
        let central: Vec<bool> = (0..dims.volume())
            .map(|i| {
                let (r, c) = ((i / side) as f64, (i % side) as f64);
                core.is_fg(i) && ((r - pc.0) / pa.0).powi(2) + ((c - pc.1) / pa.1).powi(2) <= 0.25
            })
            .collect();
        if !central.iter().any(|&b| b) {
            continue;
        }
        let mut seed_region = LabelMap::from_mask(dims.clone(), &central)?;
        let bright = if severity == Severity::Severe {
            truth = mirror_cols(&truth);
            seed_region = mirror_cols(&seed_region);
            distractor_mask = mirror_mask(&dims, &distractor_mask);
            mirror_mask(&dims, &bright)
        } else {
            bright
        };
        let image = render(rng, &dims, &bright, &params.appearance)?;
        return Ok(SynthCase {
            id: 0,
            kind: StructureKind::Chamber,
            severity,
            image,
            truth,
            seed_region,
            distractor: LabelMap::from_mask(dims.clone(), &distractor_mask)?,
            ignore: LabelMap::empty(dims.clone(), 2),
        });
    }
    Err(SegError::Param(format!(
        "could not place a chamber case on a {side}x{side} grid in {MAX_ATTEMPTS} attempts"
    )))
}

pub fn make_case<R: Rng + ?Sized>(
    rng: &mut R,
    params: &SynthParams,
    kind: StructureKind,
    severity: Severity,
) -> Result<SynthCase> {
    match kind {
        StructureKind::Tube => make_tube_case(rng, params, severity),
        StructureKind::Chamber => make_chamber_case(rng, params, severity),
    }
}

/// Severity counts for `n` cases, in the proportion 11 mild : 5 moderate : 4 severe.
pub fn severity_counts(n: usize) -> (usize, usize, usize) {
    let severe = ((n * 4) as f64 / 20.0).round().max(1.0) as usize;
    let moderate = ((n * 5) as f64 / 20.0).round().max(1.0) as usize;
    (n - severe - moderate, moderate, severe)
}

/// Generated cases of one structure kind plus a stratified fold assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: StructureKind,
    pub cases: Vec<SynthCase>,
    /// `folds[f]` lists the case ids held out in fold `f`.
    pub folds: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn split(&self, fold: usize) -> Result<(Vec<&SynthCase>, Vec<&SynthCase>)> {
        let test_ids = self
            .folds
            .get(fold)
            .ok_or_else(|| SegError::Param(format!("fold {fold} out of range 0..{}", self.folds.len())))?;
        let (test, train): (Vec<&SynthCase>, Vec<&SynthCase>) =
            self.cases.iter().partition(|c| test_ids.contains(&c.id));
        Ok((train, test))
    }
}

/// `n` cases of `kind`, split into folds of `test_size` held-out cases
/// with severities spread round-robin across folds.
pub fn make_dataset(seed: u64, kind: StructureKind, n: usize, test_size: usize, params: &SynthParams) -> Result<Dataset> {
    if n < 3 {
        return Err(SegError::Param(format!("need at least 3 cases (one per severity), got {n}")));
    }
    if test_size == 0 || test_size >= n || !n.is_multiple_of(test_size) {
        return Err(SegError::Param(format!("test size {test_size} must divide {n} and be smaller")));
    }
    let (mild, moderate, severe) = severity_counts(n);
    let mut severities: Vec<Severity> = std::iter::repeat_n(Severity::Mild, mild)
        .chain(std::iter::repeat_n(Severity::Moderate, moderate))
        .chain(std::iter::repeat_n(Severity::Severe, severe))
        .collect();
    let mut order_rng = rng::stream(seed, "dataset-order", kind as u64);
    rand::seq::SliceRandom::shuffle(severities.as_mut_slice(), &mut order_rng);
    let cases = severities
        .iter()
        .enumerate()
        .map(|(id, &sev)| {
            let mut r = rng::stream(seed, &format!("case-{kind}"), id as u64);
            make_case(&mut r, params, kind, sev).map(|mut c| {
                c.id = id;
                c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_folds = n / test_size;
    let mut by_severity: Vec<usize> = (0..n).collect();
    by_severity.sort_by_key(|&i| (std::cmp::Reverse(severities[i]), i));
    let mut folds = vec![Vec::new(); n_folds];
    for (k, id) in by_severity.into_iter().enumerate() {
        folds[k % n_folds].push(id);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(Dataset { kind, cases, folds })
}

#[derive(Serialize, Deserialize)]
struct CaseEntry {
    id: usize,
    kind: StructureKind,
    severity: Severity,
    dir: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: StructureKind,
    folds: Vec<Vec<usize>>,
    cases: Vec<CaseEntry>,
}

const MANIFEST_FORMAT: &str = "iterseg-dataset-1";

/// Writes `manifest.json` plus one directory per case holding the image,
/// truth, seed region, distractor and ignore maps (and PGM previews).
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for c in &ds.cases {
        let name = format!("case_{:03}", c.id);
        let cdir = dir.join(&name);
        std::fs::create_dir_all(&cdir)?;
        gridio::save_image(&cdir.join("image.isg"), &c.image)?;
        gridio::save_labels(&cdir.join("truth.isg"), &c.truth)?;
        gridio::save_labels(&cdir.join("seed_region.isg"), &c.seed_region)?;
        gridio::save_labels(&cdir.join("distractor.isg"), &c.distractor)?;
        gridio::save_labels(&cdir.join("ignore.isg"), &c.ignore)?;
        gridio::export_image_pgm(&cdir.join("image.pgm"), &c.image)?;
        gridio::export_labels_pgm(&cdir.join("truth.pgm"), &c.truth)?;
        entries.push(CaseEntry {
            id: c.id,
            kind: c.kind,
            severity: c.severity,
            dir: name,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        kind: ds.kind,
        folds: ds.folds.clone(),
        cases: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(SegError::Format(format!("unknown dataset format {:?}", manifest.format)));
    }
    let cases = manifest
        .cases
        .iter()
        .map(|e| {
            let cdir = dir.join(&e.dir);
            Ok(SynthCase {
                id: e.id,
                kind: e.kind,
                severity: e.severity,
                image: gridio::load_image(&cdir.join("image.isg"))?,
                truth: gridio::load_labels(&cdir.join("truth.isg"))?,
                seed_region: gridio::load_labels(&cdir.join("seed_region.isg"))?,
                distractor: gridio::load_labels(&cdir.join("distractor.isg"))?,
                ignore: gridio::load_labels(&cdir.join("ignore.isg"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind: manifest.kind,
        cases,
        folds: manifest.folds,
    })
}
