//! Metrics and the experiment harness comparing direct and iterative arms.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{corrupt_segmentation, CorruptParams};
use crate::error::{Result, SegError};
use crate::evolve::{best_by, evolve_from, postprocess, AutoStop, EvolutionState, EvolveOptions};
use crate::grid::{argmax, seed_to_map, LabelMap, Seed};
use crate::morpho::IslandPolicy;
use crate::rng::stream;
use crate::segnet::{Model, NetMode};
use crate::synthgen::{Severity, StructureKind, SynthCase};

fn same_grid(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SegError::Shape(format!(
            "maps have grids {:?} and {:?}",
            a.dims().as_slice(),
            b.dims().as_slice()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` on foreground; two empty maps score 1.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    same_grid(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.len() {
        let (x, y) = (a.is_fg(i), b.is_fg(i));
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Dice restricted to voxels outside `ignore`.
pub fn masked_dice(a: &LabelMap, b: &LabelMap, ignore: &LabelMap) -> Result<f64> {
    same_grid(a, b)?;
    same_grid(a, ignore)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in (0..a.len()).filter(|&i| !ignore.is_fg(i)) {
        let (x, y) = (a.is_fg(i), b.is_fg(i));
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Fraction of the distractor covered by the prediction.
pub fn leak_fraction(pred: &LabelMap, distractor: &LabelMap) -> Result<f64> {
    same_grid(pred, distractor)?;
    let d = distractor.fg_count();
    if d == 0 {
        return Ok(0.0);
    }
    let hit = (0..pred.len()).filter(|&i| pred.is_fg(i) && distractor.is_fg(i)).count();
    Ok(hit as f64 / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopOffset {
    pub offset: usize,
    /// False when the stop head never fired and the offset is measured to `max_steps`.
    pub stopped: bool,
}

/// Distance between the automatic stop step and the best-Dice step.
pub fn stop_offset(state: &EvolutionState, truth: &LabelMap) -> Result<StopOffset> {
    let best = crate::evolve::best_step(state, truth)?;
    let (t, stopped) = match state.first_stop() {
        Some(t) => (t, true),
        None => (state.options.max_steps, false),
    };
    Ok(StopOffset {
        offset: t.abs_diff(best),
        stopped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arm {
    Dir,
    DirDist,
    IterStop,
    IterMax,
    IterSegAbl,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Dir, Arm::DirDist, Arm::IterStop, Arm::IterMax, Arm::IterSegAbl];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Dir => "DIR",
            Arm::DirDist => "DIR_DIST",
            Arm::IterStop => "ITER_STOP",
            Arm::IterMax => "ITER_MAX",
            Arm::IterSegAbl => "ITER_SEG_ABL",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Arm::ALL.into_iter().find(|a| a.name() == norm)
    }

    /// Which trained model the arm evaluates.
    pub fn model_kind(self) -> ModelKind {
        match self {
            Arm::Dir => ModelKind::Dir,
            Arm::DirDist => ModelKind::DirDist,
            Arm::IterStop | Arm::IterMax => ModelKind::Iter,
            Arm::IterSegAbl => ModelKind::IterAbl,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Trained model variants behind the arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dir,
    DirDist,
    Iter,
    IterAbl,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Dir, ModelKind::DirDist, ModelKind::Iter, ModelKind::IterAbl];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dir => "dir",
            ModelKind::DirDist => "dir_dist",
            ModelKind::Iter => "iter",
            ModelKind::IterAbl => "iter_abl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub evolve: EvolveOptions,
    /// Island post-processing for iterative arms.
    pub iter_postprocess: Option<IslandPolicy>,
    /// Island post-processing for direct arms.
    pub direct_postprocess: Option<IslandPolicy>,
    pub seed_radius: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            evolve: EvolveOptions {
                autostop: AutoStop::Off,
                ..EvolveOptions::default()
            },
            iter_postprocess: Some(IslandPolicy::ContainingSeed),
            direct_postprocess: Some(IslandPolicy::Largest),
            seed_radius: 2,
        }
    }
}

/// Deterministic evaluation seed: the seed-region voxel nearest the
/// region's centroid (first in scan order on ties).
pub fn eval_seed(case: &SynthCase, radius: u32) -> Result<Seed> {
    let dims = case.seed_region.dims();
    let centroid = case
        .seed_region
        .fg_centroid()
        .ok_or_else(|| SegError::Param(format!("case {} has an empty seed region", case.id)))?;
    let best = case
        .seed_region
        .fg_indices()
        .into_iter()
        .map(|i| {
            let c = dims.coord(i);
            let d: f64 = c.iter().zip(&centroid).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
            (d, i)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("non-empty seed region");
    Ok(Seed::new(dims.coord(best.1), radius))
}

fn score(case: &SynthCase, map: &LabelMap) -> Result<f64> {
    masked_dice(map, &case.truth, &case.ignore)
}

/// One iterative evaluation: every step scored after post-processing.
#[derive(Clone, Debug)]
pub struct IterEval {
    pub state: EvolutionState,
    pub scores: Vec<f64>,
    pub best: usize,
    /// Step used for the automatic-stop result (`max_steps` when never stopped).
    pub stop: usize,
    pub stopped: bool,
    pub stop_map: LabelMap,
    pub best_map: LabelMap,
}

impl IterEval {
    pub fn offset(&self) -> usize {
        self.stop.abs_diff(self.best)
    }
}

pub fn evaluate_iterative(
    model: &Model,
    case: &SynthCase,
    seed: &Seed,
    initial: LabelMap,
    opts: &EvalOptions,
    policy: Option<IslandPolicy>,
) -> Result<IterEval> {
    let state = evolve_from(model, &case.image, seed, initial, &opts.evolve)?;
    let maps = state
        .history()
        .iter()
        .map(|r| postprocess(&r.map, seed, policy))
        .collect::<Result<Vec<_>>>()?;
    let scores = maps.iter().map(|m| score(case, m)).collect::<Result<Vec<_>>>()?;
    let best = best_by(&scores);
    let (stop, stopped) = match state.first_stop() {
        Some(t) => (t, true),
        None => (state.step(), false),
    };
    Ok(IterEval {
        stop_map: maps[stop].clone(),
        best_map: maps[best].clone(),
        state,
        scores,
        best,
        stop,
        stopped,
    })
}

/// Direct arms: one forward pass, argmax, post-processing.
pub fn evaluate_direct(model: &Model, case: &SynthCase, seed: &Seed, policy: Option<IslandPolicy>) -> Result<LabelMap> {
    if model.config.mode != NetMode::Direct {
        return Err(SegError::Param("direct arms need a direct-mode model".into()));
    }
    let out = model.predict(&case.image, None, Some(seed))?;
    let map = argmax(&out.seg_prob, case.image.dims())?;
    postprocess(&map, seed, policy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: usize,
    pub structure: StructureKind,
    pub severity: Severity,
    pub arm: Arm,
    pub dice: f64,
    pub stop_offset: Option<usize>,
    pub stopped: Option<bool>,
    pub leak: f64,
}

/// Models by variant; arms needing an absent model fail.
#[derive(Default)]
pub struct ModelSet<'a> {
    pub dir: Option<&'a Model>,
    pub dir_dist: Option<&'a Model>,
    pub iter: Option<&'a Model>,
    pub iter_abl: Option<&'a Model>,
}

impl<'a> ModelSet<'a> {
    pub fn get(&self, kind: ModelKind) -> Result<&'a Model> {
        let m = match kind {
            ModelKind::Dir => self.dir,
            ModelKind::DirDist => self.dir_dist,
            ModelKind::Iter => self.iter,
            ModelKind::IterAbl => self.iter_abl,
        };
        m.ok_or_else(|| SegError::Param(format!("no checkpoint for the {} model", kind.name())))
    }
}

/// One row per test case for `arm`.
pub fn run_experiment(arm: Arm, models: &ModelSet<'_>, cases: &[&SynthCase], opts: &EvalOptions) -> Result<Vec<CaseMetrics>> {
    let model = models.get(arm.model_kind())?;
    cases
        .iter()
        .map(|case| {
            let seed = eval_seed(case, opts.seed_radius)?;
            let (map, offset, stopped) = match arm {
                Arm::Dir | Arm::DirDist => (evaluate_direct(model, case, &seed, opts.direct_postprocess)?, None, None),
                Arm::IterStop | Arm::IterMax | Arm::IterSegAbl => {
                    let initial = seed_to_map(&seed, case.image.dims())?;
                    let ev = evaluate_iterative(model, case, &seed, initial, opts, opts.iter_postprocess)?;
                    let map = if arm == Arm::IterMax { ev.best_map.clone() } else { ev.stop_map.clone() };
                    (map, Some(ev.offset()), Some(ev.stopped))
                }
            };
            Ok(CaseMetrics {
                case_id: case.id,
                structure: case.kind,
                severity: case.severity,
                arm,
                dice: score(case, &map)?,
                stop_offset: offset,
                stopped,
                leak: leak_fraction(&map, &case.distractor)?,
            })
        })
        .collect()
}

/// Evaluation starting from a corrupted seed ball, without post-processing.
/// Returns the automatic-stop Dice per case.
pub fn corrupted_start_dice(
    model: &Model,
    cases: &[&SynthCase],
    opts: &EvalOptions,
    corruption: &CorruptParams,
    seed: u64,
) -> Result<Vec<f64>> {
    cases
        .iter()
        .map(|case| {
            let s = eval_seed(case, opts.seed_radius)?;
            let mut rng = stream(seed, "corrupt-start", case.id as u64);
            let ball = seed_to_map(&s, case.image.dims())?;
            let start = corrupt_segmentation(&ball, &mut rng, corruption)?;
            let ev = evaluate_iterative(model, case, &s, start, opts, None)?;
            Ok(ev.scores[ev.stop])
        })
        .collect()
}

/// Corruption used by the stress test: always attach at least one blob and
/// add free-floating ones.
pub fn stress_corruption() -> CorruptParams {
    CorruptParams {
        blob_count: (2, 4),
        blob_radius: (2.0, 5.0),
        attach_prob: 0.5,
        elastic_amplitude: 2.0,
        elastic_sigma: 8.0,
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeverityGroup {
    #[serde(rename = "mild/mod.")]
    MildModerate,
    #[serde(rename = "severe")]
    Severe,
}

impl SeverityGroup {
    pub fn of(s: Severity) -> Self {
        match s {
            Severity::Severe => SeverityGroup::Severe,
            _ => SeverityGroup::MildModerate,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SeverityGroup::MildModerate => "mild/mod.",
            SeverityGroup::Severe => "severe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: Arm,
    pub structure: StructureKind,
    pub group: SeverityGroup,
    pub n: usize,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub offset_mean: Option<f64>,
    pub offset_sd: Option<f64>,
}

/// Two rows (mild/moderate, severe) per arm and structure present in `rows`.
pub fn summarize(rows: &[CaseMetrics]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Arm, StructureKind)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.arm, r.structure)) {
            keys.push((r.arm, r.structure));
        }
    }
    let mut out = Vec::new();
    for (arm, structure) in keys {
        for group in [SeverityGroup::MildModerate, SeverityGroup::Severe] {
            let sel: Vec<&CaseMetrics> = rows
                .iter()
                .filter(|r| r.arm == arm && r.structure == structure && SeverityGroup::of(r.severity) == group)
                .collect();
            let d: Vec<f64> = sel.iter().map(|r| r.dice).collect();
            let o: Vec<f64> = sel.iter().filter_map(|r| r.stop_offset.map(|x| x as f64)).collect();
            let (dm, ds) = mean_sd(&d);
            let (om, os) = if o.is_empty() { (None, None) } else {
                let (m, s) = mean_sd(&o);
                (Some(m), Some(s))
            };
            out.push(SummaryRow {
                arm,
                structure,
                group,
                n: sel.len(),
                dice_mean: dm,
                dice_sd: ds,
                offset_mean: om,
                offset_sd: os,
            });
        }
    }
    out
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[CaseMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["case_id", "structure", "severity", "arm", "dice", "stop_offset", "stopped", "leak"])?;
    for r in rows {
        out.write_record([
            r.case_id.to_string(),
            r.structure.to_string(),
            r.severity.to_string(),
            r.arm.to_string(),
            format!("{:.6}", r.dice),
            r.stop_offset.map(|o| o.to_string()).unwrap_or_default(),
            r.stopped.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:.6}", r.leak),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Aligned plain-text table of summary rows.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<13} {:<8} {:<10} {:>3} {:>15} {:>13}\n",
        "arm", "struct", "group", "n", "dice (%)", "stop offset"
    );
    for r in rows {
        let offset = match (r.offset_mean, r.offset_sd) {
            (Some(m), Some(sd)) => format!("{m:.1}±{sd:.1}"),
            _ => "-".into(),
        };
        s.push_str(&format!(
            "{:<13} {:<8} {:<10} {:>3} {:>15} {:>13}\n",
            r.arm.name(),
            r.structure.to_string(),
            r.group.label(),
            r.n,
            format!("{:.1}±{:.1}", 100.0 * r.dice_mean, 100.0 * r.dice_sd),
            offset
        ));
    }
    s
}
