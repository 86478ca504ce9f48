//! Greedy iterative inference with learned stopping.
//!
//! Step `t` feeds the per-voxel argmax of step `t-1` back into the network.
//! Once the stop probability reaches the threshold the chain is stopped:
//! either it halts, or (in freeze mode) every later step repeats the stop
//! map without evaluating the network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::{argmax, seed_to_map, Image, LabelMap, Seed};
use crate::gridio;
use crate::morpho::{keep_island, IslandPolicy};
use crate::segnet::{Model, NetMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoStop {
    /// Stop evaluating at the first step whose stop probability reaches the threshold.
    Halt,
    /// Keep stepping to `max_steps`, repeating the stop map after the stop step.
    Freeze,
    /// Ignore the stop head while stepping; the first crossing is still recorded.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveOptions {
    pub max_steps: usize,
    pub stop_threshold: f64,
    pub autostop: AutoStop,
    pub postprocess: Option<IslandPolicy>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            max_steps: 30,
            stop_threshold: 0.5,
            autostop: AutoStop::Halt,
            postprocess: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub map: LabelMap,
    /// Stop probability produced at this step; `None` for the initial map
    /// and for frozen steps.
    pub stop_prob: Option<f64>,
    /// Stop indicator of this step.
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionState {
    pub image: Image,
    pub seed: Seed,
    pub options: EvolveOptions,
    history: Vec<StepRecord>,
    /// First step at which the stop probability reached the threshold.
    first_stop: Option<usize>,
    /// Step at which the chain currently rests, if halted or accepted.
    stopped_at: Option<usize>,
    /// Stop step being repeated in freeze mode.
    frozen_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Override {
    /// Clear the stop flag and run up to `k` more steps (halting early on a
    /// new stop unless `force`).
    ContinueN { k: usize, force: bool },
    /// Accept the map of step `t`, discarding later steps.
    SelectStep { t: usize },
}

impl EvolutionState {
    /// State holding only the initial map.
    pub fn start(image: Image, seed: Seed, initial: LabelMap, options: EvolveOptions) -> Result<Self> {
        seed.check_in(image.dims())?;
        if initial.dims() != image.dims() {
            return Err(SegError::Shape(format!(
                "initial map {:?} does not match image {:?}",
                initial.dims().as_slice(),
                image.dims().as_slice()
            )));
        }
        Ok(Self {
            image,
            seed,
            options,
            history: vec![StepRecord {
                map: initial,
                stop_prob: None,
                stop: false,
            }],
            first_stop: None,
            stopped_at: None,
            frozen_at: None,
        })
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    /// Current step index; the history holds `t + 1` entries.
    pub fn step(&self) -> usize {
        self.history.len() - 1
    }

    pub fn first_stop(&self) -> Option<usize> {
        self.first_stop
    }

    pub fn stopped_at(&self) -> Option<usize> {
        self.stopped_at
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped_at.is_some()
    }

    pub fn current(&self) -> &LabelMap {
        &self.history.last().expect("history is never empty").map
    }

    pub fn map_at(&self, t: usize) -> Option<&LabelMap> {
        self.history.get(t).map(|r| &r.map)
    }

    pub fn stop_probs(&self) -> Vec<Option<f64>> {
        self.history.iter().map(|r| r.stop_prob).collect()
    }

    /// Current map after the configured island post-processing.
    pub fn output(&self) -> Result<LabelMap> {
        postprocess(self.current(), &self.seed, self.options.postprocess)
    }

    fn push(&mut self, record: StepRecord) {
        self.history.push(record);
    }

    /// Runs up to `n` steps; halts early when the chain stops.
    pub fn advance(&mut self, model: &Model, n: usize) -> Result<usize> {
        self.advance_inner(model, n, true)
    }

    fn advance_inner(&mut self, model: &Model, n: usize, honor_stop: bool) -> Result<usize> {
        if model.config.mode != NetMode::Iterative {
            return Err(SegError::Param("iterative inference needs an iterative-mode model".into()));
        }
        let mut done = 0;
        while done < n && self.stopped_at.is_none() {
            if let Some(ts) = self.frozen_at {
                let map = self.history[ts].map.clone();
                self.push(StepRecord {
                    map,
                    stop_prob: None,
                    stop: true,
                });
            } else {
                let out = model.predict(&self.image, Some(self.current()), Some(&self.seed))?;
                let map = argmax(&out.seg_prob, self.image.dims())?;
                let p = out.stop_prob.expect("iterative models have a stop head");
                let cross = p >= self.options.stop_threshold;
                let stop = cross && honor_stop && self.options.autostop != AutoStop::Off;
                self.push(StepRecord {
                    map,
                    stop_prob: Some(p),
                    stop,
                });
                let t = self.step();
                if cross {
                    self.first_stop.get_or_insert(t);
                }
                if stop {
                    match self.options.autostop {
                        AutoStop::Halt => self.stopped_at = Some(t),
                        AutoStop::Freeze => self.frozen_at = Some(t),
                        AutoStop::Off => {}
                    }
                }
            }
            done += 1;
        }
        Ok(done)
    }

    /// Runs until stopped or `max_steps` reached.
    pub fn run(&mut self, model: &Model) -> Result<()> {
        let remaining = self.options.max_steps.saturating_sub(self.step());
        self.advance(model, remaining)?;
        Ok(())
    }

    pub fn apply(&self, model: &Model, action: &Override) -> Result<EvolutionState> {
        match *action {
            Override::ContinueN { k, force } => {
                let mut next = self.clone();
                if k == 0 {
                    return Ok(next);
                }
                next.stopped_at = None;
                next.frozen_at = None;
                next.advance_inner(model, k, !force)?;
                Ok(next)
            }
            Override::SelectStep { t } => {
                if t >= self.history.len() {
                    return Err(SegError::OutOfBounds {
                        what: "step",
                        detail: format!("step {t} is outside the history 0..{}", self.history.len()),
                    });
                }
                let mut next = self.clone();
                next.history.truncate(t + 1);
                next.first_stop = self.first_stop.filter(|&s| s <= t);
                next.frozen_at = None;
                next.stopped_at = Some(t);
                Ok(next)
            }
        }
    }
}

/// Evolution from the seed ball.
pub fn evolve(model: &Model, image: &Image, seed: &Seed, options: &EvolveOptions) -> Result<EvolutionState> {
    let initial = seed_to_map(seed, image.dims())?;
    evolve_from(model, image, seed, initial, options)
}

/// Evolution from an arbitrary initial map.
pub fn evolve_from(
    model: &Model,
    image: &Image,
    seed: &Seed,
    initial: LabelMap,
    options: &EvolveOptions,
) -> Result<EvolutionState> {
    let mut state = EvolutionState::start(image.clone(), seed.clone(), initial, options.clone())?;
    state.run(model)?;
    Ok(state)
}

pub fn override_state(state: &EvolutionState, model: &Model, action: &Override) -> Result<EvolutionState> {
    state.apply(model, action)
}

/// Index of the highest score; ties go to the earliest step.
pub fn best_by(scores: &[f64]) -> usize {
    let mut best = 0;
    for (t, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = t;
        }
    }
    best
}

/// Step whose map has the best Dice against `truth`.
pub fn best_step(state: &EvolutionState, truth: &LabelMap) -> Result<usize> {
    let scores = state
        .history()
        .iter()
        .map(|r| crate::evalx::dice(&r.map, truth))
        .collect::<Result<Vec<_>>>()?;
    Ok(best_by(&scores))
}

/// Island post-processing; `None` leaves the map unchanged.
pub fn postprocess(map: &LabelMap, seed: &Seed, policy: Option<IslandPolicy>) -> Result<LabelMap> {
    match policy {
        None => Ok(map.clone()),
        Some(p) => Ok(keep_island(map, p, Some(seed))?.0),
    }
}

/// Writes every step's map (`step_XXX.isg` and `.pgm`) plus `stop.csv`.
pub fn export_history(dir: &Path, state: &EvolutionState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("stop.csv"))?;
    w.write_record(["step", "stop_prob", "stop", "foreground"])?;
    for (t, r) in state.history().iter().enumerate() {
        gridio::save_labels(&dir.join(format!("step_{t:03}.isg")), &r.map)?;
        gridio::export_labels_pgm(&dir.join(format!("step_{t:03}.pgm")), &r.map)?;
        w.write_record([
            t.to_string(),
            r.stop_prob.map(|p| format!("{p:.6}")).unwrap_or_default(),
            u8::from(r.stop).to_string(),
            r.map.fg_count().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
