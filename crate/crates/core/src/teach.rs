//! Teacher-forcing loss and the training loop.
//!
//! Every tuple is an independent sample (its input map comes from the
//! generated trajectory, not from the model), so one optimizer step per
//! tuple with batch size 1 trains all time steps at once.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndnum::{Adadelta, NdError, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentParams};
use crate::error::{Result, SegError};
use crate::evalx::dice;
use crate::grid::{argmax, distance_channel, LabelMap, StopFlag};
use crate::morpho::boundary_band;
use crate::rng::{stream, Rng as StreamRng};
use crate::segnet::{forward, stack_channels, Model, NetConfig, NetMode, NetVars};
use crate::synthgen::SynthCase;
use crate::trajgen::{self, TrajParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Extra weight factor on the boundary band of the target.
    pub boundary_beta: f64,
    pub boundary_width: u32,
    pub class_weight_min: f64,
    pub class_weight_max: f64,
    /// Exponent on the inverse class frequency; 1 is full rebalancing, 0 none.
    pub class_balance_power: f64,
    /// Weight of stop-positive targets; `None` derives it from the
    /// trajectory mixture as `(1 - p) / p`.
    pub stop_positive_weight: Option<f64>,
    pub stop_negative_weight: f64,
    /// Multipliers on the two loss terms.
    pub seg_term: f64,
    pub stop_term: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            boundary_beta: 5.0,
            boundary_width: 1,
            class_weight_min: 0.05,
            class_weight_max: 20.0,
            class_balance_power: 1.0,
            stop_positive_weight: None,
            stop_negative_weight: 1.0,
            seg_term: 1.0,
            stop_term: 1.0,
        }
    }
}

impl LossParams {
    pub fn positive_weight(&self, traj: &TrajParams) -> f64 {
        self.stop_positive_weight.unwrap_or_else(|| {
            let p = traj.positive_prob.clamp(1e-3, 1.0 - 1e-3);
            (1.0 - p) / p
        })
    }
}

/// Per-voxel and stop-term weights of one training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub voxel: Vec<f64>,
    pub stop: f64,
}

/// Inverse-frequency class weights `(1 / (L f_c))^power`, clamped. Labels
/// absent from the target get weight 1.
pub fn class_weights(target: &LabelMap, params: &LossParams) -> Vec<f64> {
    let l = target.num_labels() as usize;
    let mut counts = vec![0usize; l];
    for &v in target.labels() {
        counts[v as usize] += 1;
    }
    let n = target.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                (n / (l as f64 * c as f64)).powf(params.class_balance_power).clamp(params.class_weight_min, params.class_weight_max)
            }
        })
        .collect()
}

pub fn voxel_weights(target: &LabelMap, params: &LossParams) -> Vec<f64> {
    let cw = class_weights(target, params);
    let band = boundary_band(target, params.boundary_width.max(1));
    target
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &v)| cw[v as usize] * if band.is_fg(i) { params.boundary_beta } else { 1.0 })
        .collect()
}

pub fn loss_weights(target: &LabelMap, stop: StopFlag, params: &LossParams, traj: &TrajParams) -> LossWeights {
    let stop_w = if stop.is_set() {
        params.positive_weight(traj)
    } else {
        params.stop_negative_weight
    };
    LossWeights {
        voxel: voxel_weights(target, params),
        stop: stop_w,
    }
}

/// Per-tuple loss: weighted mean negative log-likelihood of the target
/// labels, plus the weighted stop cross-entropy when a stop head exists.
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    tape: &mut Tape,
    seg_prob: Var,
    stop_prob: Option<Var>,
    target: &LabelMap,
    stop: StopFlag,
    weights: &LossWeights,
    seg_term: f64,
    stop_term: f64,
) -> Result<Var> {
    let labels: Vec<usize> = target.labels().iter().map(|&v| v as usize).collect();
    let seg = tape.weighted_nll(seg_prob, &labels, &weights.voxel)?;
    let mut loss = tape.scale(seg, seg_term)?;
    if let Some(p) = stop_prob {
        let s = tape.bce(p, stop.is_set(), weights.stop)?;
        let s = tape.scale(s, stop_term)?;
        loss = tape.add(loss, s)?;
    }
    Ok(loss)
}

/// Forward pass plus [`step_loss`] for one prepared input.
#[allow(clippy::too_many_arguments)]
pub fn tuple_loss(
    tape: &mut Tape,
    params: &ndnum::Bound,
    config: &NetConfig,
    input: Var,
    target: &LabelMap,
    stop: StopFlag,
    weights: &LossWeights,
    loss: &LossParams,
) -> Result<(Var, NetVars)> {
    let vars = forward(tape, params, config, input)?;
    let l = step_loss(tape, vars.seg_prob, vars.stop_prob, target, stop, weights, loss.seg_term, loss.stop_term)?;
    Ok((l, vars))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimParams {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    /// Fraction of training after which the step scale decays linearly
    /// to `lr * final_lr_ratio` (1.0 = constant).
    pub anneal_start: f64,
    pub final_lr_ratio: f64,
}

impl OptimParams {
    /// Step scale for `epoch` of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let start = self.anneal_start.clamp(0.0, 1.0) * epochs as f64;
        let span = epochs as f64 - start;
        if span <= 0.0 || (epoch as f64) < start {
            return self.lr;
        }
        let frac = ((epoch as f64 + 1.0 - start) / span).min(1.0);
        self.lr * (1.0 - frac * (1.0 - self.final_lr_ratio))
    }
}

impl Default for OptimParams {
    fn default() -> Self {
        let a = Adadelta::default();
        Self {
            rho: a.rho,
            eps: a.eps,
            lr: a.lr,
            anneal_start: 1.0,
            final_lr_ratio: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub traj: TrajParams,
    pub augment: AugmentParams,
    pub loss: LossParams,
    pub optim: OptimParams,
    /// Validation Dice every this many epochs (0 = never).
    pub val_every: usize,
    /// Checkpoint every this many epochs when a checkpoint dir is given (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            epochs: 300,
            traj: TrajParams::default(),
            augment: AugmentParams::default(),
            loss: LossParams::default(),
            optim: OptimParams::default(),
            val_every: 25,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub stop_acc: Option<f64>,
    pub val_dice: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub steps: usize,
}

/// One prepared optimizer step.
struct Prepared {
    input: Tensor,
    target: LabelMap,
    stop: StopFlag,
    weights: LossWeights,
}

fn prepare<R: Rng + ?Sized>(case: &SynthCase, rng: &mut R, cfg: &TrainConfig, augment: bool) -> Result<Prepared> {
    let net = &cfg.net;
    let dims = case.image.dims();
    let (seed, prev, target, stop) = match net.mode {
        NetMode::Iterative => {
            let s = trajgen::sample_tuple(case, rng, &cfg.traj)?;
            (s.seed, s.tuple.prev, s.tuple.target, s.tuple.stop)
        }
        NetMode::Direct => {
            let seed = trajgen::draw_seed(case, rng, cfg.traj.seed_radius)?;
            (seed, LabelMap::empty(dims.clone(), net.num_labels), case.truth.clone(), StopFlag(true))
        }
    };
    let field = if net.distance_channel {
        Some(distance_channel(&seed, dims)?.into_data())
    } else {
        None
    };
    let (image, field, prev, target) = if augment {
        let mut params = cfg.augment.clone();
        params.corrupt &= net.mode == NetMode::Iterative;
        let a = augment_sample(&case.image, field.as_deref(), &prev, &target, rng, &params)?;
        (a.image, a.field, a.prev, a.target)
    } else {
        (case.image.clone(), field, prev, target)
    };
    let mut parts = vec![image.to_tensor()];
    if net.mode == NetMode::Iterative {
        parts.push(crate::grid::one_hot(&prev, net.num_labels)?);
    }
    if let Some(f) = field {
        parts.push(Tensor::new(dims.tensor_shape(1), f)?);
    }
    let input = stack_channels(dims, &parts)?;
    let weights = loss_weights(&target, stop, &cfg.loss, &cfg.traj);
    Ok(Prepared {
        input,
        target,
        stop,
        weights,
    })
}

fn epoch_samples(cases: &[&SynthCase], seed: u64, epoch: usize, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let mut rng: StreamRng = stream(seed, "epoch", epoch as u64);
    cases.iter().map(|c| prepare(c, &mut rng, cfg, true)).collect()
}

/// Fixed validation tuples: one unaugmented tuple per case.
fn validation_samples(cases: &[&SynthCase], seed: u64, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let mut rng: StreamRng = stream(seed, "validation", 0);
    cases.iter().map(|c| prepare(c, &mut rng, cfg, false)).collect()
}

/// Mean one-step Dice of the argmax prediction against the target.
fn validation_dice(model: &Model, samples: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = model.predict_tensor(s.input.clone())?;
        let pred = argmax(&out.seg_prob, s.target.dims())?;
        total += dice(&pred, &s.target)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn diverged(epoch: usize, step: usize, detail: String, ckpt: Option<&Path>) -> SegError {
    let detail = match ckpt {
        Some(p) => format!("{detail}; last good parameters saved to {}", p.display()),
        None => detail,
    };
    SegError::Diverged { epoch, step, detail }
}

/// Trains a fresh model. Sample preparation for the next epoch runs on a
/// worker thread while the current epoch trains; results are bit-identical
/// to sequential preparation.
pub fn train(
    train_cases: &[&SynthCase],
    val_cases: &[&SynthCase],
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
    mut observer: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    if train_cases.is_empty() {
        return Err(SegError::Param("training set is empty".into()));
    }
    cfg.net.validate()?;
    cfg.traj.validate()?;
    for c in train_cases.iter().chain(val_cases) {
        cfg.net.check_dims(c.image.dims())?;
    }
    let mut init_rng = stream(seed, "init", 0);
    let mut model = Model::new(cfg.net.clone(), &mut init_rng)?;
    let mut opt = Adadelta {
        rho: cfg.optim.rho,
        eps: cfg.optim.eps,
        lr: cfg.optim.lr,
    };
    let val = if cfg.val_every > 0 && !val_cases.is_empty() {
        validation_samples(val_cases, seed, cfg)?
    } else {
        Vec::new()
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let last_good = checkpoint_dir.map(|d| d.join("last_good.ckpt"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<Prepared>>>(1);
        scope.spawn(move || {
            for epoch in 0..cfg.epochs {
                if tx.send(epoch_samples(train_cases, seed, epoch, cfg)).is_err() {
                    return;
                }
            }
        });
        for epoch in 0..cfg.epochs {
            let samples = rx
                .recv()
                .map_err(|_| SegError::Param("sample producer stopped early".into()))??;
            opt.lr = cfg.optim.lr_at(epoch, cfg.epochs);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for (i, s) in samples.iter().enumerate() {
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let x = tape.leaf(s.input.clone());
                let step_result = (|| -> Result<(f64, Option<f64>, ndnum::ParamGrads)> {
                    let (loss, vars) =
                        tuple_loss(&mut tape, &bound, &model.config, x, &s.target, s.stop, &s.weights, &cfg.loss)?;
                    let value = tape.value(loss).item();
                    let g = tape.backward(loss)?;
                    let sp = vars.stop_prob.map(|v| tape.value(v).item());
                    Ok((value, sp, model.params.grads(&bound, &g)))
                })();
                let (value, stop_p, grads) = match step_result {
                    Ok(r) => r,
                    Err(SegError::Nd(e @ NdError::NonFinite { .. })) => {
                        if let Some(p) = &last_good {
                            model.save(p)?;
                        }
                        return Err(diverged(epoch, i, e.to_string(), last_good.as_deref()));
                    }
                    Err(e) => return Err(e),
                };
                if let Err(e) = opt.step(&mut model.params, &grads) {
                    if let Some(p) = &last_good {
                        model.save(p)?;
                    }
                    return Err(diverged(epoch, i, e.to_string(), last_good.as_deref()));
                }
                steps += 1;
                loss_sum += value;
                if let Some(p) = stop_p {
                    correct += usize::from((p >= 0.5) == s.stop.is_set());
                }
            }
            let n = samples.len() as f64;
            let val_dice = if !val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs) {
                Some(validation_dice(&model, &val)?)
            } else {
                None
            };
            let row = HistoryRow {
                epoch,
                loss: loss_sum / n,
                stop_acc: model.config.has_stop_head().then(|| correct as f64 / n),
                val_dice,
            };
            observer(&row);
            history.push(row);
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                    model.save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
                }
            }
        }
        Ok(())
    })?;

    Ok(TrainOutcome { model, history, steps })
}

pub fn write_history_csv<W: Write>(w: W, history: &[HistoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss", "stop_acc", "val_dice"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in history {
        out.write_record([r.epoch.to_string(), format!("{:.6}", r.loss), opt(r.stop_acc), opt(r.val_dice)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_history(path: &Path, history: &[HistoryRow]) -> Result<PathBuf> {
    let f = std::fs::File::create(path)?;
    write_history_csv(std::io::BufWriter::new(f), history)?;
    Ok(path.to_path_buf())
}
