//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, Group, ParamStore};
use crate::tape::{Tape, Var};

/// Gradients smaller than this are compared on an absolute scale; finite
/// differences cannot resolve them relative to their own magnitude.
pub const REL_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes whose ±h evaluations changed a ReLU gate or pooling choice.
    pub skipped: usize,
    pub worst: Option<(Probe, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks `count` random scalar entries among the parameters of `group`.
pub fn random_probes<R: Rng>(store: &ParamStore, group: Group, count: usize, rng: &mut R) -> Vec<Probe> {
    let members: Vec<_> = store.iter().filter(|p| p.group == group).collect();
    if members.is_empty() {
        return Vec::new();
    }
    let total: usize = members.iter().map(|p| p.value.numel()).sum();
    (0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for p in &members {
                if k < p.value.numel() {
                    return Probe {
                        param: p.name.clone(),
                        index: k,
                    };
                }
                k -= p.value.numel();
            }
            unreachable!("probe index within total")
        })
        .collect()
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h` at each probe.
pub fn grad_check<F>(store: &ParamStore, probes: &[Probe], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok((tape.value(loss).item(), tape.activation_pattern()))
    };

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let pattern = tape.activation_pattern();
    let grads = store.grads(&bound, &tape.backward(loss)?);

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for probe in probes {
        let analytic = grads
            .get(&probe.param)
            .map(|g| g.data()[probe.index])
            .unwrap_or(0.0);
        let orig = work.value(&probe.param)?.data()[probe.index];
        work.value_mut(&probe.param)?.data_mut()[probe.index] = orig + h;
        let (fp, pp) = eval(&work)?;
        work.value_mut(&probe.param)?.data_mut()[probe.index] = orig - h;
        let (fm, pm) = eval(&work)?;
        work.value_mut(&probe.param)?.data_mut()[probe.index] = orig;
        if pp != pattern || pm != pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((probe.clone(), analytic, numeric));
        }
    }
    Ok(report)
}
