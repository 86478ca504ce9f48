use std::collections::HashMap;
use std::fmt;

use crate::error::{NdError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Parameter partition: shared trunk, segmentation head, stopping head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    H,
    Y,
    S,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::H, Group::Y, Group::S];

    pub fn tag(self) -> u8 {
        match self {
            Group::H => b'h',
            Group::Y => b'y',
            Group::S => b's',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            b'h' => Some(Group::H),
            b'y' => Some(Group::Y),
            b's' => Some(Group::S),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag() as char)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    /// Running average of squared gradients.
    pub sq_grad: Tensor,
    /// Running average of squared updates.
    pub sq_delta: Tensor,
}

/// Named parameters in insertion order, each tagged with its group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NdError::DuplicateParam(name));
        }
        let zeros = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group,
            value: value.with_requires_grad(true),
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))?;
        Ok(&mut self.params[i].value)
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on the tape as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
            names: self.index.clone(),
        }
    }

    /// Collects the gradient of each bound parameter. Parameters the loss
    /// does not reach get an explicit zero gradient.
    pub fn grads(&self, bound: &Bound, g: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self
                .params
                .iter()
                .zip(&bound.vars)
                .map(|(p, &v)| {
                    let t = g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                    (p.name.clone(), t)
                })
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
    names: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<(String, Tensor)>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.push((name.into(), grad));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(n, t)| (n.as_str(), t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    /// Multiplier on the update; 1.0 is the original method.
    pub lr: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

impl Adadelta {
    /// Applies one update to every parameter named in `grads`; the rest are
    /// left untouched, accumulators included. The step is all-or-nothing: any
    /// unknown name, shape mismatch or non-finite gradient aborts before any
    /// parameter changes.
    pub fn step(&self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let mut plan = Vec::with_capacity(grads.grads.len());
        for (name, g) in &grads.grads {
            let &i = store
                .index
                .get(name)
                .ok_or_else(|| NdError::UnknownParam(name.clone()))?;
            if g.shape() != store.params[i].value.shape() {
                return Err(NdError::Shape {
                    op: "adadelta",
                    detail: format!(
                        "gradient for `{name}` has shape {:?}, parameter has {:?}",
                        g.shape(),
                        store.params[i].value.shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(NdError::NonFinite {
                    op: "adadelta",
                    detail: format!("gradient for `{name}`"),
                });
            }
            plan.push((i, g));
        }
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for (i, g) in plan {
            let p = &mut store.params[i];
            let vals = p.value.data_mut();
            let eg = p.sq_grad.data_mut();
            let ed = p.sq_delta.data_mut();
            for (((x, g2), d2), &gi) in vals.iter_mut().zip(eg.iter_mut()).zip(ed.iter_mut()).zip(g.data()) {
                *g2 = rho * *g2 + (1.0 - rho) * gi * gi;
                let delta = -((*d2 + eps).sqrt() / (*g2 + eps).sqrt()) * gi;
                *d2 = rho * *d2 + (1.0 - rho) * delta * delta;
                *x += lr * delta;
            }
        }
        Ok(())
    }
}
