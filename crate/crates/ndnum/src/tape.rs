//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value. `backward`
//! walks the nodes in reverse index order, which is the reverse of execution
//! order, and visits each operation once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, NdError, Result};
use crate::kernels::{self, Padding};
use crate::tensor::Tensor;

/// Lower bound applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv { x: Var, k: Var, b: Var, padding: Padding },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    GlobalAverage { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    WeightedNll { prob: Var, target: Vec<usize>, weights: Vec<f64>, total: f64 },
    Bce { p: Var, positive: bool, weight: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NdError::NonFinite {
                op: op_name(&op),
                detail: format!("output of shape {:?}", value.shape()),
            });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a constant or parameter; gradients are kept for it when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, k: Var, b: Var, padding: Padding) -> Result<Var> {
        let out = kernels::conv_forward(self.value(x), self.value(k), self.value(b), padding)?;
        let tracked = self.tracked(x) || self.tracked(k) || self.tracked(b);
        self.push(out, Op::Conv { x, k, b, padding }, tracked)
    }

    pub fn maxpool(&mut self, x: Var, window: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_forward(self.value(x), window)?;
        let tracked = self.tracked(x);
        self.push(out, Op::MaxPool { x, argmax }, tracked)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(x), factor)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Upsample { x, factor }, tracked)
    }

    /// Nearest-neighbour repeat by `factor` followed by a same-padded conv.
    pub fn upsample_conv(&mut self, x: Var, factor: usize, k: Var, b: Var) -> Result<Var> {
        let up = self.upsample(x, factor)?;
        self.conv(up, k, b, Padding::Same)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let tracked = self.tracked(x);
        self.push(out, Op::Relu { x }, tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::sigmoid);
        let tracked = self.tracked(x);
        self.push(out, Op::Sigmoid { x }, tracked)
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_channel(self.value(x));
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax { x }, tracked)
    }

    pub fn global_average(&mut self, x: Var) -> Result<Var> {
        if self.value(x).shape().len() < 3 {
            return shape_err("global_average", format!("expected [N, C, spatial...], got {:?}", self.value(x).shape()));
        }
        let out = kernels::global_average(self.value(x));
        let tracked = self.tracked(x);
        self.push(out, Op::GlobalAverage { x }, tracked)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&tensors)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::Concat { parts: parts.to_vec() }, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone().with_requires_grad(false);
        out.add_assign(tb);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add { a, b }, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x);
        self.push(out, Op::Scale { x, c }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(out, Op::Sum { x }, tracked)
    }

    /// Weighted mean negative log-likelihood of a categorical map.
    ///
    /// `prob` is `[1, L, spatial...]`; `target[i]` is the label at site `i`
    /// and `weights[i]` its weight. The value is
    /// `Σ w_i · -ln max(p[target_i, i], LOG_CLAMP) / Σ w_i`.
    pub fn weighted_nll(&mut self, prob: Var, target: &[usize], weights: &[f64]) -> Result<Var> {
        let p = self.value(prob);
        let (n, c, vol) = p.ncs();
        if n != 1 || target.len() != vol || weights.len() != vol {
            return shape_err(
                "weighted_nll",
                format!(
                    "prob {:?} needs {} targets and weights, got {} and {}",
                    p.shape(),
                    vol,
                    target.len(),
                    weights.len()
                ),
            );
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= c) {
            return shape_err("weighted_nll", format!("target label {bad} >= {c} channels"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(NdError::NonFinite {
                op: "weighted_nll",
                detail: format!("weight total {total}"),
            });
        }
        let d = p.data();
        let acc: f64 = target
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| -w * d[t * vol + i].max(LOG_CLAMP).ln())
            .sum();
        let tracked = self.tracked(prob);
        self.push(
            Tensor::scalar(acc / total),
            Op::WeightedNll {
                prob,
                target: target.to_vec(),
                weights: weights.to_vec(),
                total,
            },
            tracked,
        )
    }

    /// `weight · -ln p` for a positive target, `weight · -ln(1-p)` otherwise.
    pub fn bce(&mut self, p: Var, positive: bool, weight: f64) -> Result<Var> {
        let v = self.value(p);
        if v.numel() != 1 {
            return shape_err("bce", format!("expected a scalar probability, got {:?}", v.shape()));
        }
        let q = v.item();
        let loss = if positive {
            -weight * q.max(LOG_CLAMP).ln()
        } else {
            -weight * (1.0 - q).max(LOG_CLAMP).ln()
        };
        let tracked = self.tracked(p);
        self.push(Tensor::scalar(loss), Op::Bce { p, positive, weight }, tracked)
    }

    /// Hash of every discrete choice made in the forward pass: ReLU gates and
    /// max-pool selections. Two evaluations with equal patterns lie on the
    /// same smooth piece of the function.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return shape_err("backward", format!("loss must be scalar, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, padding } => {
                let cg = kernels::conv_backward(
                    self.value(*x),
                    self.value(*k),
                    self.value(*b),
                    *padding,
                    g,
                    self.tracked(*x),
                )?;
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *k, cg.kernel);
                self.accumulate(grads, *b, cg.bias);
            }
            Op::MaxPool { x, argmax } => {
                let gx = kernels::maxpool_backward(self.value(*x).shape(), argmax, g);
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample { x, factor } => {
                let gx = kernels::upsample_backward(self.value(*x).shape(), *factor, g);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (gi, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid { x } => {
                let mut gx = g.clone();
                for (gi, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *gi *= s * (1.0 - s);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x } => {
                let gx = kernels::softmax_channel_backward(&node.value, g);
                self.accumulate(grads, *x, gx);
            }
            Op::GlobalAverage { x } => {
                let gx = kernels::global_average_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
                for (&p, gp) in parts.iter().zip(kernels::concat_backward(&shapes, g)) {
                    self.accumulate(grads, p, gp);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::WeightedNll {
                prob,
                target,
                weights,
                total,
            } => {
                let p = self.value(*prob);
                let vol = target.len();
                let scale = g.item() / total;
                let mut gp = Tensor::zeros(p.shape());
                for (i, (&t, &w)) in target.iter().zip(weights).enumerate() {
                    let q = p.data()[t * vol + i];
                    if q > LOG_CLAMP {
                        gp.data_mut()[t * vol + i] = -scale * w / q;
                    }
                }
                self.accumulate(grads, *prob, gp);
            }
            Op::Bce { p, positive, weight } => {
                let q = self.value(*p).item();
                let d = if *positive {
                    if q > LOG_CLAMP {
                        -weight / q
                    } else {
                        0.0
                    }
                } else if 1.0 - q > LOG_CLAMP {
                    weight / (1.0 - q)
                } else {
                    0.0
                };
                let shape = self.value(*p).shape();
                self.accumulate(grads, *p, Tensor::full(shape, d * g.item()));
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv { .. } => "conv",
        Op::MaxPool { .. } => "maxpool",
        Op::Upsample { .. } => "upsample",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Softmax { .. } => "softmax_channel",
        Op::GlobalAverage { .. } => "global_average",
        Op::Concat { .. } => "concat",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::WeightedNll { .. } => "weighted_nll",
        Op::Bce { .. } => "bce",
    }
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf is untracked or unreachable
    /// from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Tape indices of the operations processed, in processing order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
