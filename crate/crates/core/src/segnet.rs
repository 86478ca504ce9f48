//! U-net with a segmentation head and a stopping head sharing one trunk.
//!
//! Parameter groups: `y` is the final 1x1 convolution to label logits, `s`
//! is the stopping head (3x3 conv, ReLU, 3x3 conv to one channel, global
//! average, sigmoid), `h` is everything else. Direct-mode nets have no
//! stopping head.

use std::path::Path;

use ndnum::{Bound, Group, Padding, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grid::{distance_channel, one_hot, Dims, Image, LabelMap, Seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    /// Input: image plus the previous label map; outputs segmentation and stop probability.
    Iterative,
    /// Input: image only; outputs segmentation.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub pool: usize,
    pub num_labels: u8,
    pub rank: usize,
    pub mode: NetMode,
    pub distance_channel: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 24,
            pool: 3,
            num_labels: 2,
            rank: 2,
            mode: NetMode::Iterative,
            distance_channel: false,
        }
    }
}

const KERNEL: usize = 3;

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(SegError::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels < 4 {
            return Err(SegError::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.pool < 2 {
            return Err(SegError::Config(format!("pool must be >= 2, got {}", self.pool)));
        }
        if self.num_labels < 2 {
            return Err(SegError::Config(format!("num_labels must be >= 2, got {}", self.num_labels)));
        }
        if !(2..=3).contains(&self.rank) {
            return Err(SegError::Config(format!("rank must be 2 or 3, got {}", self.rank)));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        let maps = match self.mode {
            NetMode::Iterative => self.num_labels as usize,
            NetMode::Direct => 0,
        };
        1 + maps + usize::from(self.distance_channel)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn has_stop_head(&self) -> bool {
        self.mode == NetMode::Iterative
    }

    /// Every spatial extent must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.pool.pow(self.levels as u32 - 1)
    }

    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        if dims.rank() != self.rank {
            return Err(SegError::Shape(format!("net expects rank {}, grid is {:?}", self.rank, dims.as_slice())));
        }
        let m = self.size_multiple();
        if let Some(&bad) = dims.as_slice().iter().find(|&&d| d % m != 0) {
            return Err(SegError::Shape(format!(
                "grid {:?}: extent {bad} is not divisible by pool^(levels-1) = {m}",
                dims.as_slice()
            )));
        }
        Ok(())
    }

    /// Receptive field of one output voxel of the trunk, per axis.
    pub fn receptive_field(&self) -> usize {
        let conv = |rf: &mut f64, jump: f64| *rf += (KERNEL - 1) as f64 * jump;
        let (mut rf, mut jump) = (1.0, 1.0);
        for level in 0..self.levels {
            conv(&mut rf, jump);
            conv(&mut rf, jump);
            if level + 1 < self.levels {
                rf += (self.pool - 1) as f64 * jump;
                jump *= self.pool as f64;
            }
        }
        for _ in 0..self.levels - 1 {
            jump /= self.pool as f64;
            conv(&mut rf, jump);
            conv(&mut rf, jump);
            conv(&mut rf, jump);
        }
        rf as usize
    }

    /// Parameter names and shapes in build order.
    pub fn layout(&self) -> Vec<(String, Group, Vec<usize>)> {
        let k = vec![KERNEL; self.rank];
        let kshape = |cout: usize, cin: usize, ks: &[usize]| {
            let mut s = vec![cout, cin];
            s.extend_from_slice(ks);
            s
        };
        let mut out = Vec::new();
        let mut conv = |name: String, group: Group, cout: usize, cin: usize, ks: &[usize]| {
            out.push((format!("{name}.w"), group, kshape(cout, cin, ks)));
            out.push((format!("{name}.b"), group, vec![cout]));
        };
        let mut cin = self.input_channels();
        for l in 0..self.levels {
            let c = self.channels(l);
            conv(format!("enc{l}.a"), Group::H, c, cin, &k);
            conv(format!("enc{l}.b"), Group::H, c, c, &k);
            cin = c;
        }
        for l in (0..self.levels - 1).rev() {
            let c = self.channels(l);
            conv(format!("dec{l}.up"), Group::H, c, self.channels(l + 1), &k);
            conv(format!("dec{l}.a"), Group::H, c, 2 * c, &k);
            conv(format!("dec{l}.b"), Group::H, c, c, &k);
        }
        let c = self.base_channels;
        conv("seg".into(), Group::Y, self.num_labels as usize, c, &vec![1; self.rank]);
        if self.has_stop_head() {
            conv("stop.a".into(), Group::S, c, c, &k);
            conv("stop.b".into(), Group::S, 1, c, &k);
        }
        out
    }

    /// FNV-1a hash of the parameter layout.
    pub fn architecture_id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, group, shape) in self.layout() {
            let text = format!("{name}:{group}:{shape:?};");
            for b in text.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Fresh parameters: He-normal weights (fan-in scaling), zero biases.
pub fn build<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (name, group, shape) in config.layout() {
        let value = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| SegError::Param(e.to_string()))?;
            Tensor::from_fn(&shape, |_| normal.sample(&mut *rng))
        };
        store.insert(name, group, value)?;
    }
    Ok(store)
}

/// Input tensor `[1, C, dims...]`: image, one-hot previous map (iterative
/// mode), distance-to-seed channel (when enabled).
pub fn net_input(config: &NetConfig, image: &Image, prev: Option<&LabelMap>, seed: Option<&Seed>) -> Result<Tensor> {
    let dims = image.dims();
    let mut parts = vec![image.to_tensor()];
    if config.mode == NetMode::Iterative {
        let prev = prev.ok_or_else(|| SegError::Param("iterative net needs a previous map".into()))?;
        if prev.dims() != dims {
            return Err(SegError::Shape(format!(
                "previous map {:?} does not match image {:?}",
                prev.dims().as_slice(),
                dims.as_slice()
            )));
        }
        parts.push(one_hot(prev, config.num_labels)?);
    }
    if config.distance_channel {
        let seed = seed.ok_or_else(|| SegError::Param("distance channel needs a seed".into()))?;
        parts.push(distance_channel(seed, dims)?);
    }
    stack_channels(dims, &parts)
}

/// Concatenates `[1, c_i, dims...]` tensors along the channel axis.
pub fn stack_channels(dims: &Dims, parts: &[Tensor]) -> Result<Tensor> {
    let vol = dims.volume();
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        if p.shape().first() != Some(&1) || p.numel() % vol != 0 || &p.shape()[2..] != dims.as_slice() {
            return Err(SegError::Shape(format!("channel block {:?} does not match grid {:?}", p.shape(), dims.as_slice())));
        }
        c += p.shape()[1];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(dims.tensor_shape(c), data)?)
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    pub features: Var,
    pub seg_prob: Var,
    pub stop_prob: Option<Var>,
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let k = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(tape.conv(x, k, b, Padding::Same)?)
}

fn conv_relu(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = conv(tape, p, name, x)?;
    Ok(tape.relu(y)?)
}

/// Records the network on `tape`. `input` must come from [`net_input`].
pub fn forward(tape: &mut Tape, params: &Bound, config: &NetConfig, input: Var) -> Result<NetVars> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != config.rank + 2 || shape[0] != 1 || shape[1] != config.input_channels() {
        return Err(SegError::Shape(format!(
            "net input {:?} needs shape [1, {}, <{} spatial dims>]",
            shape,
            config.input_channels(),
            config.rank
        )));
    }
    config.check_dims(&Dims::new(shape[2..].to_vec())?)?;
    let mut skips = Vec::with_capacity(config.levels);
    let mut x = input;
    for l in 0..config.levels {
        x = conv_relu(tape, params, &format!("enc{l}.a"), x)?;
        x = conv_relu(tape, params, &format!("enc{l}.b"), x)?;
        if l + 1 < config.levels {
            skips.push(x);
            x = tape.maxpool(x, config.pool)?;
        }
    }
    for l in (0..config.levels - 1).rev() {
        let k = params.var(&format!("dec{l}.up.w"))?;
        let b = params.var(&format!("dec{l}.up.b"))?;
        let up = tape.upsample_conv(x, config.pool, k, b)?;
        let up = tape.relu(up)?;
        let cat = tape.concat(&[up, skips[l]])?;
        x = conv_relu(tape, params, &format!("dec{l}.a"), cat)?;
        x = conv_relu(tape, params, &format!("dec{l}.b"), x)?;
    }
    let features = x;
    let logits = conv(tape, params, "seg", features)?;
    let seg_prob = tape.softmax_channel(logits)?;
    let stop_prob = if config.has_stop_head() {
        let s = conv_relu(tape, params, "stop.a", features)?;
        let s = conv(tape, params, "stop.b", s)?;
        let s = tape.global_average(s)?;
        Some(tape.sigmoid(s)?)
    } else {
        None
    };
    Ok(NetVars {
        features,
        seg_prob,
        stop_prob,
    })
}

/// Evaluated network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub seg_prob: Tensor,
    /// `None` for direct-mode nets.
    pub stop_prob: Option<f64>,
    pub features: Tensor,
}

/// A parameter store paired with its configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let params = build(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, image: &Image, prev: Option<&LabelMap>, seed: Option<&Seed>) -> Result<NetOutput> {
        let input = net_input(&self.config, image, prev, seed)?;
        self.predict_tensor(input)
    }

    pub fn predict_tensor(&self, input: Tensor) -> Result<NetOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(input);
        let vars = forward(&mut tape, &bound, &self.config, x)?;
        Ok(NetOutput {
            seg_prob: tape.value(vars.seg_prob).clone(),
            stop_prob: vars.stop_prob.map(|v| tape.value(v).item()),
            features: tape.value(vars.features).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config)?;
        let mut bytes = Vec::new();
        ndnum::write_checkpoint(&mut bytes, &self.params, &meta)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (params, meta) = ndnum::read_checkpoint(bytes.as_slice())?;
        let config: NetConfig = serde_json::from_str(&meta)
            .map_err(|e| SegError::Format(format!("checkpoint {} has no valid net config: {e}", path.display())))?;
        config.validate()?;
        let expected = config.layout();
        if expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, g, s)| params.get(n).is_none_or(|p| p.group != *g || p.value.shape() != s.as_slice()))
        {
            return Err(SegError::Format(format!(
                "checkpoint {} parameters do not match its net config",
                path.display()
            )));
        }
        Ok(Self { config, params })
    }
}
