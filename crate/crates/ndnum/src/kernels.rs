//! Forward and backward kernels for the network primitives.
//!
//! All kernels take `[N, C, spatial...]` tensors with an arbitrary spatial
//! rank.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; output keeps the input size.
    Same,
    /// No padding; each output dimension shrinks by `k - 1`.
    Valid,
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for d in (0..dims.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * dims[d + 1];
    }
    s
}

/// Advances a row-major multi-index; returns false after the last one.
fn bump(idx: &mut [usize], dims: &[usize]) -> bool {
    for d in (0..dims.len()).rev() {
        idx[d] += 1;
        if idx[d] < dims[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    in_spatial: Vec<usize>,
    in_vol: usize,
    k_vol: usize,
    out_spatial: Vec<usize>,
    out_vol: usize,
    /// Per-axis zero padding on the low side (same on the high side).
    pad: Vec<usize>,
    padded: Vec<usize>,
    padded_vol: usize,
    /// Flat offset in the padded layout for each kernel position, row-major.
    shifts: Vec<usize>,
    /// Flat padded-layout position of every output site.
    out_pos: Vec<usize>,
    /// Columns spanned by one shifted GEMM (last output position + 1).
    span: usize,
}

fn conv_geom(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Result<ConvGeom> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() < 3 {
        return shape_err("conv", format!("input must be [N, C, spatial...], got {xs:?}"));
    }
    if ks.len() != xs.len() {
        return shape_err(
            "conv",
            format!("kernel rank {} does not match input rank {} ({ks:?} vs {xs:?})", ks.len(), xs.len()),
        );
    }
    if ks[1] != xs[1] {
        return shape_err(
            "conv",
            format!("kernel expects Cin={} but input has C={} (kernel {ks:?}, input {xs:?})", ks[1], xs[1]),
        );
    }
    if b.shape() != [ks[0]] {
        return shape_err("conv", format!("bias shape {:?} does not match Cout={}", b.shape(), ks[0]));
    }
    let in_sp = &xs[2..];
    let k_sp = &ks[2..];
    let mut out_spatial = Vec::with_capacity(in_sp.len());
    let mut pad = Vec::with_capacity(in_sp.len());
    for (d, (&n, &kd)) in in_sp.iter().zip(k_sp).enumerate() {
        match padding {
            Padding::Same => {
                if kd % 2 == 0 {
                    return shape_err("conv", format!("kernel spatial dim {d} has even size {kd}"));
                }
                out_spatial.push(n);
                pad.push((kd - 1) / 2);
            }
            Padding::Valid => {
                if kd > n {
                    return shape_err(
                        "conv",
                        format!("kernel spatial dim {d} ({kd}) exceeds input size {n}"),
                    );
                }
                out_spatial.push(n - kd + 1);
                pad.push(0);
            }
        }
    }
    let padded: Vec<usize> = in_sp.iter().zip(&pad).map(|(n, p)| n + 2 * p).collect();
    let pstr = strides(&padded);
    let mut shifts = Vec::new();
    let mut q = vec![0usize; k_sp.len()];
    loop {
        shifts.push(q.iter().zip(&pstr).map(|(a, s)| a * s).sum());
        if !bump(&mut q, k_sp) {
            break;
        }
    }
    let mut out_pos = Vec::new();
    let mut o = vec![0usize; out_spatial.len()];
    loop {
        out_pos.push(o.iter().zip(&pstr).map(|(a, s)| a * s).sum());
        if !bump(&mut o, &out_spatial) {
            break;
        }
    }
    let span = out_pos.last().copied().unwrap_or(0) + 1;
    Ok(ConvGeom {
        cin: xs[1],
        cout: ks[0],
        in_spatial: in_sp.to_vec(),
        in_vol: in_sp.iter().product(),
        k_vol: k_sp.iter().product(),
        out_vol: out_pos.len(),
        out_spatial,
        padded_vol: padded.iter().product(),
        padded,
        pad,
        shifts,
        out_pos,
        span,
    })
}

impl ConvGeom {
    fn is_identity_layout(&self) -> bool {
        self.pad.iter().all(|&p| p == 0) && self.padded == self.in_spatial
    }

    /// Copies `[Cin, in...]` into a zero-padded `[Cin, padded...]` buffer.
    fn pad_input(&self, x: &[f64], dst: &mut [f64]) {
        dst.fill(0.0);
        let pstr = strides(&self.padded);
        let offset: usize = self.pad.iter().zip(&pstr).map(|(p, s)| p * s).sum();
        let rank = self.in_spatial.len();
        let row = self.in_spatial[rank - 1];
        let rows = self.in_vol / row;
        let outer = &self.in_spatial[..rank - 1];
        for ci in 0..self.cin {
            let src = &x[ci * self.in_vol..(ci + 1) * self.in_vol];
            let dplane = &mut dst[ci * self.padded_vol..(ci + 1) * self.padded_vol];
            let mut idx = vec![0usize; outer.len()];
            for r in 0..rows {
                let base = offset + idx.iter().zip(&pstr).map(|(a, s)| a * s).sum::<usize>();
                dplane[base..base + row].copy_from_slice(&src[r * row..(r + 1) * row]);
                bump(&mut idx, outer);
            }
        }
    }

    /// Inverse of `pad_input` for gradients: adds the interior back.
    fn crop_add(&self, padded: &[f64], dst: &mut [f64]) {
        let pstr = strides(&self.padded);
        let offset: usize = self.pad.iter().zip(&pstr).map(|(p, s)| p * s).sum();
        let rank = self.in_spatial.len();
        let row = self.in_spatial[rank - 1];
        let rows = self.in_vol / row;
        let outer = &self.in_spatial[..rank - 1];
        for ci in 0..self.cin {
            let splane = &padded[ci * self.padded_vol..(ci + 1) * self.padded_vol];
            let d = &mut dst[ci * self.in_vol..(ci + 1) * self.in_vol];
            let mut idx = vec![0usize; outer.len()];
            for r in 0..rows {
                let base = offset + idx.iter().zip(&pstr).map(|(a, s)| a * s).sum::<usize>();
                for (a, b) in d[r * row..(r + 1) * row].iter_mut().zip(&splane[base..base + row]) {
                    *a += b;
                }
                bump(&mut idx, outer);
            }
        }
    }
}

/// `c = beta·c + a·b` for an `m×k` by `k×n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

// Convolution runs as one GEMM per kernel position over a zero-padded copy
// of the input. Output is produced in the padded layout (a few junk columns
// per row) and then compacted.

pub fn conv_forward(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = conv_geom(x, k, b, padding)?;
    let n = x.shape()[0];
    let mut out_shape = vec![n, g.cout];
    out_shape.extend_from_slice(&g.out_spatial);
    let mut out = Tensor::zeros(&out_shape);
    let ck = g.cin * g.k_vol;
    let identity = g.is_identity_layout();
    let mut xpad = if identity { Vec::new() } else { vec![0.0; g.cin * g.padded_vol] };
    let mut acc = vec![0.0; g.cout * g.span];
    for s in 0..n {
        let xs = &x.data()[s * g.cin * g.in_vol..(s + 1) * g.cin * g.in_vol];
        let src: &[f64] = if identity {
            xs
        } else {
            g.pad_input(xs, &mut xpad);
            &xpad
        };
        for (qi, &shift) in g.shifts.iter().enumerate() {
            let beta = if qi == 0 { 0.0 } else { 1.0 };
            gemm(
                g.cout,
                g.cin,
                g.span,
                &k.data()[qi..],
                (ck, g.k_vol),
                &src[shift..],
                (g.padded_vol, 1),
                beta,
                &mut acc,
                (g.span, 1),
            );
        }
        let os = &mut out.data_mut()[s * g.cout * g.out_vol..(s + 1) * g.cout * g.out_vol];
        for co in 0..g.cout {
            let bias = b.data()[co];
            let arow = &acc[co * g.span..(co + 1) * g.span];
            for (o, &p) in os[co * g.out_vol..(co + 1) * g.out_vol].iter_mut().zip(&g.out_pos) {
                *o = arow[p] + bias;
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv_backward(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    padding: Padding,
    gout: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = conv_geom(x, k, b, padding)?;
    let n = x.shape()[0];
    let ck = g.cin * g.k_vol;
    let mut gk = Tensor::zeros(k.shape());
    let mut gb = Tensor::zeros(b.shape());
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut xpad = vec![0.0; g.cin * g.padded_vol];
    let mut gxpad = vec![0.0; if need_input { g.cin * g.padded_vol } else { 0 }];
    let mut gspan = vec![0.0; g.cout * g.span];
    for s in 0..n {
        let xs = &x.data()[s * g.cin * g.in_vol..(s + 1) * g.cin * g.in_vol];
        let go = &gout.data()[s * g.cout * g.out_vol..(s + 1) * g.cout * g.out_vol];
        // scatter gOut into the padded layout; junk columns stay zero
        for co in 0..g.cout {
            let row = &go[co * g.out_vol..(co + 1) * g.out_vol];
            gb.data_mut()[co] += row.iter().sum::<f64>();
            let dst = &mut gspan[co * g.span..(co + 1) * g.span];
            for (&v, &p) in row.iter().zip(&g.out_pos) {
                dst[p] = v;
            }
        }
        g.pad_input(xs, &mut xpad);
        if need_input {
            gxpad.fill(0.0);
        }
        for (qi, &shift) in g.shifts.iter().enumerate() {
            // gK[:, :, q] += gOut · X_qᵀ
            gemm(
                g.cout,
                g.span,
                g.cin,
                &gspan,
                (g.span, 1),
                &xpad[shift..],
                (1, g.padded_vol),
                1.0,
                &mut gk.data_mut()[qi..],
                (ck, g.k_vol),
            );
            if need_input {
                // gX_q += K[:, :, q]ᵀ · gOut
                gemm(
                    g.cin,
                    g.cout,
                    g.span,
                    &k.data()[qi..],
                    (g.k_vol, ck),
                    &gspan,
                    (g.span, 1),
                    1.0,
                    &mut gxpad[shift..],
                    (g.padded_vol, 1),
                );
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx.data_mut()[s * g.cin * g.in_vol..(s + 1) * g.cin * g.in_vol];
            g.crop_add(&gxpad, gxs);
        }
    }
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// Max pooling with non-overlapping `window`-sized cells along every spatial
/// axis. Returns the pooled tensor and, per output element, the flat index of
/// the selected input element (first maximum in row-major window order).
pub fn maxpool_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 {
        return shape_err("maxpool", "window must be positive");
    }
    let xs = x.shape();
    if xs.len() < 3 {
        return shape_err("maxpool", format!("input must be [N, C, spatial...], got {xs:?}"));
    }
    let sp = &xs[2..];
    if let Some((d, &n)) = sp.iter().enumerate().find(|(_, &n)| n % window != 0) {
        return shape_err(
            "maxpool",
            format!("spatial dim {d} has size {n}, not divisible by window {window}"),
        );
    }
    let out_sp: Vec<usize> = sp.iter().map(|&n| n / window).collect();
    let in_str = strides(sp);
    let rank = sp.len();
    let win_dims = vec![window; rank];
    let mut offsets = Vec::with_capacity(window.pow(rank as u32));
    let mut q = vec![0usize; rank];
    loop {
        offsets.push(q.iter().zip(&in_str).map(|(a, s)| a * s).sum::<usize>());
        if !bump(&mut q, &win_dims) {
            break;
        }
    }
    let mut bases = Vec::new();
    let mut o = vec![0usize; rank];
    loop {
        bases.push(o.iter().zip(&in_str).map(|(a, s)| a * window * s).sum::<usize>());
        if !bump(&mut o, &out_sp) {
            break;
        }
    }
    let (n, c, in_vol) = x.ncs();
    let out_vol = bases.len();
    let mut out_shape = vec![n, c];
    out_shape.extend_from_slice(&out_sp);
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0usize; n * c * out_vol];
    let xd = x.data();
    for plane in 0..n * c {
        let base_in = plane * in_vol;
        for (p, &b) in bases.iter().enumerate() {
            let mut best = base_in + b + offsets[0];
            for &off in &offsets[1..] {
                let i = base_in + b + off;
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            out.data_mut()[plane * out_vol + p] = xd[best];
            argmax[plane * out_vol + p] = best;
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(gout.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

fn upsample_table(sp: &[usize], factor: usize) -> (Vec<usize>, Vec<usize>) {
    let out_sp: Vec<usize> = sp.iter().map(|&n| n * factor).collect();
    let in_str = strides(sp);
    let mut table = Vec::with_capacity(out_sp.iter().product());
    let mut o = vec![0usize; sp.len()];
    loop {
        table.push(o.iter().zip(&in_str).map(|(a, s)| (a / factor) * s).sum());
        if !bump(&mut o, &out_sp) {
            break;
        }
    }
    (out_sp, table)
}

/// Nearest-neighbour upsampling: every input element becomes a
/// `factor^rank` block.
pub fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return shape_err("upsample", format!("factor must be >= 2, got {factor}"));
    }
    if x.shape().len() < 3 {
        return shape_err("upsample", format!("input must be [N, C, spatial...], got {:?}", x.shape()));
    }
    let (out_sp, table) = upsample_table(x.spatial(), factor);
    let (n, c, in_vol) = x.ncs();
    let mut shape = vec![n, c];
    shape.extend_from_slice(&out_sp);
    let out_vol = table.len();
    let mut out = Tensor::zeros(&shape);
    for plane in 0..n * c {
        let src = &x.data()[plane * in_vol..(plane + 1) * in_vol];
        let dst = &mut out.data_mut()[plane * out_vol..(plane + 1) * out_vol];
        for (d, &i) in dst.iter_mut().zip(&table) {
            *d = src[i];
        }
    }
    Ok(out)
}

pub fn upsample_backward(input_shape: &[usize], factor: usize, gout: &Tensor) -> Tensor {
    let (_, table) = upsample_table(&input_shape[2..], factor);
    let mut gx = Tensor::zeros(input_shape);
    let in_vol: usize = input_shape[2..].iter().product();
    let out_vol = table.len();
    let planes = input_shape[0] * input_shape[1];
    for plane in 0..planes {
        let src = &gout.data()[plane * out_vol..(plane + 1) * out_vol];
        let dst = &mut gx.data_mut()[plane * in_vol..(plane + 1) * in_vol];
        for (&g, &i) in src.iter().zip(&table) {
            dst[i] += g;
        }
    }
    gx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax across axis 1 independently at every (sample, site).
pub fn softmax_channel(x: &Tensor) -> Tensor {
    let (n, c, vol) = x.ncs();
    let mut out = x.clone().with_requires_grad(false);
    let d = out.data_mut();
    for s in 0..n {
        let base = s * c * vol;
        for p in 0..vol {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(d[base + ch * vol + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (d[base + ch * vol + p] - m).exp();
                d[base + ch * vol + p] = e;
                z += e;
            }
            for ch in 0..c {
                d[base + ch * vol + p] /= z;
            }
        }
    }
    out
}

pub fn softmax_channel_backward(prob: &Tensor, gout: &Tensor) -> Tensor {
    let (n, c, vol) = prob.ncs();
    let mut gx = Tensor::zeros(prob.shape());
    let (p, g) = (prob.data(), gout.data());
    let gd = gx.data_mut();
    for s in 0..n {
        let base = s * c * vol;
        for site in 0..vol {
            let dot: f64 = (0..c).map(|ch| p[base + ch * vol + site] * g[base + ch * vol + site]).sum();
            for ch in 0..c {
                let i = base + ch * vol + site;
                gd[i] = p[i] * (g[i] - dot);
            }
        }
    }
    gx
}

/// Mean over all spatial sites: `[N, C, ...]` to `[N, C]`.
pub fn global_average(x: &Tensor) -> Tensor {
    let (n, c, vol) = x.ncs();
    let data = x
        .data()
        .chunks(vol)
        .map(|plane| plane.iter().sum::<f64>() / vol as f64)
        .collect();
    Tensor::new(vec![n, c], data).expect("global_average shape")
}

pub fn global_average_backward(input_shape: &[usize], gout: &Tensor) -> Tensor {
    let vol: usize = input_shape[2..].iter().product();
    let mut gx = Tensor::zeros(input_shape);
    for (plane, &g) in gx.data_mut().chunks_mut(vol).zip(gout.data()) {
        plane.fill(g / vol as f64);
    }
    gx
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(crate::NdError::Shape {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let n = first.shape()[0];
    let sp = first.spatial().to_vec();
    for t in parts {
        if t.shape()[0] != n || t.spatial() != sp.as_slice() {
            return shape_err(
                "concat",
                format!("shape {:?} incompatible with {:?}", t.shape(), first.shape()),
            );
        }
    }
    let vol: usize = sp.iter().product();
    let c_total: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut shape = vec![n, c_total];
    shape.extend_from_slice(&sp);
    let mut data = Vec::with_capacity(n * c_total * vol);
    for s in 0..n {
        for t in parts {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[s * c * vol..(s + 1) * c * vol]);
        }
    }
    Tensor::new(shape, data)
}

pub fn concat_backward(shapes: &[Vec<usize>], gout: &Tensor) -> Vec<Tensor> {
    let n = gout.shape()[0];
    let vol: usize = gout.spatial().iter().product();
    let c_total = gout.shape()[1];
    let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for s in 0..n {
        let mut ch0 = 0;
        for t in out.iter_mut() {
            let c = t.shape()[1];
            let src = &gout.data()[(s * c_total + ch0) * vol..(s * c_total + ch0 + c) * vol];
            t.data_mut()[s * c * vol..(s + 1) * c * vol].copy_from_slice(src);
            ch0 += c;
        }
    }
    out
}
