//! Forward and backward passes over a [`NetworkSpec`] + [`Parameters`] pair.
//!
//! Tensors are flat `Vec<f64>` in channel-major (CHW) order.

use super::params::{ConvParams, DenseParams, LayerParams, Parameters};
use super::spec::{Activation, LayerSpec, NetworkSpec, TensorShape};
use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Output index range `[lo, hi)` for which `o * stride + offset - padding`
/// lands inside `[0, in_len)`.
fn valid_range(
    in_len: usize,
    out_len: usize,
    offset: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + offset - padding <= in_len - 1
    let top = in_len + padding;
    let hi = if top > offset {
        ((top - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct ConvGeom {
    input: TensorShape,
    output: TensorShape,
    stride: usize,
    padding: usize,
}

const PAD: usize = usize::MAX;

/// `idx[r * P + q]`: input offset read by kernel tap `r = (c, ky, kx)` at
/// output position `q`, or `PAD` where the tap falls in the zero padding.
fn im2col_index(p: &ConvParams, g: &ConvGeom) -> Vec<usize> {
    let (h, w) = (g.input.height, g.input.width);
    let (oh, ow) = (g.output.height, g.output.width);
    let k = p.kernel;
    let mut idx = vec![PAD; p.in_channels * k * k * oh * ow];
    let mut r = 0;
    for c in 0..p.in_channels {
        for ky in 0..k {
            let (y0, y1) = valid_range(h, oh, ky, g.stride, g.padding);
            for kx in 0..k {
                let (x0, x1) = valid_range(w, ow, kx, g.stride, g.padding);
                let row = &mut idx[r * oh * ow..(r + 1) * oh * ow];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    for ox in x0..x1 {
                        row[oy * ow + ox] = (c * h + iy) * w + ox * g.stride + kx - g.padding;
                    }
                }
                r += 1;
            }
        }
    }
    idx
}

fn im2col(idx: &[usize], input: &[f64]) -> Vec<f64> {
    idx.iter()
        .map(|&i| if i == PAD { 0.0 } else { input[i] })
        .collect()
}

fn conv_forward(p: &ConvParams, g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let positions = g.output.height * g.output.width;
    let taps = p.filter_len();
    let cols = im2col(&im2col_index(p, g), input);
    let mut out = vec![0.0; p.filters * positions];
    for (f, plane) in out.chunks_exact_mut(positions).enumerate() {
        plane.iter_mut().for_each(|v| *v = p.bias[f]);
        for (&wt, col) in p.weights[f * taps..(f + 1) * taps]
            .iter()
            .zip(cols.chunks_exact(positions))
        {
            if wt == 0.0 {
                continue;
            }
            for (o, x) in plane.iter_mut().zip(col) {
                *o += wt * x;
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad` (when given) and returns the
/// input gradient (when `want_input` is set).
fn conv_backward(
    p: &ConvParams,
    g: &ConvGeom,
    input: &[f64],
    d_out: &[f64],
    grad: Option<&mut ConvParams>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let positions = g.output.height * g.output.width;
    let taps = p.filter_len();
    let idx = im2col_index(p, g);
    let mut d_in = want_input.then(|| vec![0.0; g.input.len()]);
    if let Some(gr) = grad {
        let cols = im2col(&idx, input);
        for (f, plane) in d_out.chunks_exact(positions).enumerate() {
            gr.bias[f] += plane.iter().sum::<f64>();
            for (gw, col) in gr.weights[f * taps..(f + 1) * taps]
                .iter_mut()
                .zip(cols.chunks_exact(positions))
            {
                *gw += plane.iter().zip(col).map(|(d, x)| d * x).sum::<f64>();
            }
        }
    }
    if let Some(d_in) = d_in.as_mut() {
        for (f, plane) in d_out.chunks_exact(positions).enumerate() {
            for (&wt, rows) in p.weights[f * taps..(f + 1) * taps]
                .iter()
                .zip(idx.chunks_exact(positions))
            {
                for (&i, d) in rows.iter().zip(plane) {
                    if i != PAD {
                        d_in[i] += wt * d;
                    }
                }
            }
        }
    }
    d_in
}

fn dense_forward(p: &DenseParams, input: &[f64]) -> Vec<f64> {
    (0..p.units)
        .map(|u| {
            let row = &p.weights[u * p.inputs..(u + 1) * p.inputs];
            p.bias[u] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    p: &DenseParams,
    input: &[f64],
    d_out: &[f64],
    grad: Option<&mut DenseParams>,
    want_input: bool,
) -> Option<Vec<f64>> {
    if let Some(gr) = grad {
        for (u, &d) in d_out.iter().enumerate() {
            gr.bias[u] += d;
            let row = &mut gr.weights[u * p.inputs..(u + 1) * p.inputs];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
    }
    want_input.then(|| {
        let mut d_in = vec![0.0; p.inputs];
        for (u, &d) in d_out.iter().enumerate() {
            let row = &p.weights[u * p.inputs..(u + 1) * p.inputs];
            for (di, w) in d_in.iter_mut().zip(row) {
                *di += d * w;
            }
        }
        d_in
    })
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes gradient entries where the forward output was clamped by ReLU.
fn relu_mask(grad: &mut [f64], output: &[f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

fn pool_forward(input: &[f64], inp: TensorShape, out: TensorShape, window: usize) -> Vec<f64> {
    let scale = 1.0 / (window * window) as f64;
    let mut res = vec![0.0; out.len()];
    for c in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut s = 0.0;
                for dy in 0..window {
                    let row = (c * inp.height + oy * window + dy) * inp.width + ox * window;
                    s += input[row..row + window].iter().sum::<f64>();
                }
                res[(c * out.height + oy) * out.width + ox] = s * scale;
            }
        }
    }
    res
}

fn pool_backward(d_out: &[f64], inp: TensorShape, out: TensorShape, window: usize) -> Vec<f64> {
    let scale = 1.0 / (window * window) as f64;
    let mut d_in = vec![0.0; inp.len()];
    for c in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let d = d_out[(c * out.height + oy) * out.width + ox] * scale;
                for dy in 0..window {
                    let row = (c * inp.height + oy * window + dy) * inp.width + ox * window;
                    d_in[row..row + window].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
    d_in
}

/// Activations recorded by [`forward_trace`]: `inputs[i]` is layer i's input,
/// `outputs[i]` its output; `mids[i]` holds a residual block's inner activation.
pub struct ForwardTrace {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    mids: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    /// Final class probabilities.
    pub fn probabilities(&self) -> &[f64] {
        self.outputs.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Input to the softmax layer.
    pub fn logits(&self) -> &[f64] {
        self.inputs.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Pre-ReLU signs are recoverable from outputs; this exposes every value
    /// that a ReLU clamps so callers can detect activation-pattern changes.
    pub fn relu_pattern(&self, spec: &NetworkSpec) -> Vec<bool> {
        let mut pattern = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let relu = match layer {
                LayerSpec::Conv { activation, .. } | LayerSpec::Dense { activation, .. } => {
                    *activation == Activation::Relu
                }
                LayerSpec::Residual { .. } => true,
                _ => false,
            };
            if relu {
                pattern.extend(self.outputs[i].iter().map(|v| *v > 0.0));
                if let Some(mid) = &self.mids[i] {
                    pattern.extend(mid.iter().map(|v| *v > 0.0));
                }
            }
        }
        pattern
    }
}

/// Network geometry resolved once so repeated passes skip shape propagation.
#[derive(Debug, Clone)]
pub struct Plan {
    inputs: Vec<TensorShape>,
    outputs: Vec<TensorShape>,
    mid_shapes: Vec<Option<TensorShape>>,
}

impl Plan {
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let inputs = spec.layer_inputs()?;
        let outputs = spec.layer_shapes()?;
        let mid_shapes = spec
            .layers
            .iter()
            .zip(&outputs)
            .map(|(l, o)| match *l {
                LayerSpec::Residual { mid_filters, .. } => {
                    Some(TensorShape::new(mid_filters, o.height, o.width))
                }
                _ => None,
            })
            .collect();
        Ok(Self {
            inputs,
            outputs,
            mid_shapes,
        })
    }

    pub fn input_shape(&self) -> TensorShape {
        self.inputs[0]
    }
}

fn check_input(plan: &Plan, input: &[f64]) -> Result<()> {
    let expected = plan.input_shape();
    if input.len() != expected.len() {
        return Err(Error::InvalidInput(format!(
            "input has {} values, network expects {} ({expected})",
            input.len(),
            expected.len()
        )));
    }
    Ok(())
}

pub fn forward_trace(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &Parameters,
    input: &[f64],
) -> Result<ForwardTrace> {
    check_input(plan, input)?;
    let n = spec.layers.len();
    let mut trace = ForwardTrace {
        inputs: Vec::with_capacity(n),
        outputs: Vec::with_capacity(n),
        mids: Vec::with_capacity(n),
    };
    let mut x = input.to_vec();
    for (i, (layer, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let (inp, out) = (plan.inputs[i], plan.outputs[i]);
        let mut mid = None;
        let y = match (layer, lp) {
            (
                LayerSpec::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                },
                LayerParams::Conv(p),
            ) => {
                let g = ConvGeom {
                    input: inp,
                    output: out,
                    stride: *stride,
                    padding: *padding,
                };
                let mut y = conv_forward(p, &g, &x);
                if *activation == Activation::Relu {
                    relu_in_place(&mut y);
                }
                y
            }
            (LayerSpec::AvgPool { window }, _) => pool_forward(&x, inp, out, *window),
            (
                LayerSpec::Residual { kernel, stride, .. },
                LayerParams::Residual { conv1, conv2, proj },
            ) => {
                let ms = plan.mid_shapes[i].expect("residual mid shape");
                let g1 = ConvGeom {
                    input: inp,
                    output: ms,
                    stride: *stride,
                    padding: kernel / 2,
                };
                let mut a1 = conv_forward(conv1, &g1, &x);
                relu_in_place(&mut a1);
                let g2 = ConvGeom {
                    input: ms,
                    output: out,
                    stride: 1,
                    padding: kernel / 2,
                };
                let mut y = conv_forward(conv2, &g2, &a1);
                let gp = ConvGeom {
                    input: inp,
                    output: out,
                    stride: *stride,
                    padding: 0,
                };
                let skip = conv_forward(proj, &gp, &x);
                y.iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
                relu_in_place(&mut y);
                mid = Some(a1);
                y
            }
            (LayerSpec::Dense { activation, .. }, LayerParams::Dense(p)) => {
                let mut y = dense_forward(p, &x);
                if *activation == Activation::Relu {
                    relu_in_place(&mut y);
                }
                y
            }
            (LayerSpec::Softmax, _) => softmax(&x),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "layer {i}: parameters do not match spec"
                )))
            }
        };
        trace.inputs.push(std::mem::replace(&mut x, y.clone()));
        trace.outputs.push(y);
        trace.mids.push(mid);
    }
    Ok(trace)
}

/// Backpropagates `d_logits` (gradient w.r.t. the softmax input) and adds the
/// parameter gradients of layers `first_layer..` into `grads`.
pub fn backward(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &Parameters,
    trace: &ForwardTrace,
    d_logits: &[f64],
    grads: &mut Parameters,
    first_layer: usize,
) {
    let n = spec.layers.len();
    let mut d = d_logits.to_vec();
    // layer n-1 is softmax; its gradient is folded into d_logits
    for i in (first_layer..n - 1).rev() {
        let want_input = i > first_layer;
        let (inp, out) = (plan.inputs[i], plan.outputs[i]);
        let x = &trace.inputs[i];
        let y = &trace.outputs[i];
        let next = match (&spec.layers[i], &params.layers[i], &mut grads.layers[i]) {
            (
                LayerSpec::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                },
                LayerParams::Conv(p),
                LayerParams::Conv(gp),
            ) => {
                if *activation == Activation::Relu {
                    relu_mask(&mut d, y);
                }
                let g = ConvGeom {
                    input: inp,
                    output: out,
                    stride: *stride,
                    padding: *padding,
                };
                conv_backward(p, &g, x, &d, Some(gp), want_input)
            }
            (LayerSpec::AvgPool { window }, _, _) => {
                want_input.then(|| pool_backward(&d, inp, out, *window))
            }
            (
                LayerSpec::Residual { kernel, stride, .. },
                LayerParams::Residual { conv1, conv2, proj },
                LayerParams::Residual {
                    conv1: g1p,
                    conv2: g2p,
                    proj: gpp,
                },
            ) => {
                relu_mask(&mut d, y);
                let ms = plan.mid_shapes[i].expect("residual mid shape");
                let a1 = trace.mids[i].as_ref().expect("residual mid activation");
                let g2 = ConvGeom {
                    input: ms,
                    output: out,
                    stride: 1,
                    padding: kernel / 2,
                };
                let mut d_a1 =
                    conv_backward(conv2, &g2, a1, &d, Some(g2p), true).expect("mid gradient");
                relu_mask(&mut d_a1, a1);
                let gp = ConvGeom {
                    input: inp,
                    output: out,
                    stride: *stride,
                    padding: 0,
                };
                let d_skip = conv_backward(proj, &gp, x, &d, Some(gpp), want_input);
                let g1 = ConvGeom {
                    input: inp,
                    output: ms,
                    stride: *stride,
                    padding: kernel / 2,
                };
                let d_main = conv_backward(conv1, &g1, x, &d_a1, Some(g1p), want_input);
                match (d_main, d_skip) {
                    (Some(mut a), Some(b)) => {
                        a.iter_mut().zip(&b).for_each(|(u, v)| *u += v);
                        Some(a)
                    }
                    _ => None,
                }
            }
            (
                LayerSpec::Dense { activation, .. },
                LayerParams::Dense(p),
                LayerParams::Dense(gp),
            ) => {
                if *activation == Activation::Relu {
                    relu_mask(&mut d, y);
                }
                dense_backward(p, x, &d, Some(gp), want_input)
            }
            _ => None,
        };
        match next {
            Some(v) => d = v,
            None => break,
        }
    }
}

/// Weighted cross-entropy of one sample and its gradient w.r.t. the logits:
/// `loss = -weight * ln p[label]`, `d = weight * (p - onehot(label))`.
pub fn weighted_ce(probs: &[f64], label: usize, weight: f64) -> (f64, Vec<f64>) {
    let p = probs[label].max(f64::MIN_POSITIVE);
    let mut d: Vec<f64> = probs.iter().map(|q| weight * q).collect();
    d[label] -= weight;
    (-weight * p.ln(), d)
}
