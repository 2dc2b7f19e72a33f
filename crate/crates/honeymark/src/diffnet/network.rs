//! Forward and backward passes for the two architectures.
//!
//! All math is f64, single-threaded, and evaluated in a fixed order, so
//! results are bitwise reproducible. Backward passes accumulate into the
//! caller's gradient buffer so batch means can be formed in place.

use super::arch::{ArchDescriptor, ArchKind, CONV1_FILTERS, CONV2_FILTERS};
use crate::diffnet::PROB_FLOOR;

/// Reusable intermediate buffers for one architecture.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    // mlp buffers: one entry per hidden layer
    hidden_z: Vec<Vec<f64>>,
    hidden_a: Vec<Vec<f64>>,
    hidden_delta: Vec<Vec<f64>>,
    // cnn buffers
    conv1_z: Vec<f64>,
    conv1_a: Vec<f64>,
    pool1: Vec<f64>,
    pool1_arg: Vec<usize>,
    conv2_z: Vec<f64>,
    conv2_a: Vec<f64>,
    pool2: Vec<f64>,
    pool2_arg: Vec<usize>,
    d_conv1: Vec<f64>,
    d_pool1: Vec<f64>,
    d_conv2: Vec<f64>,
    d_pool2: Vec<f64>,
    // shared
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    d_logits: Vec<f64>,
}

impl Scratch {
    pub fn new(arch: &ArchDescriptor) -> Self {
        let k = arch.num_classes;
        match arch.kind {
            ArchKind::Mlp => Scratch {
                hidden_z: arch.hidden_sizes.iter().map(|h| vec![0.0; *h]).collect(),
                hidden_a: arch.hidden_sizes.iter().map(|h| vec![0.0; *h]).collect(),
                hidden_delta: arch.hidden_sizes.iter().map(|h| vec![0.0; *h]).collect(),
                conv1_z: Vec::new(),
                conv1_a: Vec::new(),
                pool1: Vec::new(),
                pool1_arg: Vec::new(),
                conv2_z: Vec::new(),
                conv2_a: Vec::new(),
                pool2: Vec::new(),
                pool2_arg: Vec::new(),
                d_conv1: Vec::new(),
                d_pool1: Vec::new(),
                d_conv2: Vec::new(),
                d_pool2: Vec::new(),
                logits: vec![0.0; k],
                probs: vec![0.0; k],
                d_logits: vec![0.0; k],
            },
            ArchKind::SmallCnn => {
                let (h, w) = (arch.input_shape.height, arch.input_shape.width);
                let (h2, w2, h4, w4) = arch.pooled_dims();
                let c1 = CONV1_FILTERS * h * w;
                let p1 = CONV1_FILTERS * h2 * w2;
                let c2 = CONV2_FILTERS * h2 * w2;
                let p2 = CONV2_FILTERS * h4 * w4;
                Scratch {
                    hidden_z: Vec::new(),
                    hidden_a: Vec::new(),
                    hidden_delta: Vec::new(),
                    conv1_z: vec![0.0; c1],
                    conv1_a: vec![0.0; c1],
                    pool1: vec![0.0; p1],
                    pool1_arg: vec![0; p1],
                    conv2_z: vec![0.0; c2],
                    conv2_a: vec![0.0; c2],
                    pool2: vec![0.0; p2],
                    pool2_arg: vec![0; p2],
                    d_conv1: vec![0.0; c1],
                    d_pool1: vec![0.0; p1],
                    d_conv2: vec![0.0; c2],
                    d_pool2: vec![0.0; p2],
                    logits: vec![0.0; k],
                    probs: vec![0.0; k],
                    d_logits: vec![0.0; k],
                }
            }
        }
    }
}

#[inline]
fn dense_forward(weights: &[f64], biases: &[f64], input: &[f64], out: &mut [f64]) {
    let in_dim = input.len();
    for (o, z) in out.iter_mut().enumerate() {
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let mut acc = biases[o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        *z = acc;
    }
}

/// Accumulates the layer's [dW | db] gradient block and writes d_input
/// (overwritten, not accumulated).
#[inline]
fn dense_backward(
    weights: &[f64],
    input: &[f64],
    d_out: &[f64],
    d_params: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let in_dim = input.len();
    let (d_weights, d_biases) = d_params.split_at_mut(in_dim * d_out.len());
    for (o, dz) in d_out.iter().enumerate() {
        let drow = &mut d_weights[o * in_dim..(o + 1) * in_dim];
        for (dw, x) in drow.iter_mut().zip(input) {
            *dw += dz * x;
        }
        d_biases[o] += dz;
    }
    if let Some(d_input) = d_input {
        d_input.fill(0.0);
        for (o, dz) in d_out.iter().enumerate() {
            let row = &weights[o * in_dim..(o + 1) * in_dim];
            for (di, w) in d_input.iter_mut().zip(row) {
                *di += dz * w;
            }
        }
    }
}

/// Adds the fused 3-tap stencil `out[x] += k0*in[x-1] + k1*in[x] +
/// k2*in[x+1]` with zero padding at the row ends.
#[inline]
fn stencil_row_add(out_row: &mut [f64], in_row: &[f64], k0: f64, k1: f64, k2: f64) {
    let w = out_row.len();
    if w == 1 {
        out_row[0] += k1 * in_row[0];
        return;
    }
    out_row[0] += k1 * in_row[0] + k2 * in_row[1];
    for x in 1..w - 1 {
        out_row[x] += k0 * in_row[x - 1] + k1 * in_row[x] + k2 * in_row[x + 1];
    }
    out_row[w - 1] += k0 * in_row[w - 2] + k1 * in_row[w - 1];
}

/// 3x3 same-padding convolution over a (c_in, h, w) planar input.
fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    biases: &[f64],
    c_out: usize,
    out: &mut [f64],
) {
    for o in 0..c_out {
        let out_plane = &mut out[o * h * w..(o + 1) * h * w];
        out_plane.fill(biases[o]);
        for c in 0..c_in {
            let in_plane = &input[c * h * w..(c + 1) * h * w];
            let kernel = &weights[(o * c_in + c) * 9..(o * c_in + c + 1) * 9];
            for y in 0..h {
                let out_row = &mut out_plane[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let in_row = &in_plane[(iy - 1) * w..iy * w];
                    stencil_row_add(
                        out_row,
                        in_row,
                        kernel[ky * 3],
                        kernel[ky * 3 + 1],
                        kernel[ky * 3 + 2],
                    );
                }
            }
        }
    }
}

/// Backward of [`conv3x3_forward`]; accumulates the [dW | db] gradient
/// block, optionally writes d_input (overwritten).
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    d_out: &[f64],
    d_params: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let (d_weights, d_biases) = d_params.split_at_mut(c_out * c_in * 9);
    for o in 0..c_out {
        let d_plane = &d_out[o * h * w..(o + 1) * h * w];
        d_biases[o] += d_plane.iter().sum::<f64>();
        for c in 0..c_in {
            let in_plane = &input[c * h * w..(c + 1) * h * w];
            let d_kernel = &mut d_weights[(o * c_in + c) * 9..(o * c_in + c + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let in_row = &in_plane[(iy - 1) * w..iy * w];
                        let d_row = &d_plane[y * w..(y + 1) * w];
                        for x in x_lo..x_hi {
                            acc += d_row[x] * in_row[x + kx - 1];
                        }
                    }
                    d_kernel[ky * 3 + kx] += acc;
                }
            }
        }
    }
    if let Some(d_input) = d_input {
        d_input.fill(0.0);
        // d_in[iy][ix] += k[ky][kx] * d[y][x] with iy = y+ky-1,
        // ix = x+kx-1 is the stencil with the kernel reversed.
        for o in 0..c_out {
            let d_plane = &d_out[o * h * w..(o + 1) * h * w];
            for c in 0..c_in {
                let d_in_plane = &mut d_input[c * h * w..(c + 1) * h * w];
                let kernel = &weights[(o * c_in + c) * 9..(o * c_in + c + 1) * 9];
                for iy in 0..h {
                    let d_in_row = &mut d_in_plane[iy * w..(iy + 1) * w];
                    for ky in 0..3 {
                        // iy = y + ky - 1  =>  y = iy + 1 - ky
                        let y = iy + 1;
                        if y < ky || y - ky >= h {
                            continue;
                        }
                        let y = y - ky;
                        let d_row = &d_plane[y * w..(y + 1) * w];
                        stencil_row_add(
                            d_in_row,
                            d_row,
                            kernel[ky * 3 + 2],
                            kernel[ky * 3 + 1],
                            kernel[ky * 3],
                        );
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Ties resolve to the first element in row-major scan order.
fn maxpool2_forward(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (h2, w2) = (h / 2, w / 2);
    for c in 0..channels {
        let in_plane = &input[c * h * w..(c + 1) * h * w];
        for py in 0..h2 {
            for px in 0..w2 {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * py + dy) * w + 2 * px + dx;
                        if in_plane[idx] > best {
                            best = in_plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let out_idx = (c * h2 + py) * w2 + px;
                out[out_idx] = best;
                argmax[out_idx] = c * h * w + best_idx;
            }
        }
    }
}

fn maxpool2_backward(d_out: &[f64], argmax: &[usize], d_input: &mut [f64]) {
    d_input.fill(0.0);
    for (d, idx) in d_out.iter().zip(argmax) {
        d_input[*idx] += d;
    }
}

#[inline]
fn relu_forward(z: &[f64], a: &mut [f64]) {
    for (a, z) in a.iter_mut().zip(z) {
        *a = if *z > 0.0 { *z } else { 0.0 };
    }
}

/// Masks d (in place) by relu'(z); relu'(0) = 0.
#[inline]
fn relu_backward(z: &[f64], d: &mut [f64]) {
    for (d, z) in d.iter_mut().zip(z) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
}

fn softmax(logits: &[f64], probs: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, z| m.max(*z));
    let mut sum = 0.0;
    for (p, z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
}

/// MLP parameter layout: [W1, b1, W2, b2, ..., Wout, bout], each W
/// row-major (out, in). Returns (w_off, b_off, in_dim, out_dim) per layer.
fn mlp_layer_offsets(arch: &ArchDescriptor) -> Vec<(usize, usize, usize, usize)> {
    let mut offsets = Vec::with_capacity(arch.hidden_sizes.len() + 1);
    let mut offset = 0;
    let mut in_dim = arch.input_shape.len();
    for out_dim in arch.hidden_sizes.iter().copied().chain([arch.num_classes]) {
        offsets.push((offset, offset + in_dim * out_dim, in_dim, out_dim));
        offset += in_dim * out_dim + out_dim;
        in_dim = out_dim;
    }
    offsets
}

/// Small-CNN parameter layout: [w1, b1, w2, b2, wd, bd]; fields are the
/// start offset of each block.
struct CnnOffsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wd: usize,
    bd: usize,
}

fn cnn_offsets(arch: &ArchDescriptor) -> CnnOffsets {
    let c = arch.input_shape.channels;
    let w1 = 0;
    let b1 = w1 + CONV1_FILTERS * c * 9;
    let w2 = b1 + CONV1_FILTERS;
    let b2 = w2 + CONV2_FILTERS * CONV1_FILTERS * 9;
    let wd = b2 + CONV2_FILTERS;
    let bd = wd + arch.num_classes * arch.cnn_flat_len();
    CnnOffsets {
        w1,
        b1,
        w2,
        b2,
        wd,
        bd,
    }
}

/// Runs the forward pass, filling `scratch.probs`.
pub(crate) fn forward(arch: &ArchDescriptor, params: &[f64], pixels: &[f64], scratch: &mut Scratch) {
    match arch.kind {
        ArchKind::Mlp => {
            let offsets = mlp_layer_offsets(arch);
            let n_hidden = arch.hidden_sizes.len();
            for l in 0..n_hidden {
                let (w, b, in_dim, out_dim) = offsets[l];
                if l == 0 {
                    dense_forward(
                        &params[w..w + in_dim * out_dim],
                        &params[b..b + out_dim],
                        pixels,
                        &mut scratch.hidden_z[l],
                    );
                } else {
                    dense_forward(
                        &params[w..w + in_dim * out_dim],
                        &params[b..b + out_dim],
                        &scratch.hidden_a[l - 1],
                        &mut scratch.hidden_z[l],
                    );
                }
                relu_forward(&scratch.hidden_z[l], &mut scratch.hidden_a[l]);
            }
            let (w, b, in_dim, out_dim) = offsets[n_hidden];
            let input: &[f64] = if n_hidden == 0 {
                pixels
            } else {
                &scratch.hidden_a[n_hidden - 1]
            };
            dense_forward(
                &params[w..w + in_dim * out_dim],
                &params[b..b + out_dim],
                input,
                &mut scratch.logits,
            );
        }
        ArchKind::SmallCnn => {
            let s = arch.input_shape;
            let (h, w) = (s.height, s.width);
            let (h2, w2, _, _) = arch.pooled_dims();
            let off = cnn_offsets(arch);
            conv3x3_forward(
                pixels,
                s.channels,
                h,
                w,
                &params[off.w1..off.b1],
                &params[off.b1..off.w2],
                CONV1_FILTERS,
                &mut scratch.conv1_z,
            );
            relu_forward(&scratch.conv1_z, &mut scratch.conv1_a);
            maxpool2_forward(
                &scratch.conv1_a,
                CONV1_FILTERS,
                h,
                w,
                &mut scratch.pool1,
                &mut scratch.pool1_arg,
            );
            conv3x3_forward(
                &scratch.pool1,
                CONV1_FILTERS,
                h2,
                w2,
                &params[off.w2..off.b2],
                &params[off.b2..off.wd],
                CONV2_FILTERS,
                &mut scratch.conv2_z,
            );
            relu_forward(&scratch.conv2_z, &mut scratch.conv2_a);
            maxpool2_forward(
                &scratch.conv2_a,
                CONV2_FILTERS,
                h2,
                w2,
                &mut scratch.pool2,
                &mut scratch.pool2_arg,
            );
            let flat_len = arch.cnn_flat_len();
            dense_forward(
                &params[off.wd..off.wd + arch.num_classes * flat_len],
                &params[off.bd..off.bd + arch.num_classes],
                &scratch.pool2,
                &mut scratch.logits,
            );
        }
    }
    softmax(&scratch.logits, &mut scratch.probs);
}

/// Backward pass for the cross-entropy loss of `label`, assuming
/// [`forward`] just ran on the same inputs. Accumulates into `grad`;
/// writes the pixel gradient into `d_input` if given.
pub(crate) fn backward(
    arch: &ArchDescriptor,
    params: &[f64],
    pixels: &[f64],
    label: usize,
    scratch: &mut Scratch,
    grad: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    // d loss / d logits; zero when the probability floor clamps the loss.
    let p_label = scratch.probs[label];
    if p_label < PROB_FLOOR {
        if let Some(d_input) = d_input {
            d_input.fill(0.0);
        }
        return;
    }
    scratch.d_logits.copy_from_slice(&scratch.probs);
    scratch.d_logits[label] -= 1.0;

    match arch.kind {
        ArchKind::Mlp => {
            let offsets = mlp_layer_offsets(arch);
            let n_hidden = arch.hidden_sizes.len();
            let (w, b, in_dim, out_dim) = offsets[n_hidden];
            let block = w..b + out_dim;
            if n_hidden == 0 {
                dense_backward(
                    &params[w..w + in_dim * out_dim],
                    pixels,
                    &scratch.d_logits,
                    &mut grad[block],
                    d_input,
                );
                return;
            }
            dense_backward(
                &params[w..w + in_dim * out_dim],
                &scratch.hidden_a[n_hidden - 1],
                &scratch.d_logits,
                &mut grad[block],
                Some(&mut scratch.hidden_delta[n_hidden - 1]),
            );
            for l in (0..n_hidden).rev() {
                let (w, b, in_dim, out_dim) = offsets[l];
                let block = w..b + out_dim;
                let (deltas_below, deltas_here) = scratch.hidden_delta.split_at_mut(l);
                let delta = &mut deltas_here[0];
                relu_backward(&scratch.hidden_z[l], delta);
                if l == 0 {
                    dense_backward(
                        &params[w..w + in_dim * out_dim],
                        pixels,
                        delta,
                        &mut grad[block],
                        d_input.take(),
                    );
                } else {
                    dense_backward(
                        &params[w..w + in_dim * out_dim],
                        &scratch.hidden_a[l - 1],
                        delta,
                        &mut grad[block],
                        Some(&mut deltas_below[l - 1]),
                    );
                }
            }
        }
        ArchKind::SmallCnn => {
            let s = arch.input_shape;
            let (h, w) = (s.height, s.width);
            let (h2, w2, _, _) = arch.pooled_dims();
            let off = cnn_offsets(arch);
            let flat_len = arch.cnn_flat_len();

            // Dense layer; d_pool2 doubles as the flat-input gradient.
            dense_backward(
                &params[off.wd..off.wd + arch.num_classes * flat_len],
                &scratch.pool2,
                &scratch.d_logits,
                &mut grad[off.wd..off.bd + arch.num_classes],
                Some(&mut scratch.d_pool2),
            );

            maxpool2_backward(&scratch.d_pool2, &scratch.pool2_arg, &mut scratch.d_conv2);
            relu_backward(&scratch.conv2_z, &mut scratch.d_conv2);
            conv3x3_backward(
                &scratch.pool1,
                CONV1_FILTERS,
                h2,
                w2,
                &params[off.w2..off.b2],
                CONV2_FILTERS,
                &scratch.d_conv2,
                &mut grad[off.w2..off.wd],
                Some(&mut scratch.d_pool1),
            );

            maxpool2_backward(&scratch.d_pool1, &scratch.pool1_arg, &mut scratch.d_conv1);
            relu_backward(&scratch.conv1_z, &mut scratch.d_conv1);
            conv3x3_backward(
                pixels,
                s.channels,
                h,
                w,
                &params[off.w1..off.b1],
                CONV1_FILTERS,
                &scratch.d_conv1,
                &mut grad[off.w1..off.w2],
                d_input,
            );
        }
    }
}

/// Smallest distance to a ReLU kink or max-pool decision switch over the
/// forward pass just run on `scratch`. Finite-difference checks use this
/// to stay clear of non-differentiable points.
pub(crate) fn activation_margin(arch: &ArchDescriptor, scratch: &Scratch) -> f64 {
    let mut margin = f64::INFINITY;
    match arch.kind {
        ArchKind::Mlp => {
            for z in &scratch.hidden_z {
                for v in z {
                    margin = margin.min(v.abs());
                }
            }
        }
        ArchKind::SmallCnn => {
            for v in scratch.conv1_z.iter().chain(&scratch.conv2_z) {
                margin = margin.min(v.abs());
            }
            let s = arch.input_shape;
            let (h2, w2, h4, w4) = arch.pooled_dims();
            margin = margin.min(pool_margin(
                &scratch.conv1_a,
                CONV1_FILTERS,
                s.height,
                s.width,
                h2,
                w2,
            ));
            margin = margin.min(pool_margin(
                &scratch.conv2_a,
                CONV2_FILTERS,
                h2,
                w2,
                h4,
                w4,
            ));
        }
    }
    margin
}

/// Minimum distance to a pooling decision switch across windows of ReLU
/// outputs. Dead cells sit exactly at 0 and stay there under small
/// perturbations (their preactivation margin is checked separately), so:
/// a fully dead window cannot switch; an active winner over a dead
/// runner-up switches only by falling to 0; two active cells switch when
/// their gap closes.
fn pool_margin(input: &[f64], channels: usize, h: usize, w: usize, h2: usize, w2: usize) -> f64 {
    let mut margin = f64::INFINITY;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for py in 0..h2 {
            for px in 0..w2 {
                let mut vals = [0.0; 4];
                for dy in 0..2 {
                    for dx in 0..2 {
                        vals[dy * 2 + dx] = plane[(2 * py + dy) * w + 2 * px + dx];
                    }
                }
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let (winner, runner_up) = (vals[0], vals[1]);
                if winner <= 0.0 {
                    continue;
                }
                let window_margin = if runner_up > 0.0 {
                    winner - runner_up
                } else {
                    winner
                };
                margin = margin.min(window_margin);
            }
        }
    }
    margin
}
