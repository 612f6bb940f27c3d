//! A small convolutional encoder-decoder with hand-written backpropagation.
//!
//! ```text
//! image 1xHxW
//!   enc1  3x3 1->8                     HxW      e1
//!   enc2  3x3/2 8->16                  H/2      e2
//!   enc3  3x3/2 16->32                 H/4      e3
//!   dec2  3x3 32->16                   H/4
//!   up x2, + e2, fuse 3x3 16->16       H/2
//!   feat  1x1 16->16 (no ReLU)         H/2      F
//!   up x2, concat e1, dec1 1x1 24->8   HxW
//!   refine 3x3 8->8                    HxW
//!   seg   1x1 8->1, logistic           HxW      m
//! ```
//!
//! Every convolution carries a bias followed by a per-channel scale. All
//! arithmetic is `f64` so that finite-difference checks are meaningful.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::losses::{FeatureMap, Prediction};

/// Feature channels of `F`.
pub const FEATURE_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: &'static str,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl ConvSpec {
    const fn new(name: &'static str, c_in: usize, c_out: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvSpec {
            name,
            c_in,
            c_out,
            kernel,
            stride,
            relu,
        }
    }

    /// Weights, bias and scale.
    pub const fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + 2 * self.c_out
    }
}

const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const DEC2: usize = 3;
const FUSE: usize = 4;
const FEAT: usize = 5;
const DEC1: usize = 6;
const REFINE: usize = 7;
const SEG: usize = 8;
const LAYERS: usize = 9;

pub const ARCHITECTURE: [ConvSpec; LAYERS] = [
    ConvSpec::new("enc1", 1, 8, 3, 1, true),
    ConvSpec::new("enc2", 8, 16, 3, 2, true),
    ConvSpec::new("enc3", 16, 32, 3, 2, true),
    ConvSpec::new("dec2", 32, 16, 3, 1, true),
    ConvSpec::new("fuse", 16, 16, 3, 1, true),
    ConvSpec::new("feat", 16, FEATURE_CHANNELS, 1, 1, false),
    ConvSpec::new("dec1", FEATURE_CHANNELS + 8, 8, 1, 1, true),
    ConvSpec::new("refine", 8, 8, 3, 1, true),
    ConvSpec::new("seg", 8, 1, 1, 1, false),
];

/// Offsets of each layer's weight, bias and scale in the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Slots {
    weight: usize,
    bias: usize,
    scale: usize,
    end: usize,
}

fn slots() -> [Slots; LAYERS] {
    let mut out = [Slots {
        weight: 0,
        bias: 0,
        scale: 0,
        end: 0,
    }; LAYERS];
    let mut at = 0;
    for (slot, spec) in out.iter_mut().zip(&ARCHITECTURE) {
        let nw = spec.c_out * spec.c_in * spec.kernel * spec.kernel;
        *slot = Slots {
            weight: at,
            bias: at + nw,
            scale: at + nw + spec.c_out,
            end: at + nw + 2 * spec.c_out,
        };
        at = slot.end;
    }
    out
}

pub fn param_count() -> usize {
    ARCHITECTURE.iter().map(ConvSpec::param_count).sum()
}

/// Flat parameter vector; layout follows [`ARCHITECTURE`], each layer stored
/// as weight `[c_out, c_in, k, k]`, bias `[c_out]`, scale `[c_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub values: Vec<f64>,
}

impl NetParams {
    pub fn zeros() -> Self {
        NetParams {
            values: vec![0.0; param_count()],
        }
    }

    fn layer(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let s = slots()[i];
        (
            &self.values[s.weight..s.bias],
            &self.values[s.bias..s.scale],
            &self.values[s.scale..s.end],
        )
    }

    /// `(name, shape, values)` for every tensor, in layout order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (spec, s) in ARCHITECTURE.iter().zip(slots()) {
            let k = spec.kernel;
            out.push((
                format!("{}.weight", spec.name),
                vec![spec.c_out, spec.c_in, k, k],
                &self.values[s.weight..s.bias],
            ));
            out.push((format!("{}.bias", spec.name), vec![spec.c_out], &self.values[s.bias..s.scale]));
            out.push((format!("{}.scale", spec.name), vec![spec.c_out], &self.values[s.scale..s.end]));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Initial foreground probability of the segmentation head. Starting near
/// background keeps the uniform push of the foreground term from saturating
/// every pixel before the sparse projection gradient can shape the mask.
pub const FOREGROUND_PRIOR: f64 = 0.1;

/// He-normal weights, unit scales, zero biases except the segmentation head,
/// whose bias is the logit of [`FOREGROUND_PRIOR`].
pub fn init_params(seed: u64) -> NetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetParams::zeros();
    for (spec, s) in ARCHITECTURE.iter().zip(slots()) {
        let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut p.values[s.weight..s.bias] {
            *w = normal.sample(&mut rng);
        }
        p.values[s.scale..s.end].fill(1.0);
    }
    let seg = slots()[LAYERS - 1];
    p.values[seg.bias..seg.scale].fill((FOREGROUND_PRIOR / (1.0 - FOREGROUND_PRIOR)).ln());
    p
}

// Output indices `o` with `o * stride + offset` inside `0..n_in`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = (n_in as isize - 1 - offset).div_euclid(s) + 1;
    (lo as usize, (hi.max(0) as usize).min(n_out).max(lo as usize))
}

fn out_size(n: usize, spec: &ConvSpec) -> usize {
    let pad = spec.kernel / 2;
    (n + 2 * pad - spec.kernel) / spec.stride + 1
}

// Patch matrix `[c_in * k * k, oh * ow]` of the zero-padded input.
fn im2col(spec: &ConvSpec, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (out_size(h, spec), out_size(w, spec));
    let (k, s, pad) = (spec.kernel, spec.stride, (spec.kernel / 2) as isize);
    let n = oh * ow;
    let mut col = vec![0.0; spec.c_in * k * k * n];
    for ci in 0..spec.c_in {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = valid_range(oh, h, s, ky as isize - pad);
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                let (x0, x1) = valid_range(ow, w, s, kx as isize - pad);
                let base = kx as isize - pad;
                for oy in y0..y1 {
                    let iy = ((oy * s) as isize + ky as isize - pad) as usize;
                    let src_row = &src[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let off = (x0 as isize + base) as usize;
                        dst[x0..x1].copy_from_slice(&src_row[off..off + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src_row[((ox * s) as isize + base) as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

// Adjoint of `im2col`: scatters patch gradients back onto the input.
fn col2im(spec: &ConvSpec, col: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (out_size(h, spec), out_size(w, spec));
    let (k, s, pad) = (spec.kernel, spec.stride, (spec.kernel / 2) as isize);
    let n = oh * ow;
    let mut grad = vec![0.0; spec.c_in * h * w];
    for ci in 0..spec.c_in {
        let dst = &mut grad[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = valid_range(oh, h, s, ky as isize - pad);
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                let (x0, x1) = valid_range(ow, w, s, kx as isize - pad);
                let base = kx as isize - pad;
                for oy in y0..y1 {
                    let iy = ((oy * s) as isize + ky as isize - pad) as usize;
                    let dst_row = &mut dst[iy * w..(iy + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let off = (x0 as isize + base) as usize;
                        for (d, v) in dst_row[off..off + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                            *d += v;
                        }
                    } else {
                        for ox in x0..x1 {
                            dst_row[((ox * s) as isize + base) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    grad
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1
}

// Zero-padded convolution plus bias: `out[co] = bias[co] + W[co] . col`.
fn conv_forward(spec: &ConvSpec, weight: &[f64], bias: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = out_size(h, spec) * out_size(w, spec);
    let owned;
    let col: &[f64] = if is_pointwise(spec) {
        input
    } else {
        owned = im2col(spec, input, h, w);
        &owned
    };
    let r = spec.c_in * spec.kernel * spec.kernel;
    let mut out = vec![0.0; spec.c_out * n];
    let mut co = 0;
    // four output channels per sweep share each patch row load
    while co < spec.c_out {
        let block = (spec.c_out - co).min(4);
        let (head, _) = out[co * n..].split_at_mut(block * n);
        let mut planes: Vec<&mut [f64]> = head.chunks_mut(n).collect();
        for (b, plane) in planes.iter_mut().enumerate() {
            plane.fill(bias[co + b]);
        }
        for ri in 0..r {
            let src = &col[ri * n..(ri + 1) * n];
            if block == 4 {
                let w0 = weight[co * r + ri];
                let w1 = weight[(co + 1) * r + ri];
                let w2 = weight[(co + 2) * r + ri];
                let w3 = weight[(co + 3) * r + ri];
                let [p0, p1, p2, p3] = &mut planes[..] else { unreachable!() };
                for j in 0..n {
                    let v = src[j];
                    p0[j] += w0 * v;
                    p1[j] += w1 * v;
                    p2[j] += w2 * v;
                    p3[j] += w3 * v;
                }
            } else {
                for (b, plane) in planes.iter_mut().enumerate() {
                    let wv = weight[(co + b) * r + ri];
                    for (d, v) in plane.iter_mut().zip(src) {
                        *d += wv * v;
                    }
                }
            }
        }
        co += block;
    }
    out
}

// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    spec: &ConvSpec,
    weight: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let n = out_size(h, spec) * out_size(w, spec);
    let owned;
    let col: &[f64] = if is_pointwise(spec) {
        input
    } else {
        owned = im2col(spec, input, h, w);
        &owned
    };
    let r = spec.c_in * spec.kernel * spec.kernel;
    for co in 0..spec.c_out {
        grad_bias[co] += grad_out[co * n..(co + 1) * n].iter().sum::<f64>();
    }
    let mut grad_col = if want_input { vec![0.0; r * n] } else { Vec::new() };
    for ri in 0..r {
        let src = &col[ri * n..(ri + 1) * n];
        let mut co = 0;
        while co < spec.c_out {
            let block = (spec.c_out - co).min(4);
            if block == 4 {
                let g0 = &grad_out[co * n..(co + 1) * n];
                let g1 = &grad_out[(co + 1) * n..(co + 2) * n];
                let g2 = &grad_out[(co + 2) * n..(co + 3) * n];
                let g3 = &grad_out[(co + 3) * n..(co + 4) * n];
                let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
                for j in 0..n {
                    let v = src[j];
                    a0 += g0[j] * v;
                    a1 += g1[j] * v;
                    a2 += g2[j] * v;
                    a3 += g3[j] * v;
                }
                grad_weight[co * r + ri] += a0;
                grad_weight[(co + 1) * r + ri] += a1;
                grad_weight[(co + 2) * r + ri] += a2;
                grad_weight[(co + 3) * r + ri] += a3;
                if want_input {
                    let (w0, w1, w2, w3) = (
                        weight[co * r + ri],
                        weight[(co + 1) * r + ri],
                        weight[(co + 2) * r + ri],
                        weight[(co + 3) * r + ri],
                    );
                    let dst = &mut grad_col[ri * n..(ri + 1) * n];
                    for j in 0..n {
                        dst[j] += w0 * g0[j] + w1 * g1[j] + w2 * g2[j] + w3 * g3[j];
                    }
                }
            } else {
                for c in co..co + block {
                    let g = &grad_out[c * n..(c + 1) * n];
                    grad_weight[c * r + ri] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    if want_input {
                        let wv = weight[c * r + ri];
                        for (d, gv) in grad_col[ri * n..(ri + 1) * n].iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            co += block;
        }
    }
    if !want_input {
        return None;
    }
    Some(if is_pointwise(spec) {
        grad_col
    } else {
        col2im(spec, &grad_col, h, w)
    })
}

fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

// Adjoint of `upsample2`: sums each 2x2 block.
fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / 2) * w + x / 2] += grad[(ch * oh + y) * ow + x];
            }
        }
    }
    out
}

/// Input, pre-scale convolution output and final output of one layer.
#[derive(Clone, Debug)]
struct LayerCache {
    input: Vec<f64>,
    h: usize,
    w: usize,
    pre: Vec<f64>,
    out: Vec<f64>,
}

fn layer_forward(p: &NetParams, i: usize, input: Vec<f64>, h: usize, w: usize) -> LayerCache {
    let spec = &ARCHITECTURE[i];
    let (weight, bias, scale) = p.layer(i);
    let pre = conv_forward(spec, weight, bias, &input, h, w);
    let plane = pre.len() / spec.c_out;
    let mut out = pre.clone();
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v *= scale[c];
            if spec.relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    LayerCache { input, h, w, pre, out }
}

fn layer_backward(p: &NetParams, grads: &mut [f64], i: usize, cache: &LayerCache, grad_out: &[f64], want_input: bool) -> Option<Vec<f64>> {
    let spec = &ARCHITECTURE[i];
    let s = slots()[i];
    let (weight, _, scale) = p.layer(i);
    let plane = cache.pre.len() / spec.c_out;
    let mut grad_pre = vec![0.0; cache.pre.len()];
    for c in 0..spec.c_out {
        let mut gs = 0.0;
        for j in c * plane..(c + 1) * plane {
            // the ReLU passes gradient where its output is positive
            let g = if spec.relu && cache.out[j] <= 0.0 { 0.0 } else { grad_out[j] };
            gs += g * cache.pre[j];
            grad_pre[j] = g * scale[c];
        }
        grads[s.scale + c] += gs;
    }
    let (gw, rest) = grads[s.weight..s.end].split_at_mut(s.bias - s.weight);
    let gb = &mut rest[..spec.c_out];
    conv_backward(spec, weight, &cache.input, cache.h, cache.w, &grad_pre, gw, gb, want_input)
}

/// Everything needed to backpropagate through one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    layers: Vec<LayerCache>,
    prediction: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: FeatureMap,
    pub prediction: Prediction,
    pub cache: ForwardCache,
}

// Keeps m strictly inside (0, 1) in floating point.
const PROB_MARGIN: f64 = 1e-15;

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(PROB_MARGIN, 1.0 - PROB_MARGIN)
}

/// Runs the network on one image. Height and width must be multiples of 4.
pub fn forward(image: &Raster, p: &NetParams) -> Result<ForwardOutput> {
    let (h, w) = image.dims();
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "network input must have sides divisible by 4, got {w}x{h}"
        )));
    }
    if p.values.len() != param_count() {
        return Err(Error::InvalidInput(format!(
            "expected {} parameters, found {}",
            param_count(),
            p.values.len()
        )));
    }
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
    let e1 = layer_forward(p, ENC1, image.pixels.clone(), h, w);
    let e2 = layer_forward(p, ENC2, e1.out.clone(), h, w);
    let e3 = layer_forward(p, ENC3, e2.out.clone(), h2, w2);
    let d2 = layer_forward(p, DEC2, e3.out.clone(), h4, w4);
    let mut merged = upsample2(&d2.out, 16, h4, w4);
    for (m, e) in merged.iter_mut().zip(&e2.out) {
        *m += e;
    }
    let fuse = layer_forward(p, FUSE, merged, h2, w2);
    let feat = layer_forward(p, FEAT, fuse.out.clone(), h2, w2);
    let mut cat = upsample2(&feat.out, FEATURE_CHANNELS, h2, w2);
    cat.extend_from_slice(&e1.out);
    let dec1 = layer_forward(p, DEC1, cat, h, w);
    let refine = layer_forward(p, REFINE, dec1.out.clone(), h, w);
    let seg = layer_forward(p, SEG, refine.out.clone(), h, w);
    let prediction: Vec<f64> = seg.out.iter().map(|&z| sigmoid(z)).collect();

    let features = FeatureMap::new(FEATURE_CHANNELS, h2, w2, feat.out.clone())?;
    let pred = Prediction::new(h, w, prediction.clone())?;
    Ok(ForwardOutput {
        features,
        prediction: pred,
        cache: ForwardCache {
            height: h,
            width: w,
            layers: vec![e1, e2, e3, d2, fuse, feat, dec1, refine, seg],
            prediction,
        },
    })
}

/// Parameter gradients given upstream gradients on `m` and on `F`. Either may
/// be absent, meaning zero.
pub fn backward(cache: &ForwardCache, p: &NetParams, grad_m: Option<&[f64]>, grad_f: Option<&[f64]>) -> Result<Vec<f64>> {
    let (h, w) = (cache.height, cache.width);
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
    if let Some(g) = grad_m {
        if g.len() != h * w {
            return Err(Error::DimensionMismatch {
                expected: (h, w),
                found: (g.len(), 1),
            });
        }
    }
    if let Some(g) = grad_f {
        if g.len() != FEATURE_CHANNELS * h2 * w2 {
            return Err(Error::InvalidInput(format!(
                "feature gradient has {} entries, expected {}",
                g.len(),
                FEATURE_CHANNELS * h2 * w2
            )));
        }
    }
    let mut grads = vec![0.0; p.values.len()];
    let l = &cache.layers;

    let grad_logit: Vec<f64> = match grad_m {
        Some(g) => g.iter().zip(&cache.prediction).map(|(g, m)| g * m * (1.0 - m)).collect(),
        None => vec![0.0; h * w],
    };
    let g_refine = layer_backward(p, &mut grads, SEG, &l[SEG], &grad_logit, true).expect("input grad");
    let g_dec1 = layer_backward(p, &mut grads, REFINE, &l[REFINE], &g_refine, true).expect("input grad");
    let g_cat = layer_backward(p, &mut grads, DEC1, &l[DEC1], &g_dec1, true).expect("input grad");
    let (g_up_feat, g_e1_skip) = g_cat.split_at(FEATURE_CHANNELS * h * w);
    let mut g_feat = upsample2_backward(g_up_feat, FEATURE_CHANNELS, h2, w2);
    if let Some(g) = grad_f {
        for (a, b) in g_feat.iter_mut().zip(g) {
            *a += b;
        }
    }
    let g_fuse = layer_backward(p, &mut grads, FEAT, &l[FEAT], &g_feat, true).expect("input grad");
    let g_merged = layer_backward(p, &mut grads, FUSE, &l[FUSE], &g_fuse, true).expect("input grad");
    let g_d2 = upsample2_backward(&g_merged, 16, h4, w4);
    let g_e3 = layer_backward(p, &mut grads, DEC2, &l[DEC2], &g_d2, true).expect("input grad");
    let mut g_e2 = layer_backward(p, &mut grads, ENC3, &l[ENC3], &g_e3, true).expect("input grad");
    for (a, b) in g_e2.iter_mut().zip(&g_merged) {
        *a += b;
    }
    let mut g_e1 = layer_backward(p, &mut grads, ENC2, &l[ENC2], &g_e2, true).expect("input grad");
    for (a, b) in g_e1.iter_mut().zip(g_e1_skip) {
        *a += b;
    }
    layer_backward(p, &mut grads, ENC1, &l[ENC1], &g_e1, false);
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(lr: f64, n: usize) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(p: &mut NetParams, grads: &[f64], s: &mut OptimizerState) -> Result<()> {
    if grads.len() != p.values.len() || s.first_moment.len() != p.values.len() {
        return Err(Error::InvalidInput(format!(
            "adam: {} parameters, {} gradients, {} moments",
            p.values.len(),
            grads.len(),
            s.first_moment.len()
        )));
    }
    s.step += 1;
    let t = s.step as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    for (((w, g), m), v) in p
        .values
        .iter_mut()
        .zip(grads)
        .zip(&mut s.first_moment)
        .zip(&mut s.second_moment)
    {
        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
        *w -= s.lr * (*m / c1) / ((*v / c2).sqrt() + s.eps);
    }
    Ok(())
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal string: JSON numbers cannot carry 128 bits losslessly.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(params: &NetParams, optimizer: OptimizerState, rng: RngState) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                (
                    name,
                    TensorEntry {
                        shape,
                        data: data.to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors,
            optimizer,
            rng,
        }
    }

    /// Reassembles the flat parameter vector, checking every name and shape.
    pub fn params(&self) -> Result<NetParams> {
        let mut p = NetParams::zeros();
        let layout: Vec<(String, Vec<usize>, usize)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, s, d)| (n, s, d.len()))
            .collect();
        if self.tensors.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} tensors, architecture has {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        let mut at = 0;
        for (name, shape, len) in layout {
            let entry = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks tensor {name}")))?;
            if entry.shape != shape || entry.data.len() != len {
                return Err(Error::InvalidInput(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    entry.shape, shape
                )));
            }
            p.values[at..at + len].copy_from_slice(&entry.data);
            at += len;
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint version {} is not supported",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Worst relative error between backpropagated and extrapolated finite
/// difference gradients of the total loss, at `probes` random parameters of
/// a freshly initialized network on a random 16x16 image.
pub fn parameter_probe_check(seed: u64, probes: usize) -> Result<f64> {
    use crate::losses::gradcheck::{extrapolated_partial, random_instance, relative_error, DEFAULT_STEP};
    use rand::Rng;
    use crate::losses::total_loss;

    let inst = random_instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Raster::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let p = init_params(seed);
    // the contrastive sampler is re-seeded per evaluation so the loss is a fixed function
    let total = |values: &NetParams| -> Result<(ForwardOutput, crate::losses::TotalLoss)> {
        let out = forward(&image, values)?;
        let loss = total_loss(&out.prediction, &out.features, &inst.bundle, &inst.weights, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok((out, loss))
    };
    let (out, loss) = total(&p)?;
    let grads = backward(
        &out.cache,
        &p,
        loss.result.grad_prediction.as_deref(),
        loss.result.grad_features.as_deref(),
    )?;
    let mut work = p.values.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..param_count());
        let n = extrapolated_partial(&mut work, i, DEFAULT_STEP, |v| {
            total(&NetParams { values: v.to_vec() }).map_or(f64::NAN, |(_, l)| l.result.value)
        });
        worst = worst.max(relative_error(grads[i], n));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::{extrapolated_partial, relative_error, DEFAULT_STEP};
    use crate::losses::alignment_loss;
    use rand::{Rng, RngCore};

    fn random_raster(h: usize, w: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // 3x3 convs 1->8, 8->16, 16->32, 32->16, 16->16, 8->8; 1x1 convs 16->16, 24->8, 8->1;
        // plus a bias and a scale per output channel
        let weights = 9 * (8 + 8 * 16 + 16 * 32 + 32 * 16 + 16 * 16 + 8 * 8) + 16 * 16 + 24 * 8 + 8;
        let per_channel = 2 * (8 + 16 + 32 + 16 + 16 + 16 + 8 + 8 + 1);
        assert_eq!(param_count(), weights + per_channel);
        assert_eq!(param_count(), 14_018);
        assert_eq!(init_params(0).values.len(), param_count());
    }

    #[test]
    fn init_is_seed_deterministic() {
        assert_eq!(init_params(5), init_params(5));
        assert_ne!(init_params(5), init_params(6));
    }

    #[test]
    fn valid_range_covers_in_bounds_outputs() {
        for n_in in 1usize..9 {
            for stride in 1..3 {
                for offset in -2isize..3 {
                    let n_out = n_in.div_ceil(stride) + 1;
                    let (lo, hi) = valid_range(n_out, n_in, stride, offset);
                    for o in 0..n_out {
                        let i = (o * stride) as isize + offset;
                        let inside = i >= 0 && i < n_in as isize;
                        assert_eq!((lo..hi).contains(&o), inside, "n_in {n_in} stride {stride} offset {offset} o {o}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [ConvSpec::new("a", 2, 3, 3, 1, false), ConvSpec::new("b", 2, 3, 3, 2, false)] {
            let (h, w) = (6, 8);
            let input: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let weight: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = [0.1, -0.2, 0.3];
            let out = conv_forward(&spec, &weight, &bias, &input, h, w);
            let (oh, ow) = (out_size(h, &spec), out_size(w, &spec));
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * spec.stride + ky) as isize - 1;
                                    let ix = (ox * spec.stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += weight[((co * 2 + ci) * 3 + ky) * 3 + kx] * input[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((out[(co * oh + oy) * ow + ox] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn output_shapes_and_range() {
        let out = forward(&random_raster(64, 64, 1), &init_params(1)).unwrap();
        assert_eq!(out.prediction.dims(), (64, 64));
        assert_eq!((out.features.channels, out.features.height, out.features.width), (16, 32, 32));
        assert!(out.prediction.probs.iter().all(|&m| m > 0.0 && m < 1.0));
        assert!(forward(&random_raster(30, 32, 1), &init_params(1)).is_err());
    }

    #[test]
    fn zero_params_give_sigmoid_of_bias() {
        let mut p = NetParams::zeros();
        let seg = slots()[SEG];
        p.values[seg.bias] = 0.7;
        p.values[seg.scale] = 1.0;
        let out = forward(&Raster::zeros(8, 8), &p).unwrap();
        let expected = 1.0 / (1.0 + (-0.7f64).exp());
        assert!(out.prediction.probs.iter().all(|&m| (m - expected).abs() < 1e-15));
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let p = init_params(3);
        let img = random_raster(16, 16, 3);
        let a = forward(&img, &p).unwrap();
        let b = forward(&img, &p).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert_eq!(a.features, b.features);
        let g = vec![0.3; 256];
        assert_eq!(
            backward(&a.cache, &p, Some(&g), None).unwrap(),
            backward(&b.cache, &p, Some(&g), None).unwrap()
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(4);
        let out = forward(&random_raster(8, 8, 4), &p).unwrap();
        let g = backward(&out.cache, &p, None, None).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    // Smooth linear readout of both outputs, for probing the backward pass alone.
    fn readout(p: &NetParams, img: &Raster, cm: &[f64], cf: &[f64]) -> f64 {
        let out = forward(img, p).unwrap();
        out.prediction.probs.iter().zip(cm).map(|(a, b)| a * b).sum::<f64>()
            + out.features.values.iter().zip(cf).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_raster(8, 8, 9);
        let p = init_params(9);
        let cm: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cf: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = forward(&img, &p).unwrap();
        let grads = backward(&out.cache, &p, Some(&cm), Some(&cf)).unwrap();
        let mut work = p.values.clone();
        for _ in 0..5 {
            let i = rng.random_range(0..param_count());
            let n = extrapolated_partial(&mut work, i, DEFAULT_STEP, |v| {
                readout(&NetParams { values: v.to_vec() }, &img, &cm, &cf)
            });
            assert!(relative_error(grads[i], n) < 1e-4, "param {i}: {} vs {n}", grads[i]);
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_parts() {
        let p = init_params(5);
        let (a, b) = (random_raster(8, 8, 1), random_raster(8, 8, 2));
        let g = vec![1.0; 64];
        let ga = backward(&forward(&a, &p).unwrap().cache, &p, Some(&g), None).unwrap();
        let gb = backward(&forward(&b, &p).unwrap().cache, &p, Some(&g), None).unwrap();
        let summed: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x + y).collect();
        // a batch loss that is the sum of two per-image losses has the summed gradient
        let mut batch = vec![0.0; param_count()];
        for img in [&a, &b] {
            let out = forward(img, &p).unwrap();
            for (acc, v) in batch.iter_mut().zip(backward(&out.cache, &p, Some(&g), None).unwrap()) {
                *acc += v;
            }
        }
        assert_eq!(batch, summed);
    }

    #[test]
    fn end_to_end_total_loss_gradient() {
        let worst = parameter_probe_check(2, 24).unwrap();
        assert!(worst < 1e-3, "worst {worst}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = init_params(1);
        let before = p.clone();
        let mut s = OptimizerState::new(1e-3, param_count());
        adam_step(&mut p, &vec![0.0; param_count()], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let mut p = NetParams { values: vec![0.0; 3] };
        let mut s = OptimizerState::new(0.01, 3);
        let g = [0.5, -2.0, 1e-3];
        adam_step(&mut p, &g, &mut s).unwrap();
        for (w, g) in p.values.iter().zip(&g) {
            // bias-corrected first step: m/c1 = g, v/c2 = g^2
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15);
        }
        // under a constant gradient both corrected moments stay exact, so every
        // step is -lr * g / (|g| + eps), i.e. about -lr * sign(g)
        for _ in 0..2000 {
            let before = p.values.clone();
            adam_step(&mut p, &g, &mut s).unwrap();
            for ((a, b), g) in p.values.iter().zip(&before).zip(&g) {
                let expected = -0.01 * g / (g.abs() + 1e-8);
                assert!(((a - b) - expected).abs() < 1e-12);
                assert!(((a - b) + 0.01 * g.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let p = init_params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        rng.set_stream(3);
        let _ = rng.next_u64();
        let mut opt = OptimizerState::new(1e-3, param_count());
        adam_step(&mut init_params(8), &init_params(9).values, &mut opt).unwrap();
        let ck = Checkpoint::new(&p, opt, RngState::capture(8, &rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
        let mut resumed = back.rng.restore();
        assert_eq!(resumed.next_u64(), rng.next_u64());
    }

    #[test]
    fn overfits_a_single_image_with_alignment_only() {
        use crate::labelgen::{fuse_labels, geometric_masks, NodulePoints, Point, PointAnnotation};
        let nodule = NodulePoints {
            top: Point::new(7, 3),
            right: Point::new(12, 7),
            bottom: Point::new(8, 12),
            left: Point::new(3, 8),
        };
        let ann = PointAnnotation {
            image_id: "overfit".into(),
            nodules: vec![nodule],
        };
        let (g_b, g_i, g_o) = geometric_masks(&ann, 16, 16).unwrap();
        let gt = crate::grid::MaskGrid::from_fn(16, 16, |x, y| {
            (x as f64 - 7.5).powi(2) + (y as f64 - 7.5).powi(2) <= 4.8 * 4.8
        });
        let b = fuse_labels(&g_b, &g_i, &g_o, &gt).unwrap();
        let noise = random_raster(16, 16, 0);
        // a dark object on a bright background, as in the synthetic corpus
        let pixels = gt
            .cells()
            .iter()
            .zip(&noise.pixels)
            .map(|(&fg, n)| if fg { 0.3 } else { 0.7 } + 0.1 * (n - 0.5))
            .collect();
        let img = Raster::new(16, 16, pixels).unwrap();
        let mut p = init_params(0);
        let mut s = OptimizerState::new(1e-3, param_count());
        let mut proj = f64::INFINITY;
        for _ in 0..200 {
            let out = forward(&img, &p).unwrap();
            let loss = alignment_loss(&out.prediction, &b.location, &b.foreground).unwrap();
            proj = crate::losses::projection_loss(&out.prediction, &b.location).unwrap().value;
            let g = backward(&out.cache, &p, loss.grad_prediction.as_deref(), None).unwrap();
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert!(proj < 0.05, "projection loss {proj}");
    }
}
