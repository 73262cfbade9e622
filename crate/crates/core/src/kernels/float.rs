//! Dense floating-point kernels, generic over `f32`/`f64`.
//!
//! Used by the trainer (forward half of backprop) and by calibration, which
//! observes every activation–weight product of a dense pass.

use num_traits::Float;

use super::layer::{Layer, ModelGraph};
use super::KernelError;
use crate::tensor::Shape;

/// `x`: `ic × h × w`, `w`: `oc × ic × kh × kw`, `out`: `oc × oh × ow`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Float>(
    x: &[T],
    (ic, h, w): (usize, usize, usize),
    weights: &[T],
    (oc, kh, kw): (usize, usize, usize),
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for o in 0..oc {
        let b = bias.map_or(T::zero(), |b| b[o]);
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b);
        for c in 0..ic {
            for a in 0..kh {
                for bb in 0..kw {
                    let wv = weights[((o * ic + c) * kh + a) * kw + bb];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in 0..oh {
                        let base = (c * h + y + a) * w + bb;
                        let xr = &x[base..base + ow];
                        for (acc, &xv) in plane[y * ow..(y + 1) * ow].iter_mut().zip(xr) {
                            *acc = *acc + xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// `x`: `m`, `w`: `m × n`, `out`: `n`.
pub fn linear<T: Float>(x: &[T], weights: &[T], n: usize, bias: Option<&[T]>, out: &mut [T]) {
    match bias {
        Some(b) => out.copy_from_slice(&b[..n]),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
    for (&xi, row) in x.iter().zip(weights.chunks_exact(n)) {
        if xi == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + xi * wv;
        }
    }
}

/// Max pooling; `argmax` (if given) receives the flat input index of each
/// selected element.
pub fn maxpool<T: Float>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    size: usize,
    out: &mut [T],
    mut argmax: Option<&mut [usize]>,
) {
    let (oh, ow) = (h / size, w / size);
    for ch in 0..c {
        for y in 0..oh {
            for z in 0..ow {
                let mut best_idx = (ch * h + y * size) * w + z * size;
                for a in 0..size {
                    for b in 0..size {
                        let idx = (ch * h + y * size + a) * w + z * size + b;
                        if x[idx] > x[best_idx] {
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + y) * ow + z;
                out[o] = x[best_idx];
                if let Some(am) = argmax.as_deref_mut() {
                    am[o] = best_idx;
                }
            }
        }
    }
}

pub fn fatrelu<T: Float>(x: &mut [T], threshold: T) {
    for v in x {
        if !(*v > threshold) {
            *v = T::zero();
        }
    }
}

/// Receives products and layer outputs of a dense float pass.
pub trait ForwardObserver {
    /// Whether products of layer `index` should be reported.
    fn wants_products(&self, _index: usize) -> bool {
        false
    }
    /// `group` is the threshold group of the control term.
    fn product(&mut self, _index: usize, _group: usize, _magnitude: f32) {}
    fn output(&mut self, _index: usize, _values: &[f32]) {}
}

impl ForwardObserver for () {}

/// Float view of a model, weights dequantized once.
#[derive(Debug, Clone)]
pub struct FloatModel {
    layers: Vec<FloatLayer>,
    shapes: Vec<Shape>,
    /// Threshold groups per layer (1 for non-MAC layers).
    groups: Vec<usize>,
}

#[derive(Debug, Clone)]
enum FloatLayer {
    Conv {
        dims: (usize, usize, usize, usize),
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    },
    Linear {
        n: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    },
    MaxPool(usize),
    Clamp(f32),
}

impl FloatModel {
    /// `relu_threshold` replaces plain ReLUs with FATReLU when positive.
    pub fn new(model: &ModelGraph, relu_threshold: f32) -> Result<Self, KernelError> {
        let shapes = model.shapes()?;
        let mut layers = Vec::new();
        let mut groups = Vec::new();
        for spec in &model.layers {
            groups.push(spec.layer.prune().map_or(1, |p| p.groups.max(1)));
            layers.push(match &spec.layer {
                Layer::Conv2d(c) => {
                    let (oc, ic, kh, kw) = c.dims();
                    FloatLayer::Conv {
                        dims: (oc, ic, kh, kw),
                        weights: c.weights.to_f32_vec(),
                        bias: c.bias.as_ref().map(|b| b.to_f32_vec()),
                    }
                }
                Layer::Linear(l) => FloatLayer::Linear {
                    n: l.dims().1,
                    weights: l.weights.to_f32_vec(),
                    bias: l.bias.as_ref().map(|b| b.to_f32_vec()),
                },
                Layer::MaxPool { size } => FloatLayer::MaxPool(*size),
                Layer::Relu => FloatLayer::Clamp(relu_threshold.max(0.0)),
                Layer::FatRelu { threshold } => FloatLayer::Clamp(*threshold),
            });
        }
        Ok(Self {
            layers,
            shapes,
            groups,
        })
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>, KernelError> {
        self.forward_observed(x, &mut ())
    }

    pub fn forward_observed(
        &self,
        x: &[f32],
        obs: &mut impl ForwardObserver,
    ) -> Result<Vec<f32>, KernelError> {
        if x.len() != self.input_len() {
            return Err(KernelError::ShapeMismatch(format!(
                "model expects input {}, got {} values",
                self.shapes[0],
                x.len()
            )));
        }
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let d = self.shapes[i].dims();
            let out_len = self.shapes[i + 1].len();
            cur = match layer {
                FloatLayer::Conv {
                    dims: (oc, ic, kh, kw),
                    weights,
                    bias,
                } => {
                    if obs.wants_products(i) {
                        observe_conv(i, &cur, d, weights, (*oc, *ic, *kh, *kw), self.groups[i], obs);
                    }
                    let mut out = vec![0.0; out_len];
                    conv2d(&cur, (d[0], d[1], d[2]), weights, (*oc, *kh, *kw), bias.as_deref(), &mut out);
                    obs.output(i, &out);
                    out
                }
                FloatLayer::Linear { n, weights, bias } => {
                    if obs.wants_products(i) {
                        let per_group = cur.len() / self.groups[i];
                        for (r, (&xi, row)) in cur.iter().zip(weights.chunks_exact(*n)).enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for &wv in row {
                                let p = (xi * wv).abs();
                                if p > 0.0 {
                                    obs.product(i, r / per_group, p);
                                }
                            }
                        }
                    }
                    let mut out = vec![0.0; out_len];
                    linear(&cur, weights, *n, bias.as_deref(), &mut out);
                    obs.output(i, &out);
                    out
                }
                FloatLayer::MaxPool(size) => {
                    let mut out = vec![0.0; out_len];
                    maxpool(&cur, (d[0], d[1], d[2]), *size, &mut out, None);
                    out
                }
                FloatLayer::Clamp(t) => {
                    fatrelu(&mut cur, *t);
                    cur
                }
            };
        }
        Ok(cur)
    }
}

fn observe_conv(
    index: usize,
    x: &[f32],
    d: &[usize],
    weights: &[f32],
    (oc, ic, kh, kw): (usize, usize, usize, usize),
    groups: usize,
    obs: &mut impl ForwardObserver,
) {
    let (h, w) = (d[1], d[2]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let per_group = oc / groups;
    for o in 0..oc {
        for c in 0..ic {
            for a in 0..kh {
                for b in 0..kw {
                    let wv = weights[((o * ic + c) * kh + a) * kw + b];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let base = (c * h + y + a) * w + b;
                        for &xv in &x[base..base + ow] {
                            if xv != 0.0 {
                                obs.product(index, o / per_group, (xv * wv).abs());
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_hand_computation() {
        // 1×3×3 input, 1×1×2×2 kernel of ones -> 2×2 window sums.
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 4];
        conv2d(&x, (1, 3, 3), &[1.0; 4], (1, 2, 2), Some(&[0.5]), &mut out);
        assert_eq!(out, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut out = [0.0f32; 2];
        linear(&[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], 2, None, &mut out);
        assert_eq!(out, [7.0, 10.0]);
    }

    #[test]
    fn maxpool_records_argmax() {
        let x = [1.0f32, 5.0, 3.0, 2.0];
        let mut out = [0.0];
        let mut am = [0];
        maxpool(&x, (1, 2, 2), 2, &mut out, Some(&mut am));
        assert_eq!((out[0], am[0]), (5.0, 1));
    }
}
