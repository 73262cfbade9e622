//! Float reference trainer: mini-batch SGD with momentum on softmax
//! cross-entropy, for the layer set the kernels support.
//!
//! The network is generic over [`Float`] so gradients can be checked in
//! `f64` against finite differences while training runs in `f32`.

mod eval;

pub use eval::{evaluate, EvalError, EvalResult};

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernels::float::{conv2d, fatrelu, linear, maxpool};
use crate::kernels::{KernelError, Layer, ModelGraph};
use crate::modelio::Dataset;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became {loss} at epoch {epoch}, batch {batch}; try a smaller learning rate")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 32,
            seed: 42,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Conv { oc: usize, kh: usize, kw: usize },
    Linear { n: usize },
    MaxPool(usize),
    Clamp(f64),
}

/// Trainable parameters of one layer (empty for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Params<T> {
    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

/// Float network built from a [`ModelGraph`] skeleton.
#[derive(Debug, Clone)]
pub struct Network<T> {
    ops: Vec<Op>,
    /// Input shape of every layer, then the output shape.
    shapes: Vec<Shape>,
    pub params: Vec<Params<T>>,
}

/// Per-layer activations kept for the backward pass.
struct Trace<T> {
    /// Input of every layer, then the logits.
    acts: Vec<Vec<T>>,
    argmax: Vec<Vec<usize>>,
}

fn cast<T: Float>(v: f32) -> T {
    T::from(v).unwrap()
}

impl<T: Float> Network<T> {
    /// Take the layer structure and current weights of `model`.
    pub fn from_model(model: &ModelGraph) -> Result<Self, TrainError> {
        let shapes = model.shapes()?;
        let mut ops = Vec::new();
        let mut params = Vec::new();
        for spec in &model.layers {
            let layer = &spec.layer;
            ops.push(match layer {
                Layer::Conv2d(c) => {
                    let (oc, _, kh, kw) = c.dims();
                    Op::Conv { oc, kh, kw }
                }
                Layer::Linear(l) => Op::Linear { n: l.dims().1 },
                Layer::MaxPool { size } => Op::MaxPool(*size),
                Layer::Relu => Op::Clamp(0.0),
                Layer::FatRelu { threshold } => Op::Clamp(*threshold as f64),
            });
            params.push(Params {
                weights: layer
                    .weights()
                    .map(|w| w.to_f32_vec().into_iter().map(cast).collect())
                    .unwrap_or_default(),
                bias: match layer.bias() {
                    Some(b) => b.to_f32_vec().into_iter().map(cast).collect(),
                    None => Vec::new(),
                },
            });
        }
        Ok(Self { ops, shapes, params })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero
    /// biases. Conv fans include the kernel area.
    pub fn init_glorot(&mut self, rng: &mut impl Rng) {
        for (i, op) in self.ops.iter().enumerate() {
            let (fan_in, fan_out) = match op {
                Op::Conv { oc, kh, kw } => {
                    let ic = self.shapes[i].dims()[0];
                    (ic * kh * kw, oc * kh * kw)
                }
                Op::Linear { n } => (self.shapes[i].len(), *n),
                _ => continue,
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let p = &mut self.params[i];
            p.weights.iter_mut().for_each(|w| *w = T::from(rng.gen_range(-a..a)).unwrap());
            p.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }

    /// Write the parameters back into a copy of `model` as float tensors.
    pub fn to_model(&self, model: &ModelGraph) -> ModelGraph {
        let mut out = model.clone();
        out.format = None;
        for (spec, p) in out.layers.iter_mut().zip(&self.params) {
            let to_f32 = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
            let (w, b) = match &mut spec.layer {
                Layer::Conv2d(c) => (&mut c.weights, &mut c.bias),
                Layer::Linear(l) => (&mut l.weights, &mut l.bias),
                _ => continue,
            };
            *w = Tensor::from_f32(w.shape().clone(), to_f32(&p.weights)).unwrap();
            if let Some(b) = b {
                *b = Tensor::from_f32(b.shape().clone(), to_f32(&p.bias)).unwrap();
            }
        }
        out
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    fn forward_trace(&self, x: Vec<T>) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        let mut argmax = vec![Vec::new(); self.ops.len()];
        acts.push(x);
        for (i, op) in self.ops.iter().enumerate() {
            let d = self.shapes[i].dims();
            let cur = acts.last().unwrap();
            let mut out = vec![T::zero(); self.shapes[i + 1].len()];
            let p = &self.params[i];
            let bias = (!p.bias.is_empty()).then_some(p.bias.as_slice());
            match op {
                Op::Conv { oc, kh, kw } => {
                    conv2d(cur, (d[0], d[1], d[2]), &p.weights, (*oc, *kh, *kw), bias, &mut out)
                }
                Op::Linear { n } => linear(cur, &p.weights, *n, bias, &mut out),
                Op::MaxPool(size) => {
                    let mut am = vec![0; out.len()];
                    maxpool(cur, (d[0], d[1], d[2]), *size, &mut out, Some(&mut am));
                    argmax[i] = am;
                }
                Op::Clamp(t) => {
                    out.copy_from_slice(cur);
                    fatrelu(&mut out, T::from(*t).unwrap());
                }
            }
            acts.push(out);
        }
        Trace { acts, argmax }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.forward_trace(x.to_vec()).acts.pop().unwrap()
    }

    /// Cross-entropy loss of one sample; accumulates parameter gradients
    /// into `grads`. Returns the loss and whether the prediction was right.
    fn backward(&self, x: Vec<T>, label: usize, grads: &mut [Params<T>]) -> (T, bool) {
        let trace = self.forward_trace(x);
        let logits = trace.acts.last().unwrap();
        let (loss, mut dy) = softmax_cross_entropy(logits, label);
        let correct = argmax(logits) == label;
        for i in (0..self.ops.len()).rev() {
            let d = self.shapes[i].dims();
            let x = &trace.acts[i];
            let need_dx = i > 0;
            let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
            let p = &self.params[i];
            let g = &mut grads[i];
            match self.ops[i] {
                Op::Conv { oc, kh, kw } => {
                    conv_backward(x, (d[0], d[1], d[2]), &p.weights, (oc, kh, kw), &dy, g, need_dx.then_some(&mut dx))
                }
                Op::Linear { n } => {
                    for (r, &xi) in x.iter().enumerate() {
                        let wrow = &p.weights[r * n..(r + 1) * n];
                        let grow = &mut g.weights[r * n..(r + 1) * n];
                        let mut acc = T::zero();
                        for j in 0..n {
                            grow[j] = grow[j] + xi * dy[j];
                            acc = acc + wrow[j] * dy[j];
                        }
                        if need_dx {
                            dx[r] = acc;
                        }
                    }
                    for (gb, &v) in g.bias.iter_mut().zip(&dy) {
                        *gb = *gb + v;
                    }
                }
                Op::MaxPool(_) => {
                    for (&src, &v) in trace.argmax[i].iter().zip(&dy) {
                        dx[src] = dx[src] + v;
                    }
                }
                Op::Clamp(_) => {
                    let out = &trace.acts[i + 1];
                    for ((dxi, &o), &v) in dx.iter_mut().zip(out).zip(&dy) {
                        *dxi = if o > T::zero() { v } else { T::zero() };
                    }
                }
            }
            if !need_dx {
                break;
            }
            dy = dx;
        }
        (loss, correct)
    }

    /// Mean loss and summed gradients over a batch.
    pub fn batch_gradients(&self, samples: &[(&[f32], usize)]) -> (T, Vec<Params<T>>, usize) {
        let mut grads: Vec<Params<T>> = self.params.iter().map(Params::zeros_like).collect();
        let mut loss = T::zero();
        let mut correct = 0;
        for &(x, label) in samples {
            let (l, ok) = self.backward(x.iter().map(|&v| cast(v)).collect(), label, &mut grads);
            loss = loss + l;
            correct += ok as usize;
        }
        (loss / T::from(samples.len()).unwrap(), grads, correct)
    }

    pub fn loss(&self, x: &[f32], label: usize) -> T {
        let logits = self.forward(&x.iter().map(|&v| cast(v)).collect::<Vec<T>>());
        softmax_cross_entropy(&logits, label).0
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Float>(
    x: &[T],
    (ic, h, w): (usize, usize, usize),
    weights: &[T],
    (oc, kh, kw): (usize, usize, usize),
    dy: &[T],
    g: &mut Params<T>,
    mut dx: Option<&mut Vec<T>>,
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    for o in 0..oc {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        if !g.bias.is_empty() {
            g.bias[o] = dplane.iter().fold(g.bias[o], |a, &v| a + v);
        }
        for c in 0..ic {
            for a in 0..kh {
                for b in 0..kw {
                    let wi = ((o * ic + c) * kh + a) * kw + b;
                    let wv = weights[wi];
                    let mut acc = T::zero();
                    for y in 0..oh {
                        let base = (c * h + y + a) * w + b;
                        let drow = &dplane[y * ow..(y + 1) * ow];
                        for (&xv, &dv) in x[base..base + ow].iter().zip(drow) {
                            acc = acc + xv * dv;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for (dxv, &dv) in dx[base..base + ow].iter_mut().zip(drow) {
                                *dxv = *dxv + wv * dv;
                            }
                        }
                    }
                    g.weights[wi] = g.weights[wi] + acc;
                }
            }
        }
    }
}

/// Loss `-log softmax(z)[label]` and its gradient `softmax(z) - onehot`.
pub fn softmax_cross_entropy<T: Float>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    let loss = sum.ln() - (logits[label] - m);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

fn argmax<T: Float>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Train `arch` from a seeded Glorot initialization.
pub fn train(arch: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<ModelGraph, TrainError> {
    train_with_progress(arch, data, cfg, |_| {})
}

pub fn train_with_progress(
    arch: &ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(EpochStats),
) -> Result<ModelGraph, TrainError> {
    cfg.validate()?;
    let mut net = Network::<f32>::from_model(arch)?;
    if data.sample_shape.len() != net.input_len() {
        return Err(TrainError::ShapeMismatch(format!(
            "data samples are {}, model expects {}",
            data.sample_shape, arch.input_shape
        )));
    }
    let classes = arch.output_shape()?.len();
    if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(TrainError::ShapeMismatch(format!(
            "label {bad} but the model has {classes} outputs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init_glorot(&mut rng);
    let mut velocity: Vec<Params<f32>> = net.params.iter().map(Params::zeros_like).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        let mut correct = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f32], usize)> =
                chunk.iter().map(|&i| (data.image(i), data.labels[i] as usize)).collect();
            let (loss, grads, ok) = net.batch_gradients(&batch);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: loss as f64,
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            correct += ok;
            sgd_step(&mut net.params, &mut velocity, &grads, cfg, batch.len());
        }
        on_epoch(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len().max(1) as f64,
            train_accuracy: correct as f64 / data.len().max(1) as f64,
        });
    }
    Ok(net.to_model(arch))
}

/// `v = μ·v + g/B; w -= lr·v`.
fn sgd_step(
    params: &mut [Params<f32>],
    velocity: &mut [Params<f32>],
    grads: &[Params<f32>],
    cfg: &TrainConfig,
    batch: usize,
) {
    let inv = 1.0 / batch as f32;
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((w, vw), &gw) in p.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
            *vw = cfg.momentum * *vw + gw * inv;
            *w -= cfg.learning_rate * *vw;
        }
        for ((b, vb), &gb) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
            *vb = cfg.momentum * *vb + gb * inv;
            *b -= cfg.learning_rate * *vb;
        }
    }
}
