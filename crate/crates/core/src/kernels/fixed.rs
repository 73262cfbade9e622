//! Fixed-point forward kernels.
//!
//! Products of two raw words are accumulated exactly in a wide integer
//! (`i64` for 16-bit words, `i128` for 32-bit words) and rescaled into the
//! output format once per output element by [`Requant`].

use crate::divapprox::{DivError, DivMethod, RawThreshold, ThresholdDivider};
use crate::numerics::{quantize_raw, QFormat};
use crate::tensor::{quantize_with_scale, symmetric_scale, Shape, Tensor, TensorData};

use super::layer::{ConvLayer, Layer, LayerCalibration, LinearLayer, ModelGraph};
use super::{KernelError, MacStats, Mode};

/// Which MACs a layer is allowed to skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipPolicy {
    /// Execute every MAC.
    Dense,
    /// Skip when the free operand is at or below `T / |control|`.
    Threshold,
    /// Skip MACs whose activation is zero.
    ZeroActivations,
    /// Skip MACs whose weight is zero.
    ZeroWeights,
}

/// Maps a wide accumulator onto the output format:
/// `out = round(acc · multiplier + bias[channel])`, saturated.
#[derive(Debug, Clone, PartialEq)]
pub struct Requant {
    pub multiplier: f64,
    /// Per output channel, in output raw units. Empty means no bias.
    pub bias: Vec<f64>,
    pub format: QFormat,
    /// Scale of the produced tensor.
    pub out_scale: f32,
}

impl Requant {
    /// Requantizer for `x·w` products where both inputs and the output use
    /// the given per-tensor scales.
    pub fn new(fmt: QFormat, in_scale: f32, w_scale: f32, out_scale: f32) -> Self {
        Self {
            multiplier: in_scale as f64 * w_scale as f64 / (out_scale as f64 * fmt.one()),
            bias: Vec::new(),
            format: fmt,
            out_scale,
        }
    }

    /// Attach a bias given as raw words under `bias_scale`.
    pub fn with_bias(mut self, raw: &[i32], bias_scale: f32) -> Self {
        let k = bias_scale as f64 / self.out_scale as f64;
        self.bias = raw.iter().map(|&b| b as f64 * k).collect();
        self
    }

    #[inline]
    pub fn apply(&self, acc: i128, channel: usize) -> i32 {
        let b = self.bias.get(channel).copied().unwrap_or(0.0);
        quantize_raw(acc as f64 * self.multiplier + b, self.format)
    }
}

trait Accum: Copy + Default {
    fn add(&mut self, p: i64);
    fn wide(self) -> i128;
}

impl Accum for i64 {
    #[inline(always)]
    fn add(&mut self, p: i64) {
        *self += p;
    }
    fn wide(self) -> i128 {
        self as i128
    }
}

impl Accum for i128 {
    #[inline(always)]
    fn add(&mut self, p: i64) {
        *self += p as i128;
    }
    fn wide(self) -> i128 {
        self
    }
}

/// Real threshold `T` in raw product units: `floor(T · 2^(2f) / (s_x · s_w))`.
pub fn raw_threshold(t: f32, fmt: QFormat, in_scale: f32, w_scale: f32) -> u64 {
    let v = t as f64 * fmt.one() * fmt.one() / (in_scale as f64 * w_scale as f64);
    if !(v > 0.0) {
        0
    } else if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v.floor() as u64
    }
}

fn check_groups(groups: usize, dim: usize) -> Result<usize, KernelError> {
    if groups == 0 || !dim.is_multiple_of(groups) {
        return Err(KernelError::BadGroups {
            layer: 0,
            groups,
            what: "control dimension",
            dim,
        });
    }
    Ok(dim / groups)
}

/// Linear layer over raw words, `m` inputs × `n` outputs.
///
/// Each nonzero input computes its bound `t_i` once and reuses it across the
/// `n` weights of its row.
#[derive(Debug, Clone)]
pub struct LinearKernel {
    m: usize,
    n: usize,
    weights: Vec<i32>,
    zero_weights_per_row: Vec<u64>,
    policy: SkipPolicy,
    thresholds: Vec<RawThreshold>,
    rows_per_group: usize,
    divider: ThresholdDivider,
    requant: Requant,
}

impl LinearKernel {
    /// `thresholds` holds one raw threshold per group of contiguous input
    /// rows; it may be empty unless `policy` is [`SkipPolicy::Threshold`].
    pub fn new(
        m: usize,
        n: usize,
        weights: Vec<i32>,
        policy: SkipPolicy,
        thresholds: &[u64],
        divider: ThresholdDivider,
        requant: Requant,
    ) -> Result<Self, KernelError> {
        if weights.len() != m * n {
            return Err(KernelError::ShapeMismatch(format!(
                "linear {m}×{n} given {} weights",
                weights.len()
            )));
        }
        let rows_per_group = if policy == SkipPolicy::Threshold {
            check_groups(thresholds.len(), m)?
        } else {
            m
        };
        let zero_weights_per_row = weights
            .chunks(n)
            .map(|r| r.iter().filter(|&&w| w == 0).count() as u64)
            .collect();
        Ok(Self {
            m,
            n,
            weights,
            zero_weights_per_row,
            policy,
            thresholds: thresholds.iter().map(|&t| RawThreshold::new(t)).collect(),
            rows_per_group,
            divider,
            requant,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn out_scale(&self) -> f32 {
        self.requant.out_scale
    }

    pub fn forward_raw(&self, x: &[i32], stats: &mut MacStats) -> Result<Vec<i32>, KernelError> {
        if x.len() != self.m {
            return Err(KernelError::ShapeMismatch(format!(
                "linear expects {} inputs, got {}",
                self.m,
                x.len()
            )));
        }
        if self.requant.format.word_bits() <= 16 {
            self.run::<i64>(x, stats)
        } else {
            self.run::<i128>(x, stats)
        }
    }

    fn run<A: Accum>(&self, x: &[i32], stats: &mut MacStats) -> Result<Vec<i32>, KernelError> {
        let n = self.n;
        let mut acc = vec![A::default(); n];
        let mut s = MacStats {
            macs_total: (self.m * n) as u64,
            ..Default::default()
        };
        for (i, (&xi, row)) in x.iter().zip(self.weights.chunks_exact(n)).enumerate() {
            let xw = xi as i64;
            match self.policy {
                SkipPolicy::Dense => {
                    for (a, &w) in acc.iter_mut().zip(row) {
                        a.add(xw * w as i64);
                    }
                    s.macs_executed += n as u64;
                    s.zero_operand_macs += if xi == 0 {
                        n as u64
                    } else {
                        self.zero_weights_per_row[i]
                    };
                }
                SkipPolicy::Threshold => {
                    s.comparisons += 1;
                    if xi == 0 {
                        s.macs_skipped += n as u64;
                        continue;
                    }
                    let t = &self.thresholds[i / self.rows_per_group];
                    let (bound, ops) = self.divider.bound(t, xi.unsigned_abs() as u64)?;
                    s.divisions += 1;
                    s.shifts += ops.shifts;
                    s.comparisons += n as u64;
                    let mut kept = 0u64;
                    for (a, &w) in acc.iter_mut().zip(row) {
                        if w.unsigned_abs() as u64 > bound {
                            a.add(xw * w as i64);
                            kept += 1;
                        }
                    }
                    s.macs_executed += kept;
                    s.macs_skipped += n as u64 - kept;
                }
                SkipPolicy::ZeroActivations => {
                    s.comparisons += 1;
                    if xi == 0 {
                        s.macs_skipped += n as u64;
                        continue;
                    }
                    for (a, &w) in acc.iter_mut().zip(row) {
                        a.add(xw * w as i64);
                    }
                    s.macs_executed += n as u64;
                }
                SkipPolicy::ZeroWeights => {
                    s.comparisons += n as u64;
                    let mut kept = 0u64;
                    for (a, &w) in acc.iter_mut().zip(row) {
                        if w != 0 {
                            a.add(xw * w as i64);
                            kept += 1;
                        }
                    }
                    s.macs_executed += kept;
                    s.macs_skipped += n as u64 - kept;
                }
            }
        }
        *stats += s;
        Ok(acc
            .iter()
            .enumerate()
            .map(|(j, a)| self.requant.apply(a.wide(), j))
            .collect())
    }
}

/// Stride-1, unpadded convolution over raw words.
///
/// Per-weight bounds `T / |w|` are computed once at construction; the
/// forward pass performs no divisions.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    weights: Vec<i32>,
    bounds: Vec<u64>,
    policy: SkipPolicy,
    precomputations: u64,
    requant: Requant,
}

impl ConvKernel {
    /// `dims` is `(out_ch, in_ch, kh, kw)`; `thresholds` holds one raw
    /// threshold per group of contiguous output channels.
    pub fn new(
        dims: (usize, usize, usize, usize),
        weights: Vec<i32>,
        policy: SkipPolicy,
        thresholds: &[u64],
        divider: &ThresholdDivider,
        requant: Requant,
    ) -> Result<Self, KernelError> {
        let (out_ch, in_ch, kh, kw) = dims;
        if weights.len() != out_ch * in_ch * kh * kw {
            return Err(KernelError::ShapeMismatch(format!(
                "conv {out_ch}×{in_ch}×{kh}×{kw} given {} weights",
                weights.len()
            )));
        }
        let mut bounds = vec![0u64; weights.len()];
        let mut precomputations = 0;
        if policy == SkipPolicy::Threshold {
            let per_group = check_groups(thresholds.len(), out_ch)?;
            let thresholds: Vec<RawThreshold> =
                thresholds.iter().map(|&t| RawThreshold::new(t)).collect();
            let per_oc = in_ch * kh * kw;
            for (idx, (&w, bound)) in weights.iter().zip(bounds.iter_mut()).enumerate() {
                let t = &thresholds[idx / per_oc / per_group];
                match divider.bound(t, w.unsigned_abs() as u64) {
                    Ok((b, _)) => {
                        *bound = b;
                        precomputations += 1;
                    }
                    Err(DivError::ZeroControlTerm) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(Self {
            out_ch,
            in_ch,
            kh,
            kw,
            weights,
            bounds,
            policy,
            precomputations,
            requant,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.out_ch, self.in_ch, self.kh, self.kw)
    }

    pub fn out_scale(&self) -> f32 {
        self.requant.out_scale
    }

    /// Load-time threshold divisions performed by [`ConvKernel::new`].
    pub fn threshold_precomputations(&self) -> u64 {
        self.precomputations
    }

    /// Skip bound of every weight (`|x| <= bound` is skipped).
    pub fn bounds(&self) -> &[u64] {
        &self.bounds
    }

    /// `x` is `in_ch × h × w`; returns `out_ch × (h-kh+1) × (w-kw+1)`.
    pub fn forward_raw(
        &self,
        x: &[i32],
        h: usize,
        w: usize,
        stats: &mut MacStats,
    ) -> Result<Vec<i32>, KernelError> {
        if x.len() != self.in_ch * h * w || h < self.kh || w < self.kw {
            return Err(KernelError::ShapeMismatch(format!(
                "conv expects {}×H×W input with H ≥ {}, W ≥ {}; got {} values for {h}×{w}",
                self.in_ch,
                self.kh,
                self.kw,
                x.len()
            )));
        }
        if self.requant.format.word_bits() <= 16 {
            Ok(self.run::<i64>(x, h, w, stats))
        } else {
            Ok(self.run::<i128>(x, h, w, stats))
        }
    }

    fn run<A: Accum>(&self, x: &[i32], h: usize, w: usize, stats: &mut MacStats) -> Vec<i32> {
        let (oh, ow) = (h - self.kh + 1, w - self.kw + 1);
        let positions = (oh * ow) as u64;
        let mut acc = vec![A::default(); self.out_ch * oh * ow];
        let mut s = MacStats {
            macs_total: positions * self.weights.len() as u64,
            ..Default::default()
        };
        let xabs: Vec<u64> = x.iter().map(|v| v.unsigned_abs() as u64).collect();
        let mut widx = 0;
        for o in 0..self.out_ch {
            let out = &mut acc[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..self.in_ch {
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        let wv = self.weights[widx];
                        let bound = self.bounds[widx];
                        widx += 1;
                        let wl = wv as i64;
                        match self.policy {
                            SkipPolicy::Dense => {
                                for y in 0..oh {
                                    let base = (c * h + y + a) * w + b;
                                    let xr = &x[base..base + ow];
                                    let or = &mut out[y * ow..(y + 1) * ow];
                                    for (acc, &xv) in or.iter_mut().zip(xr) {
                                        acc.add(xv as i64 * wl);
                                    }
                                    s.zero_operand_macs += if wv == 0 {
                                        ow as u64
                                    } else {
                                        xr.iter().filter(|&&v| v == 0).count() as u64
                                    };
                                }
                                s.macs_executed += positions;
                            }
                            SkipPolicy::Threshold => {
                                s.comparisons += 1;
                                if wv == 0 {
                                    s.macs_skipped += positions;
                                    continue;
                                }
                                s.comparisons += positions;
                                let mut kept = 0u64;
                                for y in 0..oh {
                                    let base = (c * h + y + a) * w + b;
                                    let xr = &x[base..base + ow];
                                    let xa = &xabs[base..base + ow];
                                    let or = &mut out[y * ow..(y + 1) * ow];
                                    for ((acc, &xv), &m) in or.iter_mut().zip(xr).zip(xa) {
                                        if m > bound {
                                            acc.add(xv as i64 * wl);
                                            kept += 1;
                                        }
                                    }
                                }
                                s.macs_executed += kept;
                                s.macs_skipped += positions - kept;
                            }
                            SkipPolicy::ZeroActivations => {
                                s.comparisons += positions;
                                let mut kept = 0u64;
                                for y in 0..oh {
                                    let base = (c * h + y + a) * w + b;
                                    let xr = &x[base..base + ow];
                                    let or = &mut out[y * ow..(y + 1) * ow];
                                    for (acc, &xv) in or.iter_mut().zip(xr) {
                                        if xv != 0 {
                                            acc.add(xv as i64 * wl);
                                            kept += 1;
                                        }
                                    }
                                }
                                s.macs_executed += kept;
                                s.macs_skipped += positions - kept;
                            }
                            SkipPolicy::ZeroWeights => {
                                s.comparisons += 1;
                                if wv == 0 {
                                    s.macs_skipped += positions;
                                    continue;
                                }
                                for y in 0..oh {
                                    let base = (c * h + y + a) * w + b;
                                    let xr = &x[base..base + ow];
                                    let or = &mut out[y * ow..(y + 1) * ow];
                                    for (acc, &xv) in or.iter_mut().zip(xr) {
                                        acc.add(xv as i64 * wl);
                                    }
                                }
                                s.macs_executed += positions;
                            }
                        }
                    }
                }
            }
        }
        *stats += s;
        acc.iter()
            .enumerate()
            .map(|(i, a)| self.requant.apply(a.wide(), i / (oh * ow)))
            .collect()
    }
}

fn fixed_parts(x: &Tensor) -> Result<(&[i32], QFormat), KernelError> {
    match x.data() {
        TensorData::Fixed { raw, format } => Ok((raw, *format)),
        TensorData::F32(_) => Err(KernelError::NotQuantized),
    }
}

/// Linear layer on a fixed-point tensor of `m` elements (any shape).
pub fn linear_forward(
    x: &Tensor,
    kernel: &LinearKernel,
    stats: &mut MacStats,
) -> Result<Tensor, KernelError> {
    let (raw, fmt) = fixed_parts(x)?;
    let out = kernel.forward_raw(raw, stats)?;
    Ok(Tensor::from_raw(
        Shape::new(vec![kernel.n])?,
        out,
        fmt,
        kernel.out_scale(),
    )?)
}

/// Convolution on a fixed-point `in_ch × H × W` tensor.
pub fn conv2d_forward(
    x: &Tensor,
    kernel: &ConvKernel,
    stats: &mut MacStats,
) -> Result<Tensor, KernelError> {
    let (raw, fmt) = fixed_parts(x)?;
    let d = x.shape().dims();
    if d.len() != 3 || d[0] != kernel.in_ch {
        return Err(KernelError::ShapeMismatch(format!(
            "conv expects {}×H×W input, got {}",
            kernel.in_ch,
            x.shape()
        )));
    }
    let (h, w) = (d[1], d[2]);
    let out = kernel.forward_raw(raw, h, w, stats)?;
    Ok(Tensor::from_raw(
        Shape::new(vec![kernel.out_ch, h - kernel.kh + 1, w - kernel.kw + 1])?,
        out,
        fmt,
        kernel.out_scale(),
    )?)
}

fn maxpool_raw<T: Copy + PartialOrd>(x: &[T], c: usize, h: usize, w: usize, size: usize) -> Vec<T> {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for z in 0..ow {
                let mut best = x[(ch * h + y * size) * w + z * size];
                for a in 0..size {
                    for b in 0..size {
                        let v = x[(ch * h + y * size + a) * w + z * size + b];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Channel-wise non-overlapping `size × size` max pooling.
pub fn maxpool_forward(x: &Tensor, size: usize) -> Result<Tensor, KernelError> {
    let shape = Layer::MaxPool { size }.output_shape(x.shape())?;
    let d = x.shape().dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    Ok(match x.data() {
        TensorData::F32(v) => Tensor::from_f32(shape, maxpool_raw(v, c, h, w, size))?,
        TensorData::Fixed { raw, format } => {
            Tensor::from_raw(shape, maxpool_raw(raw, c, h, w, size), *format, x.scale())?
        }
    })
}

/// Largest raw word that a FATReLU with real threshold `th` zeroes.
pub fn fatrelu_raw_threshold(th: f32, fmt: QFormat, scale: f32) -> i32 {
    let v = (th as f64 * fmt.one() / scale as f64).floor();
    v.clamp(0.0, fmt.raw_max() as f64) as i32
}

/// `x` where `x > threshold`, else 0. A zero threshold is plain ReLU.
pub fn fatrelu_forward(x: &Tensor, threshold: f32) -> Tensor {
    let mut out = x.clone();
    match x.format() {
        None => {
            for v in out.as_f32_mut().unwrap() {
                if !(*v > threshold) {
                    *v = 0.0;
                }
            }
        }
        Some(fmt) => {
            let t = fatrelu_raw_threshold(threshold, fmt, x.scale());
            for v in out.as_raw_mut().unwrap() {
                if *v <= t {
                    *v = 0;
                }
            }
        }
    }
    out
}

/// Mode, division method and FATReLU threshold for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub mode: Mode,
    pub div: DivMethod,
    /// Threshold applied to ReLU layers in the FATReLU modes (real units).
    pub fatrelu_threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dense,
            div: DivMethod::Exact,
            fatrelu_threshold: 0.0,
        }
    }
}

impl InferenceConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }

    pub fn with_div(mut self, div: DivMethod) -> Self {
        self.div = div;
        self
    }

    pub fn with_fatrelu(mut self, threshold: f32) -> Self {
        self.fatrelu_threshold = threshold;
        self
    }
}

#[derive(Debug, Clone)]
enum PreparedLayer {
    Conv(ConvKernel),
    Linear(LinearKernel),
    MaxPool(usize),
    /// Zero raws at or below the threshold; 0 is ReLU.
    Clamp(i32),
}

/// A fixed-point model with all load-time work done: per-weight conv
/// bounds, raw thresholds and requantizers.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    format: QFormat,
    input_shape: Shape,
    input_scale: f32,
    layers: Vec<PreparedLayer>,
    shapes: Vec<Shape>,
    config: InferenceConfig,
}

impl PreparedModel {
    pub fn new(model: &ModelGraph, config: InferenceConfig) -> Result<Self, KernelError> {
        let fmt = model.format.ok_or(KernelError::NotQuantized)?;
        model.validate()?;
        let divider = ThresholdDivider::new(config.div, fmt.word_bits())?;
        let shapes = model.shapes()?;
        let mut scale = model.input_scale(fmt);
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, spec) in model.layers.iter().enumerate() {
            let prepared = match &spec.layer {
                Layer::Conv2d(conv) => {
                    let (kernel, out) =
                        prepare_conv(i, conv, &spec.calib, fmt, scale, &divider, config.mode)?;
                    scale = out;
                    PreparedLayer::Conv(kernel)
                }
                Layer::Linear(lin) => {
                    let (kernel, out) =
                        prepare_linear(i, lin, &spec.calib, fmt, scale, &divider, config.mode)?;
                    scale = out;
                    PreparedLayer::Linear(kernel)
                }
                Layer::MaxPool { size } => PreparedLayer::MaxPool(*size),
                Layer::Relu if config.mode.uses_fatrelu() => {
                    PreparedLayer::Clamp(fatrelu_raw_threshold(config.fatrelu_threshold, fmt, scale))
                }
                Layer::Relu => PreparedLayer::Clamp(0),
                Layer::FatRelu { threshold } => {
                    PreparedLayer::Clamp(fatrelu_raw_threshold(*threshold, fmt, scale))
                }
            };
            layers.push(prepared);
        }
        Ok(Self {
            format: fmt,
            input_shape: model.input_shape.clone(),
            input_scale: model.input_scale(fmt),
            layers,
            shapes,
            config,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer load-time work (threshold precomputations only).
    pub fn load_stats(&self) -> Vec<MacStats> {
        self.layers
            .iter()
            .map(|l| match l {
                PreparedLayer::Conv(k) => MacStats {
                    threshold_precomputations: k.threshold_precomputations(),
                    ..Default::default()
                },
                _ => MacStats::default(),
            })
            .collect()
    }

    /// Quantize a real-valued input under the model's input scale.
    pub fn quantize_input(&self, x: &[f32]) -> Vec<i32> {
        quantize_with_scale(x, self.input_scale, self.format)
    }

    /// Run one sample; returns logits and per-layer stats.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<MacStats>), KernelError> {
        if x.len() != self.input_shape.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "model expects input {}, got {}",
                self.input_shape,
                x.shape()
            )));
        }
        let raw = match x.data() {
            TensorData::F32(v) => self.quantize_input(v),
            TensorData::Fixed { raw, format } if *format == self.format => {
                // Rescale only when the caller used a different scale.
                if x.scale() == self.input_scale {
                    raw.clone()
                } else {
                    self.quantize_input(&x.to_f32_vec())
                }
            }
            TensorData::Fixed { .. } => self.quantize_input(&x.to_f32_vec()),
        };
        self.forward_raw(raw)
    }

    pub fn forward_raw(&self, mut cur: Vec<i32>) -> Result<(Tensor, Vec<MacStats>), KernelError> {
        let mut stats = vec![MacStats::default(); self.layers.len()];
        let mut scale = self.input_scale;
        for (i, layer) in self.layers.iter().enumerate() {
            let in_dims = self.shapes[i].dims();
            cur = match layer {
                PreparedLayer::Conv(k) => {
                    scale = k.out_scale();
                    k.forward_raw(&cur, in_dims[1], in_dims[2], &mut stats[i])?
                }
                PreparedLayer::Linear(k) => {
                    scale = k.out_scale();
                    k.forward_raw(&cur, &mut stats[i])?
                }
                PreparedLayer::MaxPool(size) => {
                    maxpool_raw(&cur, in_dims[0], in_dims[1], in_dims[2], *size)
                }
                PreparedLayer::Clamp(t) => {
                    for v in cur.iter_mut() {
                        if *v <= *t {
                            *v = 0;
                        }
                    }
                    cur
                }
            };
        }
        let out_shape = self.shapes.last().unwrap().clone();
        Ok((Tensor::from_raw(out_shape, cur, self.format, scale)?, stats))
    }
}

/// Prepare and run a single sample.
pub fn model_forward(
    model: &ModelGraph,
    x: &Tensor,
    config: InferenceConfig,
) -> Result<(Tensor, Vec<MacStats>), KernelError> {
    PreparedModel::new(model, config)?.forward(x)
}

fn policy_for(mode: Mode, prune_enabled: bool) -> SkipPolicy {
    match mode {
        Mode::Dense => SkipPolicy::Dense,
        Mode::Unit | Mode::UnitFatRelu if prune_enabled => SkipPolicy::Threshold,
        Mode::Unit | Mode::UnitFatRelu => SkipPolicy::Dense,
        Mode::FatRelu => SkipPolicy::ZeroActivations,
        Mode::TrainTimePruned => SkipPolicy::ZeroWeights,
    }
}

fn out_scale(calib: &LayerCalibration, fmt: QFormat) -> f32 {
    symmetric_scale(calib.act_max_abs, fmt)
}

fn layer_thresholds(
    index: usize,
    calib: &LayerCalibration,
    policy: SkipPolicy,
    fmt: QFormat,
    in_scale: f32,
    w_scale: f32,
) -> Result<Vec<u64>, KernelError> {
    if policy != SkipPolicy::Threshold {
        return Ok(Vec::new());
    }
    if !calib.is_calibrated() {
        return Err(KernelError::MissingThresholds { layer: index });
    }
    Ok(calib
        .thresholds
        .iter()
        .map(|&t| raw_threshold(t, fmt, in_scale, w_scale))
        .collect())
}

fn with_layer_index(e: KernelError, index: usize) -> KernelError {
    match e {
        KernelError::BadGroups {
            groups, what, dim, ..
        } => KernelError::BadGroups {
            layer: index,
            groups,
            what,
            dim,
        },
        e => e,
    }
}

fn prepare_conv(
    index: usize,
    conv: &ConvLayer,
    calib: &LayerCalibration,
    fmt: QFormat,
    in_scale: f32,
    divider: &ThresholdDivider,
    mode: Mode,
) -> Result<(ConvKernel, f32), KernelError> {
    let policy = policy_for(mode, conv.prune.enabled);
    let w_scale = conv.weights.scale();
    let thresholds = layer_thresholds(index, calib, policy, fmt, in_scale, w_scale)?;
    let out = out_scale(calib, fmt);
    let mut requant = Requant::new(fmt, in_scale, w_scale, out);
    if let Some(b) = &conv.bias {
        requant = requant.with_bias(b.as_raw()?, b.scale());
    }
    let kernel = ConvKernel::new(
        conv.dims(),
        conv.weights.as_raw()?.to_vec(),
        policy,
        &thresholds,
        divider,
        requant,
    )
    .map_err(|e| with_layer_index(e, index))?;
    Ok((kernel, out))
}

fn prepare_linear(
    index: usize,
    lin: &LinearLayer,
    calib: &LayerCalibration,
    fmt: QFormat,
    in_scale: f32,
    divider: &ThresholdDivider,
    mode: Mode,
) -> Result<(LinearKernel, f32), KernelError> {
    let policy = policy_for(mode, lin.prune.enabled);
    let w_scale = lin.weights.scale();
    let thresholds = layer_thresholds(index, calib, policy, fmt, in_scale, w_scale)?;
    let out = out_scale(calib, fmt);
    let mut requant = Requant::new(fmt, in_scale, w_scale, out);
    if let Some(b) = &lin.bias {
        requant = requant.with_bias(b.as_raw()?, b.scale());
    }
    let (m, n) = lin.dims();
    let kernel = LinearKernel::new(
        m,
        n,
        lin.weights.as_raw()?.to_vec(),
        policy,
        &thresholds,
        divider.clone(),
        requant,
    )
    .map_err(|e| with_layer_index(e, index))?;
    Ok((kernel, out))
}
