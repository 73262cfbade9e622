//! Per-layer (and per-group) threshold calibration.
//!
//! A dense float pass over a held-out batch feeds every nonzero
//! activation–weight product magnitude into a seeded uniform reservoir per
//! layer and group. The threshold `T` is the nearest-rank percentile of the
//! reservoir. Zero products are left out of the population: they are always
//! skipped, so counting them would only pull `T` towards zero.
//!
//! The same pass records the largest output magnitude of every conv and
//! linear layer, which fixes the activation quantization scales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernels::float::{FloatModel, ForwardObserver};
use crate::kernels::{KernelError, LayerCalibration, ModelGraph};
use crate::numerics::QFormat;
use crate::tensor::{quantize_tensor, TensorError};

pub const DEFAULT_SAMPLE_CAP: usize = 1 << 16;
pub const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("calibration batch is empty")]
    EmptyBatch,
    #[error("no samples to take a percentile of")]
    EmptySamples,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Nearest-rank percentile: the element of rank `ceil(p/100 · N)` (at least
/// 1) in ascending order.
pub fn percentile_nearest_rank(samples: &[f32], p: f64) -> Result<f32, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::EmptySamples);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(CalibrationError::BadPercentile(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

/// 1-based rank `ceil(p·N/100)`, clamped to `[1, N]`.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n)
}

/// Uniform fixed-size sample of a stream (Algorithm R).
#[derive(Debug, Clone)]
struct Reservoir {
    cap: usize,
    seen: u64,
    items: Vec<f32>,
}

impl Reservoir {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            seen: 0,
            items: Vec::new(),
        }
    }

    #[inline]
    fn offer(&mut self, v: f32, rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(v);
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < self.cap {
                self.items[j as usize] = v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub percentile: f64,
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            percentile: 20.0,
            sample_cap: DEFAULT_SAMPLE_CAP,
            seed: DEFAULT_SEED,
        }
    }
}

/// Product reservoirs and activation ranges from one calibration pass.
/// Thresholds for any percentile can be read off without rerunning it.
#[derive(Debug, Clone)]
pub struct CalibrationSamples {
    /// Per layer, per group; empty for layers that are not pruned.
    reservoirs: Vec<Vec<Reservoir>>,
    act_max_abs: Vec<f32>,
    input_max_abs: f32,
}

struct Collector<'a> {
    samples: &'a mut CalibrationSamples,
    rng: ChaCha8Rng,
}

impl ForwardObserver for Collector<'_> {
    fn wants_products(&self, index: usize) -> bool {
        !self.samples.reservoirs[index].is_empty()
    }

    #[inline]
    fn product(&mut self, index: usize, group: usize, magnitude: f32) {
        self.samples.reservoirs[index][group].offer(magnitude, &mut self.rng);
    }

    fn output(&mut self, index: usize, values: &[f32]) {
        let m = values.iter().fold(0f32, |m, v| m.max(v.abs()));
        let slot = &mut self.samples.act_max_abs[index];
        *slot = slot.max(m);
    }
}

/// Run dense float passes over `batch` and sample products.
pub fn collect_samples(
    model: &ModelGraph,
    batch: &[impl AsRef<[f32]>],
    sample_cap: usize,
    seed: u64,
) -> Result<CalibrationSamples, CalibrationError> {
    if batch.is_empty() {
        return Err(CalibrationError::EmptyBatch);
    }
    model.validate()?;
    let float = FloatModel::new(model, 0.0)?;
    let reservoirs = model
        .layers
        .iter()
        .map(|s| match s.layer.prune() {
            Some(p) if p.enabled => vec![Reservoir::new(sample_cap.max(1)); p.groups],
            _ => Vec::new(),
        })
        .collect();
    let mut samples = CalibrationSamples {
        reservoirs,
        act_max_abs: vec![0.0; model.layers.len()],
        input_max_abs: 0.0,
    };
    let mut collector = Collector {
        samples: &mut samples,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut input_max = 0f32;
    for x in batch {
        let x = x.as_ref();
        input_max = x.iter().fold(input_max, |m, v| m.max(v.abs()));
        float.forward_observed(x, &mut collector)?;
    }
    samples.input_max_abs = input_max;
    Ok(samples)
}

impl CalibrationSamples {
    /// Thresholds at percentile `p`. `p = 0` disables pruning (`T = 0`).
    pub fn table(&self, p: f64) -> Result<ThresholdTable, CalibrationError> {
        if !(0.0..=100.0).contains(&p) {
            return Err(CalibrationError::BadPercentile(p));
        }
        let layers = self
            .reservoirs
            .iter()
            .zip(&self.act_max_abs)
            .map(|(groups, &act)| {
                let thresholds = groups
                    .iter()
                    .map(|r| {
                        if p == 0.0 || r.items.is_empty() {
                            Ok(0.0)
                        } else {
                            percentile_nearest_rank(&r.items, p)
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(LayerCalibration {
                    thresholds,
                    percentile: p as f32,
                    sample_count: groups.iter().map(|r| r.items.len() as u32).sum(),
                    act_max_abs: act,
                })
            })
            .collect::<Result<Vec<_>, CalibrationError>>()?;
        Ok(ThresholdTable {
            input_max_abs: self.input_max_abs,
            layers,
        })
    }
}

/// Calibrated thresholds and activation ranges for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub input_max_abs: f32,
    pub layers: Vec<LayerCalibration>,
}

impl ThresholdTable {
    /// Read the table stored in a model.
    pub fn from_model(model: &ModelGraph) -> Self {
        Self {
            input_max_abs: model.input_max_abs,
            layers: model.layers.iter().map(|s| s.calib.clone()).collect(),
        }
    }

    pub fn apply(&self, model: &mut ModelGraph) {
        model.input_max_abs = self.input_max_abs;
        for (spec, calib) in model.layers.iter_mut().zip(&self.layers) {
            spec.calib = calib.clone();
        }
    }
}

/// One-shot calibration at `cfg.percentile`.
pub fn calibrate(
    model: &ModelGraph,
    batch: &[impl AsRef<[f32]>],
    cfg: &CalibrationConfig,
) -> Result<ThresholdTable, CalibrationError> {
    if !(0.0..=100.0).contains(&cfg.percentile) {
        return Err(CalibrationError::BadPercentile(cfg.percentile));
    }
    collect_samples(model, batch, cfg.sample_cap, cfg.seed)?.table(cfg.percentile)
}

/// Quantize every weight and bias tensor of a float model (symmetric,
/// per tensor). Calibration data already attached is kept.
pub fn quantize_model(model: &ModelGraph, fmt: QFormat) -> Result<ModelGraph, CalibrationError> {
    let mut out = model.clone();
    out.format = Some(fmt);
    for spec in &mut out.layers {
        let (w, b) = match &mut spec.layer {
            crate::kernels::Layer::Conv2d(c) => (&mut c.weights, &mut c.bias),
            crate::kernels::Layer::Linear(l) => (&mut l.weights, &mut l.bias),
            _ => continue,
        };
        *w = quantize_tensor(&w.dequantize(), fmt)?;
        if let Some(b) = b {
            *b = quantize_tensor(&b.dequantize(), fmt)?;
        }
    }
    Ok(out)
}
