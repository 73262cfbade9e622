//! Accuracy and MAC accounting over a labeled dataset.

use thiserror::Error;

use crate::costmodel::{price, Cost, CostProfile};
use crate::kernels::float::FloatModel;
use crate::kernels::{InferenceConfig, KernelError, MacStats, Mode, ModelGraph, PreparedModel};
use crate::modelio::Dataset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mode {0} needs a fixed-point model; calibrate first")]
    NeedsFixedModel(Mode),
    #[error("dataset is empty")]
    EmptyData,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    /// Inference work per layer, summed over samples.
    pub per_layer: Vec<MacStats>,
    /// Load-time work per layer (threshold precomputations).
    pub load: Vec<MacStats>,
    pub totals: MacStats,
    pub cost: Cost,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// `baseline - accuracy`, in accuracy fraction units.
    pub fn accuracy_drop(&self, baseline: f64) -> f64 {
        baseline - self.accuracy()
    }
}

/// Top-1 accuracy and summed stats. Float models run dense only.
/// Samples are split into `threads` contiguous chunks; integer stats make
/// the result independent of the split.
pub fn evaluate(
    model: &ModelGraph,
    data: &Dataset,
    config: InferenceConfig,
    profile: &CostProfile,
    threads: usize,
) -> Result<EvalResult, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyData);
    }
    let layers = model.layers.len();
    let (correct, per_layer, load) = if model.format.is_none() {
        if config.mode != Mode::Dense {
            return Err(EvalError::NeedsFixedModel(config.mode));
        }
        let float = FloatModel::new(model, 0.0)?;
        let macs = model.dense_macs()?;
        let correct = run_chunks(data, threads, |x| Ok(argmax(&float.forward(x)?)))?
            .into_iter()
            .zip(&data.labels)
            .filter(|(p, &l)| *p == l as usize)
            .count();
        let n = data.len() as u64;
        let per_layer = macs
            .iter()
            .map(|&m| MacStats {
                macs_total: m * n,
                macs_executed: m * n,
                ..Default::default()
            })
            .collect();
        (correct, per_layer, vec![MacStats::default(); layers])
    } else {
        let prepared = PreparedModel::new(model, config)?;
        let mut per_layer = vec![MacStats::default(); layers];
        let mut correct = 0;
        let outputs = run_chunks(data, threads, |x| {
            let (logits, stats) = prepared.forward_raw(prepared.quantize_input(x))?;
            Ok((logits.argmax(), stats))
        })?;
        for ((pred, stats), &label) in outputs.into_iter().zip(&data.labels) {
            correct += (pred == label as usize) as usize;
            for (acc, s) in per_layer.iter_mut().zip(stats) {
                *acc += s;
            }
        }
        (correct, per_layer, prepared.load_stats())
    };
    let totals: MacStats = per_layer.iter().copied().sum();
    Ok(EvalResult {
        correct,
        total: data.len(),
        cost: price(&totals, config.div, profile),
        per_layer,
        load,
        totals,
    })
}

fn run_chunks<R: Send>(
    data: &Dataset,
    threads: usize,
    f: impl Fn(&[f32]) -> Result<R, KernelError> + Sync,
) -> Result<Vec<R>, KernelError> {
    let threads = threads.clamp(1, data.len());
    if threads == 1 {
        return data.images().map(&f).collect();
    }
    let per = data.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = t * per..((t + 1) * per).min(data.len());
                s.spawn(move || range.map(|i| f(data.image(i))).collect::<Result<Vec<R>, _>>())
            })
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
