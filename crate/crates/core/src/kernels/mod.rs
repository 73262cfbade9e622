//! Forward kernels with MAC accounting.
//!
//! The fixed-point kernels in [`fixed`] implement dense and threshold-pruned
//! linear and convolution layers. Linear layers divide the layer threshold by
//! each input activation once and compare every weight in that input's row
//! against the quotient. Convolution layers divide by each weight once, at
//! load time, and compare every activation the weight touches. A zero
//! control term skips all its MACs without dividing.
//!
//! [`float`] holds the dense `f32`/`f64` reference path used by training and
//! calibration.

pub mod fixed;
pub mod float;
mod layer;

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divapprox::DivError;
use crate::tensor::TensorError;

pub use fixed::{
    conv2d_forward, fatrelu_forward, linear_forward, maxpool_forward, model_forward, ConvKernel,
    InferenceConfig, LinearKernel, PreparedModel, Requant,
};
pub use layer::{
    mnist_architecture, ConvLayer, Layer, LayerCalibration, LayerKind, LayerSpec, LinearLayer,
    ModelGraph, PruneConfig,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer} has no calibrated thresholds; run calibration first")]
    MissingThresholds { layer: usize },
    #[error("group count {groups} does not divide {what} {dim} of layer {layer}")]
    BadGroups {
        layer: usize,
        groups: usize,
        what: &'static str,
        dim: usize,
    },
    #[error("fixed-point kernels need a quantized model")]
    NotQuantized,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Div(#[from] DivError),
}

/// Operation counters for one layer (or a sum of layers / samples).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacStats {
    pub macs_total: u64,
    pub macs_executed: u64,
    pub macs_skipped: u64,
    /// Skip tests and zero tests executed.
    pub comparisons: u64,
    /// Runtime threshold divisions (one per nonzero linear input).
    pub divisions: u64,
    /// Single-step shifts spent by bit-shift exponent estimates.
    pub shifts: u64,
    /// Load-time threshold divisions (one per nonzero conv weight).
    pub threshold_precomputations: u64,
    /// MACs with at least one exactly-zero operand (dense mode only).
    pub zero_operand_macs: u64,
}

impl MacStats {
    pub fn skip_fraction(&self) -> f64 {
        if self.macs_total == 0 {
            0.0
        } else {
            self.macs_skipped as f64 / self.macs_total as f64
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.macs_total == self.macs_executed + self.macs_skipped
    }
}

impl AddAssign for MacStats {
    fn add_assign(&mut self, o: MacStats) {
        self.macs_total += o.macs_total;
        self.macs_executed += o.macs_executed;
        self.macs_skipped += o.macs_skipped;
        self.comparisons += o.comparisons;
        self.divisions += o.divisions;
        self.shifts += o.shifts;
        self.threshold_precomputations += o.threshold_precomputations;
        self.zero_operand_macs += o.zero_operand_macs;
    }
}

impl Add for MacStats {
    type Output = MacStats;
    fn add(mut self, o: MacStats) -> MacStats {
        self += o;
        self
    }
}

impl std::iter::Sum for MacStats {
    fn sum<I: Iterator<Item = MacStats>>(iter: I) -> MacStats {
        iter.fold(MacStats::default(), |a, b| a + b)
    }
}

/// Execution mode of a fixed-point forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every MAC executed.
    Dense,
    /// Threshold pruning with reuse-aware control terms.
    Unit,
    /// ReLUs become FATReLUs; MACs on zero activations are skipped.
    FatRelu,
    /// FATReLU activations feeding threshold-pruned layers.
    UnitFatRelu,
    /// Statically pruned weights; MACs on zero weights are skipped.
    TrainTimePruned,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Dense,
        Mode::Unit,
        Mode::FatRelu,
        Mode::UnitFatRelu,
        Mode::TrainTimePruned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Unit => "unit",
            Mode::FatRelu => "fatrelu",
            Mode::UnitFatRelu => "unit+fatrelu",
            Mode::TrainTimePruned => "ttp",
        }
    }

    pub fn uses_thresholds(self) -> bool {
        matches!(self, Mode::Unit | Mode::UnitFatRelu)
    }

    pub fn uses_fatrelu(self) -> bool {
        matches!(self, Mode::FatRelu | Mode::UnitFatRelu)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_sum_fieldwise() {
        let a = MacStats {
            macs_total: 5,
            macs_executed: 2,
            macs_skipped: 3,
            comparisons: 5,
            ..Default::default()
        };
        let s: MacStats = [a, a, a].into_iter().sum();
        assert_eq!(s.macs_total, 15);
        assert_eq!(s.comparisons, 15);
        assert!(s.is_consistent());
        assert!((s.skip_fraction() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("sparse".parse::<Mode>().is_err());
    }
}
