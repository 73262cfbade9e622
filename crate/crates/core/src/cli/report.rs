//! JSON report documents. Field order is the serialization order; see
//! `docs/report-schema.md`.

use serde::{Deserialize, Serialize};

use crate::costmodel::CostProfile;
use crate::kernels::MacStats;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub mode: String,
    pub div: String,
    pub config: ConfigEcho,
    pub samples: usize,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub accuracy_drop: f64,
    pub layers: Vec<LayerReport>,
    pub totals: MacStats,
    pub skip_fraction: f64,
    pub cost: CostReport,
    pub ttp: Option<TtpReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub model: String,
    pub data: String,
    pub number_format: String,
    pub profile_name: String,
    pub profile: CostProfile,
    pub fatrelu_threshold: f32,
    pub sparsity: Option<f64>,
    pub limit: Option<usize>,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerReport {
    pub index: usize,
    pub kind: String,
    pub stats: MacStats,
    /// Work done once when the model is loaded.
    pub load: MacStats,
    pub thresholds: Vec<f32>,
    pub percentile: f32,
}

/// Compute-only pricing; data movement is not modeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub cycles: f64,
    pub energy_joules: f64,
    pub cycles_per_inference: f64,
    pub baseline_cycles: f64,
    /// `1 - cycles / baseline_cycles`.
    pub cycle_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtpReport {
    pub sparsity: f64,
    pub weights_total: usize,
    pub weights_zeroed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub word_bits: u32,
    pub profile: CostProfile,
    pub methods: Vec<MethodBench>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodBench {
    pub method: String,
    pub calls: u64,
    pub max_shifts: u64,
    pub mean_shifts: f64,
    pub min_comparisons: u64,
    pub max_comparisons: u64,
    pub cycles_per_call: f64,
    /// Exponent bracketing (shift/tree) or ratio bound (mask) held on every call.
    pub invariant_ok: bool,
    pub violations: u64,
    /// Counts of `log2(estimate / exact)` in eight equal bins over `(-1, 1)`
    /// (mask only).
    pub ratio_histogram: Vec<u64>,
}
