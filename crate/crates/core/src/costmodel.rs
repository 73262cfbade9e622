//! Compute-only cycle and energy pricing of [`MacStats`].
//!
//! Data movement is not modeled; reported figures cover arithmetic,
//! comparisons and threshold divisions only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divapprox::DivMethod;
use crate::kernels::MacStats;

/// Cycle prices per operation plus a flat energy-per-cycle constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    pub c_mul: f64,
    pub c_add: f64,
    pub c_cmp: f64,
    pub c_div: f64,
    pub c_shift: f64,
    /// Joules per cycle.
    pub energy_per_cycle: f64,
    /// Word size used to size the comparison tree.
    #[serde(default = "default_word_bits")]
    pub word_bits: u32,
}

fn default_word_bits() -> u32 {
    16
}

impl CostProfile {
    /// 16-bit MSP430-class MCU: hardware multiply ~77 cycles, add 6,
    /// branch 2-4 (3 used), divide priced like a multiply, 1-cycle shifts.
    /// The energy figure (~0.35 nJ/cycle) is a ballpark for an FRAM MCU
    /// at 3 V and should be overridden for real comparisons.
    pub fn msp430() -> Self {
        Self {
            c_mul: 77.0,
            c_add: 6.0,
            c_cmp: 3.0,
            c_div: 77.0,
            c_shift: 1.0,
            energy_per_cycle: 0.35e-9,
            word_bits: 16,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read profile {}: {e}", path.display()))?;
        let p: CostProfile = serde_json::from_str(&text)
            .map_err(|e| format!("bad profile {}: {e}", path.display()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.c_mul,
            self.c_add,
            self.c_cmp,
            self.c_div,
            self.c_shift,
            self.energy_per_cycle,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("cost profile entries must be finite and non-negative".into());
        }
        if !(2..=64).contains(&self.word_bits) {
            return Err("word_bits must be in 2..=64".into());
        }
        Ok(())
    }

    /// Pivot comparisons per tree-search call, `ceil(log2 ω)`.
    pub fn tree_depth(&self) -> u32 {
        self.word_bits.next_power_of_two().trailing_zeros()
    }

    /// Cycles charged per division call, excluding bit-shift steps (those
    /// are priced from the recorded shift count).
    pub fn division_cycles(&self, method: DivMethod) -> f64 {
        match method {
            DivMethod::Exact => self.c_div,
            DivMethod::BitShift { .. } => self.c_cmp,
            DivMethod::TreeSearch => self.tree_depth() as f64 * self.c_cmp,
            DivMethod::BitMask => 2.0 * self.c_add + self.c_cmp,
        }
    }
}

impl Default for CostProfile {
    fn default() -> Self {
        Self::msp430()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cost {
    pub cycles: f64,
    pub energy_joules: f64,
}

/// Price executed work:
/// `executed·(mul+add) + comparisons·cmp + divisions·div(method) + shifts·shift`.
pub fn price(stats: &MacStats, method: DivMethod, profile: &CostProfile) -> Cost {
    let cycles = stats.macs_executed as f64 * (profile.c_mul + profile.c_add)
        + stats.comparisons as f64 * profile.c_cmp
        + stats.divisions as f64 * profile.division_cycles(method)
        + stats.shifts as f64 * profile.c_shift;
    Cost {
        cycles,
        energy_joules: cycles * profile.energy_per_cycle,
    }
}
