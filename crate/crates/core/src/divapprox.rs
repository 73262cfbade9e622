//! Division-free estimates of `T / |C|` used by the pruning comparison.
//!
//! Pruning skips a MAC when `|Z| <= T / |C|`. Four ways of producing the
//! right-hand side are provided:
//!
//! * [`DivMethod::Exact`]: integer division, `floor(T / |C|)`. For integer
//!   operands `|Z| > floor(T / |C|)` holds exactly when `|Z|·|C| > T`, so this
//!   reproduces the multiply-then-compare decision bit for bit.
//! * [`DivMethod::BitShift`] and [`DivMethod::TreeSearch`]: both compute the
//!   exponent estimate `e(v)`, the smallest `n` with `v < 2^n`. A MAC is
//!   skipped when `e(|Z|) + e(|C|) <= e(T)`, which is the same as
//!   `|Z| < 2^(e(T) - e(|C|))`. The threshold is therefore a power of two
//!   minus one and the per-MAC test stays a plain integer comparison.
//! * [`DivMethod::BitMask`]: subtracts IEEE-754 exponent fields,
//!   `|T / C| ≈ 2^(E_T - E_C)`, and skips when `|Z| <= 2^(E_T - E_C)`.
//!
//! All three approximations disagree with the exact decision only when the
//! true product lies in `(T/2, 2T)`.
//!
//! Kernels work on raw integer magnitudes. With activation scale `s_x`,
//! weight scale `s_w` and `f` fraction bits, `|x·w| <= T` in real units is
//! `|x_raw·w_raw| <= T·2^(2f) / (s_x·s_w)`, so the binary point only moves
//! the threshold by a constant; it is folded into `T` once at load time.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{float_decompose, NumericsError, F32_EXPONENT_BIAS, F32_MANTISSA_BITS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivError {
    #[error("control term is zero; every dependent MAC is skipped")]
    ZeroControlTerm,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("initial shift {shift} must be below the word size {word_bits}")]
    ShiftTooLarge { shift: u32, word_bits: u32 },
    #[error("pivot table must be strictly increasing powers of two starting at 2")]
    BadPivots,
    #[error("unknown division method `{0}` (expected exact, shift, tree or mask)")]
    UnknownMethod(String),
}

/// Smallest `n` with `|x| < 2^n`, or `Zero` for `x = 0`.
///
/// `Zero` orders below every `Bits(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Exponent {
    Zero,
    Bits(u32),
}

impl Exponent {
    /// Integer-log oracle form: `floor(log2 v) + 1`.
    pub fn of(v: u64) -> Exponent {
        if v == 0 {
            Exponent::Zero
        } else {
            Exponent::Bits(64 - v.leading_zeros())
        }
    }

    pub fn bits(self) -> Option<u32> {
        match self {
            Exponent::Zero => None,
            Exponent::Bits(n) => Some(n),
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Zero => f.write_str("ZERO"),
            Exponent::Bits(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DivMethod {
    #[default]
    Exact,
    BitShift {
        initial_shift: u32,
    },
    TreeSearch,
    BitMask,
}

impl DivMethod {
    pub fn name(self) -> &'static str {
        match self {
            DivMethod::Exact => "exact",
            DivMethod::BitShift { .. } => "shift",
            DivMethod::TreeSearch => "tree",
            DivMethod::BitMask => "mask",
        }
    }

    pub fn validate(self, word_bits: u32) -> Result<(), DivError> {
        match self {
            DivMethod::BitShift { initial_shift } if initial_shift >= word_bits => {
                Err(DivError::ShiftTooLarge {
                    shift: initial_shift,
                    word_bits,
                })
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DivMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivMethod::BitShift { initial_shift } if *initial_shift > 0 => {
                write!(f, "shift:{initial_shift}")
            }
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for DivMethod {
    type Err = DivError;

    /// Accepts `exact`, `shift`, `shift:N`, `tree`, `mask`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(DivMethod::Exact),
            "shift" => Ok(DivMethod::BitShift { initial_shift: 0 }),
            "tree" => Ok(DivMethod::TreeSearch),
            "mask" => Ok(DivMethod::BitMask),
            other => other
                .strip_prefix("shift:")
                .and_then(|n| n.parse().ok())
                .map(|initial_shift| DivMethod::BitShift { initial_shift })
                .ok_or_else(|| DivError::UnknownMethod(other.to_string())),
        }
    }
}

/// Result of one bit-shift exponent estimate with its shift count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftEstimate {
    pub exponent: Exponent,
    pub shifts: u32,
}

/// Count right shifts until the magnitude reaches zero.
///
/// The count starts at `initial_shift` (one multi-bit shift), so the result
/// is `max(e(x), initial_shift)` for `x > 0`.
pub fn exponent_bitshift(x: u64, initial_shift: u32) -> ShiftEstimate {
    if x == 0 {
        return ShiftEstimate {
            exponent: Exponent::Zero,
            shifts: 0,
        };
    }
    let mut shifts = 0;
    let mut v = x;
    let mut n = 0;
    if initial_shift > 0 {
        v = v.checked_shr(initial_shift).unwrap_or(0);
        n = initial_shift;
        shifts += 1;
    }
    while v != 0 {
        v >>= 1;
        n += 1;
        shifts += 1;
    }
    ShiftEstimate {
        exponent: Exponent::Bits(n),
        shifts,
    }
}

/// Balanced comparison tree over power-of-two pivots.
///
/// Leaves are the exponents `1..=pivots.len() + 1`; leaf `n` covers
/// `[2^(n-1), 2^n)`. The default table for word size ω holds the pivots
/// `2^1 ..= 2^(ω-1)`, giving ω leaves and a depth of `ceil(log2 ω)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreePivots {
    nodes: Vec<TreeNode>,
    depth: u32,
    leaves: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TreeNode {
    Split { pivot: u64, left: usize, right: usize },
    Leaf(u32),
}

/// Result of one tree-search estimate with its comparison count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeEstimate {
    pub exponent: Exponent,
    pub comparisons: u32,
}

impl TreePivots {
    pub fn for_word(word_bits: u32) -> Self {
        let exps: Vec<u32> = (1..word_bits).collect();
        Self::from_exponents(&exps).expect("default pivots are valid")
    }

    /// Build from a custom ascending list of pivot exponents `k` (pivot `2^k`).
    ///
    /// The list must be `1, 2, ..., L` so that every leaf maps to exactly one
    /// exponent. Pivot order inside the tree is balanced by index; callers
    /// that want frequent magnitudes nearer the root can supply a `split`
    /// order through [`TreePivots::with_root_order`].
    pub fn from_exponents(exps: &[u32]) -> Result<Self, DivError> {
        if exps.is_empty() || exps.iter().enumerate().any(|(i, &k)| k != i as u32 + 1) {
            return Err(DivError::BadPivots);
        }
        Self::with_root_order(exps, |lo, hi| (lo + hi) / 2)
    }

    /// Build a tree choosing each subtree's pivot index with `choose(lo, hi)`
    /// over the half-open pivot index range `[lo, hi)`.
    pub fn with_root_order(
        exps: &[u32],
        choose: impl Fn(usize, usize) -> usize,
    ) -> Result<Self, DivError> {
        if exps.is_empty() || exps.iter().enumerate().any(|(i, &k)| k != i as u32 + 1) {
            return Err(DivError::BadPivots);
        }
        let mut nodes = Vec::with_capacity(2 * exps.len() + 1);
        let mut depth = 0;
        build(exps, 0, exps.len(), 0, &choose, &mut nodes, &mut depth)?;
        Ok(Self {
            nodes,
            depth,
            leaves: exps.len() as u32 + 1,
        })
    }

    /// Maximum number of pivot comparisons on any path.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn leaves(&self) -> u32 {
        self.leaves
    }
}

fn build(
    exps: &[u32],
    lo: usize,
    hi: usize,
    level: u32,
    choose: &impl Fn(usize, usize) -> usize,
    nodes: &mut Vec<TreeNode>,
    depth: &mut u32,
) -> Result<usize, DivError> {
    let idx = nodes.len();
    if lo == hi {
        // Leaf below pivot index `lo`: values in [2^(lo), 2^(lo+1)) -> n = lo + 1.
        nodes.push(TreeNode::Leaf(lo as u32 + 1));
        *depth = (*depth).max(level);
        return Ok(idx);
    }
    let mid = choose(lo, hi);
    if mid < lo || mid >= hi {
        return Err(DivError::BadPivots);
    }
    nodes.push(TreeNode::Leaf(0));
    let left = build(exps, lo, mid, level + 1, choose, nodes, depth)?;
    let right = build(exps, mid + 1, hi, level + 1, choose, nodes, depth)?;
    nodes[idx] = TreeNode::Split {
        pivot: 1u64 << exps[mid],
        left,
        right,
    };
    Ok(idx)
}

/// Exponent estimate by walking the pivot tree.
///
/// Zero is resolved by the zero test before any pivot comparison. Values at
/// or beyond the largest pivot land in the last leaf.
pub fn exponent_treesearch(x: u64, pivots: &TreePivots) -> TreeEstimate {
    if x == 0 {
        return TreeEstimate {
            exponent: Exponent::Zero,
            comparisons: 0,
        };
    }
    let mut at = 0;
    let mut comparisons = 0;
    loop {
        match pivots.nodes[at] {
            TreeNode::Leaf(n) => {
                return TreeEstimate {
                    exponent: Exponent::Bits(n),
                    comparisons,
                }
            }
            TreeNode::Split { pivot, left, right } => {
                comparisons += 1;
                at = if x < pivot { left } else { right };
            }
        }
    }
}

/// `|x / t| ≈ 2^(E_x - E_t)` from exponent fields only.
///
/// The difference is re-biased and clamped into the normal exponent range
/// so the estimate is always a finite normal power of two.
pub fn approx_ratio_bitmask(x: f32, t: f32) -> Result<f32, DivError> {
    let dx = float_decompose(x)?;
    let dt = float_decompose(t)?;
    let biased = dx.biased_exponent as i32 - dt.biased_exponent as i32 + F32_EXPONENT_BIAS;
    let biased = biased.clamp(1, 254) as u32;
    Ok(f32::from_bits(biased << F32_MANTISSA_BITS))
}

/// Unbiased exponent field of a normal float, `floor(log2 |v|)`.
pub fn exponent_field(v: f32) -> Result<i32, DivError> {
    Ok(float_decompose(v)?.exponent())
}

/// Reference `T / |C|` in full precision.
pub fn exact_threshold(t: f64, c: f64) -> Result<f64, DivError> {
    if c == 0.0 {
        return Err(DivError::ZeroControlTerm);
    }
    Ok(t / c.abs())
}

/// Operation counts spent producing one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DivOps {
    pub shifts: u64,
    pub pivot_comparisons: u64,
}

/// Precomputed per-threshold state shared by every control term of a layer
/// (or group).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawThreshold {
    /// `T` in raw product units.
    pub value: u64,
    /// `e(T)`.
    pub exponent: Exponent,
    /// `floor(log2 T)` via the float exponent field; `None` for `T = 0`.
    pub float_exponent: Option<i32>,
}

impl RawThreshold {
    pub fn new(value: u64) -> Self {
        let float_exponent = if value == 0 {
            None
        } else {
            Some(exponent_field(value as f32).expect("nonzero u64 is a normal f32"))
        };
        Self {
            value,
            exponent: Exponent::of(value),
            float_exponent,
        }
    }
}

/// Produces the integer skip bound for a control magnitude.
///
/// A MAC whose free operand magnitude is `<= bound` is skipped.
#[derive(Debug, Clone)]
pub struct ThresholdDivider {
    method: DivMethod,
    pivots: TreePivots,
}

impl ThresholdDivider {
    pub fn new(method: DivMethod, word_bits: u32) -> Result<Self, DivError> {
        method.validate(word_bits)?;
        Ok(Self {
            method,
            pivots: TreePivots::for_word(word_bits.max(2)),
        })
    }

    pub fn with_pivots(method: DivMethod, pivots: TreePivots) -> Self {
        Self { method, pivots }
    }

    pub fn method(&self) -> DivMethod {
        self.method
    }

    pub fn pivots(&self) -> &TreePivots {
        &self.pivots
    }

    /// Skip bound for a nonzero control magnitude.
    ///
    /// Returns [`DivError::ZeroControlTerm`] for `control == 0`.
    pub fn bound(&self, t: &RawThreshold, control: u64) -> Result<(u64, DivOps), DivError> {
        if control == 0 {
            return Err(DivError::ZeroControlTerm);
        }
        let mut ops = DivOps::default();
        if t.value == 0 {
            // Still pay for the estimate so costs do not depend on T.
            self.estimate(control, &mut ops);
            return Ok((0, ops));
        }
        let bound = match self.method {
            DivMethod::Exact => t.value / control,
            DivMethod::BitShift { .. } | DivMethod::TreeSearch => {
                let ec = self.estimate(control, &mut ops);
                let et = t.exponent.bits().expect("nonzero threshold");
                pow2_minus_one(et as i64 - ec as i64)
            }
            DivMethod::BitMask => {
                let ratio = approx_ratio_bitmask(t.value as f32, control as f32)?;
                let k = exponent_field(ratio)?;
                if k < 0 {
                    0
                } else if k >= 63 {
                    u64::MAX
                } else {
                    1u64 << k
                }
            }
        };
        Ok((bound, ops))
    }

    fn estimate(&self, control: u64, ops: &mut DivOps) -> u32 {
        match self.method {
            DivMethod::BitShift { initial_shift } => {
                let est = exponent_bitshift(control, initial_shift);
                ops.shifts += est.shifts as u64;
                est.exponent.bits().unwrap_or(0)
            }
            DivMethod::TreeSearch => {
                let est = exponent_treesearch(control, &self.pivots);
                ops.pivot_comparisons += est.comparisons as u64;
                est.exponent.bits().unwrap_or(0)
            }
            DivMethod::Exact | DivMethod::BitMask => 0,
        }
    }
}

/// `2^k - 1` for `k >= 1`, zero for `k <= 0`, saturating at `u64::MAX`.
fn pow2_minus_one(k: i64) -> u64 {
    match k.cmp(&0) {
        Ordering::Less | Ordering::Equal => 0,
        Ordering::Greater if k >= 64 => u64::MAX,
        Ordering::Greater => (1u64 << k) - 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitshift_examples() {
        assert_eq!(exponent_bitshift(127, 0).exponent, Exponent::Bits(7));
        assert_eq!(exponent_bitshift(1, 0).exponent, Exponent::Bits(1));
        assert_eq!(exponent_bitshift(22, 0).exponent, Exponent::Bits(5));
        assert_eq!(exponent_bitshift(0, 0).exponent, Exponent::Zero);
        assert_eq!(exponent_bitshift(127, 0).shifts, 7);
        assert_eq!(exponent_bitshift(0xFFFF, 0).shifts, 16);
    }

    #[test]
    fn bitshift_initial_shift_quantizes_upward() {
        assert_eq!(exponent_bitshift(5, 4).exponent, Exponent::Bits(4));
        assert_eq!(exponent_bitshift(127, 4).exponent, Exponent::Bits(7));
        assert_eq!(exponent_bitshift(127, 4).shifts, 4);
        assert_eq!(exponent_bitshift(u64::MAX, 63).exponent, Exponent::Bits(64));
    }

    #[test]
    fn tree_examples() {
        let p = TreePivots::for_word(16);
        assert_eq!(p.depth(), 4);
        assert_eq!(p.leaves(), 16);
        let e = exponent_treesearch(127, &p);
        assert_eq!(e.exponent, Exponent::Bits(7));
        assert_eq!(e.comparisons, 4);
        assert_eq!(exponent_treesearch(0, &p).exponent, Exponent::Zero);
        assert_eq!(exponent_treesearch(1, &p).exponent, Exponent::Bits(1));
        assert_eq!(exponent_treesearch(0xFFFF, &p).exponent, Exponent::Bits(16));
        assert_eq!(TreePivots::for_word(32).depth(), 5);
    }

    #[test]
    fn tree_rejects_gapped_pivots() {
        assert_eq!(
            TreePivots::from_exponents(&[1, 3]),
            Err(DivError::BadPivots)
        );
        assert_eq!(TreePivots::from_exponents(&[]), Err(DivError::BadPivots));
    }

    #[test]
    fn skewed_tree_still_exact() {
        // Root at the smallest pivot: small magnitudes resolve in one step.
        let exps: Vec<u32> = (1..16).collect();
        let p = TreePivots::with_root_order(&exps, |lo, _| lo).unwrap();
        assert_eq!(exponent_treesearch(1, &p).comparisons, 1);
        for v in 1..(1u64 << 16) {
            assert_eq!(exponent_treesearch(v, &p).exponent, Exponent::of(v));
        }
    }

    #[test]
    fn bitmask_examples() {
        assert_eq!(approx_ratio_bitmask(8.0, 2.0).unwrap(), 4.0);
        assert_eq!(approx_ratio_bitmask(12.0, 2.0).unwrap(), 4.0);
        assert_eq!(approx_ratio_bitmask(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(approx_ratio_bitmask(-8.0, 2.0).unwrap(), 4.0);
        assert!(approx_ratio_bitmask(0.0, 1.0).is_err());
        assert!(approx_ratio_bitmask(1.0, f32::NAN).is_err());
    }

    #[test]
    fn bitmask_clamps_exponent_range() {
        let tiny = approx_ratio_bitmask(f32::MIN_POSITIVE, f32::MAX).unwrap();
        assert!(tiny.is_normal());
        let huge = approx_ratio_bitmask(f32::MAX, f32::MIN_POSITIVE).unwrap();
        assert!(huge.is_finite());
    }

    #[test]
    fn exact_threshold_examples() {
        assert_eq!(exact_threshold(10.0, 2.0).unwrap(), 5.0);
        assert_eq!(exact_threshold(10.0, 0.0), Err(DivError::ZeroControlTerm));
        assert_eq!(exact_threshold(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(exact_threshold(10.0, -2.0).unwrap(), 5.0);
    }

    #[test]
    fn parse_methods() {
        assert_eq!("exact".parse::<DivMethod>().unwrap(), DivMethod::Exact);
        assert_eq!(
            "shift:3".parse::<DivMethod>().unwrap(),
            DivMethod::BitShift { initial_shift: 3 }
        );
        assert!("newton".parse::<DivMethod>().is_err());
        assert!(DivMethod::BitShift { initial_shift: 16 }.validate(16).is_err());
    }

    #[test]
    fn divider_bounds() {
        let t = RawThreshold::new(10);
        let exact = ThresholdDivider::new(DivMethod::Exact, 16).unwrap();
        assert_eq!(exact.bound(&t, 2).unwrap().0, 5);
        assert_eq!(exact.bound(&t, 0), Err(DivError::ZeroControlTerm));

        // e(10) = 4, e(2) = 2 -> skip |Z| < 4.
        let shift = ThresholdDivider::new(DivMethod::BitShift { initial_shift: 0 }, 16).unwrap();
        let (b, ops) = shift.bound(&t, 2).unwrap();
        assert_eq!(b, 3);
        assert_eq!(ops.shifts, 2);
        let tree = ThresholdDivider::new(DivMethod::TreeSearch, 16).unwrap();
        let (b, ops) = tree.bound(&t, 2).unwrap();
        assert_eq!(b, 3);
        assert_eq!(ops.pivot_comparisons, 4);

        // floor(log2 10) - floor(log2 2) = 2 -> skip |Z| <= 4.
        let mask = ThresholdDivider::new(DivMethod::BitMask, 16).unwrap();
        assert_eq!(mask.bound(&t, 2).unwrap().0, 4);

        let zero = RawThreshold::new(0);
        for d in [&exact, &shift, &tree, &mask] {
            assert_eq!(d.bound(&zero, 7).unwrap().0, 0);
        }
    }
}
