use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unit_core::divapprox::*;
use unit_core::numerics::*;

/// Smallest `n` with `x < 2^n`, by search.
fn exponent_oracle(x: u64) -> Exponent {
    if x == 0 {
        return Exponent::Zero;
    }
    Exponent::Bits((0..=64u32).find(|&n| (x as u128) < 1u128 << n).unwrap())
}

#[test]
fn raw_round_trip_is_exhaustive_for_16_bit_words() {
    let fmt = QFormat::Q8_8;
    for raw in fmt.raw_min()..=fmt.raw_max() {
        let v = FixedPoint::from_raw(raw as i64, fmt).to_float();
        assert_eq!(fx_from_float(v, fmt).raw(), raw);
    }
}

#[test]
fn fx_mul_matches_multiply_then_quantize() {
    let fmt = QFormat::Q8_8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100_000 {
        let a: i32 = rng.gen_range(fmt.raw_min()..=fmt.raw_max());
        let b: i32 = rng.gen_range(fmt.raw_min()..=fmt.raw_max());
        // |a·b| < 2^30, so the real product is exact in f64.
        let real = (a as f64 / 256.0) * (b as f64 / 256.0);
        let want = (real * 256.0)
            .round_ties_even()
            .clamp(fmt.raw_min() as f64, fmt.raw_max() as f64) as i32;
        let got = fx_mul(FixedPoint::from_raw(a as i64, fmt), FixedPoint::from_raw(b as i64, fmt));
        assert_eq!(got.raw(), want, "{a} * {b}");
    }
}

#[test]
fn decompose_recompose_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 1_000_000 {
        let v = f32::from_bits(rng.gen());
        if !v.is_normal() {
            assert!(float_decompose(v).is_err());
            continue;
        }
        let d = float_decompose(v).unwrap();
        assert_eq!(d.recompose().to_bits(), v.to_bits());
        assert_eq!(d.sign as u32, v.to_bits() >> 31);
        checked += 1;
    }
}

#[test]
fn estimators_agree_with_log2_oracle_exhaustively() {
    let pivots = TreePivots::for_word(16);
    for x in 0..(1u64 << 16) {
        let want = exponent_oracle(x);
        assert_eq!(exponent_bitshift(x, 0).exponent, want, "shift {x}");
        let t = exponent_treesearch(x, &pivots);
        assert_eq!(t.exponent, want, "tree {x}");
        if x > 0 {
            assert_eq!(t.comparisons, 4);
            let n = want.bits().unwrap();
            assert!(1u64 << (n - 1) <= x && x < 1u64 << n);
        }
        assert!(exponent_bitshift(x, 0).shifts <= 16);
    }
}

#[test]
fn wider_trees_are_exact_and_balanced() {
    let pivots = TreePivots::for_word(32);
    assert_eq!(pivots.depth(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100_000 {
        let x = rng.gen_range(1..1u64 << 32);
        let t = exponent_treesearch(x, &pivots);
        assert_eq!(t.exponent, exponent_oracle(x));
        assert_eq!(t.comparisons, 5);
    }
}

#[test]
fn bitmask_ratio_lies_within_factor_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1_000_000 {
        let x = f32::from_bits(rng.gen_range(64u32..=190) << 23 | rng.gen_range(0..1u32 << 23));
        let t = f32::from_bits(rng.gen_range(64u32..=190) << 23 | rng.gen_range(0..1u32 << 23));
        let r = approx_ratio_bitmask(x, t).unwrap() as f64 / (x as f64 / t as f64);
        assert!(r > 0.5 && r < 2.0, "{x} / {t}: {r}");
    }
}

/// Exact skip decision: `|z|·|c| <= T`.
fn exact_skip(z: u64, c: u64, t: u64) -> bool {
    (z as u128) * (c as u128) <= t as u128
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn initial_shift_quantizes_upward(x in 1u64..1 << 16, s in 0u32..16) {
        let base = exponent_bitshift(x, 0).exponent;
        prop_assert_eq!(exponent_bitshift(x, s).exponent, base.max(Exponent::Bits(s)));
    }

    #[test]
    fn approximate_decisions_differ_only_near_threshold(
        t in 1u64..1 << 24,
        c in 1u64..1 << 15,
        z in 0u64..1 << 15,
    ) {
        let th = RawThreshold::new(t);
        let exact = exact_skip(z, c, t);
        for method in [DivMethod::Exact, DivMethod::BitShift { initial_shift: 0 }, DivMethod::TreeSearch, DivMethod::BitMask] {
            let (bound, _) = ThresholdDivider::new(method, 16).unwrap().bound(&th, c).unwrap();
            let skip = z <= bound;
            let p = z as f64 * c as f64;
            if method == DivMethod::Exact {
                prop_assert_eq!(skip, exact);
            } else if skip != exact {
                prop_assert!(p > t as f64 / 4.0 && p < 4.0 * t as f64, "{:?}: z={} c={} t={}", method, z, c, t);
            }
            // Never drop a product beyond 4T, never keep one below T/4.
            if p > 4.0 * t as f64 { prop_assert!(!skip); }
            if p < t as f64 / 4.0 { prop_assert!(skip); }
        }
    }
}

#[test]
fn zero_control_and_zero_threshold() {
    let d = ThresholdDivider::new(DivMethod::Exact, 16).unwrap();
    assert_eq!(d.bound(&RawThreshold::new(10), 0), Err(DivError::ZeroControlTerm));
    assert_eq!(d.bound(&RawThreshold::new(0), 7).unwrap().0, 0);
    assert_eq!(exact_threshold(0.0, 3.0).unwrap(), 0.0);
    assert_eq!(exact_threshold(10.0, 0.0), Err(DivError::ZeroControlTerm));
}
