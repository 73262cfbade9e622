//! WebAssembly bindings for the browser demo. Every export takes plain
//! numbers or slices and returns a JSON string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use unit_core::divapprox::{DivMethod, Exponent, RawThreshold, ThresholdDivider};
use unit_core::kernels::fixed::SkipPolicy;
use unit_core::kernels::{LinearKernel, MacStats, Requant};
use unit_core::numerics::QFormat;
use wasm_bindgen::prelude::*;

const WORD_BITS: u32 = 16;
const METHODS: [&str; 4] = ["exact", "shift", "tree", "mask"];

fn exp_json(e: Exponent) -> Value {
    match e {
        Exponent::Zero => Value::Null,
        Exponent::Bits(n) => json!(n),
    }
}

fn divider(method: &str) -> Result<ThresholdDivider, String> {
    let m: DivMethod = method.parse().map_err(|e: unit_core::divapprox::DivError| e.to_string())?;
    ThresholdDivider::new(m, WORD_BITS).map_err(|e| e.to_string())
}

/// Skip bound for one control term under every division method.
pub fn bounds_json(control: u32, threshold: u32) -> Result<Value, String> {
    let t = RawThreshold::new(threshold as u64);
    let mut methods = Vec::new();
    for name in METHODS {
        let entry = match divider(name)?.bound(&t, control as u64) {
            Ok((bound, ops)) => json!({
                "method": name,
                "bound": bound,
                "shifts": ops.shifts,
                "pivot_comparisons": ops.pivot_comparisons,
            }),
            Err(e) => json!({ "method": name, "error": e.to_string() }),
        };
        methods.push(entry);
    }
    Ok(json!({
        "control": control,
        "threshold": threshold,
        "control_exponent": exp_json(Exponent::of(control as u64)),
        "threshold_exponent": exp_json(t.exponent),
        "ratio": if control == 0 { Value::Null } else { json!(threshold as f64 / control as f64) },
        "methods": methods,
    }))
}

fn run_linear(x: &[i32], w: &[i32], n: usize, threshold: u32, method: &str) -> Result<(Vec<i32>, MacStats), String> {
    if n == 0 || w.len() != x.len() * n {
        return Err(format!("{} weights do not form a {}×{n} matrix", w.len(), x.len()));
    }
    let requant = Requant::new(QFormat::Q8_8, 1.0, 1.0, 1.0 / 256.0);
    let k = LinearKernel::new(x.len(), n, w.to_vec(), SkipPolicy::Threshold, &[threshold as u64], divider(method)?, requant)
        .map_err(|e| e.to_string())?;
    let mut stats = MacStats::default();
    let out = k.forward_raw(x, &mut stats).map_err(|e| e.to_string())?;
    Ok((out, stats))
}

/// Which MACs of `x · W` run (`W` is `x.len() × n`, row-major) and the
/// resulting outputs and counters.
pub fn linear_mask_json(x: &[i32], w: &[i32], n: usize, threshold: u32, method: &str) -> Result<Value, String> {
    let (outputs, stats) = run_linear(x, w, n, threshold, method)?;
    let div = divider(method)?;
    let t = RawThreshold::new(threshold as u64);
    let mut mask = Vec::with_capacity(x.len());
    let mut row_bounds = Vec::with_capacity(x.len());
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        if xi == 0 {
            mask.push(vec![false; n]);
            row_bounds.push(Value::Null);
            continue;
        }
        let (bound, _) = div.bound(&t, xi.unsigned_abs() as u64).map_err(|e| e.to_string())?;
        mask.push(row.iter().map(|v| v.unsigned_abs() as u64 > bound).collect());
        row_bounds.push(json!(bound));
    }
    Ok(json!({
        "mask": mask,
        "row_bounds": row_bounds,
        "outputs": outputs,
        "stats": {
            "macs_total": stats.macs_total,
            "macs_executed": stats.macs_executed,
            "macs_skipped": stats.macs_skipped,
            "comparisons": stats.comparisons,
            "divisions": stats.divisions,
            "shifts": stats.shifts,
        },
    }))
}

/// Skip fraction against threshold for a seeded random `m × n` layer.
/// Activations are ReLU-like: a share are exactly zero.
pub fn skip_curve_json(m: usize, n: usize, seed: u64, method: &str, points: usize) -> Result<Value, String> {
    if m == 0 || n == 0 || points < 2 {
        return Err("need m, n >= 1 and at least 2 points".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<i32> = (0..m).map(|_| if rng.gen_bool(0.4) { 0 } else { rng.gen_range(1..=255) }).collect();
    let w: Vec<i32> = (0..m * n).map(|_| rng.gen_range(-255..=255)).collect();
    let max_product = x
        .iter()
        .enumerate()
        .flat_map(|(i, &xi)| w[i * n..(i + 1) * n].iter().map(move |&v| (xi as i64 * v as i64).unsigned_abs()))
        .max()
        .unwrap_or(0);
    let mut curve = Vec::with_capacity(points);
    for k in 0..points {
        let t = (max_product * k as u64 / (points as u64 - 1)).min(u32::MAX as u64) as u32;
        let (_, s) = run_linear(&x, &w, n, t, method)?;
        curve.push(json!({ "threshold": t, "skip_fraction": s.skip_fraction(), "divisions": s.divisions }));
    }
    Ok(json!({ "m": m, "n": n, "method": method, "max_product": max_product, "curve": curve }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bounds(control: u32, threshold: u32) -> Result<String, JsValue> {
    to_js(bounds_json(control, threshold))
}

#[wasm_bindgen]
pub fn linear_mask(x: &[i32], w: &[i32], n: usize, threshold: u32, method: &str) -> Result<String, JsValue> {
    to_js(linear_mask_json(x, w, n, threshold, method))
}

#[wasm_bindgen]
pub fn skip_curve(m: usize, n: usize, seed: u32, method: &str, points: usize) -> Result<String, JsValue> {
    to_js(skip_curve_json(m, n, seed as u64, method, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_for_each_method() {
        let v = bounds_json(3, 100).unwrap();
        let methods = v["methods"].as_array().unwrap();
        assert_eq!(methods[0]["bound"], 33);
        // e(100) = 7, e(3) = 2 → 2^5 - 1.
        assert_eq!(methods[1]["bound"], 31);
        assert_eq!(methods[2]["bound"], 31);
        assert_eq!(v["control_exponent"], 2);
        assert!(bounds_json(0, 5).unwrap()["methods"][0]["error"].is_string());
    }

    #[test]
    fn mask_matches_counters() {
        let x = [0, 2, -3];
        let w = [5, 1, 4, 1, -10, 30];
        let v = linear_mask_json(&x, &w, 2, 8, "exact").unwrap();
        // Products kept are those with |x·w| > 8.
        assert_eq!(v["mask"], json!([[false, false], [false, false], [true, true]]));
        assert_eq!(v["stats"]["macs_executed"], 2);
        assert_eq!(v["stats"]["divisions"], 2);
        assert!(linear_mask_json(&x, &w[..5], 2, 8, "exact").is_err());
        assert!(linear_mask_json(&x, &w, 2, 8, "magic").is_err());
    }

    #[test]
    fn curve_rises_from_zero_to_all() {
        let v = skip_curve_json(16, 8, 1, "shift", 11).unwrap();
        let c = v["curve"].as_array().unwrap();
        let f: Vec<f64> = c.iter().map(|p| p["skip_fraction"].as_f64().unwrap()).collect();
        assert!(f.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*f.last().unwrap(), 1.0);
    }
}
