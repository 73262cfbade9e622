//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.
//!
//! MNIST IDX files are read from `UNIT_DATA_DIR`, else `data/mnist` at the
//! workspace root. The trained float model is cached under the cargo
//! target tmp dir; set `UNIT_RETRAIN=1` to retrain from scratch.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unit_core::calibration::{collect_samples, percentile_nearest_rank, quantize_model, CalibrationSamples, DEFAULT_SAMPLE_CAP, DEFAULT_SEED};
use unit_core::cli::calibration_split_start;
use unit_core::cli::report::RunReport;
use unit_core::costmodel::{price, CostProfile};
use unit_core::divapprox::*;
use unit_core::kernels::fixed::SkipPolicy;
use unit_core::kernels::*;
use unit_core::modelio::{apply_magnitude_pruning, load_idx, load_model, save_model, Dataset};
use unit_core::numerics::QFormat;
use unit_core::tensor::{Shape, Tensor};
use unit_core::trainer::{evaluate, train_with_progress, EvalResult, Network, TrainConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_exponent(x: u64) -> Exponent {
    if x == 0 {
        Exponent::Zero
    } else {
        Exponent::Bits(64 - x.leading_zeros())
    }
}

fn estimator_exactness() -> Outcome {
    let pivots = TreePivots::for_word(16);
    let mut bad = 0u32;
    for x in 0..1u64 << 15 {
        let want = oracle_exponent(x);
        bad += (exponent_bitshift(x, 0).exponent != want) as u32;
        bad += (exponent_treesearch(x, &pivots).exponent != want) as u32;
    }
    check(bad == 0, format!("{} operands, {bad} mismatches", 1 << 15))
}

fn random_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Exponents kept clear of the range ends so x/t stays a normal float.
    let exp: u32 = rng.gen_range(64..=190);
    let sign: u32 = rng.gen_range(0..2);
    f32::from_bits(sign << 31 | exp << 23 | rng.gen_range(0..1u32 << 23))
}

fn bitmask_ratio_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    let (mut lo, mut hi) = (f64::MAX, 0f64);
    for _ in 0..1_000_000 {
        let (x, t) = (random_normal(&mut rng), random_normal(&mut rng));
        let est = approx_ratio_bitmask(x, t).map_err(|e| e.to_string())? as f64;
        let r = est / (x as f64 / t as f64).abs();
        lo = lo.min(r);
        hi = hi.max(r);
        bad += !(r > 0.5 && r < 2.0) as u32;
    }
    check(bad == 0, format!("10^6 pairs, ratio in [{lo:.4}, {hi:.4}], {bad} violations"))
}

fn identity_requant() -> Requant {
    Requant::new(QFormat::Q8_8, 1.0, 1.0, 1.0 / 256.0)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let div = ThresholdDivider::new(DivMethod::Exact, 16).unwrap();
    let raw = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(-60..=60) };
    let mut mismatches = 0;
    for _ in 0..100 {
        let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let x: Vec<i32> = (0..m).map(|_| raw(&mut rng)).collect();
        let w: Vec<i32> = (0..m * n).map(|_| raw(&mut rng)).collect();
        let t: u64 = rng.gen_range(0..3000);
        let mut want = vec![0i64; n];
        for i in 0..m {
            for j in 0..n {
                let p = x[i] as i64 * w[i * n + j] as i64;
                if p.unsigned_abs() > t {
                    want[j] += p;
                }
            }
        }
        let want: Vec<i32> = want.iter().enumerate().map(|(j, &a)| identity_requant().apply(a as i128, j)).collect();
        let k = LinearKernel::new(m, n, w, SkipPolicy::Threshold, &[t], div.clone(), identity_requant()).unwrap();
        let got = k.forward_raw(&x, &mut MacStats::default()).unwrap();
        mismatches += (got != want) as u32;

        let oc = rng.gen_range(1..=2);
        let x: Vec<i32> = (0..9).map(|_| raw(&mut rng)).collect();
        let w: Vec<i32> = (0..oc * 4).map(|_| raw(&mut rng)).collect();
        let mut want = Vec::new();
        for o in 0..oc {
            for y in 0..2 {
                for z in 0..2 {
                    let mut acc = 0i64;
                    for a in 0..2 {
                        for b in 0..2 {
                            let p = x[(y + a) * 3 + z + b] as i64 * w[o * 4 + a * 2 + b] as i64;
                            if p.unsigned_abs() > t {
                                acc += p;
                            }
                        }
                    }
                    want.push(identity_requant().apply(acc as i128, o));
                }
            }
        }
        let k = ConvKernel::new((oc, 1, 2, 2), w, SkipPolicy::Threshold, &[t], &div, identity_requant()).unwrap();
        let got = k.forward_raw(&x, 3, 3, &mut MacStats::default()).unwrap();
        mismatches += (got != want) as u32;
    }
    check(mismatches == 0, format!("100 linear + 100 conv instances, {mismatches} mismatches"))
}

fn cost_monotonicity(dense: &EvalResult, unit: &EvalResult) -> Outcome {
    let profile = CostProfile::msp430();
    let mut violations = 0;
    for total in [1u64, 10, 1000, 242_560] {
        for method in [DivMethod::Exact, DivMethod::BitShift { initial_shift: 0 }, DivMethod::TreeSearch, DivMethod::BitMask] {
            let step = (total / 200).max(1);
            let mut last = f64::INFINITY;
            let mut skipped = 0;
            while skipped <= total {
                let s = MacStats {
                    macs_total: total,
                    macs_executed: total - skipped,
                    macs_skipped: skipped,
                    comparisons: total + 16,
                    divisions: 16,
                    shifts: 40,
                    ..Default::default()
                };
                let c = price(&s, method, &profile).cycles;
                violations += (c >= last) as u32;
                last = c;
                skipped += step;
            }
        }
    }
    let reduction = 1.0 - unit.cost.cycles / dense.cost.cycles;
    check(
        violations == 0 && reduction >= 0.20,
        format!("{violations} sweep violations; p=20 prices {:.1}% fewer cycles than dense", 100.0 * reduction),
    )
}

fn percentile_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ps = [0.0, 0.5, 1.0, 5.0, 10.0, 20.0, 33.3, 50.0, 66.7, 80.0, 99.0, 99.9, 100.0];
    let (mut mismatch, mut nonmono) = (0, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(1..300);
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(0..50) as f32 * 0.25).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut last = f32::MIN;
        for &p in &ps {
            let rank = ((p / 100.0 * n as f64).ceil() as usize).max(1);
            let t = percentile_nearest_rank(&v, p).unwrap();
            mismatch += (t != sorted[rank - 1]) as u32;
            nonmono += (t < last) as u32;
            last = t;
        }
    }
    check(mismatch + nonmono == 0, format!("1000 multisets × {} percentiles, {mismatch} mismatches, {nonmono} monotonicity breaks", ps.len()))
}

fn param(n: &mut Network<f64>, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let p = &mut n.params[layer];
    if bias {
        &mut p.bias[i]
    } else {
        &mut p.weights[i]
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0f64;
    let mut count = 0;
    for _ in 0..4 {
        let t = |dims: &[usize], rng: &mut ChaCha8Rng| {
            let shape = Shape::new(dims.to_vec()).unwrap();
            let n = shape.len();
            Tensor::from_f32(shape, (0..n).map(|_| rng.gen_range(-0.8f32..0.8)).collect()).unwrap()
        };
        let (oc, k) = (rng.gen_range(1..=3), rng.gen_range(2..=3));
        let conv_out = 2 * rng.gen_range(2..=3);
        let side = conv_out + k - 1;
        let flat = oc * (conv_out / 2) * (conv_out / 2);
        let classes = rng.gen_range(2..=4);
        let model = ModelGraph::new(
            Shape::new(vec![1, side, side]).unwrap(),
            vec![
                Layer::Conv2d(ConvLayer { weights: t(&[oc, 1, k, k], &mut rng), bias: Some(t(&[oc], &mut rng)), prune: PruneConfig::default() }),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::FatRelu { threshold: 0.05 },
                Layer::Linear(LinearLayer { weights: t(&[flat, classes], &mut rng), bias: Some(t(&[classes], &mut rng)), prune: PruneConfig::default() }),
            ]
            .into_iter()
            .map(LayerSpec::from)
            .collect(),
        );
        let x: Vec<f32> = (0..side * side).map(|_| rng.gen_range(0f32..1.0)).collect();
        let label = rng.gen_range(0..classes);
        let mut net = Network::<f64>::from_model(&model).map_err(|e| e.to_string())?;
        let (_, grads, _) = net.batch_gradients(&[(&x, label)]);
        let h = 1e-6;
        for li in 0..net.params.len() {
            for bias in [false, true] {
                let len = if bias { net.params[li].bias.len() } else { net.params[li].weights.len() };
                for i in 0..len {
                    let orig = *param(&mut net, li, bias, i);
                    *param(&mut net, li, bias, i) = orig + h;
                    let up = net.loss(&x, label);
                    *param(&mut net, li, bias, i) = orig - h;
                    let down = net.loss(&x, label);
                    *param(&mut net, li, bias, i) = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = if bias { grads[li].bias[i] } else { grads[li].weights[i] };
                    worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
                    count += 1;
                }
            }
        }
    }
    check(worst <= 1e-4, format!("{count} parameters, worst relative error {worst:.2e}"))
}

fn data_dir() -> PathBuf {
    std::env::var_os("UNIT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn load_split(prefix: &str) -> Result<Dataset, String> {
    let dir = data_dir();
    load_idx(&dir.join(format!("{prefix}-images-idx3-ubyte")), &dir.join(format!("{prefix}-labels-idx1-ubyte")))
        .map_err(|e| format!("dataset not found under {} ({e}); run scripts/fetch_mnist.sh", dir.display()))
}

/// Everything the MNIST criteria share.
struct Mnist {
    float_accuracy: f64,
    train_note: String,
    test: Dataset,
    samples: CalibrationSamples,
    model: ModelGraph,
    threads: usize,
}

impl Mnist {
    fn load() -> Result<Self, String> {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let full = load_split("train")?;
        let test = load_split("t10k")?;
        let cfg = TrainConfig::default();
        let float_path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-mnist-e{}-s{}.unit", cfg.epochs, cfg.seed));
        let start = Instant::now();
        let (model, train_note) = match load_model(&float_path) {
            Ok(m) if std::env::var_os("UNIT_RETRAIN").is_none() => (m, format!("cached model {}", float_path.display())),
            _ => {
                let train = full.subset(0..calibration_split_start(full.len()));
                let m = train_with_progress(&mnist_architecture(), &train, &cfg, |e| {
                    eprintln!("  epoch {}: loss {:.4}, train accuracy {:.4}", e.epoch + 1, e.mean_loss, e.train_accuracy)
                })
                .map_err(|e| e.to_string())?;
                save_model(&m, &float_path).map_err(|e| e.to_string())?;
                (m, format!("trained {} epochs in {:.0} s", cfg.epochs, start.elapsed().as_secs_f64()))
            }
        };
        let float = evaluate(&model, &test, InferenceConfig::new(Mode::Dense), &CostProfile::msp430(), threads).map_err(|e| e.to_string())?;
        let start = calibration_split_start(full.len());
        let held = full.subset(start..full.len()).take(1000);
        let batch: Vec<&[f32]> = held.images().collect();
        let samples = collect_samples(&model, &batch, DEFAULT_SAMPLE_CAP, DEFAULT_SEED).map_err(|e| e.to_string())?;
        Ok(Self { float_accuracy: float.accuracy(), train_note, test, samples, model, threads })
    }

    fn fixed(&self, p: f64) -> ModelGraph {
        let mut m = self.model.clone();
        self.samples.table(p).unwrap().apply(&mut m);
        quantize_model(&m, QFormat::Q8_8).unwrap()
    }

    fn eval(&self, model: &ModelGraph, mode: Mode) -> EvalResult {
        evaluate(model, &self.test, InferenceConfig::new(mode), &CostProfile::msp430(), self.threads).unwrap()
    }
}

fn zero_threshold_identity(m: &Mnist) -> Outcome {
    let fixed = m.fixed(0.0);
    let dense = PreparedModel::new(&fixed, InferenceConfig::new(Mode::Dense)).unwrap();
    let mut diffs = 0;
    for method in [DivMethod::Exact, DivMethod::BitShift { initial_shift: 0 }, DivMethod::TreeSearch, DivMethod::BitMask] {
        let unit = PreparedModel::new(&fixed, InferenceConfig::new(Mode::Unit).with_div(method)).unwrap();
        for x in m.test.images().take(100) {
            let (a, _) = dense.forward_raw(dense.quantize_input(x)).unwrap();
            let (b, _) = unit.forward_raw(unit.quantize_input(x)).unwrap();
            diffs += (a.as_raw().unwrap() != b.as_raw().unwrap()) as u32;
        }
    }
    check(diffs == 0, format!("100 samples × 4 division methods, {diffs} logit mismatches"))
}

fn reuse_accounting(m: &Mnist, fixed: &ModelGraph, unit: &EvalResult) -> Outcome {
    let n = unit.total as u64;
    let per_inference = unit.totals.macs_total / n;
    let prepared = PreparedModel::new(fixed, InferenceConfig::new(Mode::Unit)).unwrap();
    let chunk = m.test.len().div_ceil(m.threads);
    let worst_linear = std::thread::scope(|s| {
        let handles: Vec<_> = (0..m.test.len())
            .step_by(chunk)
            .map(|start| {
                let prepared = &prepared;
                s.spawn(move || {
                    (start..(start + chunk).min(m.test.len()))
                        .map(|i| {
                            let (_, stats) = prepared.forward_raw(prepared.quantize_input(m.test.image(i))).unwrap();
                            stats[6].divisions
                        })
                        .max()
                        .unwrap_or(0)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).max().unwrap_or(0)
    });
    let conv_div = unit.per_layer[0].divisions + unit.per_layer[3].divisions;
    check(
        per_inference == 242_560 && unit.totals.macs_total.is_multiple_of(n) && worst_linear <= 256 && conv_div == 0,
        format!(
            "macs_total {per_inference}/inference; linear divisions max {worst_linear}, mean {:.1}; conv runtime divisions {conv_div}",
            unit.per_layer[6].divisions as f64 / n as f64
        ),
    )
}

fn baseline_parity(m: &Mnist, fixed: &ModelGraph) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = dir.path().join("p20.unit");
    save_model(fixed, &model).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for mode in ["fatrelu", "ttp"] {
        let path = dir.path().join(format!("{mode}.json"));
        let out = Command::new(env!("CARGO_BIN_EXE_unit"))
            .args(["eval", "--mode", mode, "--limit", "1000", "--threads"])
            .arg(m.threads.to_string())
            .arg("--data")
            .arg(data_dir())
            .arg("--model")
            .arg(&model)
            .arg("--report")
            .arg(&path)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("eval --mode {mode} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        let r: RunReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).map_err(|e| e.to_string())?;
        reports.push(r);
    }
    // Global sort oracle for the pruned set.
    let s = 0.5;
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (li, spec) in fixed.layers.iter().enumerate() {
        if let Some(w) = spec.layer.weights() {
            let real = w.dequantize();
            for (i, v) in real.as_f32().unwrap().iter().enumerate() {
                all.push((v.abs(), li, i));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let want = (s * all.len() as f64).ceil() as usize;
    let pruned = apply_magnitude_pruning(fixed, s);
    let mut wrong = 0;
    for (rank, &(_, li, i)) in all.iter().enumerate() {
        let raw = pruned.layers[li].layer.weights().unwrap().as_raw().unwrap()[i];
        let orig = fixed.layers[li].layer.weights().unwrap().as_raw().unwrap()[i];
        let expect = if rank < want { 0 } else { orig };
        wrong += (raw != expect) as u32;
    }
    let ttp = reports[1].ttp.clone().ok_or("ttp block missing")?;
    let same_schema = reports.iter().all(|r| r.layers.len() == 7 && r.totals.is_consistent());
    check(
        ttp.weights_zeroed == want && wrong == 0 && same_schema && reports[0].ttp.is_none(),
        format!(
            "fatrelu acc {:.4}, ttp acc {:.4} (1000 samples); ttp zeroed {} of {} (ceil(s·N) = {want}), {wrong} oracle mismatches",
            reports[0].accuracy, reports[1].accuracy, ttp.weights_zeroed, ttp.weights_total
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, start: Instant, out: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS [{id:>2}] {name}: {d} ({secs:.1} s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {d} ({secs:.1} s)");
            }
        }
    };

    let t = Instant::now();
    report(1, "exponent estimators exact on [0, 2^15)", t, estimator_exactness());
    let t = Instant::now();
    report(2, "bit-mask ratio within (1/2, 2)", t, bitmask_ratio_bound());
    let t = Instant::now();
    report(3, "pruned kernels equal masked oracle", t, oracle_equivalence());

    let t = Instant::now();
    match Mnist::load() {
        Err(e) => {
            for (id, name) in [(4, "zero-threshold identity"), (5, "MNIST skip/accuracy trade-off"), (6, "reuse accounting"), (7, "cost-model monotonicity"), (8, "baseline parity")] {
                report(id, name, t, Err(e.clone()));
            }
        }
        Ok(m) => {
            let t = Instant::now();
            report(4, "zero threshold gives dense logits", t, zero_threshold_identity(&m));

            let t = Instant::now();
            let p20 = m.fixed(20.0);
            let dense = m.eval(&p20, Mode::Dense);
            let unit = m.eval(&p20, Mode::Unit);
            let base = dense.accuracy();
            let drop20 = 100.0 * (base - unit.accuracy());
            let ok_a = m.float_accuracy >= 0.95 && unit.totals.skip_fraction() >= 0.25 && drop20 <= 2.0;
            let mut high = Vec::new();
            let mut ok_b = false;
            for p in [50.0, 60.0, 70.0, 80.0] {
                let r = m.eval(&m.fixed(p), Mode::Unit);
                let drop = 100.0 * (base - r.accuracy());
                ok_b |= r.totals.skip_fraction() >= 0.60 && drop <= 8.0;
                high.push(format!("p{p}: {:.1}% skipped, drop {drop:.2}", 100.0 * r.totals.skip_fraction()));
            }
            report(
                5,
                "MNIST skip/accuracy trade-off",
                t,
                check(
                    ok_a && ok_b,
                    format!(
                        "{}; float acc {:.4}, Q8.8 dense acc {base:.4}; p20: {:.1}% skipped, drop {drop20:.2} pts; {}",
                        m.train_note,
                        m.float_accuracy,
                        100.0 * unit.totals.skip_fraction(),
                        high.join("; ")
                    ),
                ),
            );

            let t = Instant::now();
            report(6, "reuse accounting", t, reuse_accounting(&m, &p20, &unit));
            let t = Instant::now();
            report(7, "cost-model monotonicity", t, cost_monotonicity(&dense, &unit));
            let t = Instant::now();
            report(8, "FATReLU and TTP baselines", t, baseline_parity(&m, &p20));
        }
    }

    let t = Instant::now();
    report(9, "nearest-rank percentile", t, percentile_oracle());
    let t = Instant::now();
    report(10, "gradient check", t, gradient_check());

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
