//! `unit` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 internal invariant violation.

pub mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::{collect_samples, quantize_model, CalibrationError, DEFAULT_SEED};
use crate::costmodel::CostProfile;
use crate::divapprox::{
    approx_ratio_bitmask, exponent_bitshift, exponent_treesearch, DivMethod, Exponent, TreePivots,
};
use crate::kernels::{mnist_architecture, InferenceConfig, KernelError, Mode, ModelGraph};
use crate::modelio::{apply_magnitude_pruning, load_idx, load_model, save_model, Dataset, ModelIoError};
use crate::numerics::QFormat;
use crate::trainer::{evaluate, train_with_progress, EvalError, EvalResult, TrainConfig, TrainError};
use report::*;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::MissingThresholds { .. } | KernelError::NotQuantized | KernelError::BadGroups { .. } => {
                CliError::Usage(e.to_string())
            }
            e => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Kernel(k) => k.into(),
            EvalError::NeedsFixedModel(_) => CliError::Usage(e.to_string()),
            EvalError::EmptyData => CliError::Data(e.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::BadPercentile(_) => CliError::Usage(e.to_string()),
            CalibrationError::EmptyBatch => CliError::Data(e.to_string()),
            CalibrationError::Kernel(k) => k.into(),
            e => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "unit", version, about = "Threshold-based MAC skipping for fixed-point CNN inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the float MNIST model.
    Train(TrainArgs),
    /// Calibrate thresholds and emit a fixed-point model.
    Calibrate(CalibrateArgs),
    /// Evaluate a model under one inference mode.
    Eval(EvalArgs),
    /// Count division-approximation work and verify its error bounds.
    BenchDiv(BenchArgs),
    /// Calibrate and evaluate over a list of percentiles; writes CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct DataArg {
    /// Directory holding the MNIST IDX files.
    #[arg(long, env = "UNIT_DATA_DIR", default_value = "data/mnist")]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value = "mnist")]
    arch: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Train on at most this many samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Report test accuracy on at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    percentile: f64,
    /// Threshold groups per layer (must divide every control dimension).
    #[arg(long, default_value_t = 1)]
    groups: usize,
    /// Fixed-point format, `q8.8` or `q16.16`.
    #[arg(long, default_value = "q8.8")]
    format: String,
    /// Held-out training samples used for calibration.
    #[arg(long, default_value_t = 1000)]
    calib_samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// `msp430` or a JSON cost profile file.
    #[arg(long, default_value = "msp430")]
    profile: String,
    #[arg(long)]
    c_mul: Option<f64>,
    #[arg(long)]
    c_add: Option<f64>,
    #[arg(long)]
    c_cmp: Option<f64>,
    #[arg(long)]
    c_div: Option<f64>,
    #[arg(long)]
    c_shift: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    model: PathBuf,
    /// dense, unit, fatrelu, unit+fatrelu or ttp.
    #[arg(long, default_value = "unit")]
    mode: String,
    /// exact, shift, shift:N, tree or mask.
    #[arg(long, default_value = "exact")]
    div: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    profile: ProfileArgs,
    /// Post-ReLU threshold for the FATReLU modes (real units).
    #[arg(long, default_value_t = 0.1)]
    fatrelu_threshold: f32,
    /// Global magnitude-pruning sparsity for mode ttp.
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    /// Baseline accuracy for the drop; defaults to a dense run of the same model.
    #[arg(long)]
    baseline_accuracy: Option<f64>,
    /// Evaluate the first N test samples only.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// all, exact, shift, shift:N, tree or mask.
    #[arg(long, default_value = "all")]
    method: String,
    /// Random pairs for the bit-mask check.
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 16)]
    word_bits: u32,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArg,
    /// Float (or fixed) model to calibrate.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90")]
    percentiles: Vec<f64>,
    #[arg(long, default_value = "exact")]
    div: String,
    #[arg(long, default_value = "q8.8")]
    format: String,
    #[arg(long, default_value_t = 1000)]
    calib_samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    profile: ProfileArgs,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run with the process arguments and return the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchDiv(a) => cmd_bench_div(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn data_dir(arg: &DataArg) -> Result<&Path, CliError> {
    if !arg.data.is_dir() {
        return Err(CliError::Usage(format!("dataset not found: {}", arg.data.display())));
    }
    Ok(&arg.data)
}

fn load_split(dir: &Path, prefix: &str) -> Result<Dataset, CliError> {
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.is_file() || !labels.is_file() {
        return Err(CliError::Usage(format!(
            "dataset not found: expected {} and {}",
            images.display(),
            labels.display()
        )));
    }
    Ok(load_idx(&images, &labels)?)
}

/// Training samples held out for calibration: the last tenth.
pub fn calibration_split_start(len: usize) -> usize {
    len - len / 10
}

fn parse_format(s: &str) -> Result<QFormat, CliError> {
    let bad = || CliError::Usage(format!("bad number format `{s}` (expected e.g. q8.8 or q16.16)"));
    let rest = s.strip_prefix(['q', 'Q']).ok_or_else(bad)?;
    let (i, f) = rest.split_once('.').ok_or_else(bad)?;
    let (i, f): (u8, u8) = (i.parse().map_err(|_| bad())?, f.parse().map_err(|_| bad())?);
    QFormat::new(i.checked_sub(1).ok_or_else(bad)?, f).map_err(|e| CliError::Usage(e.to_string()))
}

fn parse_div(s: &str) -> Result<DivMethod, CliError> {
    s.parse().map_err(|e: crate::divapprox::DivError| CliError::Usage(e.to_string()))
}

fn load_profile(a: &ProfileArgs) -> Result<CostProfile, CliError> {
    let mut p = if a.profile == "msp430" {
        CostProfile::msp430()
    } else {
        CostProfile::from_json_file(Path::new(&a.profile)).map_err(CliError::Usage)?
    };
    let overrides = [
        (&mut p.c_mul, a.c_mul),
        (&mut p.c_add, a.c_add),
        (&mut p.c_cmp, a.c_cmp),
        (&mut p.c_div, a.c_div),
        (&mut p.c_shift, a.c_shift),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    p.validate().map_err(CliError::Usage)?;
    Ok(p)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    if a.arch != "mnist" {
        return Err(CliError::Usage(format!("unknown architecture `{}` (only `mnist`)", a.arch)));
    }
    let dir = data_dir(&a.data)?;
    let full = load_split(dir, "train")?;
    let test = load_split(dir, "t10k")?;
    let mut train = full.subset(0..calibration_split_start(full.len()));
    if let Some(n) = a.train_limit {
        train = train.take(n);
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        momentum: a.momentum,
    };
    if a.epochs == 0 {
        eprintln!("warning: --epochs 0 saves the initialized, untrained weights");
    }
    let model = train_with_progress(&mnist_architecture(), &train, &cfg, |e| {
        eprintln!(
            "epoch {}: loss {:.4}, train accuracy {:.4}",
            e.epoch + 1,
            e.mean_loss,
            e.train_accuracy
        )
    })
    .map_err(|e| match e {
        TrainError::InvalidConfig(_) | TrainError::ShapeMismatch(_) => CliError::Usage(e.to_string()),
        e => CliError::Internal(e.to_string()),
    })?;
    save_model(&model, &a.out)?;
    let profile = CostProfile::msp430();
    let dense = InferenceConfig::new(Mode::Dense);
    let train_eval = evaluate(&model, &train, dense, &profile, 1)?;
    let test = a.limit.map_or(test.clone(), |n| test.take(n));
    let test_eval = evaluate(&model, &test, dense, &profile, 1)?;
    println!("train accuracy {:.4}", train_eval.accuracy());
    println!("test accuracy {:.4}", test_eval.accuracy());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    if !(0.0..=100.0).contains(&a.percentile) {
        return Err(CliError::Usage(format!("percentile {} outside [0, 100]", a.percentile)));
    }
    let fmt = parse_format(&a.format)?;
    let mut model = load_model(&a.model)?;
    model.set_groups(a.groups)?;
    let dir = data_dir(&a.data)?;
    let full = load_split(dir, "train")?;
    let held = full.subset(calibration_split_start(full.len())..full.len()).take(a.calib_samples);
    let batch: Vec<&[f32]> = held.images().collect();
    let table = collect_samples(&model, &batch, crate::calibration::DEFAULT_SAMPLE_CAP, a.seed)?
        .table(a.percentile)?;
    table.apply(&mut model);
    let fixed = quantize_model(&model, fmt).map_err(CliError::from)?;
    save_model(&fixed, &a.out)?;
    for (i, (spec, calib)) in fixed.layers.iter().zip(&table.layers).enumerate() {
        if spec.layer.weights().is_some() {
            println!(
                "layer {i} {}: T = {:?} ({} samples), activation range {:.4}",
                spec.layer.kind().name(),
                calib.thresholds,
                calib.sample_count,
                calib.act_max_abs
            );
        }
    }
    println!("wrote {} ({fmt}, p = {})", a.out.display(), a.percentile);
    Ok(())
}

fn layer_reports(model: &ModelGraph, eval: &EvalResult) -> Vec<LayerReport> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| LayerReport {
            index: i,
            kind: spec.layer.kind().name().to_string(),
            stats: eval.per_layer[i],
            load: eval.load[i],
            thresholds: spec.calib.thresholds.clone(),
            percentile: spec.calib.percentile,
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mode: Mode = a.mode.parse().map_err(CliError::Usage)?;
    let div = parse_div(&a.div)?;
    let profile = load_profile(&a.profile)?;
    if mode == Mode::TrainTimePruned && !(0.0..1.0).contains(&a.sparsity) {
        return Err(CliError::Usage(format!("sparsity {} outside [0, 1)", a.sparsity)));
    }
    if a.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let model = load_model(&a.model)?;
    let dir = data_dir(&a.data)?;
    let mut test = load_split(dir, "t10k")?;
    if let Some(n) = a.limit {
        test = test.take(n);
    }
    let (run_model, ttp) = if mode == Mode::TrainTimePruned {
        let pruned = apply_magnitude_pruning(&model, a.sparsity);
        let total = pruned.weight_count();
        let zeroed = count_zero_weights(&pruned);
        (
            pruned,
            Some(TtpReport {
                sparsity: a.sparsity,
                weights_total: total,
                weights_zeroed: zeroed,
            }),
        )
    } else {
        (model.clone(), None)
    };
    let config = InferenceConfig::new(mode)
        .with_div(div)
        .with_fatrelu(a.fatrelu_threshold);
    let eval = evaluate(&run_model, &test, config, &profile, a.threads)?;
    let dense = if mode == Mode::Dense {
        eval.clone()
    } else {
        evaluate(&model, &test, InferenceConfig::new(Mode::Dense), &profile, a.threads)?
    };
    let baseline = a.baseline_accuracy.unwrap_or(dense.accuracy());
    if eval.totals != eval.per_layer.iter().copied().sum() || !eval.totals.is_consistent() {
        return Err(CliError::Internal("MAC counters do not add up".into()));
    }
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        mode: mode.name().to_string(),
        div: div.to_string(),
        config: ConfigEcho {
            model: a.model.display().to_string(),
            data: a.data.data.display().to_string(),
            number_format: model.format.map_or("float".to_string(), |f| f.to_string()),
            profile_name: a.profile.profile.clone(),
            profile,
            fatrelu_threshold: a.fatrelu_threshold,
            sparsity: ttp.as_ref().map(|t| t.sparsity),
            limit: a.limit,
            threads: a.threads,
        },
        samples: eval.total,
        accuracy: eval.accuracy(),
        baseline_accuracy: baseline,
        accuracy_drop: eval.accuracy_drop(baseline),
        layers: layer_reports(&run_model, &eval),
        totals: eval.totals,
        skip_fraction: eval.totals.skip_fraction(),
        cost: CostReport {
            cycles: eval.cost.cycles,
            energy_joules: eval.cost.energy_joules,
            cycles_per_inference: eval.cost.cycles / eval.total as f64,
            baseline_cycles: dense.cost.cycles,
            cycle_reduction: if dense.cost.cycles > 0.0 {
                1.0 - eval.cost.cycles / dense.cost.cycles
            } else {
                0.0
            },
        },
        ttp,
    };
    print!("{}", summary_table(&report));
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn count_zero_weights(model: &ModelGraph) -> usize {
    model
        .layers
        .iter()
        .filter_map(|s| s.layer.weights())
        .map(|w| (0..w.len()).filter(|&i| w.real_at(i) == 0.0).count())
        .sum()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn summary_table(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode {}  div {}  samples {}", r.mode, r.div, r.samples);
    let _ = writeln!(
        s,
        "{:>5} {:<8} {:>12} {:>12} {:>12} {:>8} {:>10}",
        "layer", "kind", "macs", "executed", "skipped", "skip%", "divisions"
    );
    for l in r.layers.iter().filter(|l| l.stats.macs_total > 0) {
        let _ = writeln!(
            s,
            "{:>5} {:<8} {:>12} {:>12} {:>12} {:>7.2}% {:>10}",
            l.index,
            l.kind,
            l.stats.macs_total,
            l.stats.macs_executed,
            l.stats.macs_skipped,
            100.0 * l.stats.skip_fraction(),
            l.stats.divisions
        );
    }
    let t = &r.totals;
    let _ = writeln!(
        s,
        "{:>5} {:<8} {:>12} {:>12} {:>12} {:>7.2}% {:>10}",
        "all",
        "",
        t.macs_total,
        t.macs_executed,
        t.macs_skipped,
        100.0 * r.skip_fraction,
        t.divisions
    );
    let _ = writeln!(
        s,
        "accuracy {:.4}  baseline {:.4}  drop {:+.4}",
        r.accuracy, r.baseline_accuracy, r.accuracy_drop
    );
    let _ = writeln!(
        s,
        "cycles/inference {:.0}  dense {:.0}  reduction {:.2}%",
        r.cost.cycles_per_inference,
        r.cost.baseline_cycles / r.samples as f64,
        100.0 * r.cost.cycle_reduction
    );
    if let Some(t) = &r.ttp {
        let _ = writeln!(
            s,
            "magnitude pruning: {} of {} weights zeroed (sparsity {})",
            t.weights_zeroed, t.weights_total, t.sparsity
        );
    }
    s
}

/// Run one division method over its input domain and check its bound.
pub fn bench_method(
    method: DivMethod,
    word_bits: u32,
    samples: u64,
    seed: u64,
    profile: &CostProfile,
) -> MethodBench {
    let mut b = MethodBench {
        method: method.to_string(),
        calls: 0,
        max_shifts: 0,
        mean_shifts: 0.0,
        min_comparisons: 0,
        max_comparisons: 0,
        cycles_per_call: profile.division_cycles(method),
        invariant_ok: true,
        violations: 0,
        ratio_histogram: Vec::new(),
    };
    let top = 1u64 << word_bits;
    let brackets = |x: u64, e: Exponent| match e {
        Exponent::Zero => x == 0,
        Exponent::Bits(n) => x >= 1 << (n - 1) && (n >= 64 || x < 1 << n),
    };
    match method {
        DivMethod::Exact => b.calls = top - 1,
        DivMethod::BitShift { initial_shift } => {
            let mut total = 0;
            for x in 0..top {
                let est = exponent_bitshift(x, initial_shift);
                let want = Exponent::of(x).max(if x == 0 { Exponent::Zero } else { Exponent::Bits(initial_shift) });
                if est.exponent != want || (initial_shift == 0 && !brackets(x, est.exponent)) {
                    b.violations += 1;
                }
                total += est.shifts as u64;
                b.max_shifts = b.max_shifts.max(est.shifts as u64);
            }
            b.calls = top;
            b.mean_shifts = total as f64 / top as f64;
            b.cycles_per_call += b.mean_shifts * profile.c_shift;
        }
        DivMethod::TreeSearch => {
            let pivots = TreePivots::for_word(word_bits);
            b.min_comparisons = u64::MAX;
            for x in 1..top {
                let est = exponent_treesearch(x, &pivots);
                if !brackets(x, est.exponent) {
                    b.violations += 1;
                }
                b.min_comparisons = b.min_comparisons.min(est.comparisons as u64);
                b.max_comparisons = b.max_comparisons.max(est.comparisons as u64);
            }
            b.calls = top - 1;
        }
        DivMethod::BitMask => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.ratio_histogram = vec![0; 8];
            for _ in 0..samples {
                let x = random_normal(&mut rng);
                let t = random_normal(&mut rng);
                let est = approx_ratio_bitmask(x, t).expect("normal inputs") as f64;
                let rel = est / (x as f64 / t as f64).abs();
                if !(rel > 0.5 && rel < 2.0) {
                    b.violations += 1;
                    continue;
                }
                let bin = ((rel.log2() + 1.0) * 4.0).floor() as usize;
                b.ratio_histogram[bin.min(7)] += 1;
            }
            b.calls = samples;
        }
    }
    b.invariant_ok = b.violations == 0;
    b
}

/// Positive normal float whose exponent keeps every pairwise ratio normal.
pub fn random_normal(rng: &mut impl Rng) -> f32 {
    let exp: u32 = rng.gen_range(64..=190);
    let mantissa: u32 = rng.gen_range(0..1 << 23);
    f32::from_bits(exp << 23 | mantissa)
}

fn cmd_bench_div(a: BenchArgs) -> Result<(), CliError> {
    if !(2..=24).contains(&a.word_bits) {
        return Err(CliError::Usage("--word-bits must be in 2..=24 for exhaustive runs".into()));
    }
    let profile = CostProfile {
        word_bits: a.word_bits,
        ..load_profile(&a.profile)?
    };
    let methods = if a.method == "all" {
        vec![
            DivMethod::Exact,
            DivMethod::BitShift { initial_shift: 0 },
            DivMethod::TreeSearch,
            DivMethod::BitMask,
        ]
    } else {
        vec![parse_div(&a.method)?]
    };
    for m in &methods {
        m.validate(a.word_bits).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let results: Vec<MethodBench> = methods
        .iter()
        .map(|&m| bench_method(m, a.word_bits, a.samples, a.seed, &profile))
        .collect();
    println!(
        "{:<8} {:>10} {:>10} {:>11} {:>9} {:>9} {:>12} {:>6}",
        "method", "calls", "max_shift", "mean_shift", "min_cmp", "max_cmp", "cycles/call", "bound"
    );
    for r in &results {
        println!(
            "{:<8} {:>10} {:>10} {:>11.3} {:>9} {:>9} {:>12.2} {:>6}",
            r.method,
            r.calls,
            r.max_shifts,
            r.mean_shifts,
            r.min_comparisons,
            r.max_comparisons,
            r.cycles_per_call,
            if r.invariant_ok { "ok" } else { "FAIL" }
        );
        if !r.ratio_histogram.is_empty() {
            println!("  log2(estimate/exact) histogram over (-1, 1): {:?}", r.ratio_histogram);
        }
    }
    if let Some(path) = &a.report {
        write_json(
            path,
            &BenchReport {
                schema_version: SCHEMA_VERSION,
                tool_version: TOOL_VERSION.to_string(),
                word_bits: a.word_bits,
                profile,
                methods: results.clone(),
            },
        )?;
    }
    if results.iter().any(|r| !r.invariant_ok) {
        return Err(CliError::Internal("a division bound was violated".into()));
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let fmt = parse_format(&a.format)?;
    let div = parse_div(&a.div)?;
    let profile = load_profile(&a.profile)?;
    if let Some(p) = a.percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(CliError::Usage(format!("percentile {p} outside [0, 100]")));
    }
    let model = load_model(&a.model)?;
    let dir = data_dir(&a.data)?;
    let full = load_split(dir, "train")?;
    let held = full.subset(calibration_split_start(full.len())..full.len()).take(a.calib_samples);
    let mut test = load_split(dir, "t10k")?;
    if let Some(n) = a.limit {
        test = test.take(n);
    }
    let batch: Vec<&[f32]> = held.images().collect();
    let samples = collect_samples(&model, &batch, crate::calibration::DEFAULT_SAMPLE_CAP, a.seed)?;
    let mut csv = String::from(
        "percentile,accuracy,baseline_accuracy,accuracy_drop,macs_total,macs_skipped,skip_fraction,cycles_per_inference,cycle_reduction\n",
    );
    let mut baseline: Option<EvalResult> = None;
    for &p in &a.percentiles {
        let mut m = model.clone();
        samples.table(p)?.apply(&mut m);
        let fixed = quantize_model(&m, fmt)?;
        let base = match &baseline {
            Some(b) => b.clone(),
            None => {
                let b = evaluate(&fixed, &test, InferenceConfig::new(Mode::Dense), &profile, a.threads)?;
                baseline = Some(b.clone());
                b
            }
        };
        let r = evaluate(&fixed, &test, InferenceConfig::new(Mode::Unit).with_div(div), &profile, a.threads)?;
        let _ = writeln!(
            csv,
            "{p},{:.6},{:.6},{:.6},{},{},{:.6},{:.1},{:.6}",
            r.accuracy(),
            base.accuracy(),
            r.accuracy_drop(base.accuracy()),
            r.totals.macs_total,
            r.totals.macs_skipped,
            r.totals.skip_fraction(),
            r.cost.cycles / r.total as f64,
            1.0 - r.cost.cycles / base.cost.cycles
        );
    }
    match &a.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}
