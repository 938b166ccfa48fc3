//! Acceptance gate: the full criteria list as one sequential binary that
//! prints a single PASS/FAIL line per criterion and exits nonzero if any
//! fail. Oracles are naive re-derivations, independent of the kernels they
//! judge. The heavyweight criteria (overfit, ablation trend) drive the
//! installed `imnet` binary end to end, so this is also the integration
//! test for the CLI surface.

use std::fs;
use std::panic;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use imnet_core::checkpoint;
use imnet_core::eval::{score_dataset, score_image};
use imnet_core::gradcheck::check_model;
use imnet_core::inconsistency::lccd;
use imnet_core::{GradTape, Report, RunConfig, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type CheckResult = Result<String, String>;
type Check = fn() -> CheckResult;

fn main() {
    let criteria: &[(&str, Check)] = &[
        ("lccd-oracle", lccd_oracle),
        ("rgm-fidelity", rgm_fidelity),
        ("selfcorr-oracle", selfcorr_oracle),
        ("gradient-suite", gradient_suite),
        ("overfit-sanity", overfit_sanity),
        ("ablation-trend", ablation_trend),
        ("proto-round-sweep", proto_round_sweep),
        ("metric-correctness", metric_correctness),
        ("determinism-roundtrip", determinism_roundtrip),
    ];
    // Bare arguments act like libtest name filters; no arguments runs all.
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check)
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {} PASS [{:.1}s] {}", i + 1, name, secs, detail),
            Err(detail) => {
                failures += 1;
                println!("criterion {} {} FAIL [{:.1}s] {}", i + 1, name, secs, detail);
            }
        }
    }
    if failures > 0 {
        eprintln!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic".into())
}

// ------------------------------------------------------------- CLI driving

fn imnet(args: &[&str]) -> Result<Output, String> {
    Command::new(env!("CARGO_BIN_EXE_imnet"))
        .args(args)
        .output()
        .map_err(|e| format!("could not spawn imnet: {e}"))
}

/// Run the CLI and require exit code 0; returns stdout.
fn imnet_ok(args: &[&str]) -> Result<String, String> {
    let out = imnet(args)?;
    if !out.status.success() {
        return Err(format!(
            "imnet {:?} exited {:?}: {}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Pull `key=<float>` out of CLI progress lines.
fn scrape(text: &str, key: &str) -> Result<f64, String> {
    let needle = format!("{key}=");
    text.lines()
        .filter_map(|l| {
            l.split_whitespace()
                .find_map(|w| w.strip_prefix(&needle))
                .and_then(|v| v.parse::<f64>().ok())
        })
        .next_back()
        .ok_or_else(|| format!("no `{needle}` in output:\n{text}"))
}

fn first_loss(text: &str) -> Result<f64, String> {
    let line = text
        .lines()
        .find(|l| l.starts_with("step=1 loss="))
        .ok_or_else(|| format!("no step=1 loss line in output:\n{text}"))?;
    scrape(line, "loss")
}

fn read_report(path: &Path) -> Result<Report, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    Report::from_json(&text).map_err(|e| format!("parse {}: {e}", path.display()))
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| format!("tempdir: {e}"))
}

fn random_tensor<R: Rng>(rng: &mut R, shape: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

// ------------------------------------------------- 1: LCCD vs naive loops

/// Per-cell, per-channel products plus the whole-vector inner product.
fn naive_lccd(fx: &Tensor4<f64>, fy: &Tensor4<f64>) -> Vec<f64> {
    let s = fx.shape();
    let c = s.channels;
    let mut out = Vec::with_capacity(s.cells() * (c + 1));
    for cell in 0..s.cells() {
        let x = &fx.data()[cell * c..(cell + 1) * c];
        let y = &fy.data()[cell * c..(cell + 1) * c];
        for ch in 0..c {
            out.push(x[ch] * y[ch]);
        }
        out.push((0..c).map(|ch| x[ch] * y[ch]).sum());
    }
    out
}

fn lccd_oracle() -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(201);
    for case in 0..100 {
        let shape = Shape4::new(
            1,
            rng.gen_range(2..9usize),
            rng.gen_range(2..9usize),
            rng.gen_range(1..17usize),
        );
        // 64-bit: bit-exact against the naive loop.
        let fx = random_tensor(&mut rng, shape, -2.0, 2.0);
        let fy = random_tensor(&mut rng, shape, -2.0, 2.0);
        let want = naive_lccd(&fx, &fy);
        let mut tape = GradTape::new();
        let a = tape.leaf(fx);
        let b = tape.leaf(fy);
        let got = lccd(&mut tape, a, b).map_err(|e| e.to_string())?;
        if tape.value(got).data() != &want[..] {
            return Err(format!("case {case}: 64-bit mismatch vs naive loop"));
        }

        // 32-bit: unit-range inputs, 1e-6 absolute.
        let fx = random_tensor(&mut rng, shape, -1.0, 1.0);
        let fy = random_tensor(&mut rng, shape, -1.0, 1.0);
        let want = naive_lccd(&fx, &fy);
        let mut tape = GradTape::<f32>::new();
        let a = tape.leaf(fx.cast::<f32>());
        let b = tape.leaf(fy.cast::<f32>());
        let got = lccd(&mut tape, a, b).map_err(|e| e.to_string())?;
        for (g, w) in tape.value(got).data().iter().zip(&want) {
            if (*g as f64 - w).abs() > 1e-6 {
                return Err(format!("case {case}: 32-bit error {} vs 1e-6", (*g as f64 - w).abs()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("took {secs:.1}s, budget 10s"));
    }
    Ok("100 pairs exact in 64-bit, <=1e-6 in 32-bit".into())
}

// ------------------------------------------------------ 2: RGM reference

fn rgm_fidelity() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let data: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let n = data.len();
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor4::from_vec(Shape4::new(1, 1, n, 1), data.clone()).unwrap());
    let out = tape.rgm(x).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (&got, &v) in tape.value(out).data().iter().zip(&data) {
        // Algebraically equal reference evaluated the other way around.
        let want = v / (1.0 + v.exp());
        worst = worst.max((got - want).abs());
    }
    if worst > 1e-7 {
        return Err(format!("worst error {worst:.3e} vs 1e-7"));
    }

    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(Tensor4::from_vec(Shape4::new(1, 1, 2, 1), vec![0.0, 20.0]).unwrap());
    let out = tape.rgm(x).map_err(|e| e.to_string())?;
    if tape.value(out).data()[0] != 0.0 {
        return Err("rgm(0) is not exactly 0".into());
    }
    if tape.value(out).data()[1].abs() >= 1e-7 {
        return Err(format!("|rgm(20)| = {} vs 1e-7", tape.value(out).data()[1].abs()));
    }
    Ok(format!("1e5 scalars worst {worst:.1e}; rgm(0)=0 exact"))
}

// ------------------------------------- 3: self-correlation and pooling

/// Naive cosine matrix: dot / (sqrt(|u|^2 |v|^2) + 1e-8), diagonal -1.
fn naive_selfcorr(features: &Tensor4<f64>) -> Vec<f64> {
    let s = features.shape();
    let (l, c) = (s.height * s.width, s.channels);
    let u = features.data();
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                out[i * l + j] = -1.0;
                continue;
            }
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for k in 0..c {
                dot += u[i * c + k] * u[j * c + k];
                ni += u[i * c + k] * u[i * c + k];
                nj += u[j * c + k] * u[j * c + k];
            }
            out[i * l + j] = dot / ((ni * nj).sqrt() + 1e-8);
        }
    }
    out
}

/// Sort-then-index: row sorted descending (stable over original column
/// order), channel k samples rank round(k*(L-2)/(K-1)), rank 0 when K = 1.
fn naive_percentile_pool(corr: &[f64], l: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l * k);
    for i in 0..l {
        let row = &corr[i * l..(i + 1) * l];
        let mut sorted: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for kk in 0..k {
            let rank = if k == 1 {
                0
            } else {
                ((kk * (l - 2)) as f64 / (k - 1) as f64).round() as usize
            };
            out.push(sorted[rank].1);
        }
    }
    out
}

fn selfcorr_oracle() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(203);

    for _ in 0..10 {
        let shape = Shape4::new(
            1,
            rng.gen_range(2..6usize),
            rng.gen_range(2..6usize),
            rng.gen_range(1..9usize),
        );
        let features = random_tensor(&mut rng, shape, -1.5, 1.5);
        let want = naive_selfcorr(&features);
        let mut tape = GradTape::new();
        let f = tape.leaf(features);
        let corr = tape.self_correlation(f).map_err(|e| e.to_string())?;
        for (g, w) in tape.value(corr).data().iter().zip(&want) {
            if (g - w).abs() > 1e-6 {
                return Err(format!("cosine error {} vs 1e-6", (g - w).abs()));
            }
        }

        // Percentile pooling must match the sort oracle exactly.
        let l = shape.height * shape.width;
        let k = rng.gen_range(1..l.max(2));
        let corr_values = tape.value(corr).data().to_vec();
        let pooled = tape
            .percentile_pool(corr, shape.height, shape.width, k)
            .map_err(|e| e.to_string())?;
        let want = naive_percentile_pool(&corr_values, l, k);
        if tape.value(pooled).data() != &want[..] {
            return Err("percentile pooling differs from sort-then-index oracle".into());
        }
    }

    // Planted copy: distinct random cell vectors with cells 0..4 duplicated
    // into 8..12 of a 4x4 grid. Top pooled channel is exactly 1.0 there.
    let (side, c) = (4usize, 6usize);
    let l = side * side;
    let mut data: Vec<f32> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for cell in 0..4 {
        for ch in 0..c {
            data[(8 + cell) * c + ch] = data[cell * c + ch];
        }
    }
    let features = Tensor4::from_vec(Shape4::new(1, side, side, c), data).unwrap();
    let mut tape = GradTape::<f32>::new();
    let f = tape.leaf(features);
    let corr = tape.self_correlation(f).map_err(|e| e.to_string())?;
    let pooled = tape.percentile_pool(corr, side, side, 3).map_err(|e| e.to_string())?;
    let v = tape.value(pooled);
    let duplicated: Vec<usize> = (0..4).chain(8..12).collect();
    for cell in 0..l {
        let top = v.data()[cell * 3];
        if duplicated.contains(&cell) {
            if top != 1.0 {
                return Err(format!("duplicated cell {cell} tops at {top}, want exactly 1.0"));
            }
        } else if top >= 1.0 {
            return Err(format!("clean cell {cell} tops at {top}, want < 1.0"));
        }
    }
    Ok("cosine <=1e-6, pooling exact, planted copy tops at 1.0".into())
}

// ------------------------------------------------- 4: gradient checking

fn gradient_suite() -> CheckResult {
    let start = Instant::now();
    let config = RunConfig::gradcheck_default();
    let checks = check_model(&config, 1e-4).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for check in &checks {
        worst = worst.max(check.max_rel_err);
        if !check.passed {
            return Err(check.summary());
        }
    }
    // Every architectural stage must be exercised by name.
    for required in [
        "backbone",
        "selfcorr",
        "proto.update",
        "refine.doubt",
        "refine.gate",
        "decoder",
        "composite",
    ] {
        if !checks.iter().any(|c| c.name == required) {
            return Err(format!("no gradient group named {required}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s, budget 120s"));
    }
    Ok(format!("{} groups, worst rel err {worst:.1e}", checks.len()))
}

// ---------------------------------------------------- 5: overfit sanity

const OVERFIT_CONFIG: &str = "\
seed = 7
backbone.channels-per-block = 24,48,96
optimizer.steps = 200
optimizer.batch-size = 8
optimizer.learning-rate = 0.002
";

fn overfit_sanity() -> CheckResult {
    let dir = tempdir()?;
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    let report_path = dir.path().join("report.json");
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, OVERFIT_CONFIG).map_err(|e| e.to_string())?;

    imnet_ok(&["synth", "--out-dir", data.to_str().unwrap(), "--count", "16", "--size", "64", "--seed", "21"])?;
    let log = imnet_ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--deterministic",
    ])?;
    let initial = first_loss(&log)?;
    let final_loss = scrape(&log, "final-loss")?;
    imnet_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ])?;
    let f1 = read_report(&report_path)?.aggregate.combined.f1;

    let detail = format!(
        "loss {initial:.3} -> {final_loss:.3} ({:.1}%), train-set F1 {f1:.4}",
        100.0 * final_loss / initial
    );
    if final_loss >= 0.25 * initial {
        return Err(format!("{detail}; needs < 25% of initial"));
    }
    if f1 < 0.9 {
        return Err(format!("{detail}; needs F1 >= 0.9"));
    }
    Ok(detail)
}

// --------------------------------------------------- 6: ablation trend

const ABLATION_SEEDS: [u64; 3] = [31, 32, 33];
const ABLATION_STEPS: usize = 1875; // 30 epochs of 500 samples at batch 8
const MODE_BUDGET_SECS: f64 = 1800.0;

fn ablation_trend() -> CheckResult {
    let dir = tempdir()?;
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");
    imnet_ok(&["synth", "--out-dir", train_dir.to_str().unwrap(), "--count", "500", "--size", "64", "--seed", "100"])?;
    imnet_ok(&["synth", "--out-dir", test_dir.to_str().unwrap(), "--count", "100", "--size", "64", "--seed", "200"])?;

    let mut means = Vec::new();
    for mode in ["full", "baseline"] {
        let start = Instant::now();
        let mut f1s = Vec::new();
        for seed in ABLATION_SEEDS {
            let cfg = dir.path().join(format!("{mode}-{seed}.cfg"));
            fs::write(
                &cfg,
                format!(
                    "seed = {seed}\nablation-mode = {mode}\noptimizer.steps = {ABLATION_STEPS}\noptimizer.batch-size = 8\n"
                ),
            )
            .map_err(|e| e.to_string())?;
            let ckpt = dir.path().join(format!("{mode}-{seed}.ckpt"));
            let report_path = dir.path().join(format!("{mode}-{seed}.json"));
            imnet_ok(&[
                "train",
                "--data-dir",
                train_dir.to_str().unwrap(),
                "--out",
                ckpt.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
            ])?;
            imnet_ok(&[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--data-dir",
                test_dir.to_str().unwrap(),
                "--report",
                report_path.to_str().unwrap(),
            ])?;
            f1s.push(read_report(&report_path)?.aggregate.combined.f1);
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= MODE_BUDGET_SECS {
            return Err(format!("{mode} mode took {secs:.0}s, budget {MODE_BUDGET_SECS:.0}s"));
        }
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        means.push((mode, mean, f1s));
    }

    let (_, full_mean, full_f1s) = &means[0];
    let (_, base_mean, base_f1s) = &means[1];
    let detail = format!(
        "test F1 full {:.4} (runs {:.3?}) vs baseline {:.4} (runs {:.3?})",
        full_mean, full_f1s, base_mean, base_f1s
    );
    if !full_mean.is_finite() || !base_mean.is_finite() {
        return Err(format!("{detail}; non-finite mean"));
    }
    if *full_mean < base_mean + 0.02 {
        return Err(format!("{detail}; full must lead by >= 0.02"));
    }
    if *full_mean <= 0.5 || *base_mean <= 0.5 {
        return Err(format!("{detail}; both means must exceed 0.5"));
    }
    Ok(detail)
}

// ---------------------------------------------- 7: prototype-round sweep

fn proto_round_sweep() -> CheckResult {
    let dir = tempdir()?;
    let data = dir.path().join("data");
    imnet_ok(&["synth", "--out-dir", data.to_str().unwrap(), "--count", "16", "--size", "64", "--seed", "21"])?;
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "seed = 7\noptimizer.steps = 20\noptimizer.batch-size = 8\n")
        .map_err(|e| e.to_string())?;

    let mut f1s = Vec::new();
    for rounds in ["1", "2", "4", "8"] {
        let ckpt = dir.path().join(format!("r{rounds}.ckpt"));
        let report_path = dir.path().join(format!("r{rounds}.json"));
        imnet_ok(&[
            "train",
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--proto-rounds",
            rounds,
            "--deterministic",
        ])?;
        imnet_ok(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data-dir",
            data.to_str().unwrap(),
            "--report",
            report_path.to_str().unwrap(),
        ])?;
        let report = read_report(&report_path)?;
        if report.protocol != "per-image-mean" {
            return Err(format!("rounds={rounds} report protocol {:?}", report.protocol));
        }
        if report.images.len() != 16 {
            return Err(format!("rounds={rounds} report covers {} images", report.images.len()));
        }
        for s in [report.aggregate.combined, report.aggregate.class1, report.aggregate.class2] {
            if !(s.precision.is_finite() && s.recall.is_finite() && s.f1.is_finite()) {
                return Err(format!("rounds={rounds} report has non-finite scores"));
            }
        }
        f1s.push(report.aggregate.combined.f1);
    }
    Ok(format!("rounds 1,2,4,8 completed; F1 {f1s:.3?}"))
}

// ------------------------------------------------ 8: metric correctness

fn assert_scores(
    what: &str,
    got: imnet_core::Scores,
    precision: f64,
    recall: f64,
    f1: f64,
) -> Result<(), String> {
    for (name, g, w) in [
        ("precision", got.precision, precision),
        ("recall", got.recall, recall),
        ("f1", got.f1, f1),
    ] {
        if (g - w).abs() > 1e-12 {
            return Err(format!("{what}: {name} = {g}, want {w}"));
        }
    }
    Ok(())
}

fn metric_correctness() -> CheckResult {
    // 20x20 grid; truth marks 100 class-1 pixels, pred covers exactly 50.
    let mut truth = vec![0u8; 400];
    let mut pred = vec![0u8; 400];
    truth[..100].fill(1);
    pred[..50].fill(1);
    let s = score_image(&pred, &truth).map_err(|e| e.to_string())?;
    assert_scores("half-covered combined", s.combined, 1.0, 0.5, 2.0 / 3.0)?;
    assert_scores("half-covered class1", s.class1, 1.0, 0.5, 2.0 / 3.0)?;
    // No class-2 pixels anywhere: fully degenerate view scores perfect.
    assert_scores("half-covered class2", s.class2, 1.0, 1.0, 1.0)?;

    // Perfect prediction with positives.
    let mut truth = vec![0u8; 16];
    truth[3] = 1;
    truth[7] = 2;
    let s = score_image(&truth, &truth).map_err(|e| e.to_string())?;
    assert_scores("perfect combined", s.combined, 1.0, 1.0, 1.0)?;

    // All-background prediction against real positives.
    let pred = vec![0u8; 16];
    let s = score_image(&pred, &truth).map_err(|e| e.to_string())?;
    assert_scores("missed combined", s.combined, 0.0, 0.0, 0.0)?;

    // Both empty.
    let empty = vec![0u8; 16];
    let s = score_image(&empty, &empty).map_err(|e| e.to_string())?;
    assert_scores("empty-empty combined", s.combined, 1.0, 1.0, 1.0)?;

    // False alarm: truth empty, pred positive.
    let mut noisy = vec![0u8; 16];
    noisy[0] = 2;
    let s = score_image(&noisy, &empty).map_err(|e| e.to_string())?;
    assert_scores("false-alarm combined", s.combined, 0.0, 1.0, 0.0)?;

    // Aggregation: mean of per-image scores, not pooled pixels.
    let mut t = vec![0u8; 4];
    t[0] = 1;
    let pairs: Vec<(&[u8], &[u8])> = vec![(&t, &t), (&empty[..4], &t)];
    let report = score_dataset(&pairs).map_err(|e| e.to_string())?;
    assert_scores("two-image aggregate", report.aggregate.combined, 0.5, 0.5, 0.5)?;
    if report.protocol != "per-image-mean" {
        return Err(format!("protocol {:?}", report.protocol));
    }
    Ok("hand-counted cases exact within 1e-12".into())
}

// ------------------------------------- 9: determinism and round-trips

const DET_CONFIG: &str = "\
seed = 9
backbone.blocks = 2
backbone.channels-per-block = 8,12
backbone.input-size = 32
optimizer.steps = 8
optimizer.batch-size = 4
";

fn determinism_roundtrip() -> CheckResult {
    let dir = tempdir()?;
    let data = dir.path().join("data");
    imnet_ok(&["synth", "--out-dir", data.to_str().unwrap(), "--count", "8", "--size", "32", "--seed", "5"])?;
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, DET_CONFIG).map_err(|e| e.to_string())?;

    let mut checkpoints = Vec::new();
    let mut masks = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("run{run}.ckpt"));
        imnet_ok(&[
            "train",
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--deterministic",
        ])?;
        checkpoints.push(fs::read(&ckpt).map_err(|e| e.to_string())?);

        let mask = dir.path().join(format!("mask{run}.png"));
        imnet_ok(&[
            "detect",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            data.join("images/00000.png").to_str().unwrap(),
            "--out-mask",
            mask.to_str().unwrap(),
            "--deterministic",
        ])?;
        masks.push(fs::read(&mask).map_err(|e| e.to_string())?);
    }
    if checkpoints[0] != checkpoints[1] {
        return Err("checkpoints differ between identical runs".into());
    }
    if masks[0] != masks[1] {
        return Err("masks differ between identical runs".into());
    }

    // Library round-trip must preserve every byte.
    let ckpt_path = dir.path().join("run0.ckpt");
    let model = checkpoint::load(&ckpt_path).map_err(|e| e.to_string())?;
    let resaved = dir.path().join("resaved.ckpt");
    checkpoint::save(&resaved, &model).map_err(|e| e.to_string())?;
    if fs::read(&resaved).map_err(|e| e.to_string())? != checkpoints[0] {
        return Err("round-tripped checkpoint differs byte-wise".into());
    }

    // Corrupted magic is refused, by the library and by the CLI (exit 1).
    let mut corrupt = checkpoints[0].clone();
    corrupt[0] ^= 0xff;
    let corrupt_path = dir.path().join("corrupt.ckpt");
    fs::write(&corrupt_path, &corrupt).map_err(|e| e.to_string())?;
    if checkpoint::load(&corrupt_path).is_ok() {
        return Err("corrupted magic accepted by loader".into());
    }
    let out = imnet(&[
        "detect",
        "--checkpoint",
        corrupt_path.to_str().unwrap(),
        "--image",
        data.join("images/00000.png").to_str().unwrap(),
        "--out-mask",
        dir.path().join("bad.png").to_str().unwrap(),
    ])?;
    if out.status.code() != Some(1) {
        return Err(format!(
            "detect on corrupted checkpoint exited {:?}, want 1",
            out.status.code()
        ));
    }
    Ok("byte-identical runs, exact round-trip, corrupted magic rejected".into())
}
