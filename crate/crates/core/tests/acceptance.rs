//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Training-based criteria share fixtures through `OnceLock` and serialize
//! heavy or timing-sensitive work behind a single lock so wall-clock budgets
//! hold under the default parallel test harness.

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use heatnet_core::config::RunConfig;
use heatnet_core::events::synth::{synth_generate, SynthConfig};
use heatnet_core::events::Split;
use heatnet_core::fusion::FusionMode;
use heatnet_core::net::StreamMask;
use heatnet_core::profiler;
use heatnet_core::train::{evaluate_checkpoint, train, EvalOptions, EvalResult, TrainOutcome};
use heatnet_core::verify;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn tmp_root(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("heatnet-accept-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&d).ok();
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------- C1

#[test]
fn criterion_1_spectral_suite() {
    let t0 = Instant::now();
    let r = verify::spectral_suite(0xACCE97);
    let elapsed = t0.elapsed().as_secs_f64();
    let spectral_ok = r
        .checks
        .iter()
        .filter(|c| c.name.contains("dct2") || c.name.contains("round trip") || c.name.contains("isometry"))
        .all(|c| c.passed);
    report(
        "1 (dct round-trip, isometry, brute-force oracle)",
        spectral_ok && elapsed < 10.0,
        &format!("{} checks, {elapsed:.2}s", r.checks.len()),
    );
}

// ---------------------------------------------------------------- C2

#[test]
fn criterion_2_heat_physics() {
    let t0 = Instant::now();
    let r = verify::spectral_suite(0x5EED);
    let elapsed = t0.elapsed().as_secs_f64();
    let physics_ok = r
        .checks
        .iter()
        .filter(|c| {
            c.name.contains("identity")
                || c.name.contains("mean conservation")
                || c.name.contains("non-expansion")
                || c.name.contains("semigroup")
        })
        .all(|c| c.passed);
    report(
        "2 (k=0 identity, mean conservation, energy, semigroup)",
        physics_ok && elapsed < 30.0,
        &format!("{elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------- C3

#[test]
fn criterion_3_gradient_suite() {
    let _g = heavy_guard();
    let t0 = Instant::now();
    // single core per the stated budget
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let r = pool.install(|| verify::grad_suite(0xACCE97));
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "3 (per-op and miniature pipeline finite-difference checks)",
        r.passed() && elapsed < 300.0,
        &format!("{} checks, {elapsed:.1}s, single core", r.checks.len()),
    );
    if !r.passed() {
        eprintln!("{}", r.render());
    }
}

// ---------------------------------------------------------------- C4

#[test]
fn criterion_4_fusion_algebra() {
    let t0 = Instant::now();
    let r = verify::fusion_suite(0xACCE97);
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "4 (fusion algebra, routed selection, gumbel statistics)",
        r.passed() && elapsed < 60.0,
        &format!("{} checks, {elapsed:.1}s", r.checks.len()),
    );
    if !r.passed() {
        eprintln!("{}", r.render());
    }
}

// ---------------------------------------------------------------- C5

#[test]
fn criterion_5_end_to_end_learning() {
    let _g = heavy_guard();
    let t0 = Instant::now();
    let root = tmp_root("e2e");
    let data = root.join("data");
    synth_generate(&SynthConfig::clean(&data, 200, 4, 64), 42).unwrap();

    let mut cfg = RunConfig::desk(); // 64x64, T=4, SGD lr 0.001 wd 0.0001, 30 epochs
    cfg.threads = 4;
    // "within 30 epochs": stop once training accuracy saturates
    cfg.early_stop_train_top1 = 0.995;
    let outcome = train::<f32>(&cfg, &data, &root.join("run")).unwrap();

    let best_train = outcome
        .stats
        .iter()
        .map(|s| s.train_top1)
        .fold(f64::NEG_INFINITY, f64::max);
    let opts = EvalOptions {
        split: Split::Test,
        ..Default::default()
    };
    let test = evaluate_checkpoint::<f32>(&outcome.checkpoint_path, &data, &opts).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let detail = format!(
        "train top-1 {best_train:.4} (>=0.99), test top-1 {:.4} (>=0.95), {} epochs, {elapsed:.0}s (<=900)",
        test.top1,
        outcome.stats.len()
    );
    std::fs::remove_dir_all(&root).ok();
    report(
        "5 (end-to-end learning on the moving-bar dataset)",
        best_train >= 0.99 && test.top1 >= 0.95 && elapsed <= 900.0,
        &detail,
    );
}

// ---------------------------------------------------- C6/C7 shared fixture

struct AblationOutcome {
    fused: EvalResult,
    event_only: EvalResult,
    rgb_only: EvalResult,
    fixed: Vec<(FusionMode, EvalResult)>,
    random: EvalResult,
}

static ABLATION: OnceLock<AblationOutcome> = OnceLock::new();

fn ablation_cfg() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.resolution = 32;
    cfg.frames = 4;
    cfg.base_channels = 16;
    cfg.fve_dim = 16;
    cfg.stage_depths = vec![1, 1, 1, 1];
    cfg.epochs = 24;
    cfg.early_stop_train_top1 = 0.0;
    cfg.batch_size = 8;
    cfg.seed = 42;
    cfg.threads = 4;
    cfg
}

fn run_ablation() -> AblationOutcome {
    let root = tmp_root("ablation");
    let data = root.join("data");
    synth_generate(&SynthConfig::noisy_rgb(&data, 200, 4, 32), 42).unwrap();
    let cfg = ablation_cfg();
    let train_mode = |mode: FusionMode| -> TrainOutcome {
        let mut c = cfg.clone();
        c.fusion = mode;
        train::<f32>(&c, &data, &root.join(format!("run-{}", mode.name()))).unwrap()
    };
    let eval = |outcome: &TrainOutcome, mask: StreamMask| -> EvalResult {
        let opts = EvalOptions {
            split: Split::Test,
            mask,
            ..Default::default()
        };
        evaluate_checkpoint::<f32>(&outcome.checkpoint_path, &data, &opts).unwrap()
    };
    let routed = train_mode(FusionMode::Route);
    let fused = eval(&routed, StreamMask::default());
    let event_only = eval(
        &routed,
        StreamMask {
            zero_rgb: true,
            zero_event: false,
        },
    );
    let rgb_only = eval(
        &routed,
        StreamMask {
            zero_rgb: false,
            zero_event: true,
        },
    );
    let fixed = [FusionMode::Mcf, FusionMode::Mdf, FusionMode::Msf]
        .into_iter()
        .map(|m| {
            let o = train_mode(m);
            (m, eval(&o, StreamMask::default()))
        })
        .collect();
    let random = {
        let o = train_mode(FusionMode::Random);
        eval(&o, StreamMask::default())
    };
    std::fs::remove_dir_all(&root).ok();
    AblationOutcome {
        fused,
        event_only,
        rgb_only,
        fixed,
        random,
    }
}

fn ablation() -> &'static AblationOutcome {
    let _g = heavy_guard();
    ABLATION.get_or_init(run_ablation)
}

// ---------------------------------------------------------------- C6

#[test]
fn criterion_6_modality_ablation_ordering() {
    let a = ablation();
    let gap_fe = a.fused.top1 - a.event_only.top1;
    let gap_er = a.event_only.top1 - a.rgb_only.top1;
    report(
        "6 (fused > event-only > rgb-only, gaps >= 2 points)",
        gap_fe >= 0.02 && gap_er >= 0.02,
        &format!(
            "fused {:.4}, event-only {:.4}, rgb-only {:.4}",
            a.fused.top1, a.event_only.top1, a.rgb_only.top1
        ),
    );
}

// ---------------------------------------------------------------- C7

#[test]
fn criterion_7_fusion_ablation_ordering() {
    let a = ablation();
    let min_ok = a
        .fixed
        .iter()
        .all(|(_, r)| a.fused.top1 >= r.top1 - 0.02);
    let vs_random = a.fused.top1 >= a.random.top1;
    let detail = format!(
        "routed {:.4}, random {:.4}, fixed {}",
        a.fused.top1,
        a.random.top1,
        a.fixed
            .iter()
            .map(|(m, r)| format!("{} {:.4}", m.name(), r.top1))
            .collect::<Vec<_>>()
            .join(", ")
    );
    report(
        "7 (routed >= random and >= each fixed strategy - 2 points)",
        min_ok && vs_random,
        &detail,
    );
}

// ---------------------------------------------------------------- C8

#[test]
fn criterion_8_complexity_scaling() {
    let _g = heavy_guard();
    let t0 = Instant::now();
    let r = profiler::scaling_bench(&[32, 64, 128], 32, 16, 11, false).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "8 (heat-layer log-log slope <= 1.8 and < attention slope)",
        r.hco_slope <= 1.8 && r.hco_slope < r.attention_slope && elapsed < 300.0,
        &format!(
            "hco slope {:.3}, attention slope {:.3}, {elapsed:.0}s",
            r.hco_slope, r.attention_slope
        ),
    );
}

// ---------------------------------------------------------------- C9

#[test]
fn criterion_9_ingestion_conservation() {
    let r = verify::ingest_suite(0xACCE97);
    report(
        "9 (event-count conservation and bit-exact disk round trip)",
        r.passed(),
        &format!("{} checks", r.checks.len()),
    );
    if !r.passed() {
        eprintln!("{}", r.render());
    }
}
