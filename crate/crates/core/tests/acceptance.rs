//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 7 12`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use dlpm::cli::{cmd_eval, cmd_sample, cmd_train, write_matrix_csv, DatasetKind, ExperimentConfig, SampleOptions};
use dlpm::model::{Architecture, EpsModel};
use dlpm::rng::{seeded, stream};
use dlpm::sample::{draw_latent, SamplerMethod};
use dlpm::schedule::build_cosine_schedule;
use dlpm::stable::{Isotropy, PositiveStable, StableParams};
use dlpm::train::median_of_means;
use dlpm::verify::{
    decomposition_cf_error, gaussian_reduction_errors, interpolation_factor_range, marginal_and_pair_ks,
    oracle_recovery, scale_identity_error, single_mixing_ks, sum_stability_cf_error,
};

const SEED: u64 = 20_241;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn schedule_identities() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for alpha in [1.5, 1.7, 1.8, 1.9, 2.0] {
        worst = worst.max(scale_identity_error(&build_cosine_schedule(4000, alpha).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-10 && secs < 1.0, format!("max error {worst:.3e}, {secs:.3} s"))
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (i, alpha) in [1.5, 1.7].into_iter().enumerate() {
        let mixing = PositiveStable::new(alpha).unwrap();
        worst = worst.max(decomposition_cf_error(alpha, &mixing, 1_000_000, &mut stream(SEED, 20 + i as u64)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 0.01 && secs < 60.0, format!("sup CF error {worst:.3e}, {secs:.1} s for both tail indices"))
}

fn sum_stability() -> Outcome {
    let pairs = [
        (StableParams::symmetric(1.7, 0.0, 1.0).unwrap(), StableParams::symmetric(1.7, 0.5, 0.6).unwrap()),
        (StableParams::new(1.5, 1.0, 0.2, 0.7).unwrap(), StableParams::new(1.5, -0.4, 0.0, 0.5).unwrap()),
    ];
    let mut worst: f64 = 0.0;
    for (i, (a, b)) in pairs.iter().enumerate() {
        worst = worst.max(sum_stability_cf_error(a, b, 1_000_000, &mut stream(SEED, 30 + i as u64)).unwrap());
    }
    outcome(worst < 0.01, format!("sup CF error {worst:.3e}"))
}

fn single_mixing_variable() -> Outcome {
    let s = build_cosine_schedule(100, 1.7).unwrap();
    let ks = single_mixing_ks(&s, 50, 100_000, &mut stream(SEED, 40)).unwrap();
    outcome(ks < 0.01, format!("KS {ks:.4}"))
}

fn chain_vs_bridge() -> Outcome {
    let mut worst_marginal: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    let mut id = 50;
    for alpha in [1.5, 1.7, 2.0] {
        let s = build_cosine_schedule(100, alpha).unwrap();
        for t in [5, 50, 100] {
            id += 1;
            let (m, p) = marginal_and_pair_ks(&s, t, 100_000, &mut stream(SEED, id)).unwrap();
            worst_marginal = worst_marginal.max(m);
            worst_pair = worst_pair.max(p);
        }
    }
    outcome(
        worst_marginal < 0.01 && worst_pair < 0.01,
        format!("max KS marginal {worst_marginal:.4}, pair {worst_pair:.4}"),
    )
}

fn interpolation_bound() -> Outcome {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, alpha) in [1.5, 1.7].into_iter().enumerate() {
        let s = build_cosine_schedule(100, alpha).unwrap();
        let (a, b) = interpolation_factor_range(&s, 1_000_000, &mut stream(SEED, 70 + i as u64));
        lo = lo.min(a);
        hi = hi.max(b);
    }
    outcome(lo >= 0.0 && hi <= 1.0, format!("range [{lo:.3e}, {hi}]"))
}

fn gaussian_reductions() -> Outcome {
    let e = gaussian_reduction_errors(1000, &mut stream(SEED, 80)).unwrap();
    let worst = e.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 1e-12,
        format!("factor {:.1e}, posterior {:.1e}, DLPM step {:.1e}, DLIM step {:.1e}", e[0], e[1], e[2], e[3]),
    )
}

fn relative_gap(a: f64, b: f64) -> f64 {
    // Coordinates whose gradient is at round-off level are compared on a 1e-6 floor.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_check() -> Outcome {
    let mut rng = seeded(SEED + 8);
    let mut model = EpsModel::new(Architecture::standard(2), &mut rng).unwrap();
    let n = 16;
    let ys = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
    let targets = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=100)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let analytic = model.backward(ys.view(), &ts, targets.view(), &weights, 100).unwrap().grads;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.random_range(0..analytic.len());
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = model.backward(ys.view(), &ts, targets.view(), &weights, 100).unwrap().loss;
        model.params_mut()[i] = orig - h;
        let down = model.backward(ys.view(), &ts, targets.view(), &weights, 100).unwrap().loss;
        model.params_mut()[i] = orig;
        worst = worst.max(relative_gap((up - down) / (2.0 * h), analytic[i]));
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.3e}"))
}

fn oracle_sampler() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (i, alpha) in [1.7, 2.0].into_iter().enumerate() {
        let (dist, (lo, hi)) = oracle_recovery(alpha, 1000, &mut stream(SEED, 90 + i as u64)).unwrap();
        ok &= dist < 1e-6;
        details.push(format!("alpha {alpha}: max distance {dist:.2e}, factor range [{lo:.2e}, {hi:.2e}]"));
    }
    outcome(ok, details.join("; "))
}

/// Trains, samples with DLPM and scores one run of the 2-D benchmark.
fn benchmark_run(kind: DatasetKind, alpha: f64, seed: u64, root: &Path) -> (f64, dlpm::eval::MetricsReport) {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults(kind, alpha);
    cfg.set_seed(seed);
    let dir = root.join(format!("{kind:?}_{alpha}_{seed}"));
    cmd_train(&cfg, Some(&dir)).unwrap();
    let samples = cmd_sample(&dir, &SampleOptions::default()).unwrap();
    let report = cmd_eval(&dir, &samples).unwrap();
    (start.elapsed().as_secs_f64(), report)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn trend(kind: DatasetKind, score: fn(&dlpm::eval::MetricsReport) -> f64) -> (Vec<f64>, Vec<f64>, f64) {
    let root = tempfile::tempdir().unwrap();
    let mut longest: f64 = 0.0;
    let mut by_alpha = Vec::new();
    for alpha in [1.7, 2.0] {
        let mut scores = Vec::new();
        for seed in 1..=5 {
            let (secs, report) = benchmark_run(kind, alpha, seed, root.path());
            longest = longest.max(secs);
            println!("    {kind:?} alpha={alpha} seed={seed}: {} ({secs:.0} s)", serde_json::to_string(&report).unwrap());
            scores.push(score(&report));
        }
        by_alpha.push(scores);
    }
    (by_alpha.remove(0), by_alpha.remove(0), longest)
}

fn stable_tail_trend() -> Outcome {
    let (heavy, gauss, longest) = trend(DatasetKind::Stable2d, |r| r.msle.unwrap_or(f64::INFINITY));
    let (a, b) = (mean(&heavy), mean(&gauss));
    outcome(
        a < b && a < 0.3 && longest <= 1800.0,
        format!("mean tail error alpha=1.7 {a:.4} vs alpha=2.0 {b:.4}, longest run {longest:.0} s"),
    )
}

fn grid_f1_trend() -> Outcome {
    let (heavy, gauss, longest) = trend(DatasetKind::GaussianGrid, |r| r.f1.unwrap_or(0.0));
    let (a, b) = (mean(&heavy), mean(&gauss));
    outcome(
        a > b && a >= 0.65,
        format!("mean F1 alpha=1.7 {a:.4} vs alpha=2.0 {b:.4}, longest run {longest:.0} s"),
    )
}

fn median_of_means_cases() -> Outcome {
    // With one group the estimator is the plain mean of its single value.
    let mean_ok = [0.3, -1.2, 5.5, 2.25].iter().all(|&v| median_of_means(&[v], 1).unwrap() == v)
        && median_of_means(&[0.25; 9], 3).unwrap() == 0.25;
    let groups = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 100.0, 100.0, 100.0];
    let mom = median_of_means(&groups, 3).unwrap();
    outcome(mean_ok && mom == 1.0, format!("M=1 equals mean: {mean_ok}, three groups -> {mom}"))
}

fn dlim_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let mut cfg = ExperimentConfig::defaults(DatasetKind::SinglePoint, 1.7);
    cfg.train.total_steps = 50;
    cfg.train.batch_size = 128;
    cfg.dataset.n_train = 256;
    cfg.eval.n_eval = 200;
    cmd_train(&cfg, Some(&dir)).unwrap();
    let schedule = build_cosine_schedule(100, 1.7).unwrap();
    let latent = draw_latent(&schedule, 1000, 2, Isotropy::Isotropic, &mut seeded(SEED + 13));
    let latent_path = root.path().join("latent.csv");
    write_matrix_csv(&latent_path, latent.view()).unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let opts = SampleOptions {
            method: Some(SamplerMethod::Dlim),
            steps: Some(25),
            latent: Some(latent_path.clone()),
            out: Some(root.path().join(format!("dlim_{i}.csv"))),
            ..SampleOptions::default()
        };
        let out = cmd_sample(&dir, &opts).unwrap();
        files.push(std::fs::read(&out).unwrap());
    }
    let same = files[0] == files[1];
    outcome(same, format!("{} bytes, identical: {same}", files[0].len()))
}

fn verify_command() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dlpm");
    let mut codes = Vec::new();
    for seed in [1, 2, 3] {
        let st = Command::new(bin).args(["verify", "--seed", &seed.to_string()]).output().unwrap();
        codes.push(st.status.code());
        if !st.status.success() {
            print!("{}", String::from_utf8_lossy(&st.stdout));
        }
    }
    let corrupt = Command::new(bin).args(["verify", "--seed", "1", "--corrupt-c-a", "1.0"]).output().unwrap();
    let ok = codes.iter().all(|c| *c == Some(0)) && !corrupt.status.success();
    outcome(ok, format!("exit codes {codes:?}, corrupted run exit {:?}", corrupt.status.code()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 14] = [
        ("schedule identities", schedule_identities),
        ("positive-stable decomposition CF", decomposition),
        ("sum stability CF", sum_stability),
        ("single mixing variable KS", single_mixing_variable),
        ("chain vs bridge KS", chain_vs_bridge),
        ("interpolation factor bound", interpolation_bound),
        ("alpha = 2 reductions", gaussian_reductions),
        ("gradient vs finite differences", gradient_check),
        ("oracle sampler recovery", oracle_sampler),
        ("stable2d tail-error trend", stable_tail_trend),
        ("gaussian grid F1 trend", grid_f1_trend),
        ("median of means", median_of_means_cases),
        ("DLIM determinism", dlim_determinism),
        ("verify command", verify_command),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        failed += usize::from(!o.passed);
        println!(
            "criterion {n:>2} {:<4} {name}: {} [{:.1} s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
