//! Statistical and algebraic property battery.
//!
//! Each property draws from its own random stream derived from the suite seed
//! and reports the measured statistic next to its threshold.

use std::fmt::Write as _;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::{
    backward_posterior, bridge_pair, marginal_sample, posterior_mean_interpolated, simulate_chain_pair,
};
use crate::error::Result;
use crate::rng::{stream, DlpmRng};
use crate::sample::{
    dlim_step, dlpm_sample, dlpm_step, strided_timesteps, AnalyticResidual, SamplerConfig,
};
use crate::schedule::{build_cosine_schedule, BridgeDraw, NoiseSchedule};
use crate::stable::{
    sample_stable, sum_stability_params, Isotropy, MultivariateStableSpec, PositiveStable, StableParams,
};
use crate::stats::{hill_estimator, ks_critical_value, ks_two_sample, tail_slope};
use crate::train::median_of_means;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Replaces `c_A` in the decomposition check. Only used to confirm that
    /// the check can fail.
    pub corrupt_c_a: Option<f64>,
    /// Monte Carlo sizes for CF checks (1e6 by default).
    pub cf_samples: usize,
    /// Monte Carlo sizes for KS checks (1e5 by default).
    pub ks_samples: usize,
    /// Number of mixing sequences for the interpolation-factor bound.
    pub bound_sequences: usize,
    /// Draws for the positivity check.
    pub positivity_draws: usize,
}

impl VerifyOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            corrupt_c_a: None,
            cf_samples: 1_000_000,
            ks_samples: 100_000,
            bound_sequences: 1_000_000,
            positivity_draws: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub results: Vec<PropertyResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn find(&self, name: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == name)
    }

    /// Fixed-width table, one line per property.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<50} {:>14} {:>12}  result", "property", "statistic", "threshold");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<50} {:>14.6e} {:>12.3e}  {}",
                r.name,
                r.statistic,
                r.threshold,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        let failed = self.results.iter().filter(|r| !r.passed).count();
        let _ = writeln!(s, "{} properties, {} failed (seed {})", self.results.len(), failed, self.seed);
        s
    }

    fn below(&mut self, name: impl Into<String>, statistic: f64, threshold: f64) {
        let passed = statistic < threshold;
        self.results.push(PropertyResult { name: name.into(), statistic, threshold, passed });
    }

    fn at_most(&mut self, name: impl Into<String>, statistic: f64, threshold: f64) {
        let passed = statistic <= threshold;
        self.results.push(PropertyResult { name: name.into(), statistic, threshold, passed });
    }
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The 21-point grid `-3, -2.7, ..., 3`.
pub fn cf_grid() -> Vec<f64> {
    (0..21).map(|i| -3.0 + 0.3 * i as f64).collect()
}

fn ecf_1d(xs: &[f64], u: f64) -> Complex64 {
    let (mut re, mut im) = (0.0, 0.0);
    for x in xs {
        let (s, c) = (u * x).sin_cos();
        re += c;
        im += s;
    }
    Complex64::new(re, im) / xs.len() as f64
}

fn project(rows: &[Vec<f64>], dir: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest `|sigma_{1->t}^alpha + gamma_{1->t}^alpha - 1|` over `t`.
pub fn scale_identity_error(s: &NoiseSchedule) -> f64 {
    let a = s.alpha();
    (1..=s.steps())
        .map(|t| (s.sigma_cum(t).powf(a) + s.gamma_cum(t).powf(a) - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Largest `|sigma_{1->t}^a - gamma_t^a sigma_{1->t-1}^a - sigma_t^a|` over `t`.
pub fn telescoping_error(s: &NoiseSchedule) -> f64 {
    let a = s.alpha();
    (1..=s.steps())
        .map(|t| {
            (s.sigma_cum(t).powf(a) - s.gamma(t).powf(a) * s.sigma_cum(t - 1).powf(a) - s.sigma(t).powf(a)).abs()
        })
        .fold(0.0, f64::max)
}

/// Sup over the CF grid and 8 random unit directions of the distance between
/// the empirical CF of `sqrt(A) G` and `exp(-|u|^alpha)`.
pub fn decomposition_cf_error(alpha: f64, mixing: &PositiveStable, n: usize, rng: &mut DlpmRng) -> f64 {
    let d = 2;
    let mut rows = Vec::with_capacity(n);
    let mut buf = vec![0.0; d];
    for _ in 0..n {
        mixing.stable_vector(Isotropy::Isotropic, &mut buf, rng);
        rows.push(buf.clone());
    }
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let dir = random_unit(d, rng);
        let xs = project(&rows, &dir);
        for u in cf_grid() {
            let target = (-(u.abs().powf(alpha))).exp();
            worst = worst.max((ecf_1d(&xs, u) - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

/// Sup over the CF grid of the distance between the empirical CF of
/// `X1 + X2` and the CF of the law from [`sum_stability_params`].
pub fn sum_stability_cf_error(p1: &StableParams, p2: &StableParams, n: usize, rng: &mut DlpmRng) -> Result<f64> {
    let a = sample_stable(p1, n, rng)?;
    let b = sample_stable(p2, n, rng)?;
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let law = sum_stability_params(p1, p2)?;
    Ok(cf_grid()
        .into_iter()
        .map(|u| (ecf_1d(&sum, u) - law.characteristic_function(u)).norm())
        .fold(0.0, f64::max))
}

/// KS distance between `Sigma_{1->t}(A_{1:t}) / sigma_{1->t}^2` from full
/// mixing chains and fresh single mixing draws.
pub fn single_mixing_ks(s: &NoiseSchedule, t: usize, n: usize, rng: &mut DlpmRng) -> Result<f64> {
    let mixing = *s.mixing();
    let scale = s.sigma_cum(t).powi(2);
    let mut a = vec![0.0; t];
    let mut chain = Vec::with_capacity(n);
    for _ in 0..n {
        mixing.fill(&mut a, rng);
        chain.push(s.sigma_cumulative_squared_recursive(t, &a)? / scale);
    }
    let mut fresh = vec![0.0; n];
    mixing.fill(&mut fresh, rng);
    Ok(ks_two_sample(&chain, &fresh))
}

/// Largest KS distance over 4 random projections between `X_t` from the full
/// chain and from the bridge, and over 4 random projections of the pairs
/// `(X_{t-1}, X_t)` against the bridge pair.
pub fn marginal_and_pair_ks(s: &NoiseSchedule, t: usize, n: usize, rng: &mut DlpmRng) -> Result<(f64, f64)> {
    let y0 = [0.5, -0.3];
    let mut chain_t = Vec::with_capacity(n);
    let mut chain_pair = Vec::with_capacity(n);
    for _ in 0..n {
        let (prev, cur) = simulate_chain_pair(&y0, s, t, rng, Isotropy::Isotropic)?;
        chain_pair.push([prev.clone(), cur.clone()].concat());
        chain_t.push(cur);
    }
    let mut bridge_t = Vec::with_capacity(n);
    for _ in 0..n {
        bridge_t.push(marginal_sample(&y0, s, t, rng, Isotropy::Isotropic)?.yt);
    }
    let mut bridge_pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let (prev, cur) = bridge_pair(&y0, s, t, rng)?;
        bridge_pairs.push([prev, cur].concat());
    }
    let mut marginal: f64 = 0.0;
    let mut joint: f64 = 0.0;
    for _ in 0..4 {
        let dir = random_unit(2, rng);
        marginal = marginal.max(ks_two_sample(&project(&chain_t, &dir), &project(&bridge_t, &dir)));
        let dir = random_unit(4, rng);
        joint = joint.max(ks_two_sample(&project(&chain_pair, &dir), &project(&bridge_pairs, &dir)));
    }
    Ok((marginal, joint))
}

/// Smallest and largest interpolation factor over `sequences` mixing
/// sequences of length `T`, evaluated at every `t` through the recursion.
pub fn interpolation_factor_range(s: &NoiseSchedule, sequences: usize, rng: &mut DlpmRng) -> (f64, f64) {
    let mixing = *s.mixing();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..sequences {
        let mut sum = 0.0;
        for t in 1..=s.steps() {
            let (g, sg) = (s.gamma(t), s.sigma(t));
            let prev = sum;
            sum = sg * sg * mixing.sample(rng) + g * g * prev;
            let f = crate::schedule::interpolation_factor(g, prev, sum);
            if f.is_nan() {
                return (f64::NAN, f64::NAN);
            }
            lo = lo.min(f);
            hi = hi.max(f);
        }
    }
    (lo, hi)
}

/// Largest relative deviation between the Gaussian-case updates and their
/// DDPM / DDIM counterparts over `n` random states. Returns
/// `(factor, posterior, dlpm_step, dlim_step)`.
pub fn gaussian_reduction_errors(n: usize, rng: &mut DlpmRng) -> Result<[f64; 4]> {
    let s = build_cosine_schedule(100, 2.0)?;
    let abar = |t: usize| s.gamma_cum(t).powi(2);
    let mut worst = [0.0f64; 4];
    for _ in 0..n {
        let t = rng.random_range(1..=s.steps());
        let y0: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = marginal_sample(&y0, &s, t, rng, Isotropy::Isotropic)?;
        let b: BridgeDraw = f.bridge[0];
        let (a_t, a_prev) = (abar(t), abar(t - 1));
        let beta = 1.0 - a_t / a_prev;

        let ddpm_factor = (1.0 - a_t / a_prev) / (1.0 - a_t);
        worst[0] = worst[0].max(rel_err(b.gamma_prime, ddpm_factor));

        let post = backward_posterior(&f.yt, &y0, &s, t, &f.bridge)?;
        let eps: Vec<f64> = f.eps_target.clone();
        let ddpm_var = 2.0 * beta * (1.0 - a_prev) / (1.0 - a_t);
        worst[1] = worst[1].max(rel_err(post.variance[0], ddpm_var));
        for i in 0..2 {
            let ddpm_mean = (f.yt[i] - beta / (1.0 - a_t).sqrt() * eps[i]) / (1.0 - beta).sqrt();
            worst[1] = worst[1].max(rel_err(post.mean[i], ddpm_mean));
        }

        let eps_hat: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..2).map(|_| StandardNormal.sample(rng)).collect();
        let sig_prev = [2.0 * s.sigma_cum(t - 1).powi(2)];
        let sig_cur = [2.0 * s.sigma(t).powi(2) + s.gamma(t).powi(2) * sig_prev[0]];
        let mut y = f.yt.clone();
        let noise = (t > 1).then_some(g.as_slice());
        dlpm_step(&s, t, &mut y, &eps_hat, &sig_prev, &sig_cur, noise);
        let mut z = f.yt.clone();
        dlim_step(&s, t, &mut z, &eps_hat);
        for i in 0..2 {
            let mean = (f.yt[i] - beta / (1.0 - a_t).sqrt() * eps_hat[i]) / (1.0 - beta).sqrt();
            let std = if t > 1 { ddpm_var.sqrt() } else { 0.0 };
            worst[2] = worst[2].max(rel_err(y[i], mean + std * g[i]));

            let x0 = (f.yt[i] - (1.0 - a_t).sqrt() * eps_hat[i]) / a_t.sqrt();
            let ddim = a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * eps_hat[i];
            worst[3] = worst[3].max(rel_err(z[i], ddim));
        }
    }
    Ok(worst)
}

/// Largest deviation between the two algebraic forms of the posterior mean
/// over `n` random heavy-tailed inputs, relative to `max(1, |y_t| / gamma_t)`.
pub fn posterior_form_error(n: usize, rng: &mut DlpmRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for alpha in [1.5, 1.7] {
        let s = build_cosine_schedule(100, alpha)?;
        for _ in 0..n {
            let t = rng.random_range(1..=s.steps());
            let y0: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = marginal_sample(&y0, &s, t, rng, Isotropy::Isotropic)?;
            let a = backward_posterior(&f.yt, &y0, &s, t, &f.bridge)?.mean;
            let b = posterior_mean_interpolated(&f.yt, &y0, &s, t, &f.bridge)?;
            // Both forms cancel terms of size |y_t| / gamma_t, so measure on that scale.
            for i in 0..2 {
                let scale = (f.yt[i].abs() / s.gamma(t)).max(1.0);
                worst = worst.max((a[i] - b[i]).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Largest distance from the data point after DLPM sampling with the exact
/// residual, and the interpolation-factor range seen on the way.
pub fn oracle_recovery(alpha: f64, chains: usize, rng: &mut DlpmRng) -> Result<(f64, (f64, f64))> {
    let s = build_cosine_schedule(100, alpha)?;
    let point = vec![0.8, -0.4];
    let oracle = AnalyticResidual { point: point.clone(), schedule: s.clone() };
    let cfg = SamplerConfig { steps: 100, batch: chains, ..SamplerConfig::default() };
    let out = dlpm_sample(&oracle, &s, &cfg, rng)?;
    let worst = out
        .samples
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&point).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(if out.failed > 0 { f64::INFINITY } else { 0.0 }, f64::max);
    Ok((worst, out.gamma_range.unwrap_or((f64::NAN, f64::NAN))))
}

/// Largest cumulant inconsistency of strided coarse chains.
pub fn stride_cumulant_error(s: &NoiseSchedule) -> Result<f64> {
    let a = s.alpha();
    let mut worst: f64 = 0.0;
    for steps in [2, 4, 10, 25, s.steps()] {
        let mut ts = strided_timesteps(s.steps(), steps)?;
        ts.reverse();
        let c = s.coarsen(&ts)?;
        let mut prev = 0;
        for (k, &t) in ts.iter().enumerate() {
            let k = k + 1;
            worst = worst.max(rel_err(c.gamma(k) * s.gamma_cum(prev), s.gamma_cum(t)));
            let lhs = s.sigma_cum(t).powf(a);
            let rhs = c.gamma(k).powf(a) * s.sigma_cum(prev).powf(a) + c.sigma(k).powf(a);
            worst = worst.max(rel_err(lhs, rhs));
            prev = t;
        }
    }
    Ok(worst)
}

/// Runs every property with the sizes in `opts`.
pub fn run_verification_suite(opts: &VerifyOptions) -> Result<VerificationReport> {
    let mut report = VerificationReport { seed: opts.seed, results: Vec::new() };
    let mut next_stream = 0u64;
    let mut rng = || {
        next_stream += 1;
        stream(opts.seed, next_stream)
    };

    for alpha in [1.5, 1.7, 1.8, 1.9, 2.0] {
        let s = build_cosine_schedule(4000, alpha)?;
        report.below(format!("scale identity T=4000 alpha={alpha}"), scale_identity_error(&s), 1e-10);
        report.below(format!("telescoping T=4000 alpha={alpha}"), telescoping_error(&s), 1e-12);
    }
    let s = build_cosine_schedule(100, 1.7)?;
    report.below("strided cumulants T=100 alpha=1.7", stride_cumulant_error(&s)?, 1e-12);

    for alpha in [1.5, 1.7] {
        let mixing = match opts.corrupt_c_a {
            Some(c) => PositiveStable::with_c_a(alpha, c)?,
            None => PositiveStable::new(alpha)?,
        };
        let err = decomposition_cf_error(alpha, &mixing, opts.cf_samples, &mut rng());
        report.below(format!("decomposition CF alpha={alpha}"), err, 0.01);
    }

    let sym = (StableParams::symmetric(1.7, 0.0, 1.0)?, StableParams::symmetric(1.7, 0.5, 0.6)?);
    report.below("sum stability CF symmetric", sum_stability_cf_error(&sym.0, &sym.1, opts.cf_samples, &mut rng())?, 0.01);
    let skew = (StableParams::new(1.5, 1.0, 0.2, 0.7)?, StableParams::new(1.5, -0.4, 0.0, 0.5)?);
    report.below("sum stability CF skewed", sum_stability_cf_error(&skew.0, &skew.1, opts.cf_samples, &mut rng())?, 0.01);

    for alpha in [1.5, 1.7] {
        let mut r = rng();
        let ps = PositiveStable::new(alpha)?;
        let all_positive = (0..opts.positivity_draws).all(|_| ps.sample(&mut r) > 0.0);
        report.at_most(format!("mixing positivity alpha={alpha}"), if all_positive { 0.0 } else { 1.0 }, 0.0);

        let p = StableParams::symmetric(alpha, 0.0, 1.0)?;
        let xs = sample_stable(&p, opts.cf_samples, &mut rng())?;
        report.below(format!("tail slope + alpha, alpha={alpha}"), (tail_slope(&xs, 0.01) + alpha).abs(), 0.1);
        if alpha == 1.5 {
            report.below("Hill index - alpha, alpha=1.5", (hill_estimator(&xs, 0.01) - alpha).abs(), 0.1);
        }
        let mut a = vec![0.0; opts.cf_samples];
        ps.fill(&mut a, &mut r);
        report.below(
            format!("mixing Hill index - alpha/2, alpha={alpha}"),
            (hill_estimator(&a, 0.01) - alpha / 2.0).abs(),
            0.1,
        );
    }

    let mut r = rng();
    let g = StableParams::symmetric(2.0, 0.0, 0.8)?;
    let stable = sample_stable(&g, opts.ks_samples, &mut r)?;
    let direct: Vec<f64> = (0..opts.ks_samples)
        .map(|_| 0.8 * 2f64.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect();
    report.below("gaussian reduction KS (1-D)", ks_two_sample(&stable, &direct), 0.01);
    let spec = MultivariateStableSpec { dim: 2, alpha: 2.0, mu: vec![0.0; 2], sigma: 0.8, isotropy: Isotropy::Isotropic };
    let mv: Array2<f64> = crate::stable::sample_multivariate_stable(&spec, opts.ks_samples, &mut r)?;
    let col: Vec<f64> = mv.column(0).to_vec();
    report.below("gaussian reduction KS (isotropic)", ks_two_sample(&col, &direct), 0.01);

    let s = build_cosine_schedule(100, 1.7)?;
    report.below("single mixing variable KS t=50", single_mixing_ks(&s, 50, opts.ks_samples, &mut rng())?, 0.01);

    for alpha in [1.5, 1.7, 2.0] {
        let s = build_cosine_schedule(100, alpha)?;
        for t in [5, 50, 100] {
            let (m, j) = marginal_and_pair_ks(&s, t, opts.ks_samples, &mut rng())?;
            report.below(format!("chain vs bridge marginal KS alpha={alpha} t={t}"), m, 0.01);
            report.below(format!("chain vs bridge pair KS alpha={alpha} t={t}"), j, 0.01);
        }
    }

    for alpha in [1.5, 1.7] {
        let s = build_cosine_schedule(100, alpha)?;
        let (lo, hi) = interpolation_factor_range(&s, opts.bound_sequences, &mut rng());
        let outside = if lo >= 0.0 && hi <= 1.0 { 0.0 } else { (0.0 - lo).max(hi - 1.0).max(1.0) };
        report.at_most(format!("interpolation factor in [0,1] alpha={alpha}"), outside, 0.0);
    }

    let [f, p, d, i] = gaussian_reduction_errors(1000, &mut rng())?;
    report.at_most("alpha=2 interpolation factor vs DDPM", f, 1e-12);
    report.at_most("alpha=2 posterior vs DDPM", p, 1e-12);
    report.at_most("alpha=2 DLPM step vs DDPM", d, 1e-12);
    report.at_most("alpha=2 DLIM step vs DDIM", i, 1e-12);
    report.at_most("posterior mean forms agree", posterior_form_error(1000, &mut rng())?, 1e-12);

    let v = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 100.0, 100.0, 100.0];
    report.at_most("median of means three groups", (median_of_means(&v, 3)? - 1.0).abs(), 0.0);
    let one = [3.25];
    report.at_most("median of means M=1", (median_of_means(&one, 1)? - 3.25).abs(), 0.0);

    let mut r = rng();
    let reps = (0..100)
        .filter(|_| {
            let a: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
            let b: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
            ks_two_sample(&a, &b) < ks_critical_value(1000, 1000, 0.01)
        })
        .count();
    report.below("KS calibration misses per 100", (100 - reps) as f64, 6.0);

    for alpha in [1.7, 2.0] {
        let (dist, (lo, hi)) = oracle_recovery(alpha, 1000, &mut rng())?;
        report.below(format!("oracle recovery distance alpha={alpha}"), dist, 1e-6);
        let outside = if lo >= 0.0 && hi <= 1.0 { 0.0 } else { 1.0 };
        report.at_most(format!("sampler interpolation factor in [0,1] alpha={alpha}"), outside, 0.0);
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> VerifyOptions {
        VerifyOptions {
            cf_samples: 20_000,
            ks_samples: 2_000,
            bound_sequences: 200,
            positivity_draws: 10_000,
            ..VerifyOptions::new(seed)
        }
    }

    #[test]
    fn exact_properties_hold_at_small_sizes() {
        let r = run_verification_suite(&small(3)).unwrap();
        for name in [
            "scale identity T=4000 alpha=1.7",
            "alpha=2 posterior vs DDPM",
            "alpha=2 DLPM step vs DDPM",
            "alpha=2 DLIM step vs DDIM",
            "posterior mean forms agree",
            "median of means three groups",
            "oracle recovery distance alpha=1.7",
        ] {
            let p = r.find(name).unwrap();
            assert!(p.passed, "{name}: {}", p.statistic);
        }
        assert!(r.table().lines().count() == r.results.len() + 2);
    }
}
