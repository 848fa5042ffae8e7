//! Small statistical helpers shared by the property checks: two-sample
//! Kolmogorov-Smirnov, tail-index estimators and order-statistic quantiles.

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic critical value of the two-sample KS statistic at `level`.
pub fn ks_critical_value(n: usize, m: usize, level: f64) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (-(level / 2.0).ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt()
}

/// Hill estimator of the tail index from the largest `frac` of `|x|`.
pub fn hill_estimator(xs: &[f64], frac: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    let k = ((v.len() as f64 * frac) as usize).clamp(1, v.len() - 1);
    let threshold = v[k].ln();
    let mean_excess = v[..k].iter().map(|x| x.ln() - threshold).sum::<f64>() / k as f64;
    1.0 / mean_excess
}

/// Least-squares slope of `log P(|X| > x)` against `log x` over the largest
/// `frac` of the sample. For a power-law tail `r^{-a}` this is close to `-a`.
pub fn tail_slope(xs: &[f64], frac: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    let n = v.len() as f64;
    let k = ((n * frac) as usize).clamp(2, v.len());
    let pts: Vec<(f64, f64)> = (0..k)
        .map(|i| (v[i].ln(), ((i as f64 + 0.5) / n).ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Empirical quantile by order statistic, `x_(ceil(n p))`, never returning the
/// sample maximum when `n > 1`.
pub fn order_quantile(sorted_xs: &[f64], p: f64) -> f64 {
    let n = sorted_xs.len();
    let rank = ((n as f64 * p).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    sorted_xs[rank - 1]
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_identical_samples_is_zero() {
        let a = [0.3, 1.0, -2.0, 5.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
    }

    #[test]
    fn ks_disjoint_samples_is_one() {
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0, 4.0]), 1.0);
    }

    #[test]
    fn ks_hand_example() {
        // F_a jumps to 1/2 at 1 while F_b is still 0 until 1.5
        let d = ks_two_sample(&[1.0, 2.0], &[1.5, 2.5]);
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ks_ties_across_samples() {
        let d = ks_two_sample(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]);
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ks_critical_value_matches_table() {
        // c(0.05) = 1.358
        let c = ks_critical_value(100, 100, 0.05);
        assert!((c - 1.358 * (2.0f64 / 100.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn hill_on_exact_pareto_quantiles() {
        // deterministic Pareto(a=1.5) quantile grid
        let n = 100_000;
        let xs: Vec<f64> = (1..=n)
            .map(|i| (1.0 - (i as f64 - 0.5) / n as f64).powf(-1.0 / 1.5))
            .collect();
        assert!((hill_estimator(&xs, 0.01) - 1.5).abs() < 0.02);
        assert!((tail_slope(&xs, 0.01) + 1.5).abs() < 0.02);
    }

    #[test]
    fn order_quantile_avoids_maximum() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(order_quantile(&xs, 0.5), 2.0);
        assert_eq!(order_quantile(&xs, 0.999), 3.0);
        assert_eq!(order_quantile(&[7.0], 0.9), 7.0);
    }
}
