//! Sample-quality metrics: tail fit by log-quantile error on Euclidean norms,
//! and k-NN precision/recall with their F1 score.

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlpmError, Result};
use crate::stats::order_quantile;

pub const DEFAULT_XI: f64 = 0.95;
pub const DEFAULT_LEVELS: usize = 100;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default)]
    pub msle: Option<f64>,
    #[serde(default)]
    pub precision: Option<f64>,
    #[serde(default)]
    pub recall: Option<f64>,
    #[serde(default)]
    pub f1: Option<f64>,
    pub n_real: usize,
    pub n_gen: usize,
    pub seed: u64,
    pub method: String,
    pub alpha: f64,
    pub steps: usize,
}

fn sorted_norms(x: ArrayView2<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Midpoint levels `xi + (k - 1/2)(1 - xi)/K`, `k = 1..=K`.
pub fn quantile_levels(xi: f64, levels: usize) -> Vec<f64> {
    (1..=levels)
        .map(|k| xi + (k as f64 - 0.5) * (1.0 - xi) / levels as f64)
        .collect()
}

/// Mean squared difference of log quantiles of the sample norms over the
/// upper tail `p in (xi, 1)`, on `DEFAULT_LEVELS` midpoint levels.
pub fn msle(real: ArrayView2<f64>, gen: ArrayView2<f64>, xi: f64) -> Result<f64> {
    msle_with_levels(real, gen, xi, DEFAULT_LEVELS)
}

pub fn msle_with_levels(real: ArrayView2<f64>, gen: ArrayView2<f64>, xi: f64, levels: usize) -> Result<f64> {
    if real.nrows() < 100 || gen.nrows() < 100 {
        return Err(invalid(format!(
            "tail error needs at least 100 points per sample, got {} and {}",
            real.nrows(),
            gen.nrows()
        )));
    }
    if real.ncols() != gen.ncols() || real.ncols() == 0 {
        return Err(DlpmError::Shape("samples must share a positive dimension".into()));
    }
    if !(0.0..1.0).contains(&xi) || levels == 0 {
        return Err(invalid(format!("xi must lie in [0, 1), got {xi}")));
    }
    let (a, b) = (sorted_norms(real), sorted_norms(gen));
    let mut total = 0.0;
    for p in quantile_levels(xi, levels) {
        let (qa, qb) = (order_quantile(&a, p), order_quantile(&b, p));
        if !(qa > 0.0) || !(qb > 0.0) || !qa.is_finite() || !qb.is_finite() {
            return Err(DlpmError::NonFinite(format!("quantile at level {p} is {qa} / {qb}")));
        }
        total += (qa.ln() - qb.ln()).powi(2);
    }
    Ok(total / levels as f64)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(x: ArrayView2<f64>, k: usize) -> Vec<f64> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let mut best = vec![f64::INFINITY; k];
            let xi = x.row(i);
            for j in 0..x.nrows() {
                if j == i {
                    continue;
                }
                let d = sq_dist(xi, x.row(j));
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            best[k - 1]
        })
        .collect()
}

/// Fraction of `queries` inside at least one ball around `support`.
fn coverage(support: ArrayView2<f64>, radii: &[f64], queries: ArrayView2<f64>) -> f64 {
    let hits: usize = (0..queries.nrows())
        .into_par_iter()
        .filter(|&q| {
            let row = queries.row(q);
            (0..support.nrows()).any(|i| sq_dist(row, support.row(i)) <= radii[i])
        })
        .count();
    hits as f64 / queries.nrows() as f64
}

/// k-NN manifold precision and recall: a generated point is precise if it
/// falls within the `k`-NN radius of some real point, and a real point is
/// recalled if it falls within the `k`-NN radius of some generated point.
pub fn precision_recall(real: ArrayView2<f64>, gen: ArrayView2<f64>, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if real.nrows() < k + 1 || gen.nrows() < k + 1 {
        return Err(invalid(format!("precision/recall needs more than k = {k} points per sample")));
    }
    if real.ncols() != gen.ncols() {
        return Err(DlpmError::Shape("samples must share a dimension".into()));
    }
    let real_r = knn_radii(real, k);
    let gen_r = knn_radii(gen, k);
    Ok((coverage(real, &real_r, gen), coverage(gen, &gen_r, real)))
}

/// Harmonic mean of precision and recall, 0 when both vanish.
pub fn f1_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::Array2;
    use rand::Rng;

    fn cloud(n: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((n, 2), |_| shift + rng.random_range(-1.0..1.0))
    }

    #[test]
    fn levels_are_midpoints() {
        let l = quantile_levels(0.95, 100);
        assert_eq!(l.len(), 100);
        assert!((l[0] - 0.950_25).abs() < 1e-15);
        assert!((l[99] - 0.999_75).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_have_zero_error() {
        let x = cloud(500, 0.0, 1);
        assert_eq!(msle(x.view(), x.view(), 0.95).unwrap(), 0.0);
    }

    #[test]
    fn doubling_gives_log_two_squared() {
        let x = cloud(1000, 0.0, 2);
        let y = &x * 2.0;
        let v = msle(x.view(), y.view(), 0.95).unwrap();
        assert!((v - 2f64.ln().powi(2)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn tail_error_preconditions() {
        let x = cloud(50, 0.0, 3);
        let y = cloud(500, 0.0, 3);
        assert!(msle(x.view(), y.view(), 0.95).is_err());
        let z = Array2::<f64>::zeros((200, 2));
        assert!(msle(z.view(), y.view(), 0.95).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_pr(1.0, 1.0), 1.0);
        assert_eq!(f1_pr(1.0, 0.0), 0.0);
        assert_eq!(f1_pr(0.0, 0.0), 0.0);
        assert!((f1_pr(0.9, 0.7) - 0.7875).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_extremes() {
        let x = cloud(300, 0.0, 4);
        assert_eq!(precision_recall(x.view(), x.view(), 3).unwrap(), (1.0, 1.0));
        let far = cloud(300, 100.0, 5);
        assert_eq!(precision_recall(x.view(), far.view(), 3).unwrap(), (0.0, 0.0));
        assert!(precision_recall(x.view(), x.slice(ndarray::s![..3, ..]), 3).is_err());
    }
}
