//! Alpha-stable laws: Chambers-Mallows-Stuck sampling, the positive-stable
//! factor `A` behind the Gaussian scale-mixture representation
//! `X = mu + sigma * sqrt(A) * G`, and empirical characteristic functions.
//!
//! Characteristic function convention for `S_{alpha,beta}(mu, sigma)`:
//!
//! `E exp(iuX) = exp(iu mu - |sigma u|^alpha (1 - i beta sgn(u) tan(pi alpha / 2)))`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlpmError, Result};

/// Parameters `(alpha, beta, mu, sigma)` of a one-dimensional stable law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableParams {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl StableParams {
    pub fn new(alpha: f64, beta: f64, mu: f64, sigma: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(-1.0..=1.0).contains(&beta) {
            return Err(invalid(format!("beta must lie in [-1, 1], got {beta}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !mu.is_finite() {
            return Err(invalid(format!("mu must be finite, got {mu}")));
        }
        if alpha == 1.0 && beta != 0.0 {
            return Err(invalid("skewed laws with alpha = 1 are not supported"));
        }
        Ok(Self { alpha, beta, mu, sigma })
    }

    pub fn symmetric(alpha: f64, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(alpha, 0.0, mu, sigma)
    }

    pub fn characteristic_function(&self, u: f64) -> Complex64 {
        let phi = if self.alpha == 1.0 { 0.0 } else { (PI * self.alpha / 2.0).tan() };
        let mag = (self.sigma * u).abs().powf(self.alpha);
        let exponent = Complex64::new(-mag, u * self.mu + mag * self.beta * u.signum() * phi);
        exponent.exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mu + self.sigma * Cms::new(self.alpha, self.beta).draw(rng)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 2.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 2], got {alpha}")))
    }
}

/// Chambers-Mallows-Stuck kernel for a standard `S_{alpha,beta}(0, 1)` draw.
#[derive(Debug, Clone, Copy)]
struct Cms {
    alpha: f64,
    beta: f64,
    shift: f64,
    scale: f64,
}

impl Cms {
    fn new(alpha: f64, beta: f64) -> Self {
        if alpha == 1.0 {
            return Self { alpha, beta, shift: 0.0, scale: 1.0 };
        }
        let bt = beta * (PI * alpha / 2.0).tan();
        Self {
            alpha,
            beta,
            shift: bt.atan() / alpha,
            scale: (1.0 + bt * bt).powf(1.0 / (2.0 * alpha)),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = Open01.sample(rng);
        let v = PI * (u - 0.5);
        if self.alpha == 1.0 {
            debug_assert!(self.beta == 0.0);
            return v.tan();
        }
        let w = loop {
            let w: f64 = Exp1.sample(rng);
            if w > 0.0 {
                break w;
            }
        };
        let a = self.alpha;
        let arg = a * (v + self.shift);
        self.scale * arg.sin() / v.cos().powf(1.0 / a)
            * ((v - arg).cos() / w).powf((1.0 - a) / a)
    }
}

/// `c_A = cos^{2/alpha}(pi alpha / 4)`.
pub fn positive_stable_const(alpha: f64) -> f64 {
    (PI * alpha / 4.0).cos().powf(2.0 / alpha)
}

/// The totally skewed `alpha/2`-stable mixing variable `A`.
///
/// `A` is drawn from `S_{alpha/2,1}(0, 2 c_A)`, which is the scale for which
/// `sqrt(A) G` with `G ~ N(0, I)` has characteristic function
/// `exp(-|u|^alpha)`. At `alpha = 2` the law degenerates to the constant 2.
#[derive(Debug, Clone, Copy)]
pub struct PositiveStable {
    alpha: f64,
    scale: f64,
    kernel: Option<Cms>,
}

impl PositiveStable {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if alpha == 2.0 {
            return Ok(Self { alpha, scale: 2.0, kernel: None });
        }
        Self::with_c_a(alpha, positive_stable_const(alpha))
    }

    /// Mixing law built from an arbitrary constant in place of `c_A`. Only
    /// meaningful as a mutation hook for the verification suite.
    pub fn with_c_a(alpha: f64, c_a: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(c_a > 0.0) {
            return Err(invalid(format!("c_A must be positive, got {c_a}")));
        }
        let kernel = (alpha < 2.0).then(|| Cms::new(alpha / 2.0, 1.0));
        Ok(Self { alpha, scale: 2.0 * c_a, kernel })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Scale parameter of the law of `A`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_degenerate(&self) -> bool {
        self.kernel.is_none()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kernel {
            Some(k) => self.scale * k.draw(rng),
            None => self.scale,
        }
    }

    pub fn fill<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        out.iter_mut().for_each(|a| *a = self.sample(rng));
    }

    /// Writes one standard `S_alpha(0, I_d)` vector (isotropic or with
    /// independent coordinates) into `out`.
    pub fn stable_vector<R: Rng + ?Sized>(&self, isotropy: Isotropy, out: &mut [f64], rng: &mut R) {
        match isotropy {
            Isotropy::Isotropic => {
                let s = self.sample(rng).sqrt();
                for x in out.iter_mut() {
                    let g: f64 = StandardNormal.sample(rng);
                    *x = s * g;
                }
            }
            Isotropy::NonIsotropic => {
                for x in out.iter_mut() {
                    let s = self.sample(rng).sqrt();
                    let g: f64 = StandardNormal.sample(rng);
                    *x = s * g;
                }
            }
        }
    }
}

/// Draws `n` values of the mixing variable `A` for tail index `alpha`.
pub fn sample_positive_stable<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let ps = PositiveStable::new(alpha)?;
    let mut out = vec![0.0; n];
    ps.fill(&mut out, rng);
    Ok(out)
}

/// `n` i.i.d. draws from a symmetric `S_alpha(mu, sigma)`.
pub fn sample_symmetric_stable<R: Rng + ?Sized>(
    params: &StableParams,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if params.beta != 0.0 {
        return Err(invalid("symmetric sampler requires beta = 0"));
    }
    sample_stable(params, n, rng)
}

/// `n` i.i.d. draws from `S_{alpha,beta}(mu, sigma)`.
pub fn sample_stable<R: Rng + ?Sized>(params: &StableParams, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let p = StableParams::new(params.alpha, params.beta, params.mu, params.sigma)?;
    let k = Cms::new(p.alpha, p.beta);
    Ok((0..n).map(|_| p.mu + p.sigma * k.draw(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Isotropy {
    /// Rotation-invariant noise; one mixing variable per vector.
    #[default]
    Isotropic,
    /// Independent coordinates; one mixing variable per coordinate.
    NonIsotropic,
}

impl std::str::FromStr for Isotropy {
    type Err = DlpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" | "iso" => Ok(Self::Isotropic),
            "nonisotropic" | "non_isotropic" | "ni" => Ok(Self::NonIsotropic),
            other => Err(invalid(format!("unknown isotropy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateStableSpec {
    pub dim: usize,
    pub alpha: f64,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub isotropy: Isotropy,
}

impl MultivariateStableSpec {
    pub fn standard(dim: usize, alpha: f64, isotropy: Isotropy) -> Self {
        Self { dim, alpha, mu: vec![0.0; dim], sigma: 1.0, isotropy }
    }

    fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if self.mu.len() != self.dim {
            return Err(DlpmError::Shape(format!(
                "location has length {} but dim is {}",
                self.mu.len(),
                self.dim
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Analytic characteristic function at `u`.
    pub fn characteristic_function(&self, u: &[f64]) -> Complex64 {
        let phase: f64 = u.iter().zip(&self.mu).map(|(a, b)| a * b).sum();
        let mag = match self.isotropy {
            Isotropy::Isotropic => {
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                (self.sigma * norm).powf(self.alpha)
            }
            Isotropy::NonIsotropic => u.iter().map(|x| (self.sigma * x).abs().powf(self.alpha)).sum(),
        };
        Complex64::new(-mag, phase).exp()
    }
}

/// `n x d` matrix of draws `mu + sigma * sqrt(A) (.) G`.
pub fn sample_multivariate_stable<R: Rng + ?Sized>(
    spec: &MultivariateStableSpec,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let ps = PositiveStable::new(spec.alpha)?;
    let mut out = Array2::zeros((n, spec.dim));
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        ps.stable_vector(spec.isotropy, row, rng);
        for (x, m) in row.iter_mut().zip(&spec.mu) {
            *x = m + spec.sigma * *x;
        }
    }
    Ok(out)
}

/// `(1/n) sum_k exp(i u^T x_k)` over the rows of `samples`.
pub fn empirical_cf(samples: ArrayView2<f64>, u: &[f64]) -> Result<Complex64> {
    if samples.nrows() == 0 {
        return Err(DlpmError::Empty("empirical characteristic function needs samples"));
    }
    if samples.ncols() != u.len() {
        return Err(DlpmError::Shape(format!(
            "samples have {} columns but u has length {}",
            samples.ncols(),
            u.len()
        )));
    }
    let (mut re, mut im) = (0.0, 0.0);
    for row in samples.rows() {
        let phase: f64 = row.iter().zip(u).map(|(x, v)| x * v).sum();
        let (s, c) = phase.sin_cos();
        re += c;
        im += s;
    }
    let n = samples.nrows() as f64;
    Ok(Complex64::new(re / n, im / n))
}

/// Empirical characteristic function of a one-dimensional sample.
pub fn empirical_cf_1d(samples: &[f64], u: f64) -> Result<Complex64> {
    let view = ArrayView2::from_shape((samples.len(), 1), samples)
        .map_err(|e| DlpmError::Shape(e.to_string()))?;
    empirical_cf(view, &[u])
}

/// Law of `X1 + X2` for independent stable `X1`, `X2` sharing `alpha`.
pub fn sum_stability_params(p1: &StableParams, p2: &StableParams) -> Result<StableParams> {
    if p1.alpha != p2.alpha {
        return Err(invalid(format!(
            "sum stability needs equal tail indices, got {} and {}",
            p1.alpha, p2.alpha
        )));
    }
    let a = p1.alpha;
    let (s1, s2) = (p1.sigma.powf(a), p2.sigma.powf(a));
    StableParams::new(
        a,
        (p1.beta * s1 + p2.beta * s2) / (s1 + s2),
        p1.mu + p2.mu,
        (s1 + s2).powf(1.0 / a),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::stats::{hill_estimator, variance};

    #[test]
    fn gaussian_case_has_variance_two_sigma_squared() {
        let p = StableParams::symmetric(2.0, 0.0, 1.0).unwrap();
        let xs = sample_symmetric_stable(&p, 1_000_000, &mut seeded(1)).unwrap();
        let v = variance(&xs);
        assert!((v - 2.0).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn zero_scale_is_rejected_and_small_scale_concentrates() {
        assert!(StableParams::symmetric(1.7, 3.0, 0.0).is_err());
        let p = StableParams::symmetric(1.7, 3.0, 1e-12).unwrap();
        let xs = sample_symmetric_stable(&p, 1000, &mut seeded(2)).unwrap();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[500] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(StableParams::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(StableParams::new(2.1, 0.0, 0.0, 1.0).is_err());
        assert!(StableParams::new(1.5, 1.5, 0.0, 1.0).is_err());
        assert!(StableParams::new(1.0, 0.5, 0.0, 1.0).is_err());
        assert!(PositiveStable::new(0.0).is_err());
        assert!(PositiveStable::new(2.5).is_err());
        let skewed = StableParams::new(1.5, 0.5, 0.0, 1.0).unwrap();
        assert!(sample_symmetric_stable(&skewed, 10, &mut seeded(0)).is_err());
    }

    #[test]
    fn symmetric_tail_index_by_hill() {
        let p = StableParams::symmetric(1.5, 0.0, 1.0).unwrap();
        let xs = sample_symmetric_stable(&p, 1_000_000, &mut seeded(3)).unwrap();
        let h = hill_estimator(&xs, 0.01);
        assert!((h - 1.5).abs() < 0.1, "hill {h}");
    }

    #[test]
    fn positive_stable_alpha_two_is_constant() {
        let a = sample_positive_stable(2.0, 5, &mut seeded(4)).unwrap();
        assert_eq!(a, vec![2.0; 5]);
    }

    #[test]
    fn c_a_at_alpha_one() {
        assert!((positive_stable_const(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn positive_stable_is_positive_with_half_tail_index() {
        let a = sample_positive_stable(1.7, 1_000_000, &mut seeded(5)).unwrap();
        assert!(a.iter().all(|&x| x > 0.0));
        let h = hill_estimator(&a, 0.01);
        assert!((h - 0.85).abs() < 0.1, "hill {h}");
    }

    #[test]
    fn multivariate_gaussian_reduction() {
        let spec = MultivariateStableSpec {
            dim: 3,
            alpha: 2.0,
            mu: vec![0.0; 3],
            sigma: 0.7,
            isotropy: Isotropy::Isotropic,
        };
        let x = sample_multivariate_stable(&spec, 1_000_000, &mut seeded(6)).unwrap();
        for col in x.columns() {
            let v = variance(&col.to_vec());
            assert!((v / (2.0 * 0.49) - 1.0).abs() < 0.01, "variance {v}");
        }
    }

    #[test]
    fn isotropic_cf_along_axis() {
        let spec = MultivariateStableSpec::standard(2, 1.7, Isotropy::Isotropic);
        let x = sample_multivariate_stable(&spec, 1_000_000, &mut seeded(7)).unwrap();
        let cf = empirical_cf(x.view(), &[1.0, 0.0]).unwrap();
        assert!((cf - Complex64::new((-1.0f64).exp(), 0.0)).norm() < 0.01, "{cf}");
    }

    #[test]
    fn nonisotropic_coordinates_are_independent() {
        let spec = MultivariateStableSpec::standard(2, 1.7, Isotropy::NonIsotropic);
        let x = sample_multivariate_stable(&spec, 1_000_000, &mut seeded(8)).unwrap();
        let cf = empirical_cf(x.view(), &[1.0, 1.0]).unwrap();
        assert!((cf - Complex64::new((-2.0f64).exp(), 0.0)).norm() < 0.01, "{cf}");
        // the isotropic law at the same point is exp(-sqrt(2)^1.7)
        let iso = MultivariateStableSpec::standard(2, 1.7, Isotropy::Isotropic);
        let expected = (-(2.0f64.sqrt()).powf(1.7)).exp();
        assert!((iso.characteristic_function(&[1.0, 1.0]).re - expected).abs() < 1e-15);
    }

    #[test]
    fn empirical_cf_trivial_cases() {
        let zeros = Array2::<f64>::zeros((10, 2));
        let cf = empirical_cf(zeros.view(), &[0.3, -1.2]).unwrap();
        assert_eq!(cf, Complex64::new(1.0, 0.0));

        let one = Array2::from_shape_vec((1, 2), vec![0.4, -2.0]).unwrap();
        let u = [1.5, 0.25];
        let cf = empirical_cf(one.view(), &u).unwrap();
        let phase: f64 = 0.4 * 1.5 - 2.0 * 0.25;
        assert!((cf - Complex64::new(phase.cos(), phase.sin())).norm() < 1e-15);

        let empty = Array2::<f64>::zeros((0, 2));
        assert!(empirical_cf(empty.view(), &u).is_err());
        assert!(empirical_cf(one.view(), &[1.0]).is_err());
    }

    #[test]
    fn one_dimensional_cf_on_grid() {
        let p = StableParams::symmetric(1.5, 0.0, 1.0).unwrap();
        let xs = sample_symmetric_stable(&p, 1_000_000, &mut seeded(9)).unwrap();
        for i in 0..21 {
            let u = -3.0 + 0.3 * i as f64;
            let cf = empirical_cf_1d(&xs, u).unwrap();
            assert!((cf - p.characteristic_function(u)).norm() < 0.01, "u={u}");
        }
    }

    #[test]
    fn skewed_cf_matches_definition() {
        let p = StableParams::new(1.5, 0.7, 0.5, 1.3).unwrap();
        let xs = sample_stable(&p, 1_000_000, &mut seeded(10)).unwrap();
        for &u in &[-2.0, -0.7, 0.4, 1.1, 2.5] {
            let cf = empirical_cf_1d(&xs, u).unwrap();
            assert!((cf - p.characteristic_function(u)).norm() < 0.01, "u={u}");
        }
    }

    #[test]
    fn sum_stability_examples() {
        let g = StableParams::symmetric(2.0, 0.0, 1.0).unwrap();
        let s = sum_stability_params(&g, &g).unwrap();
        assert!((s.sigma - 2f64.sqrt()).abs() < 1e-15);

        let p = StableParams::symmetric(1.7, 0.0, 1.0).unwrap();
        let s = sum_stability_params(&p, &p).unwrap();
        assert!((s.sigma - 1.503_407).abs() < 1e-6);

        let a = StableParams::new(1.5, 1.0, 1.0, 2.0).unwrap();
        let b = StableParams::new(1.5, -1.0, 0.0, 2.0).unwrap();
        let s = sum_stability_params(&a, &b).unwrap();
        assert_eq!(s.beta, 0.0);
        assert_eq!(s.mu, 1.0);
        assert!((s.sigma - 2.0 * 2f64.powf(1.0 / 1.5)).abs() < 1e-12);

        let c = StableParams::symmetric(1.6, 0.0, 1.0).unwrap();
        assert!(sum_stability_params(&p, &c).is_err());
    }
}
