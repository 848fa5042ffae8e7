//! Forward-process draws and the Gaussian backward posterior.
//!
//! Training never simulates the `t`-step chain. Instead one bridge draw
//! `(A0, A1)` gives `y_t = gamma_{1->t} y0 + sqrt(Sigma'_t) g` with the same
//! law as the chain. [`simulate_chain`] is kept as the reference it is checked
//! against.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, DlpmError, Result};
use crate::schedule::{BridgeDraw, NoiseSchedule};
use crate::stable::{Isotropy, PositiveStable};

/// One forward draw with everything the loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardDraw {
    pub y0: Vec<f64>,
    pub t: usize,
    pub yt: Vec<f64>,
    pub g: Vec<f64>,
    /// One entry for isotropic noise, one per coordinate otherwise.
    pub bridge: Vec<BridgeDraw>,
    pub eps_target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPosterior {
    pub mean: Vec<f64>,
    /// One entry for isotropic noise, one per coordinate otherwise.
    pub variance: Vec<f64>,
}

fn check_t(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    Ok(())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(DlpmError::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

fn per_coord<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Runs `X_k = gamma_k X_{k-1} + sigma_k eps_k` for `k = 1..=t` from `y0`.
pub fn simulate_chain<R: Rng + ?Sized>(
    y0: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
    isotropy: Isotropy,
) -> Result<Vec<f64>> {
    Ok(simulate_chain_pair(y0, schedule, t, rng, isotropy)?.1)
}

/// Chain states `(X_{t-1}, X_t)`.
pub fn simulate_chain_pair<R: Rng + ?Sized>(
    y0: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
    isotropy: Isotropy,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_t(schedule, t)?;
    let mixing = schedule.mixing();
    let mut x = y0.to_vec();
    let mut prev = x.clone();
    let mut eps = vec![0.0; y0.len()];
    for k in 1..=t {
        prev.copy_from_slice(&x);
        let (g, s) = (schedule.gamma(k), schedule.sigma(k));
        if s == 0.0 {
            x.iter_mut().for_each(|v| *v *= g);
            continue;
        }
        mixing.stable_vector(isotropy, &mut eps, rng);
        for (v, e) in x.iter_mut().zip(&eps) {
            *v = g * *v + s * e;
        }
    }
    Ok((prev, x))
}

/// Draws `y_t` given `y0` through the two-variable bridge.
pub fn marginal_sample<R: Rng + ?Sized>(
    y0: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
    isotropy: Isotropy,
) -> Result<ForwardDraw> {
    check_t(schedule, t)?;
    Ok(marginal_sample_with(y0, schedule, schedule.mixing(), t, rng, isotropy))
}

pub(crate) fn marginal_sample_with<R: Rng + ?Sized>(
    y0: &[f64],
    schedule: &NoiseSchedule,
    mixing: &PositiveStable,
    t: usize,
    rng: &mut R,
    isotropy: Isotropy,
) -> ForwardDraw {
    let d = y0.len();
    let mut g = Vec::with_capacity(d);
    let bridge = match isotropy {
        Isotropy::Isotropic => {
            let b = schedule.bridge_draw_with(mixing, t, rng);
            g.extend((0..d).map(|_| -> f64 { StandardNormal.sample(rng) }));
            vec![b]
        }
        Isotropy::NonIsotropic => (0..d)
            .map(|_| {
                let b = schedule.bridge_draw_with(mixing, t, rng);
                g.push(StandardNormal.sample(rng));
                b
            })
            .collect(),
    };
    let (gc, sc) = (schedule.gamma_cum(t), schedule.sigma_cum(t));
    let mut yt = Vec::with_capacity(d);
    let mut eps_target = Vec::with_capacity(d);
    for i in 0..d {
        let noise = per_coord(&bridge, i).sigma_prime.sqrt() * g[i];
        yt.push(gc * y0[i] + noise);
        eps_target.push(noise / sc);
    }
    ForwardDraw { y0: y0.to_vec(), t, yt, g, bridge, eps_target }
}

/// Bridge states `(Z_{t-1}, Z_t)` with
/// `Z_{t-1} = gamma_{1->t-1} y0 + sqrt(Sigma'_{t-1}) g1` and
/// `Z_t = gamma_t Z_{t-1} + sigma_t sqrt(A1) g2`.
pub fn bridge_pair<R: Rng + ?Sized>(
    y0: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_t(schedule, t)?;
    let b = schedule.make_bridge_draw(t, rng)?;
    let (gp, g, s) = (schedule.gamma_cum(t - 1), schedule.gamma(t), schedule.sigma(t));
    let (r0, r1) = (b.sigma_prime_prev.sqrt(), s * b.a1.sqrt());
    let mut prev = Vec::with_capacity(y0.len());
    let mut cur = Vec::with_capacity(y0.len());
    for &y in y0 {
        let g1: f64 = StandardNormal.sample(rng);
        let g2: f64 = StandardNormal.sample(rng);
        let z = gp * y + r0 * g1;
        prev.push(z);
        cur.push(g * z + r1 * g2);
    }
    Ok((prev, cur))
}

/// `(y_t - gamma_{1->t} y0) / sigma_{1->t}`.
pub fn eps_residual(yt: &[f64], y0: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    check_same_len(yt, y0)?;
    if t > schedule.steps() {
        return Err(invalid(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    let sc = schedule.sigma_cum(t);
    if sc <= 0.0 {
        return Err(invalid(format!("sigma_(1->{t}) is zero, residual undefined")));
    }
    let gc = schedule.gamma_cum(t);
    Ok(yt.iter().zip(y0).map(|(a, b)| (a - gc * b) / sc).collect())
}

/// Mean `(y_t - Gamma' sigma_{1->t} eps) / gamma_t` and variance
/// `Gamma' Sigma'_{t-1}` of `Y_{t-1}` given `(Y_t, Y_0, A)`.
pub fn backward_posterior(
    yt: &[f64],
    y0: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    bridge: &[BridgeDraw],
) -> Result<BackwardPosterior> {
    check_t(schedule, t)?;
    check_bridge(bridge, t, yt.len())?;
    let eps = eps_residual(yt, y0, schedule, t)?;
    let (g, sc) = (schedule.gamma(t), schedule.sigma_cum(t));
    let mean = yt
        .iter()
        .zip(&eps)
        .enumerate()
        .map(|(i, (y, e))| (y - per_coord(bridge, i).gamma_prime * sc * e) / g)
        .collect();
    let variance = bridge.iter().map(|b| b.gamma_prime * b.sigma_prime_prev).collect();
    Ok(BackwardPosterior { mean, variance })
}

/// Posterior mean in its interpolation form
/// `gamma_{1->t-1} y0 + (gamma_t Sigma'_{t-1} / Sigma'_t)(y_t - gamma_{1->t} y0)`.
pub fn posterior_mean_interpolated(
    yt: &[f64],
    y0: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    bridge: &[BridgeDraw],
) -> Result<Vec<f64>> {
    check_t(schedule, t)?;
    check_same_len(yt, y0)?;
    check_bridge(bridge, t, yt.len())?;
    let (gp, gc, g) = (schedule.gamma_cum(t - 1), schedule.gamma_cum(t), schedule.gamma(t));
    Ok((0..yt.len())
        .map(|i| {
            let b = per_coord(bridge, i);
            let rho = g * b.sigma_prime_prev;
            gp * y0[i] + rho / b.sigma_prime * (yt[i] - gc * y0[i])
        })
        .collect())
}

fn check_bridge(bridge: &[BridgeDraw], t: usize, d: usize) -> Result<()> {
    if bridge.is_empty() || (bridge.len() != 1 && bridge.len() != d) {
        return Err(DlpmError::Shape(format!(
            "expected 1 or {d} bridge draws, got {}",
            bridge.len()
        )));
    }
    if bridge.iter().any(|b| b.t != t) {
        return Err(invalid(format!("bridge draw does not belong to step {t}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schedule::build_cosine_schedule;

    #[test]
    fn noiseless_chain_is_pure_contraction() {
        let s = build_cosine_schedule(10, 1.7).unwrap();
        let quiet = NoiseSchedule::from_factors(1.7, s.gammas().to_vec(), vec![0.0; 10]).unwrap();
        let y0 = [0.3, -1.2];
        let x = simulate_chain(&y0, &quiet, 5, &mut seeded(0), Isotropy::Isotropic).unwrap();
        for i in 0..2 {
            assert!((x[i] - quiet.gamma_cum(5) * y0[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_draw() {
        let s = build_cosine_schedule(20, 1.7).unwrap();
        let y0 = [1.0, -2.0];
        let f = marginal_sample(&y0, &s, 1, &mut seeded(3), Isotropy::Isotropic).unwrap();
        let b = f.bridge[0];
        for i in 0..2 {
            let expect = s.gamma(1) * y0[i] + s.sigma(1) * b.a1.sqrt() * f.g[i];
            assert!((f.yt[i] - expect).abs() < 1e-12);
            assert!((f.eps_target[i] - b.a1.sqrt() * f.g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_marginal_draw() {
        let s = build_cosine_schedule(50, 2.0).unwrap();
        let y0 = [0.5, 0.25, -1.0];
        let f = marginal_sample(&y0, &s, 30, &mut seeded(4), Isotropy::Isotropic).unwrap();
        for i in 0..3 {
            let expect = s.gamma_cum(30) * y0[i] + s.sigma_cum(30) * 2f64.sqrt() * f.g[i];
            assert!((f.yt[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_cases() {
        let s = build_cosine_schedule(10, 1.5).unwrap();
        let y0 = [1.0, 2.0];
        let yt: Vec<f64> = y0.iter().map(|y| s.gamma_cum(4) * y).collect();
        assert!(eps_residual(&yt, &y0, &s, 4).unwrap().iter().all(|e| e.abs() < 1e-15));
        let r = eps_residual(&[3.0, -1.0], &[0.0, 0.0], &s, 4).unwrap();
        assert_eq!(r, vec![3.0 / s.sigma_cum(4), -1.0 / s.sigma_cum(4)]);
        assert!(eps_residual(&yt, &y0, &s, 0).is_err());
        assert!(eps_residual(&yt, &[1.0], &s, 4).is_err());

        let f = marginal_sample(&y0, &s, 7, &mut seeded(5), Isotropy::Isotropic).unwrap();
        let r = eps_residual(&f.yt, &y0, &s, 7).unwrap();
        for i in 0..2 {
            let expect = f.bridge[0].sigma_prime.sqrt() * f.g[i] / s.sigma_cum(7);
            assert!((r[i] - expect).abs() < 1e-12);
            assert!((r[i] - f.eps_target[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_posterior_inverts_exactly() {
        let s = build_cosine_schedule(10, 1.7).unwrap();
        let y0 = [0.7, -0.1];
        let f = marginal_sample(&y0, &s, 1, &mut seeded(6), Isotropy::Isotropic).unwrap();
        let p = backward_posterior(&f.yt, &y0, &s, 1, &f.bridge).unwrap();
        assert_eq!(p.variance, vec![0.0]);
        for i in 0..2 {
            assert!((p.mean[i] - y0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonisotropic_one_dimension_matches_isotropic() {
        let s = build_cosine_schedule(30, 1.6).unwrap();
        for t in [1, 9, 30] {
            let a = marginal_sample(&[0.4], &s, t, &mut seeded(7), Isotropy::Isotropic).unwrap();
            let b = marginal_sample(&[0.4], &s, t, &mut seeded(7), Isotropy::NonIsotropic).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nonisotropic_posterior_has_per_coordinate_variance() {
        let s = build_cosine_schedule(30, 1.6).unwrap();
        let y0 = [0.4, -0.3, 2.0];
        let f = marginal_sample(&y0, &s, 12, &mut seeded(8), Isotropy::NonIsotropic).unwrap();
        assert_eq!(f.bridge.len(), 3);
        let p = backward_posterior(&f.yt, &y0, &s, 12, &f.bridge).unwrap();
        assert_eq!(p.variance.len(), 3);
        let alt = posterior_mean_interpolated(&f.yt, &y0, &s, 12, &f.bridge).unwrap();
        for i in 0..3 {
            assert!((p.mean[i] - alt[i]).abs() < 1e-12 * (1.0 + alt[i].abs()));
        }
    }

    #[test]
    fn mismatched_bridge_is_rejected() {
        let s = build_cosine_schedule(30, 1.6).unwrap();
        let b = s.make_bridge_draw(3, &mut seeded(9)).unwrap();
        assert!(backward_posterior(&[0.0, 0.0], &[0.0, 0.0], &s, 4, &[b]).is_err());
        assert!(backward_posterior(&[0.0; 3], &[0.0; 3], &s, 3, &[b, b]).is_err());
    }
}
