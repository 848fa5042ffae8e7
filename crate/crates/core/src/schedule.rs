//! Noise schedules and the cumulative quantities of the forward process.
//!
//! Indexing is one-based in `t` to match the forward chain
//! `X_t = gamma_t X_{t-1} + sigma_t eps_t`. Cumulative accessors also accept
//! `t = 0`, where `gamma_{1->0} = 1` (empty product) and `sigma_{1->0} = 0`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlpmError, Result};
use crate::stable::PositiveStable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    ScalePreserving,
    ScaleExploding,
}

/// Serializable identity of a schedule: enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub alpha: f64,
    /// Cumulative scales `sigma_{1->t}` of a scale-exploding schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_cum: Option<Vec<f64>>,
}

impl ScheduleSpec {
    pub fn cosine(steps: usize, alpha: f64) -> Self {
        Self { kind: ScheduleKind::ScalePreserving, steps, alpha, sigma_cum: None }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::ScalePreserving => build_cosine_schedule(self.steps, self.alpha),
            ScheduleKind::ScaleExploding => {
                let grid = self
                    .sigma_cum
                    .as_deref()
                    .ok_or_else(|| invalid("scale-exploding schedule needs a sigma_cum grid"))?;
                if grid.len() != self.steps {
                    return Err(DlpmError::Shape(format!(
                        "sigma_cum grid has {} entries for {} steps",
                        grid.len(),
                        self.steps
                    )));
                }
                build_scale_exploding_schedule(grid, self.alpha)
            }
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: f64,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
    gamma_cum: Vec<f64>,
    sigma_cum: Vec<f64>,
    mixing: PositiveStable,
}

/// Cosine `beta_t` sequence, `t = 1..=steps`.
pub fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * PI / 2.0).cos().powi(2)
    };
    (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
}

/// Cosine schedule with `gamma_t = (1 - beta_t)^{1/alpha}` and
/// `sigma_t = beta_t^{1/alpha}`, which keeps
/// `sigma_{1->t}^alpha + gamma_{1->t}^alpha = 1`.
pub fn build_cosine_schedule(steps: usize, alpha: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    let mixing = PositiveStable::new(alpha)?;
    let betas = cosine_betas(steps);
    let gamma = betas.iter().map(|b| (1.0 - b).powf(1.0 / alpha)).collect();
    let sigma = betas.iter().map(|b| b.powf(1.0 / alpha)).collect();
    Ok(NoiseSchedule::from_steps(ScheduleKind::ScalePreserving, alpha, gamma, sigma, mixing))
}

/// Scale-exploding schedule: `gamma_t = 1` and a user-supplied strictly
/// increasing grid of cumulative scales `sigma_{1->t}`, `t = 1..=T`.
pub fn build_scale_exploding_schedule(sigma_cum: &[f64], alpha: f64) -> Result<NoiseSchedule> {
    if sigma_cum.is_empty() {
        return Err(invalid("schedule needs at least one step"));
    }
    let mixing = PositiveStable::new(alpha)?;
    let mut prev = 0.0;
    let mut sigma = Vec::with_capacity(sigma_cum.len());
    for &s in sigma_cum {
        if !(s > prev) || !s.is_finite() {
            return Err(invalid("scale-exploding grid must be finite and strictly increasing from 0"));
        }
        sigma.push((s.powf(alpha) - prev.powf(alpha)).powf(1.0 / alpha));
        prev = s;
    }
    let mut cum = Vec::with_capacity(sigma_cum.len() + 1);
    cum.push(0.0);
    cum.extend_from_slice(sigma_cum);
    Ok(NoiseSchedule {
        kind: ScheduleKind::ScaleExploding,
        alpha,
        gamma: vec![1.0; sigma_cum.len()],
        sigma,
        gamma_cum: vec![1.0; sigma_cum.len() + 1],
        sigma_cum: cum,
        mixing,
    })
}

impl NoiseSchedule {
    /// Schedule from explicit per-step factors `gamma_t > 0`, `sigma_t >= 0`.
    pub fn from_factors(alpha: f64, gamma: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let mixing = PositiveStable::new(alpha)?;
        if gamma.is_empty() || gamma.len() != sigma.len() {
            return Err(DlpmError::Shape(format!(
                "need equally many gammas and sigmas, got {} and {}",
                gamma.len(),
                sigma.len()
            )));
        }
        if gamma.iter().any(|g| !(*g > 0.0)) || sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("gamma_t must be positive and sigma_t nonnegative"));
        }
        Ok(Self::from_steps(ScheduleKind::ScalePreserving, alpha, gamma, sigma, mixing))
    }

    /// Builds cumulants from per-step factors with
    /// `sigma_{1->t}^alpha = gamma_t^alpha sigma_{1->t-1}^alpha + sigma_t^alpha`.
    fn from_steps(
        kind: ScheduleKind,
        alpha: f64,
        gamma: Vec<f64>,
        sigma: Vec<f64>,
        mixing: PositiveStable,
    ) -> Self {
        let mut gamma_cum = Vec::with_capacity(gamma.len() + 1);
        let mut sigma_cum = Vec::with_capacity(gamma.len() + 1);
        gamma_cum.push(1.0);
        sigma_cum.push(0.0);
        let mut sa = 0.0;
        for (g, s) in gamma.iter().zip(&sigma) {
            gamma_cum.push(gamma_cum.last().unwrap() * g);
            sa = g.powf(alpha) * sa + s.powf(alpha);
            sigma_cum.push(sa.powf(1.0 / alpha));
        }
        Self { kind, alpha, gamma, sigma, gamma_cum, sigma_cum, mixing }
    }

    /// Coarse chain over the increasing timesteps `ts` (each in `1..=T`).
    ///
    /// Step `k` of the result goes from `ts[k-1]` (or 0) to `ts[k]` with
    /// `gamma = gamma_{1->t} / gamma_{1->s}` and
    /// `sigma^alpha = sigma_{1->t}^alpha - gamma^alpha sigma_{1->s}^alpha`.
    /// Adjacent timesteps reuse the original per-step factors, so a stride of
    /// one reproduces the original schedule exactly.
    pub fn coarsen(&self, ts: &[usize]) -> Result<NoiseSchedule> {
        if ts.is_empty() {
            return Err(invalid("coarse chain needs at least one timestep"));
        }
        let mut gamma = Vec::with_capacity(ts.len());
        let mut sigma = Vec::with_capacity(ts.len());
        let mut gamma_cum = vec![1.0];
        let mut sigma_cum = vec![0.0];
        let mut s = 0;
        for &t in ts {
            if t <= s || t > self.steps() {
                return Err(invalid(format!("coarse timesteps must increase within 1..={}", self.steps())));
            }
            if t == s + 1 {
                gamma.push(self.gamma(t));
                sigma.push(self.sigma(t));
            } else {
                let g = self.gamma_cum(t) / self.gamma_cum(s);
                let rest = self.sigma_cum(t).powf(self.alpha) - (g * self.sigma_cum(s)).powf(self.alpha);
                gamma.push(g);
                sigma.push(rest.max(0.0).powf(1.0 / self.alpha));
            }
            gamma_cum.push(self.gamma_cum(t));
            sigma_cum.push(self.sigma_cum(t));
            s = t;
        }
        Ok(NoiseSchedule {
            kind: self.kind,
            alpha: self.alpha,
            gamma,
            sigma,
            gamma_cum,
            sigma_cum,
            mixing: self.mixing,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Horizon `T`.
    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn gamma_cum(&self, t: usize) -> f64 {
        self.gamma_cum[t]
    }

    pub fn sigma_cum(&self, t: usize) -> f64 {
        self.sigma_cum[t]
    }

    /// Per-step `gamma_t`, `t = 1..=T`.
    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Law of the mixing variable `A` for this schedule's tail index.
    pub fn mixing(&self) -> &PositiveStable {
        &self.mixing
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(invalid(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// `Sigma_{1->t}(A_{1:t}) = sum_k (gamma_{1->t} / gamma_{1->k})^2 A_k sigma_k^2`.
    pub fn sigma_cumulative_squared(&self, t: usize, a_seq: &[f64]) -> Result<f64> {
        self.check_t(t)?;
        check_mixing_len(t, a_seq)?;
        let gt = self.gamma_cum(t);
        Ok((1..=t)
            .map(|k| {
                let r = gt / self.gamma_cum(k) * self.sigma(k);
                r * r * a_seq[k - 1]
            })
            .sum())
    }

    /// Same quantity as [`Self::sigma_cumulative_squared`] through the
    /// recursion `Sigma_{1->t} = sigma_t^2 A_t + gamma_t^2 Sigma_{1->t-1}`.
    pub fn sigma_cumulative_squared_recursive(&self, t: usize, a_seq: &[f64]) -> Result<f64> {
        self.check_t(t)?;
        check_mixing_len(t, a_seq)?;
        Ok(accumulate_sigma(self, &a_seq[..t]).1)
    }

    /// `Gamma_t = 1 - gamma_t^2 Sigma_{1->t-1} / Sigma_{1->t}`.
    pub fn gamma_t_factor(&self, t: usize, a_seq: &[f64]) -> Result<f64> {
        self.check_t(t)?;
        check_mixing_len(t, a_seq)?;
        let (prev, cur) = accumulate_sigma(self, &a_seq[..t]);
        Ok(interpolation_factor(self.gamma(t), prev, cur))
    }

    /// Draws the two mixing variables of the bridge at step `t`.
    pub fn make_bridge_draw<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<BridgeDraw> {
        self.check_t(t)?;
        Ok(self.bridge_draw_with(&self.mixing, t, rng))
    }

    /// Bridge draw from an explicit mixing law (the schedule's own in
    /// ordinary use). `t` must already be validated.
    pub(crate) fn bridge_draw_with<R: Rng + ?Sized>(
        &self,
        mixing: &PositiveStable,
        t: usize,
        rng: &mut R,
    ) -> BridgeDraw {
        let a0 = if t == 1 { 0.0 } else { mixing.sample(rng) };
        let a1 = mixing.sample(rng);
        BridgeDraw::from_mixing(self, t, a0, a1)
    }
}

fn check_mixing_len(t: usize, a_seq: &[f64]) -> Result<()> {
    if a_seq.len() != t {
        return Err(DlpmError::Shape(format!(
            "mixing sequence has length {} but t = {t}",
            a_seq.len()
        )));
    }
    Ok(())
}

/// Returns `(Sigma_{1->t-1}, Sigma_{1->t})` for `t = a_seq.len()`.
fn accumulate_sigma(schedule: &NoiseSchedule, a_seq: &[f64]) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 0.0;
    for (k, a) in a_seq.iter().enumerate() {
        let g = schedule.gamma(k + 1);
        let s = schedule.sigma(k + 1);
        prev = cur;
        cur = s * s * a + g * g * cur;
    }
    (prev, cur)
}

/// `1 - gamma_t^2 Sigma_prev / Sigma_t`. A zero `Sigma_t` (noiseless step)
/// gives 0.
pub fn interpolation_factor(gamma_t: f64, sigma_prev: f64, sigma_t: f64) -> f64 {
    if sigma_t <= 0.0 {
        return 0.0;
    }
    1.0 - gamma_t * gamma_t * sigma_prev / sigma_t
}

/// The pair `(A0, A1)` of the two-variable bridge at step `t` and the derived
/// variances `Sigma'_{t-1} = sigma_{1->t-1}^2 A0`,
/// `Sigma'_t = sigma_t^2 A1 + gamma_t^2 Sigma'_{t-1}` and
/// `Gamma'_t = 1 - gamma_t^2 Sigma'_{t-1} / Sigma'_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeDraw {
    pub t: usize,
    pub a0: f64,
    pub a1: f64,
    pub sigma_prime_prev: f64,
    pub sigma_prime: f64,
    pub gamma_prime: f64,
}

impl BridgeDraw {
    pub fn from_mixing(schedule: &NoiseSchedule, t: usize, a0: f64, a1: f64) -> Self {
        let a0 = if t == 1 { 0.0 } else { a0 };
        let sp = schedule.sigma_cum(t - 1);
        let prev = sp * sp * a0;
        let (g, s) = (schedule.gamma(t), schedule.sigma(t));
        let cur = s * s * a1 + g * g * prev;
        Self {
            t,
            a0,
            a1,
            sigma_prime_prev: prev,
            sigma_prime: cur,
            gamma_prime: interpolation_factor(g, prev, cur),
        }
    }
}
