//! Square-root denoising loss with median-of-means over the heavy-tailed
//! mixing variables, and the training loop.
//!
//! For each batch item a timestep is drawn uniformly from `1..=T`, then `M^2`
//! independent bridge draws (each with its own Gaussian) produce per-draw
//! norms `||eps_model(y_t) - eps||`. The item loss is the median of the `M`
//! contiguous group means, and gradients flow through the selected group only.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{marginal_sample_with, ForwardDraw};
use crate::error::{invalid, DlpmError, Result};
use crate::model::{adam_step, AdamState, EpsModel, GradientBundle};
use crate::rng::seeded;
use crate::schedule::{BridgeDraw, NoiseSchedule};
use crate::stable::Isotropy;

/// Inputs with any coordinate beyond this magnitude are dropped from a batch.
pub const INPUT_GUARD: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: f64,
    /// Median-of-means group count `M`; 1 disables it.
    pub mom_groups: usize,
    #[serde(default)]
    pub isotropy: Isotropy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 1024, total_steps: 10_000, lr: 5e-3, mom_groups: 1, isotropy: Isotropy::Isotropic, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.mom_groups == 0 {
            return Err(invalid("mom_groups must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Loss of one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub t: usize,
    pub value: f64,
    pub norm_samples: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub terms: Vec<LossTerm>,
    pub loss: f64,
    pub skipped: usize,
    pub gradient: GradientBundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub skipped_count: usize,
}

fn guarded(y: &[f64]) -> bool {
    y.iter().any(|v| !v.is_finite() || v.abs() > INPUT_GUARD)
}

/// `||eps_model(y_t) - eps_t(y_t, y0)||` for the state built from `bridge`
/// and the Gaussian `g`. Returns `None` when `y_t` trips the input guard.
pub fn per_draw_norm(
    model: &EpsModel,
    y0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    bridge: &[BridgeDraw],
    g: &[f64],
) -> Result<Option<f64>> {
    if y0.len() != g.len() || (bridge.len() != 1 && bridge.len() != y0.len()) {
        return Err(DlpmError::Shape("y0, g and bridge draws must align".into()));
    }
    let (gc, sc) = (schedule.gamma_cum(t), schedule.sigma_cum(t));
    let mut yt = Vec::with_capacity(y0.len());
    let mut eps = Vec::with_capacity(y0.len());
    for i in 0..y0.len() {
        let b = if bridge.len() == 1 { bridge[0] } else { bridge[i] };
        let noise = b.sigma_prime.sqrt() * g[i];
        yt.push(gc * y0[i] + noise);
        eps.push(noise / sc);
    }
    if guarded(&yt) {
        return Ok(None);
    }
    let pred = model.forward(&yt, t, schedule.steps())?;
    Ok(Some(pred.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()))
}

/// Index of the median group mean (lower median for even `M`) and its value.
pub fn median_of_means_index(values: &[f64], groups: usize) -> Result<(usize, f64)> {
    if groups == 0 || values.len() != groups * groups {
        return Err(DlpmError::Shape(format!(
            "median of means with M = {groups} needs {} values, got {}",
            groups * groups,
            values.len()
        )));
    }
    let means: Vec<f64> = values
        .chunks(groups)
        .map(|c| c.iter().sum::<f64>() / groups as f64)
        .collect();
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let k = order[(groups - 1) / 2];
    Ok((k, means[k]))
}

/// Median of the `M` contiguous group means of `M^2` values.
pub fn median_of_means(values: &[f64], groups: usize) -> Result<f64> {
    Ok(median_of_means_index(values, groups)?.1)
}

/// Uniform timestep in `1..=T`.
pub fn sample_timestep<R: Rng + ?Sized>(horizon: usize, rng: &mut R) -> usize {
    rng.random_range(1..=horizon)
}

/// Loss and gradient for the items in the rows of `batch`.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &EpsModel,
    batch: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<BatchLoss> {
    config.validate()?;
    if batch.nrows() == 0 {
        return Err(DlpmError::Empty("batch has no items"));
    }
    let items: Vec<&[f64]> = batch
        .rows()
        .into_iter()
        .map(|r| r.to_slice().ok_or_else(|| DlpmError::Shape("batch rows must be contiguous".into())))
        .collect::<Result<_>>()?;
    batch_loss_rows(model, &items, schedule, config, rng)
}

fn batch_loss_rows<R: Rng + ?Sized>(
    model: &EpsModel,
    items: &[&[f64]],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<BatchLoss> {
    let d = model.input_dim();
    let m = config.mom_groups;
    let draws = m * m;
    let horizon = schedule.steps();
    let mixing = schedule.mixing();

    let mut kept: Vec<(usize, Vec<ForwardDraw>)> = Vec::with_capacity(items.len());
    let mut skipped = 0;
    for y0 in items {
        if y0.len() != d {
            return Err(DlpmError::Shape(format!("item has dimension {}, model expects {d}", y0.len())));
        }
        let t = sample_timestep(horizon, rng);
        let fd: Vec<ForwardDraw> = (0..draws)
            .map(|_| marginal_sample_with(y0, schedule, mixing, t, rng, config.isotropy))
            .collect();
        if fd.iter().any(|f| guarded(&f.yt)) {
            skipped += 1;
        } else {
            kept.push((t, fd));
        }
    }
    if kept.is_empty() {
        return Err(DlpmError::Empty("every batch item tripped the input guard"));
    }

    let stack = |sel: &dyn Fn(usize) -> bool| {
        let mut ys = Vec::new();
        let mut targets = Vec::new();
        let mut ts = Vec::new();
        for (t, fd) in &kept {
            for (j, f) in fd.iter().enumerate() {
                if sel(j) {
                    ys.extend_from_slice(&f.yt);
                    targets.extend_from_slice(&f.eps_target);
                    ts.push(*t);
                }
            }
        }
        let n = ts.len();
        (
            Array2::from_shape_vec((n, d), ys).expect("row-major stack"),
            Array2::from_shape_vec((n, d), targets).expect("row-major stack"),
            ts,
        )
    };

    if m == 1 {
        let (ys, targets, ts) = stack(&|_| true);
        let weights = vec![1.0; ts.len()];
        let (gradient, norms) = model.backward_with_norms(ys.view(), &ts, targets.view(), &weights, horizon)?;
        let terms = kept
            .iter()
            .zip(norms)
            .map(|((t, _), v)| LossTerm { t: *t, value: v, norm_samples: vec![v] })
            .collect();
        return Ok(BatchLoss { terms, loss: gradient.loss, skipped, gradient });
    }

    let (ys, targets, ts) = stack(&|_| true);
    let pred = model.forward_batch(ys.view(), &ts, horizon)?;
    let norms: Vec<f64> = (&pred - &targets)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let mut terms = Vec::with_capacity(kept.len());
    let mut sel_ys = Vec::with_capacity(kept.len() * m * d);
    let mut sel_targets = Vec::with_capacity(kept.len() * m * d);
    let mut sel_ts = Vec::with_capacity(kept.len() * m);
    for (i, (t, _)) in kept.iter().enumerate() {
        let block = &norms[i * draws..(i + 1) * draws];
        let (group, value) = median_of_means_index(block, m)?;
        terms.push(LossTerm { t: *t, value, norm_samples: block.to_vec() });
        for j in 0..m {
            let r = i * draws + group * m + j;
            sel_ys.extend(ys.row(r).iter());
            sel_targets.extend(targets.row(r).iter());
            sel_ts.push(*t);
        }
    }
    let n = sel_ts.len();
    let sel_ys = Array2::from_shape_vec((n, d), sel_ys).expect("row-major stack");
    let sel_targets = Array2::from_shape_vec((n, d), sel_targets).expect("row-major stack");
    let gradient = model.backward(sel_ys.view(), &sel_ts, sel_targets.view(), &vec![1.0; n], horizon)?;
    Ok(BatchLoss { loss: gradient.loss, terms, skipped, gradient })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub optimizer: AdamState,
}

/// Runs `config.total_steps` optimizer steps on `model`.
pub fn train(
    model: &mut EpsModel,
    dataset: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, dataset, schedule, config, &mut |_, _| Ok(()))
}

/// [`train`] with a hook called after every step with the step number
/// (1-based) and the updated model.
pub fn train_with(
    model: &mut EpsModel,
    dataset: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(usize, &EpsModel) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.nrows() == 0 {
        return Err(DlpmError::Empty("training set is empty"));
    }
    if dataset.ncols() != model.input_dim() {
        return Err(DlpmError::Shape(format!(
            "dataset has dimension {}, model expects {}",
            dataset.ncols(),
            model.input_dim()
        )));
    }
    let data = dataset.as_standard_layout();
    let rows: Vec<&[f64]> = data.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let mut rng = seeded(config.seed);
    let mut opt = AdamState::new(model.params().len());
    let mut trace = Vec::with_capacity(config.total_steps);
    let mut bad_in_a_row = 0;
    for step in 1..=config.total_steps {
        let items: Vec<&[f64]> = (0..config.batch_size)
            .map(|_| rows[rng.random_range(0..rows.len())])
            .collect();
        match batch_loss_rows(model, &items, schedule, config, &mut rng) {
            Ok(b) => {
                bad_in_a_row = 0;
                adam_step(model.params_mut(), &b.gradient.grads, &mut opt, config.lr)?;
                trace.push(TraceRow { step, loss: b.loss, skipped_count: b.skipped });
            }
            Err(DlpmError::NonFinite(reason)) => {
                bad_in_a_row += 1;
                trace.push(TraceRow { step, loss: f64::NAN, skipped_count: 0 });
                if bad_in_a_row >= 2 {
                    return Err(DlpmError::Diverged { step, reason });
                }
            }
            Err(e) => return Err(e),
        }
        on_step(step, model)?;
    }
    Ok(TrainReport { trace, optimizer: opt })
}

/// Writes `step,loss,skipped_count` rows.
pub fn write_trace_csv(path: &std::path::Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| DlpmError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

pub fn read_trace_csv(path: &std::path::Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(DlpmError::from)).collect()
}
