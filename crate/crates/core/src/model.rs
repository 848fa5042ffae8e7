//! Time-conditioned MLP noise predictor with hand-written gradients.
//!
//! Architecture for input dimension `d`, hidden width `H = 64`, time width
//! `E = 32` and four residual blocks:
//!
//! ```text
//! e     = sinusoidal(1000 * t / T)                       (E)
//! temb  = silu(Wt2 silu(Wt1 e + bt1) + bt2)              (E)
//! h     = Win y + bin                                    (H)
//! block: u = silu(Wa h + ba) + (P temb + p)
//!        h = h + silu(Wb u + bb)
//! out   = Wout h + bout                                  (d)
//! ```
//!
//! All weights live in one flat `Vec<f64>`; matrices are row-major
//! `(out, in)`.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlpmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub blocks: usize,
}

impl Architecture {
    /// The 2D-experiment network: 4 blocks of width 64, time width 32.
    pub fn standard(input_dim: usize) -> Self {
        Self { input_dim, hidden: 64, time_dim: 32, blocks: 4 }
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(invalid("architecture dimensions must be positive"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid("time embedding width must be even and at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    wa: usize,
    ba: usize,
    wb: usize,
    bb: usize,
    p: usize,
    pb: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    wt1: usize,
    bt1: usize,
    wt2: usize,
    bt2: usize,
    win: usize,
    bin: usize,
    blocks: Vec<BlockLayout>,
    wout: usize,
    bout: usize,
    total: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let (d, h, e) = (a.input_dim, a.hidden, a.time_dim);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let wt1 = take(e * e);
        let bt1 = take(e);
        let wt2 = take(e * e);
        let bt2 = take(e);
        let win = take(h * d);
        let bin = take(h);
        let blocks = (0..a.blocks)
            .map(|_| BlockLayout {
                wa: take(h * h),
                ba: take(h),
                wb: take(h * h),
                bb: take(h),
                p: take(h * e),
                pb: take(h),
            })
            .collect();
        let wout = take(d * h);
        let bout = take(d);
        Self { wt1, bt1, wt2, bt2, win, bin, blocks, wout, bout, total: off }
    }
}

fn mat(p: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout")
}

fn vector(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

fn mat_mut(p: &mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[off..off + rows * cols]).expect("layout")
}

fn vector_mut(p: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[off..off + n])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    silu_and_grad(x).1
}

fn silu_and_grad(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    (x * s, s * (1.0 + x * (1.0 - s)))
}

/// Transformer-style sinusoidal embedding `[sin(p w_i), cos(p w_i)]` with
/// `w_i = 10000^{-i / (width/2)}`.
pub fn sinusoidal_embedding(position: f64, width: usize) -> Array1<f64> {
    let half = width / 2;
    let mut e = Array1::zeros(width);
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (sn, cs) = (position * w).sin_cos();
        e[i] = sn;
        e[half + i] = cs;
    }
    e
}

/// Embedding position for step `t` of `horizon`: the time is rescaled to
/// `(0, 1]` and multiplied by 1000.
pub fn time_position(t: usize, horizon: usize) -> f64 {
    1000.0 * t as f64 / horizon as f64
}

/// Anything that predicts the noise residual for a batch of states at one
/// timestep.
pub trait NoisePredictor: Sync {
    fn input_dim(&self) -> usize;

    /// `ys` is `(n, d)`; returns `(n, d)`.
    fn predict(&self, ys: ArrayView2<f64>, t: usize, horizon: usize) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsModel {
    arch: Architecture,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub grads: Vec<f64>,
}

struct TimeCache {
    e: Array1<f64>,
    h1: Array1<f64>,
    s1: Array1<f64>,
    h2: Array1<f64>,
    temb: Array1<f64>,
    proj: Vec<Array1<f64>>,
}

/// Block activations kept for the backward pass; `da` and `db` hold the SiLU
/// derivatives at the two pre-activations.
struct BlockCache {
    h_in: Array2<f64>,
    da: Array2<f64>,
    u: Array2<f64>,
    db: Array2<f64>,
}

struct ForwardCache {
    times: Vec<TimeCache>,
    row_time: Vec<usize>,
    blocks: Vec<BlockCache>,
    h_out: Array2<f64>,
}

impl EpsModel {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let l = Layout::new(&arch);
        let (d, h, e) = (arch.input_dim, arch.hidden, arch.time_dim);
        let mut fill = |p: &mut [f64], off: usize, n: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut p[off..off + n] {
                *x = rng.random_range(-bound..bound);
            }
        };
        let p = &mut m.params;
        fill(p, l.wt1, e * e + e, e);
        fill(p, l.wt2, e * e + e, e);
        fill(p, l.win, h * d + h, d);
        for b in &l.blocks {
            fill(p, b.wa, h * h + h, h);
            fill(p, b.wb, h * h + h, h);
            fill(p, b.p, h * e + h, e);
        }
        fill(p, l.wout, d * h + d, h);
        Ok(m)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, params: vec![0.0; arch.param_count()] })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(DlpmError::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Noise prediction for a single state.
    pub fn forward(&self, y: &[f64], t: usize, horizon: usize) -> Result<Vec<f64>> {
        let ys = ArrayView2::from_shape((1, y.len()), y).map_err(|e| DlpmError::Shape(e.to_string()))?;
        Ok(self.forward_batch(ys, &[t], horizon)?.into_raw_vec_and_offset().0)
    }

    /// Noise predictions for rows of `ys`, row `r` at timestep `ts[r]`.
    pub fn forward_batch(&self, ys: ArrayView2<f64>, ts: &[usize], horizon: usize) -> Result<Array2<f64>> {
        self.check_inputs(ys, ts, horizon)?;
        Ok(self.run(ys, ts, horizon).0)
    }

    fn check_inputs(&self, ys: ArrayView2<f64>, ts: &[usize], horizon: usize) -> Result<()> {
        if ys.ncols() != self.arch.input_dim {
            return Err(DlpmError::Shape(format!(
                "model expects dimension {}, got {}",
                self.arch.input_dim,
                ys.ncols()
            )));
        }
        if ts.len() != ys.nrows() {
            return Err(DlpmError::Shape(format!("{} rows but {} timesteps", ys.nrows(), ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > horizon) {
            return Err(invalid(format!("timestep {t} outside 1..={horizon}")));
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(DlpmError::NonFinite("model input".into()));
        }
        Ok(())
    }

    fn time_features(&self, l: &Layout, t: usize, horizon: usize) -> TimeCache {
        let p = &self.params;
        let (h, e) = (self.arch.hidden, self.arch.time_dim);
        let emb = sinusoidal_embedding(time_position(t, horizon), e);
        let h1 = mat(p, l.wt1, e, e).dot(&emb) + vector(p, l.bt1, e);
        let s1 = h1.mapv(silu);
        let h2 = mat(p, l.wt2, e, e).dot(&s1) + vector(p, l.bt2, e);
        let temb = h2.mapv(silu);
        let proj = l
            .blocks
            .iter()
            .map(|b| mat(p, b.p, h, e).dot(&temb) + vector(p, b.pb, h))
            .collect();
        TimeCache { e: emb, h1, s1, h2, temb, proj }
    }

    fn run(&self, ys: ArrayView2<f64>, ts: &[usize], horizon: usize) -> (Array2<f64>, ForwardCache) {
        let l = Layout::new(&self.arch);
        let p = &self.params;
        let (d, h) = (self.arch.input_dim, self.arch.hidden);

        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut times = Vec::new();
        let row_time: Vec<usize> = ts
            .iter()
            .map(|&t| {
                *slot.entry(t).or_insert_with(|| {
                    times.push(self.time_features(&l, t, horizon));
                    times.len() - 1
                })
            })
            .collect();

        let mut x = ys.dot(&mat(p, l.win, h, d).t()) + vector(p, l.bin, h);
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for (k, bl) in l.blocks.iter().enumerate() {
            let mut da = x.dot(&mat(p, bl.wa, h, h).t()) + vector(p, bl.ba, h);
            let mut u = Array2::zeros(da.raw_dim());
            Zip::from(&mut u).and(&mut da).for_each(|u, a| (*u, *a) = silu_and_grad(*a));
            for (mut row, &ti) in u.rows_mut().into_iter().zip(&row_time) {
                row += &times[ti].proj[k];
            }
            let mut db = u.dot(&mat(p, bl.wb, h, h).t()) + vector(p, bl.bb, h);
            let mut next = x.clone();
            Zip::from(&mut next).and(&mut db).for_each(|n, b| {
                let (v, g) = silu_and_grad(*b);
                *n += v;
                *b = g;
            });
            blocks.push(BlockCache { h_in: x, da, u, db });
            x = next;
        }
        let out = x.dot(&mat(p, l.wout, d, h).t()) + vector(p, l.bout, d);
        (out, ForwardCache { times, row_time, blocks, h_out: x })
    }

    /// Loss `sum_r w_r ||eps(y_r, t_r) - target_r|| / sum_r w_r` and its
    /// gradient.
    pub fn backward(
        &self,
        ys: ArrayView2<f64>,
        ts: &[usize],
        targets: ArrayView2<f64>,
        weights: &[f64],
        horizon: usize,
    ) -> Result<GradientBundle> {
        Ok(self.backward_with_norms(ys, ts, targets, weights, horizon)?.0)
    }

    /// [`Self::backward`] plus the per-row residual norms.
    pub fn backward_with_norms(
        &self,
        ys: ArrayView2<f64>,
        ts: &[usize],
        targets: ArrayView2<f64>,
        weights: &[f64],
        horizon: usize,
    ) -> Result<(GradientBundle, Vec<f64>)> {
        self.check_inputs(ys, ts, horizon)?;
        if ys.nrows() == 0 {
            return Err(DlpmError::Empty("gradient needs a nonempty batch"));
        }
        if targets.dim() != ys.dim() || weights.len() != ys.nrows() {
            return Err(DlpmError::Shape("targets and weights must align with inputs".into()));
        }
        let total_w: f64 = weights.iter().sum();
        if !(total_w > 0.0) {
            return Err(invalid("weights must have positive sum"));
        }
        let (out, cache) = self.run(ys, ts, horizon);
        let mut res = &out - &targets;
        let mut loss = 0.0;
        let mut norms = Vec::with_capacity(ys.nrows());
        for (mut row, &w) in res.rows_mut().into_iter().zip(weights) {
            let norm = row.dot(&row).sqrt();
            norms.push(norm);
            loss += w * norm;
            if norm > 0.0 {
                row *= w / (total_w * norm);
            } else {
                row.fill(0.0);
            }
        }
        let loss = loss / total_w;
        if !loss.is_finite() {
            return Err(DlpmError::NonFinite(format!("loss {loss}")));
        }
        let grads = self.backprop(ys, res, &cache);
        Ok((GradientBundle { loss, grads }, norms))
    }

    /// Gradient of `sum_r <d_out_r, eps(y_r)>` with respect to the parameters.
    fn backprop(&self, ys: ArrayView2<f64>, d_out: Array2<f64>, cache: &ForwardCache) -> Vec<f64> {
        let l = Layout::new(&self.arch);
        let p = &self.params;
        let (d, h, e) = (self.arch.input_dim, self.arch.hidden, self.arch.time_dim);
        let mut g = vec![0.0; l.total];

        general_mat_mul(1.0, &d_out.t(), &cache.h_out, 0.0, &mut mat_mut(&mut g, l.wout, d, h));
        vector_mut(&mut g, l.bout, d).assign(&d_out.sum_axis(Axis(0)));
        let mut dh = d_out.dot(&mat(p, l.wout, d, h));

        let n_times = cache.times.len();
        let mut d_temb = vec![Array1::<f64>::zeros(e); n_times];
        for (k, bl) in l.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[k];
            let db = &c.db * &dh;
            general_mat_mul(1.0, &db.t(), &c.u, 0.0, &mut mat_mut(&mut g, bl.wb, h, h));
            vector_mut(&mut g, bl.bb, h).assign(&db.sum_axis(Axis(0)));
            let du = db.dot(&mat(p, bl.wb, h, h));

            let mut dq = Array2::<f64>::zeros((n_times, h));
            for (row, &ti) in du.rows().into_iter().zip(&cache.row_time) {
                let mut acc = dq.row_mut(ti);
                acc += &row;
            }
            let proj = mat(p, bl.p, h, e);
            for (ti, tc) in cache.times.iter().enumerate() {
                let q = dq.row(ti);
                let mut gp = mat_mut(&mut g, bl.p, h, e);
                for (i, qi) in q.iter().enumerate() {
                    gp.row_mut(i).scaled_add(*qi, &tc.temb);
                }
                vector_mut(&mut g, bl.pb, h).scaled_add(1.0, &q);
                d_temb[ti] += &proj.t().dot(&q);
            }

            let da = &c.da * &du;
            general_mat_mul(1.0, &da.t(), &c.h_in, 0.0, &mut mat_mut(&mut g, bl.wa, h, h));
            vector_mut(&mut g, bl.ba, h).assign(&da.sum_axis(Axis(0)));
            dh += &da.dot(&mat(p, bl.wa, h, h));
        }

        general_mat_mul(1.0, &dh.t(), &ys, 0.0, &mut mat_mut(&mut g, l.win, h, d));
        vector_mut(&mut g, l.bin, h).assign(&dh.sum_axis(Axis(0)));

        let wt2 = mat(p, l.wt2, e, e);
        for (tc, dt) in cache.times.iter().zip(&d_temb) {
            let dh2 = tc.h2.mapv(silu_grad) * dt;
            add_outer(&mut mat_mut(&mut g, l.wt2, e, e), &dh2, &tc.s1);
            vector_mut(&mut g, l.bt2, e).scaled_add(1.0, &dh2);
            let dh1 = tc.h1.mapv(silu_grad) * wt2.t().dot(&dh2);
            add_outer(&mut mat_mut(&mut g, l.wt1, e, e), &dh1, &tc.e);
            vector_mut(&mut g, l.bt1, e).scaled_add(1.0, &dh1);
        }
        g
    }
}

fn add_outer(m: &mut ArrayViewMut2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, ai) in a.iter().enumerate() {
        m.row_mut(i).scaled_add(*ai, b);
    }
}

impl NoisePredictor for EpsModel {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict(&self, ys: ArrayView2<f64>, t: usize, horizon: usize) -> Result<Array2<f64>> {
        let ts = vec![t; ys.nrows()];
        self.forward_batch(ys, &ts, horizon)
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(DlpmError::Shape(format!(
            "params {}, grads {}, optimizer state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Serialized model: architecture, schedule identity, seed, step and all
/// parameters as round-trip decimal floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub schedule: crate::schedule::ScheduleSpec,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &EpsModel, schedule: crate::schedule::ScheduleSpec, seed: u64, step: u64) -> Self {
        Self { architecture: model.arch, schedule, seed, step, params: model.params.clone() }
    }

    pub fn model(&self) -> Result<EpsModel> {
        EpsModel::from_params(self.architecture, self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| DlpmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DlpmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
