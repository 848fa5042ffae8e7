//! Python bindings for the `dlpm` crate.
//!
//! Matrices cross the boundary as lists of rows.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyComplex;

use dlpm::cli::{gen_gaussian_grid, gen_stable2d};
use dlpm::model::{Architecture, Checkpoint, EpsModel, NoisePredictor};
use dlpm::rng::seeded;
use dlpm::sample::{SamplerConfig, SamplerMethod};
use dlpm::schedule::{ScheduleSpec, NoiseSchedule};
use dlpm::stable::{Isotropy, StableParams};
use dlpm::train::TrainConfig;
use dlpm::DlpmError;

fn py_err(e: DlpmError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Stable law `S_alpha(mu, sigma)` with skewness `beta`.
#[pyclass(name = "StableParams", frozen)]
struct PyStableParams(StableParams);

#[pymethods]
impl PyStableParams {
    #[new]
    #[pyo3(signature = (alpha, beta=0.0, mu=0.0, sigma=1.0))]
    fn new(alpha: f64, beta: f64, mu: f64, sigma: f64) -> PyResult<Self> {
        StableParams::new(alpha, beta, mu, sigma).map(Self).map_err(py_err)
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        dlpm::stable::sample_stable(&self.0, n, &mut seeded(seed)).map_err(py_err)
    }

    fn characteristic_function<'py>(&self, py: Python<'py>, u: f64) -> Bound<'py, PyComplex> {
        let c = self.0.characteristic_function(u);
        PyComplex::from_doubles(py, c.re, c.im)
    }

    fn __repr__(&self) -> String {
        let p = &self.0;
        format!("StableParams(alpha={}, beta={}, mu={}, sigma={})", p.alpha, p.beta, p.mu, p.sigma)
    }
}

/// Draws of the positive stable mixing variable.
#[pyfunction]
fn sample_positive_stable(alpha: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    dlpm::stable::sample_positive_stable(alpha, n, &mut seeded(seed)).map_err(py_err)
}

/// Noise schedule with per-step and cumulative factors, indexed from 0.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule {
    spec: ScheduleSpec,
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    /// Cosine scale-preserving schedule.
    #[staticmethod]
    fn cosine(steps: usize, alpha: f64) -> PyResult<Self> {
        let spec = ScheduleSpec::cosine(steps, alpha);
        let inner = spec.build().map_err(py_err)?;
        Ok(Self { spec, inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    /// `gamma_cum[t]` for `t = 0..=T`.
    #[getter]
    fn gamma_cum(&self) -> Vec<f64> {
        (0..=self.inner.steps()).map(|t| self.inner.gamma_cum(t)).collect()
    }

    /// `sigma_cum[t]` for `t = 0..=T`.
    #[getter]
    fn sigma_cum(&self) -> Vec<f64> {
        (0..=self.inner.steps()).map(|t| self.inner.sigma_cum(t)).collect()
    }

    /// Draws `y_t` from `y0` and returns it with the normalized noise target.
    fn marginal_sample(&self, y0: Vec<f64>, t: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let f = dlpm::bridge::marginal_sample(&y0, &self.inner, t, &mut seeded(seed), Isotropy::Isotropic)
            .map_err(py_err)?;
        Ok((f.yt, f.eps_target))
    }
}

/// Noise-prediction network.
#[pyclass(name = "EpsModel", frozen)]
struct PyModel(EpsModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim, seed=0))]
    fn new(input_dim: usize, seed: u64) -> PyResult<Self> {
        EpsModel::new(Architecture::standard(input_dim), &mut seeded(seed)).map(Self).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params().len()
    }

    fn predict(&self, ys: Vec<Vec<f64>>, t: usize, horizon: usize) -> PyResult<Vec<Vec<f64>>> {
        let ys = to_array(ys)?;
        Ok(to_rows(&self.0.predict(ys.view(), t, horizon).map_err(py_err)?))
    }

    fn save(&self, path: &str, schedule: &PySchedule) -> PyResult<()> {
        Checkpoint::new(&self.0, schedule.spec.clone(), 0, 0)
            .save(std::path::Path::new(path))
            .map_err(py_err)
    }

    /// Loads a checkpoint, returning the model and its schedule.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, PySchedule)> {
        let ckpt = Checkpoint::load(std::path::Path::new(path)).map_err(py_err)?;
        let inner = ckpt.schedule.build().map_err(py_err)?;
        let model = ckpt.model().map_err(py_err)?;
        Ok((Self(model), PySchedule { spec: ckpt.schedule, inner }))
    }
}

/// Trains a fresh model on `data` and returns it with the per-step losses.
#[pyfunction]
#[pyo3(signature = (data, schedule, steps=1000, batch_size=1024, lr=5e-3, mom_groups=1, seed=0))]
fn train(
    data: Vec<Vec<f64>>,
    schedule: &PySchedule,
    steps: usize,
    batch_size: usize,
    lr: f64,
    mom_groups: usize,
    seed: u64,
) -> PyResult<(PyModel, Vec<f64>)> {
    let data = to_array(data)?;
    let mut model = EpsModel::new(Architecture::standard(data.ncols()), &mut seeded(seed)).map_err(py_err)?;
    let cfg = TrainConfig { batch_size, total_steps: steps, lr, mom_groups, isotropy: Isotropy::Isotropic, seed };
    let report = dlpm::train::train(&mut model, data.view(), &schedule.inner, &cfg).map_err(py_err)?;
    Ok((PyModel(model), report.trace.iter().map(|r| r.loss).collect()))
}

/// Draws `n` samples with `method` (dlpm, dlim, lim, lim_ode).
#[pyfunction]
#[pyo3(signature = (model, schedule, n, method="dlpm", steps=None, seed=0))]
fn sample(
    model: &PyModel,
    schedule: &PySchedule,
    n: usize,
    method: &str,
    steps: Option<usize>,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let method: SamplerMethod = method.parse().map_err(py_err)?;
    let cfg = SamplerConfig {
        method,
        steps: steps.unwrap_or(schedule.inner.steps()),
        seed,
        batch: n,
        isotropy: Isotropy::Isotropic,
    };
    let out = dlpm::sample::sample(&model.0, &schedule.inner, &cfg, &mut seeded(seed)).map_err(py_err)?;
    Ok(to_rows(&out.samples))
}

#[pyfunction]
#[pyo3(signature = (real, gen, xi=0.95))]
fn msle(real: Vec<Vec<f64>>, gen: Vec<Vec<f64>>, xi: f64) -> PyResult<f64> {
    let (real, gen) = (to_array(real)?, to_array(gen)?);
    dlpm::eval::msle(real.view(), gen.view(), xi).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (real, gen, k=3))]
fn precision_recall(real: Vec<Vec<f64>>, gen: Vec<Vec<f64>>, k: usize) -> PyResult<(f64, f64)> {
    let (real, gen) = (to_array(real)?, to_array(gen)?);
    dlpm::eval::precision_recall(real.view(), gen.view(), k).map_err(py_err)
}

#[pyfunction]
fn f1_pr(precision: f64, recall: f64) -> f64 {
    dlpm::eval::f1_pr(precision, recall)
}

#[pyfunction]
fn stable2d(n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&gen_stable2d(n, &mut seeded(seed)).map_err(py_err)?))
}

/// Grid mixture points and their component labels.
#[pyfunction]
fn gaussian_grid(n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let (x, labels) = gen_gaussian_grid(n, &mut seeded(seed)).map_err(py_err)?;
    Ok((to_rows(&x), labels))
}

#[pymodule]
fn dlpm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStableParams>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_positive_stable, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(msle, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall, m)?)?;
    m.add_function(wrap_pyfunction!(f1_pr, m)?)?;
    m.add_function(wrap_pyfunction!(stable2d, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_grid, m)?)?;
    Ok(())
}
