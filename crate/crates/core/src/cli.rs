//! Experiment plumbing: 2-D datasets, run configuration, the run directory,
//! and the `train` / `sample` / `eval` / `verify` commands.
//!
//! A run directory holds `config.json`, `checkpoint.json`, `loss.csv`,
//! `eval_real.csv` (held-out real data), sample CSVs with `.meta.json`
//! sidecars, `metrics.jsonl` and the append-only `run.json` record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlpmError, Result};
use crate::eval::{f1_pr, msle, precision_recall, MetricsReport, DEFAULT_K, DEFAULT_XI};
use crate::model::{Architecture, Checkpoint, EpsModel};
use crate::rng::{seeded, stream};
use crate::sample::{dlim_sample, lim_sample, sample, SampleOutcome, SamplerConfig, SamplerMethod};
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::stable::{sample_multivariate_stable, Isotropy, MultivariateStableSpec};
use crate::train::{train_with, write_trace_csv, TrainConfig};
use crate::verify::{run_verification_suite, VerificationReport, VerifyOptions};

pub const STABLE2D_ALPHA: f64 = 1.7;
pub const STABLE2D_SCALE: f64 = 0.05;
pub const GRID_STD: f64 = 0.05;
/// Mixture weights of the nine grid components before renormalization.
pub const GRID_WEIGHTS: [f64; 9] = [0.01, 0.02, 0.02, 0.05, 0.05, 0.1, 0.1, 0.15, 0.2];

/// Isotropic `alpha = 1.7` stable points in 2-D with scale 0.05.
pub fn gen_stable2d<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Array2<f64>> {
    let spec = MultivariateStableSpec {
        dim: 2,
        alpha: STABLE2D_ALPHA,
        mu: vec![0.0; 2],
        sigma: STABLE2D_SCALE,
        isotropy: Isotropy::Isotropic,
    };
    sample_multivariate_stable(&spec, n, rng)
}

/// Mean of grid component `i` on the lattice `{-1, 0, 1}^2`, row-major.
pub fn grid_mean(i: usize) -> [f64; 2] {
    [(i % 3) as f64 - 1.0, (i / 3) as f64 - 1.0]
}

/// Unbalanced nine-component Gaussian mixture on `{-1, 0, 1}^2` with the
/// component label of every point.
pub fn gen_gaussian_grid<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(Array2<f64>, Vec<usize>)> {
    gen_gaussian_grid_with_std(n, GRID_STD, rng)
}

pub fn gen_gaussian_grid_with_std<R: Rng + ?Sized>(
    n: usize,
    std: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if !(std >= 0.0) {
        return Err(invalid(format!("component std must be nonnegative, got {std}")));
    }
    let pick = WeightedIndex::new(GRID_WEIGHTS).map_err(|e| invalid(e.to_string()))?;
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for mut row in x.rows_mut() {
        let c = pick.sample(rng);
        let m = grid_mean(c);
        for j in 0..2 {
            let g: f64 = StandardNormal.sample(rng);
            row[j] = m[j] + std * g;
        }
        labels.push(c);
    }
    Ok((x, labels))
}

pub fn single_point(n: usize, point: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((n, point.len()), |(_, j)| point[j])
}

/// Writes a matrix as CSV with header `x0,x1,...`. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_matrix_csv(path: &Path, x: ArrayView2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..x.ncols()).map(|j| format!("x{j}")))?;
    for row in x.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|source| io_err(path, source))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d {
            return Err(DlpmError::Shape(format!("{}: row {} has {} fields, expected {d}", path.display(), n + 1, rec.len())));
        }
        for f in rec.iter() {
            data.push(f.trim().parse::<f64>().map_err(|e| invalid(format!("{}: '{f}': {e}", path.display())))?);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, d), data).map_err(|e| DlpmError::Shape(e.to_string()))
}

fn io_err(path: &Path, source: std::io::Error) -> DlpmError {
    DlpmError::Io { path: path.display().to_string(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Stable2d,
    GaussianGrid,
    SinglePoint,
    File,
}

impl std::str::FromStr for DatasetKind {
    type Err = DlpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stable2d" => Ok(Self::Stable2d),
            "gaussian_grid" => Ok(Self::GaussianGrid),
            "single_point" => Ok(Self::SinglePoint),
            "file" => Ok(Self::File),
            other => Err(invalid(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    /// The point of a `single_point` dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    /// CSV file of a `file` dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Cumulative scales of a scale-exploding schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_cum: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub xi: f64,
    pub k: usize,
    pub n_eval: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { xi: DEFAULT_XI, k: DEFAULT_K, n_eval: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub alpha: f64,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Seeds the dataset draws. Training and sampling use their own seeds.
    pub seed: u64,
}

impl ExperimentConfig {
    /// 2-D defaults: 32000 training points, `T = 100`, batch 1024,
    /// 10000 Adam steps at lr `5e-3`, 10000 evaluation points.
    pub fn defaults(kind: DatasetKind, alpha: f64) -> Self {
        let name = match kind {
            DatasetKind::Stable2d => "stable2d",
            DatasetKind::GaussianGrid => "gaussian_grid",
            DatasetKind::SinglePoint => "single_point",
            DatasetKind::File => "file",
        };
        Self {
            dataset: DatasetConfig {
                kind,
                n_train: 32_000,
                point: (kind == DatasetKind::SinglePoint).then(|| vec![0.5, -0.5]),
                path: None,
            },
            alpha,
            schedule: ScheduleConfig { kind: ScheduleKind::ScalePreserving, steps: 100, sigma_cum: None },
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from(format!("runs/{name}_alpha{alpha}")),
            seed: 0,
        }
    }

    /// Sets the dataset, training and sampling seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule.kind,
            steps: self.schedule.steps,
            alpha: self.alpha,
            sigma_cum: self.schedule.sigma_cum.clone(),
        }
    }

    pub fn input_dim(&self) -> Result<usize> {
        match self.dataset.kind {
            DatasetKind::Stable2d | DatasetKind::GaussianGrid => Ok(2),
            DatasetKind::SinglePoint => Ok(self.point()?.len()),
            DatasetKind::File => Ok(read_matrix_csv(self.file_path()?)?.ncols()),
        }
    }

    fn point(&self) -> Result<&[f64]> {
        match &self.dataset.point {
            Some(p) if !p.is_empty() => Ok(p),
            _ => Err(invalid("single_point dataset needs a nonempty 'point'")),
        }
    }

    fn file_path(&self) -> Result<&Path> {
        self.dataset.path.as_deref().ok_or_else(|| invalid("file dataset needs a 'path'"))
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule_spec().build()?;
        self.train.validate()?;
        self.sampler.validate(&schedule)?;
        if self.dataset.n_train == 0 {
            return Err(invalid("n_train must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.eval.xi) || self.eval.k == 0 || self.eval.n_eval == 0 {
            return Err(invalid("eval needs xi in [0, 1), k >= 1 and n_eval >= 1"));
        }
        match self.dataset.kind {
            DatasetKind::SinglePoint => {
                self.point()?;
            }
            DatasetKind::File => {
                self.file_path()?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Training set, drawn from stream 1 of the dataset seed.
    pub fn training_data(&self) -> Result<Array2<f64>> {
        self.draw(self.dataset.n_train, 1)
    }

    /// Held-out real data, drawn from stream 2 of the dataset seed. A file
    /// dataset is its own reference.
    pub fn evaluation_data(&self) -> Result<Array2<f64>> {
        self.draw(self.eval.n_eval, 2)
    }

    fn draw(&self, n: usize, id: u64) -> Result<Array2<f64>> {
        let mut rng = stream(self.seed, id);
        match self.dataset.kind {
            DatasetKind::Stable2d => gen_stable2d(n, &mut rng),
            DatasetKind::GaussianGrid => Ok(gen_gaussian_grid(n, &mut rng)?.0),
            DatasetKind::SinglePoint => Ok(single_point(n, self.point()?)),
            DatasetKind::File => read_matrix_csv(self.file_path()?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub seconds: f64,
}

/// One sample file written into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub method: SamplerMethod,
    pub steps: usize,
    pub n: usize,
    pub seed: u64,
    pub restarted: usize,
    pub failed: usize,
    #[serde(default)]
    pub gamma_range: Option<(f64, f64)>,
    #[serde(default)]
    pub latent: Option<String>,
}

/// Append-only record of a run. Artifact paths are relative to the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub loss_trace: Option<String>,
    #[serde(default)]
    pub eval_real: Option<String>,
    #[serde(default)]
    pub train_error: Option<String>,
    #[serde(default)]
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub metrics: Vec<MetricsReport>,
    #[serde(default)]
    pub timings: Vec<Timing>,
}

impl RunRecord {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            checkpoint: None,
            loss_trace: None,
            eval_real: None,
            train_error: None,
            samples: Vec::new(),
            metrics: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(RUN_FILE))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        for f in [&self.checkpoint, &self.loss_trace, &self.eval_real].into_iter().flatten() {
            if !run_dir.join(f).exists() {
                return Err(invalid(format!("recorded artifact {f} is missing")));
            }
        }
        write_json(&run_dir.join(RUN_FILE), self)
    }
}

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_REAL_FILE: &str = "eval_real.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains a model for `config` into `run_dir` (or `config.output_dir`).
/// On divergence the partial record and last model are still written and
/// the error is returned.
pub fn cmd_train(config: &ExperimentConfig, run_dir: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let dir = run_dir.unwrap_or(&config.output_dir).to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let start = Instant::now();
    config.save(&dir.join(CONFIG_FILE))?;

    let mut record = RunRecord::new(config.clone());
    let eval_real = config.evaluation_data()?;
    write_matrix_csv(&dir.join(EVAL_REAL_FILE), eval_real.view())?;
    record.eval_real = Some(EVAL_REAL_FILE.into());

    let data = config.training_data()?;
    let spec = config.schedule_spec();
    let schedule = spec.build()?;
    let arch = Architecture::standard(data.ncols());
    let mut model = EpsModel::new(arch, &mut stream(config.train.seed, 0))?;
    let mut last_step = 0;
    let result = train_with(&mut model, data.view(), &schedule, &config.train, &mut |step, _| {
        last_step = step;
        Ok(())
    });

    Checkpoint::new(&model, spec, config.train.seed, last_step as u64).save(&dir.join(CHECKPOINT_FILE))?;
    record.checkpoint = Some(CHECKPOINT_FILE.into());
    let outcome = match result {
        Ok(report) => {
            write_trace_csv(&dir.join(LOSS_FILE), &report.trace)?;
            record.loss_trace = Some(LOSS_FILE.into());
            Ok(())
        }
        Err(e) => {
            record.train_error = Some(e.to_string());
            Err(e)
        }
    };
    record.timings.push(Timing { command: "train".into(), seconds: start.elapsed().as_secs_f64() });
    record.save(&dir)?;
    outcome.map(|_| record)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleOptions {
    pub method: Option<SamplerMethod>,
    pub steps: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Latent CSV for the deterministic samplers.
    pub latent: Option<PathBuf>,
    /// Output CSV; defaults to `samples_<method>_<steps>.csv` in the run.
    pub out: Option<PathBuf>,
}

/// Sidecar written next to every sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub method: SamplerMethod,
    pub steps: usize,
    pub n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub checkpoint_step: u64,
    pub restarted: usize,
    pub failed: usize,
    pub gamma_range: Option<(f64, f64)>,
    pub latent: Option<String>,
}

pub fn meta_path(samples: &Path) -> PathBuf {
    samples.with_extension("meta.json")
}

/// Draws samples from the run's checkpoint and writes them as CSV.
pub fn cmd_sample(run_dir: &Path, opts: &SampleOptions) -> Result<PathBuf> {
    let start = Instant::now();
    let mut record = RunRecord::load(run_dir)?;
    let ckpt_path = run_dir.join(record.checkpoint.as_deref().unwrap_or(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ckpt.model()?;
    let schedule = ckpt.schedule.build()?;

    let mut cfg = record.config.sampler.clone();
    if let Some(m) = opts.method {
        cfg.method = m;
    }
    if let Some(s) = opts.steps {
        cfg.steps = s;
    }
    if let Some(n) = opts.n {
        cfg.batch = n;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.validate(&schedule)?;

    let latent = match &opts.latent {
        Some(p) => {
            if !cfg.method.is_deterministic() {
                return Err(invalid("a latent file only applies to dlim and lim_ode"));
            }
            let l = read_matrix_csv(p)?;
            cfg.batch = l.nrows();
            Some(l)
        }
        None => None,
    };
    let outcome = match (&latent, cfg.method) {
        (Some(l), SamplerMethod::Dlim) => {
            let y = dlim_sample(&model, &schedule, &cfg, Some(l.view()))?;
            finite_outcome(y)
        }
        (Some(l), _) => {
            let y = crate::sample::lim_sample_from_latent(&model, &schedule, &cfg, l.view())?;
            finite_outcome(y)
        }
        (None, SamplerMethod::LimOde) => lim_sample(&model, &schedule, &cfg, &mut seeded(cfg.seed), true)?,
        (None, _) => sample(&model, &schedule, &cfg, &mut seeded(cfg.seed))?,
    };
    if outcome.samples.nrows() == 0 {
        return Err(DlpmError::NonFinite(format!("all {} chains failed", cfg.batch)));
    }

    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| run_dir.join(format!("samples_{}_{}.csv", cfg.method.name(), cfg.steps)));
    write_matrix_csv(&out, outcome.samples.view())?;
    let latent_name = opts.latent.as_ref().map(|p| p.display().to_string());
    let meta = SampleMeta {
        method: cfg.method,
        steps: cfg.steps,
        n: outcome.samples.nrows(),
        seed: cfg.seed,
        alpha: schedule.alpha(),
        checkpoint_step: ckpt.step,
        restarted: outcome.restarted,
        failed: outcome.failed,
        gamma_range: outcome.gamma_range,
        latent: latent_name.clone(),
    };
    write_json(&meta_path(&out), &meta)?;

    record.samples.push(SampleRecord {
        file: out.display().to_string(),
        method: cfg.method,
        steps: cfg.steps,
        n: meta.n,
        seed: cfg.seed,
        restarted: meta.restarted,
        failed: meta.failed,
        gamma_range: meta.gamma_range,
        latent: latent_name,
    });
    record.timings.push(Timing { command: "sample".into(), seconds: start.elapsed().as_secs_f64() });
    record.save(run_dir)?;
    Ok(out)
}

fn finite_outcome(y: Array2<f64>) -> SampleOutcome {
    let keep: Vec<usize> = (0..y.nrows()).filter(|&i| y.row(i).iter().all(|v| v.is_finite())).collect();
    let failed = y.nrows() - keep.len();
    SampleOutcome { samples: y.select(ndarray::Axis(0), &keep), restarted: 0, failed, gamma_range: None }
}

/// Metric values, each empty when its preconditions failed.
#[derive(Debug, Default)]
pub struct Scores {
    pub msle: Option<f64>,
    pub precision_recall: Option<(f64, f64)>,
    pub errors: Vec<DlpmError>,
}

/// Scores `gen` against `real`.
pub fn evaluate(real: ArrayView2<f64>, gen: ArrayView2<f64>, eval: &EvalConfig) -> Result<Scores> {
    if gen.nrows() == 0 {
        return Err(DlpmError::Empty("generated sample"));
    }
    if real.nrows() == 0 {
        return Err(DlpmError::Empty("real sample"));
    }
    let mut errors = Vec::new();
    let msle = msle(real, gen, eval.xi).map_err(|e| errors.push(e)).ok();
    let precision_recall = precision_recall(real, gen, eval.k).map_err(|e| errors.push(e)).ok();
    Ok(Scores { msle, precision_recall, errors })
}

/// Evaluates a sample CSV against the run's held-out real data, appends the
/// report to `metrics.jsonl` and the run record.
pub fn cmd_eval(run_dir: &Path, samples: &Path) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut record = RunRecord::load(run_dir)?;
    let real = read_matrix_csv(&run_dir.join(record.eval_real.as_deref().unwrap_or(EVAL_REAL_FILE)))?;
    let gen = read_matrix_csv(samples)?;
    let Scores { msle: m, precision_recall: pr, errors } = evaluate(real.view(), gen.view(), &record.config.eval)?;
    if m.is_none() && pr.is_none() {
        return Err(errors.into_iter().next().unwrap_or(DlpmError::Empty("metrics")));
    }
    for e in &errors {
        eprintln!("warning: metric skipped: {e}");
    }
    let meta: Option<SampleMeta> = read_json(&meta_path(samples)).ok();
    let report = MetricsReport {
        msle: m,
        precision: pr.map(|p| p.0),
        recall: pr.map(|p| p.1),
        f1: pr.map(|(p, r)| f1_pr(p, r)),
        n_real: real.nrows(),
        n_gen: gen.nrows(),
        seed: meta.as_ref().map_or(record.config.sampler.seed, |m| m.seed),
        method: meta.as_ref().map_or("unknown", |m| m.method.name()).to_string(),
        alpha: record.config.alpha,
        steps: meta.as_ref().map_or(0, |m| m.steps),
    };
    let path = run_dir.join(METRICS_FILE);
    let mut lines = fs::read_to_string(&path).unwrap_or_default();
    lines.push_str(&serde_json::to_string(&report)?);
    lines.push('\n');
    fs::write(&path, lines).map_err(|e| io_err(&path, e))?;
    record.metrics.push(report.clone());
    record.timings.push(Timing { command: "eval".into(), seconds: start.elapsed().as_secs_f64() });
    record.save(run_dir)?;
    Ok(report)
}

/// Runs the verification suite and prints its table.
pub fn cmd_verify(seed: u64, corrupt_c_a: Option<f64>) -> Result<VerificationReport> {
    let opts = VerifyOptions { corrupt_c_a, ..VerifyOptions::new(seed) };
    let report = run_verification_suite(&opts)?;
    print!("{}", report.table());
    Ok(report)
}
