use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dlpm::cli::{cmd_eval, cmd_sample, cmd_train, cmd_verify, DatasetKind, ExperimentConfig, SampleOptions};
use dlpm::sample::SamplerMethod;
use dlpm::DlpmError;

/// Heavy-tailed diffusion models on small datasets.
///
/// The thread count of parallel sections is read from DLPM_THREADS.
#[derive(Parser)]
#[command(name = "dlpm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        /// Experiment config (JSON). Without it, 2-D defaults are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset for the default config: stable2d, gaussian_grid, single_point.
        #[arg(long, default_value = "stable2d")]
        dataset: String,
        /// Tail index for the default config.
        #[arg(long, default_value_t = 1.7)]
        alpha: f64,
        /// Number of optimizer steps, overriding the config.
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory, overriding the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a trained run.
    Sample {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// dlpm, dlim, lim or lim_ode.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Latent CSV for deterministic samplers.
        #[arg(long)]
        latent: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a sample CSV against the run's held-out data.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Run the statistical verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_c_a: Option<f64>,
    },
    /// Print a default experiment config.
    Config {
        #[arg(long, default_value = "stable2d")]
        dataset: String,
        #[arg(long, default_value_t = 1.7)]
        alpha: f64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<DlpmError> for Failure {
    fn from(e: DlpmError) -> Self {
        match e {
            DlpmError::NonFinite(_) | DlpmError::Diverged { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn default_config(dataset: &str, alpha: f64) -> Result<ExperimentConfig, Failure> {
    let kind: DatasetKind = dataset.parse()?;
    Ok(ExperimentConfig::defaults(kind, alpha))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, dataset, alpha, train_steps, seed, out } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => default_config(&dataset, alpha)?,
            };
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(n) = train_steps {
                cfg.train.total_steps = n;
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let record = cmd_train(&cfg, Some(&dir))?;
            let last = record.config.train.total_steps;
            println!("trained {last} steps into {}", dir.display());
        }
        Command::Sample { run, method, steps, n, seed, latent, out } => {
            let method = method.map(|m| m.parse::<SamplerMethod>()).transpose()?;
            let opts = SampleOptions { method, steps, n, seed, latent, out };
            let path = cmd_sample(&run, &opts)?;
            println!("{}", path.display());
        }
        Command::Eval { run, samples } => {
            let report = cmd_eval(&run, &samples)?;
            println!("{}", serde_json::to_string(&report).map_err(DlpmError::from)?);
        }
        Command::Verify { seed, out, corrupt_c_a } => {
            let report = cmd_verify(seed, corrupt_c_a)?;
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report).map_err(DlpmError::from)?;
                std::fs::write(&p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            }
            if !report.all_passed() {
                return Err(Failure::Runtime("verification failed".into()));
            }
        }
        Command::Config { dataset, alpha } => {
            let cfg = default_config(&dataset, alpha)?;
            println!("{}", serde_json::to_string_pretty(&cfg).map_err(DlpmError::from)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("DLPM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
