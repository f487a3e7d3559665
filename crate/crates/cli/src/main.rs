use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surface_glm_cli::config::parse_gamma_list;
use surface_glm_cli::{error_code, run, status_code, Command, Method, RunConfig};

#[derive(Parser)]
#[command(
    name = "surface-glm",
    version,
    about = "Surface-based spatial Bayesian GLM for task fMRI"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a simulated scenario: mesh, stimuli, scans, truth and a manifest.
    Simulate(Common),
    /// Preprocess and fit one subject.
    Fit(FitArgs),
    /// Combine subject fits into group estimates and activations.
    Group(GroupArgs),
    /// Run scenarios × replicates × methods into a CSV table.
    Benchmark(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Stopping tolerance on the mean squared change of the hyperparameters.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Hutchinson probes per E-step.
    #[arg(long)]
    ns: Option<usize>,
    /// Posterior draws per excursion set.
    #[arg(long)]
    draws: Option<usize>,
    /// Activation thresholds in percent signal change, comma separated.
    #[arg(long, value_parser = parse_gamma_list)]
    gamma: Option<Vec<f64>>,
    /// Excursion-set level.
    #[arg(long)]
    alpha: Option<f64>,
    /// FDR level of the classical tests.
    #[arg(long)]
    fdr_q: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// BOLD scan; repeat for multiple runs.
    #[arg(long = "scan")]
    scans: Vec<PathBuf>,
    #[arg(long)]
    stimuli: Option<PathBuf>,
    /// Nuisance regressors, one column per regressor.
    #[arg(long)]
    nuisance: Option<PathBuf>,
    /// Skip AR prewhitening.
    #[arg(long)]
    no_prewhiten: bool,
}

#[derive(Args)]
struct GroupArgs {
    #[command(flatten)]
    common: Common,
    /// Results files written by `fit`.
    subjects: Vec<PathBuf>,
}

fn config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = &c.$f { cfg.$f = v.clone(); })*};
    }
    set!(output, seed, threads, method, epsilon, ns, draws, gamma, alpha, fdr_q, max_iter);
    Ok(cfg)
}

fn build() -> anyhow::Result<(Command, RunConfig)> {
    Ok(match Cli::parse().command {
        Cmd::Simulate(c) => (Command::Simulate, config(&c)?),
        Cmd::Benchmark(c) => (Command::Benchmark, config(&c)?),
        Cmd::Fit(a) => {
            let mut cfg = config(&a.common)?;
            if a.mesh.is_some() {
                cfg.data.mesh = a.mesh;
            }
            if !a.scans.is_empty() {
                cfg.data.scans = a.scans;
            }
            if a.stimuli.is_some() {
                cfg.data.stimuli = a.stimuli;
            }
            if a.nuisance.is_some() {
                cfg.data.nuisance = a.nuisance;
            }
            if a.no_prewhiten {
                cfg.preprocess.prewhiten = false;
            }
            (Command::Fit, cfg)
        }
        Cmd::Group(a) => {
            let mut cfg = config(&a.common)?;
            if !a.subjects.is_empty() {
                cfg.subjects = a.subjects;
            }
            (Command::Group, cfg)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = build().and_then(|(cmd, cfg)| run(cmd, &cfg));
    let code = match result {
        Ok(status) => status_code(status),
        Err(e) => {
            eprintln!("error: {e:#}");
            error_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
