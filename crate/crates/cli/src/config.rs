//! Run configuration shared by every subcommand.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surface_glm::em::{FitOptions, StopMetric};
use surface_glm::preprocess::PreprocessOptions;
use surface_glm::simulate::SimulationScenario;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Spatial Bayesian GLM fit by EM.
    #[default]
    Em,
    /// Massive-univariate OLS with BH-FDR thresholding.
    Classical,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Em => "em",
            Method::Classical => "classical",
        })
    }
}

/// Input files of one subject. Data locations are the mesh vertices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataFiles {
    pub mesh: Option<PathBuf>,
    /// One scan per run; runs share the stimulus timings.
    pub scans: Vec<PathBuf>,
    pub stimuli: Option<PathBuf>,
    pub nuisance: Option<PathBuf>,
}

impl DataFiles {
    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        self.mesh
            .iter_mut()
            .chain(self.scans.iter_mut())
            .chain(self.stimuli.iter_mut())
            .chain(self.nuisance.iter_mut())
    }
}

/// A configuration error; maps to the validation exit code.
#[derive(Debug)]
pub struct InvalidConfig(pub String);

impl fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for InvalidConfig {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidConfig(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory.
    pub output: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub method: Method,
    pub epsilon: f64,
    pub ns: usize,
    /// Posterior draws per excursion set.
    pub draws: usize,
    /// Activation thresholds in percent signal change.
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub fdr_q: f64,
    pub max_iter: usize,
    pub metric: StopMetric,
    /// Traces are exact when `n·K` is at most this.
    pub exact_trace_limit: usize,
    pub preprocess: PreprocessOptions,
    /// `fit` inputs.
    pub data: DataFiles,
    /// `simulate` scenario.
    pub scenario: SimulationScenario,
    /// `group` inputs: results files written by `fit`.
    pub subjects: Vec<PathBuf>,
    /// `benchmark` scenarios, replicates per scenario and methods.
    pub scenarios: Vec<SimulationScenario>,
    pub replicates: usize,
    pub methods: Vec<Method>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            output: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            method: Method::Em,
            epsilon: fit.epsilon,
            ns: fit.ns,
            draws: 1000,
            gamma: vec![0.0, 0.5, 1.0],
            alpha: 0.01,
            fdr_q: 0.01,
            max_iter: fit.max_iter,
            metric: fit.metric,
            exact_trace_limit: fit.exact_trace_limit,
            preprocess: PreprocessOptions::default(),
            data: DataFiles::default(),
            scenario: SimulationScenario::default(),
            subjects: Vec::new(),
            scenarios: Vec::new(),
            replicates: 1,
            methods: vec![Method::Em, Method::Classical],
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output);
        cfg.data.paths_mut().for_each(rebase);
        cfg.subjects.iter_mut().for_each(rebase);
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.fdr_q > 0.0 && self.fdr_q < 1.0) {
            return Err(invalid(format!(
                "fdr-q must lie in (0, 1), got {}",
                self.fdr_q
            )));
        }
        if self.ns == 0 || self.max_iter == 0 {
            return Err(invalid("ns and max_iter must be positive"));
        }
        if self.draws < surface_glm::inference::MIN_DRAWS {
            return Err(invalid(format!(
                "draws must be at least {}",
                surface_glm::inference::MIN_DRAWS
            )));
        }
        if self.gamma.is_empty() || self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(invalid("gamma must be a nonempty list of finite values"));
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            ns: self.ns,
            seed: self.seed,
            exact_trace_limit: self.exact_trace_limit,
            metric: self.metric,
            ..FitOptions::default()
        }
    }
}

/// Parses a comma-separated list such as `0,0.5,1`.
pub fn parse_gamma_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad threshold `{x}`"))
        })
        .collect()
}
