//! Files written by the subcommands.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use surface_glm::em::{FitOptions, HistoryEntry};
use surface_glm::group::Contrast;
use surface_glm::preprocess::{MaskedLocation, PreprocessOptions};
use surface_glm::simulate::SimulationScenario;
use surface_glm::Hyperparameters;

use crate::config::{DataFiles, InvalidConfig, Method};
use crate::pipeline::ActivationRecord;

pub const FIT_FORMAT: &str = "surface-glm.fit.v1";
pub const GROUP_FORMAT: &str = "surface-glm.group.v1";
pub const MANIFEST_FORMAT: &str = "surface-glm.manifest.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmRecord {
    pub theta0: Hyperparameters,
    pub theta: Hyperparameters,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<HistoryEntry>,
}

/// Massive-univariate estimates over kept locations, `[k][location]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalRecord {
    pub beta: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub resid_var: Vec<f64>,
    pub valid: Vec<bool>,
    pub df: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitTiming {
    pub preprocess_secs: f64,
    pub fit_secs: f64,
    pub activation_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub format: String,
    pub method: Method,
    pub seed: u64,
    /// Absolute input paths.
    pub inputs: DataFiles,
    pub preprocess: PreprocessOptions,
    pub fit_options: FitOptions,
    pub draws: usize,
    pub alpha: f64,
    pub fdr_q: f64,
    pub n_mesh: usize,
    pub task_names: Vec<String>,
    /// Mesh vertices that entered the model, ascending.
    pub kept: Vec<usize>,
    pub masked: Vec<MaskedLocation>,
    pub converged: bool,
    pub em: Option<EmRecord>,
    /// Reported estimates over kept locations, `[k][location]`.
    pub beta: Vec<Vec<f64>>,
    pub classical: ClassicalRecord,
    pub activations: Vec<ActivationRecord>,
    pub timing: FitTiming,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), InvalidConfig> {
    if ok {
        Ok(())
    } else {
        Err(InvalidConfig(msg()))
    }
}

fn check_fields(fields: &[Vec<f64>], k: usize, n: usize, what: &str) -> Result<(), InvalidConfig> {
    check(
        fields.len() == k && fields.iter().all(|f| f.len() == n),
        || format!("{what} must be {k} fields of {n} values"),
    )
}

fn check_activations(
    acts: &[ActivationRecord],
    tasks: &[String],
    n_mesh: usize,
) -> Result<(), InvalidConfig> {
    for a in acts {
        check(tasks.contains(&a.task), || {
            format!("unknown task {:?}", a.task)
        })?;
        check(a.active.windows(2).all(|w| w[0] < w[1]), || {
            "active vertices must be strictly ascending".into()
        })?;
        check(a.active.last().is_none_or(|&v| v < n_mesh), || {
            "active vertex out of range".into()
        })?;
    }
    Ok(())
}

impl ResultsFile {
    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        check(self.format == FIT_FORMAT, || {
            format!("format {:?}, expected {FIT_FORMAT:?}", self.format)
        })?;
        let k = self.task_names.len();
        let n = self.kept.len();
        check(k > 0 && n > 0, || "no tasks or no locations".into())?;
        check(
            self.kept.windows(2).all(|w| w[0] < w[1])
                && self.kept.last().is_some_and(|&v| v < self.n_mesh),
            || "kept vertices must be ascending mesh indices".into(),
        )?;
        check_fields(&self.beta, k, n, "beta")?;
        check_fields(&self.classical.beta, k, n, "classical beta")?;
        check_fields(&self.classical.se, k, n, "classical se")?;
        check(
            self.classical.resid_var.len() == n && self.classical.valid.len() == n,
            || "classical residual variances do not cover kept locations".into(),
        )?;
        match (&self.method, &self.em) {
            (Method::Em, Some(em)) => {
                check(!em.history.is_empty(), || "empty EM history".into())?;
                check(
                    em.theta.n_tasks() == k && em.converged == self.converged,
                    || "EM record disagrees with the file".into(),
                )?;
            }
            (Method::Classical, None) => {
                check(self.converged, || "classical fits always converge".into())?;
            }
            _ => return Err(InvalidConfig("EM record does not match the method".into())),
        }
        check(
            self.activations.len() == k * self.activation_count_per_task(),
            || "one activation per task and threshold is required".into(),
        )?;
        check_activations(&self.activations, &self.task_names, self.n_mesh)
    }

    fn activation_count_per_task(&self) -> usize {
        self.activations
            .iter()
            .filter(|a| a.task == self.task_names[0])
            .count()
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTask {
    pub task: String,
    pub contrast: Contrast,
    /// Group estimate over kept locations.
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupResultsFile {
    pub format: String,
    pub method: Method,
    pub seed: u64,
    pub subjects: Vec<PathBuf>,
    pub lambda: Vec<f64>,
    pub theta_g: Option<Hyperparameters>,
    pub draws: usize,
    pub alpha: f64,
    pub fdr_q: f64,
    pub n_mesh: usize,
    pub task_names: Vec<String>,
    pub kept: Vec<usize>,
    pub tasks: Vec<GroupTask>,
    pub activations: Vec<ActivationRecord>,
    pub seconds: f64,
}

impl GroupResultsFile {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        check(self.format == GROUP_FORMAT, || {
            format!("format {:?}, expected {GROUP_FORMAT:?}", self.format)
        })?;
        let m = self.subjects.len();
        check(m > 0 && self.lambda.len() == m, || {
            "one weight per subject".into()
        })?;
        check(self.tasks.len() == self.task_names.len(), || {
            "one contrast per task".into()
        })?;
        for t in &self.tasks {
            check(t.mean.len() == self.kept.len(), || {
                "group mean does not cover kept locations".into()
            })?;
        }
        check(
            self.theta_g.is_some() == (self.method == Method::Em),
            || "pooled hyperparameters must accompany the EM method".into(),
        )?;
        check_activations(&self.activations, &self.task_names, self.n_mesh)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Mesh,
    Stimuli,
    Design,
    Scan,
    Truth,
    PopulationTruth,
    FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub kind: FileKind,
    /// Relative to the manifest.
    pub path: PathBuf,
    pub subject: Option<usize>,
    pub run: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub scenario: SimulationScenario,
    pub n_vertices: usize,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, kind: FileKind) -> usize {
        self.files.iter().filter(|f| f.kind == kind).count()
    }
}

/// One long-format benchmark row. Failed replicates carry NaN metrics and
/// the error in `status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: String,
    pub replicate: usize,
    pub method: Method,
    pub rmse: f64,
    pub dice: f64,
    pub seconds: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
}
