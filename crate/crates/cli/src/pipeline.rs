//! Loading, preprocessing, fitting and thresholding one subject.

use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use surface_glm::em::{
    classical_glm, fit_subject, ClassicalFit, FitOptions, FitResult, SubjectInput,
};
use surface_glm::inference::{classical_activation, excursion_set, posterior_task_draws};
use surface_glm::io;
use surface_glm::preprocess::{
    run_preprocessing, MaskedLocation, PreprocessOptions, ScanData, SmoothingGraph, Stimulus,
};
use surface_glm::{build_fem_matrices, load_mesh, seed, Mesh, Projector, SpdeOperator};

use crate::config::{DataFiles, InvalidConfig, Method};

/// Raw inputs of one subject.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub mesh: Mesh,
    pub runs: Vec<ScanData>,
    pub stimuli: Vec<Stimulus>,
    pub nuisance: Option<DMatrix<f64>>,
}

impl SubjectData {
    pub fn load(files: &DataFiles) -> anyhow::Result<Self> {
        let (Some(mesh), Some(stimuli)) = (&files.mesh, &files.stimuli) else {
            return Err(InvalidConfig("a mesh and a stimulus file are required".into()).into());
        };
        if files.scans.is_empty() {
            return Err(InvalidConfig("at least one scan is required".into()).into());
        }
        let mesh = load_mesh(mesh).with_context(|| format!("reading {}", mesh.display()))?;
        let runs = files
            .scans
            .iter()
            .map(|p| io::load_bold(p).with_context(|| format!("reading {}", p.display())))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let stimuli =
            io::load_stimuli(stimuli).with_context(|| format!("reading {}", stimuli.display()))?;
        let nuisance = files
            .nuisance
            .as_ref()
            .map(|p| io::load_matrix(p).with_context(|| format!("reading {}", p.display())))
            .transpose()?;
        Ok(Self {
            mesh,
            runs,
            stimuli,
            nuisance,
        })
    }
}

/// Model-ready sufficient statistics over the locations kept in every run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: SubjectInput,
    pub kept: Vec<usize>,
    pub masked: Vec<MaskedLocation>,
    pub task_names: Vec<String>,
    pub n_mesh: usize,
}

pub fn operator(mesh: &Mesh) -> anyhow::Result<Arc<SpdeOperator>> {
    Ok(Arc::new(SpdeOperator::new(build_fem_matrices(mesh)?)?))
}

/// Preprocesses every run and stacks them over the locations kept in all runs.
pub fn prepare(data: &SubjectData, opts: &PreprocessOptions) -> anyhow::Result<Prepared> {
    let n = data.mesh.n_vertices();
    let graph = data.mesh.edge_graph();
    let ids: Vec<usize> = (0..n).collect();
    let mut pres = Vec::with_capacity(data.runs.len());
    for (r, scan) in data.runs.iter().enumerate() {
        if scan.n_locations() != n {
            return Err(surface_glm::Error::DimensionMismatch(format!(
                "run {r} has {} locations for a {n}-vertex mesh",
                scan.n_locations()
            ))
            .into());
        }
        let smoothing = SmoothingGraph {
            graph: &graph,
            location_vertex: &ids,
        };
        pres.push(run_preprocessing(
            scan,
            &data.stimuli,
            data.nuisance.as_ref(),
            Some(smoothing),
            opts,
        )?);
    }
    let mut in_all = vec![0usize; n];
    for p in &pres {
        for &v in &p.kept {
            in_all[v] += 1;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&v| in_all[v] == pres.len()).collect();
    if kept.is_empty() {
        return Err(surface_glm::Error::Validation("every location was masked".into()).into());
    }
    let mut masked: Vec<MaskedLocation> = Vec::new();
    for p in &pres {
        for m in &p.masked {
            if !masked.iter().any(|x| x.index == m.index) {
                masked.push(m.clone());
            }
        }
    }
    masked.sort_by_key(|m| m.index);
    let projector = Projector::identity(n).select_rows(&kept);
    let mut inputs = Vec::with_capacity(pres.len());
    for p in &pres {
        let pos: Vec<usize> = kept
            .iter()
            .map(|v| p.kept.binary_search(v).expect("kept in every run"))
            .collect();
        let y = p.y.select_columns(&pos);
        inputs.push(SubjectInput::new(
            &y,
            &p.design.select(&pos),
            projector.clone(),
        )?);
    }
    let input = if inputs.len() == 1 {
        inputs.pop().expect("one run")
    } else {
        SubjectInput::stack_runs(&inputs)?
    };
    Ok(Prepared {
        input,
        kept,
        masked,
        task_names: pres[0].task_names.clone(),
        n_mesh: n,
    })
}

/// Settings of the model fit and the activation step.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub method: Method,
    pub fit: FitOptions,
    pub draws: usize,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub fdr_q: f64,
    pub seed: u64,
}

/// Seed of subject `m`'s posterior draws under the global seed.
pub fn draw_seed(seed: u64) -> u64 {
    seed::derive(seed, &[seed::TAG_DRAWS])
}

/// One activation mask over mesh vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRecord {
    pub task: String,
    pub gamma: f64,
    /// `α` of the excursion set or `q` of the FDR control.
    pub level: f64,
    /// Active mesh vertices, ascending.
    pub active: Vec<usize>,
}

impl ActivationRecord {
    pub fn mask(&self, n_mesh: usize) -> Vec<bool> {
        let mut m = vec![false; n_mesh];
        for &v in &self.active {
            m[v] = true;
        }
        m
    }
}

pub fn to_vertices(mask: &[bool], kept: &[usize]) -> Vec<usize> {
    mask.iter()
        .zip(kept)
        .filter(|(&a, _)| a)
        .map(|(_, &v)| v)
        .collect()
}

#[derive(Debug)]
pub struct Outcome {
    pub classical: ClassicalFit,
    pub em: Option<FitResult>,
    /// Estimates over kept locations, `[k][location]`.
    pub beta: Vec<Vec<f64>>,
    pub activations: Vec<ActivationRecord>,
    pub fit_secs: f64,
    pub activation_secs: f64,
}

impl Outcome {
    pub fn converged(&self) -> bool {
        self.em.as_ref().is_none_or(|f| f.converged)
    }
}

pub fn analyze(prep: &Prepared, op: Arc<SpdeOperator>, a: &Analysis) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let k = prep.input.n_tasks();
    let (classical, em) = match a.method {
        Method::Classical => (classical_glm(&prep.input)?, None),
        Method::Em => {
            let f = fit_subject(&prep.input, op, &a.fit)?;
            (f.classical.clone(), Some(f))
        }
    };
    let fit_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut activations = Vec::with_capacity(k * a.gamma.len());
    let beta = match &em {
        Some(f) => {
            let draws = posterior_task_draws(
                &f.posterior,
                prep.input.projector(),
                a.draws,
                seed::derive(draw_seed(a.seed), &[0]),
            );
            for (t, d) in draws.iter().enumerate() {
                for &g in &a.gamma {
                    let ex = excursion_set(d, g, a.alpha)?;
                    activations.push(ActivationRecord {
                        task: prep.task_names[t].clone(),
                        gamma: g,
                        level: a.alpha,
                        active: to_vertices(&ex.active, &prep.kept),
                    });
                }
            }
            f.beta_mean.clone()
        }
        None => {
            for t in 0..k {
                for &g in &a.gamma {
                    let m = classical_activation(
                        classical.beta.column(t).as_slice(),
                        classical.se.column(t).as_slice(),
                        classical.df,
                        g,
                        a.fdr_q,
                    )?;
                    activations.push(ActivationRecord {
                        task: prep.task_names[t].clone(),
                        gamma: g,
                        level: a.fdr_q,
                        active: to_vertices(&m, &prep.kept),
                    });
                }
            }
            (0..k)
                .map(|t| classical.beta.column(t).iter().copied().collect())
                .collect()
        }
    };
    Ok(Outcome {
        classical,
        em,
        beta,
        activations,
        fit_secs,
        activation_secs: start.elapsed().as_secs_f64(),
    })
}
