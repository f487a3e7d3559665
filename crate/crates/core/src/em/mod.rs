//! EM estimation of the spatial Bayesian GLM.

mod glm;
mod init;
mod mstep;
mod posterior;
mod squarem;

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use glm::{classical_glm, ClassicalFit, SubjectInput};
pub use init::{init_hyperparameters, init_task, point_traces};
pub use mstep::{
    kappa2_objective, optimize_kappa2, optimize_kappa2_profile, update_phi, update_sigma2,
    Kappa2Optimum, TaskTraces, KAPPA2_BRACKET, KAPPA2_TOL,
};
pub use posterior::{
    hutchinson_block_traces, hutchinson_trace, rademacher_probes, PosteriorField, PosteriorSystem,
    TraceMode, TraceSummaries,
};
pub use squarem::{mean_sq_diff, squarem, HistoryEntry, SquaremOptions, SquaremResult, StopMetric};

use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::spde::{Hyperparameters, SpdeOperator};

/// Size below which the exact trace fallback is used when a stochastic
/// estimate produces a nonpositive update.
const EXACT_FALLBACK_N: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Hutchinson probes per E-step.
    pub ns: usize,
    pub seed: u64,
    /// Traces are exact when `n·K` is at most this.
    pub exact_trace_limit: usize,
    pub accelerate: bool,
    pub metric: StopMetric,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iter: 100,
            ns: 50,
            seed: 0,
            exact_trace_limit: 1500,
            accelerate: true,
            metric: StopMetric::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub init_secs: f64,
    pub em_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Hyperparameters,
    pub theta0: Hyperparameters,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<HistoryEntry>,
    /// Posterior mean `Ψμ_k` per task.
    pub beta_mean: Vec<Vec<f64>>,
    pub posterior: PosteriorField,
    pub classical: ClassicalFit,
    pub timing: Timing,
}

/// The data-dependent pieces of the EM, fixed across iterations.
#[derive(Debug, Clone)]
pub struct EmModel {
    sys: PosteriorSystem,
    opts: FitOptions,
}

impl EmModel {
    pub fn new(input: &SubjectInput, op: Arc<SpdeOperator>, opts: FitOptions) -> Result<Self> {
        Ok(Self {
            sys: PosteriorSystem::new(input, op)?,
            opts,
        })
    }

    pub fn system(&self) -> &PosteriorSystem {
        &self.sys
    }

    pub fn options(&self) -> &FitOptions {
        &self.opts
    }

    /// Exact traces at desk scale, Hutchinson otherwise; probes are fresh
    /// per evaluation.
    pub fn trace_mode(&self, eval_index: u64) -> TraceMode {
        if self.sys.dim() <= self.opts.exact_trace_limit {
            TraceMode::Exact
        } else {
            TraceMode::Hutchinson {
                ns: self.opts.ns,
                seed: seed::derive(self.opts.seed, &[eval_index]),
            }
        }
    }

    /// One EM cycle: E-step, then `σ²`, then per task `φ` and `κ²`.
    pub fn update(&self, theta: &Hyperparameters, mode: TraceMode) -> Result<Hyperparameters> {
        let post = self.sys.posterior(theta, mode)?;
        match self.m_step(theta, &post) {
            Err(Error::Numerical(msg))
                if matches!(mode, TraceMode::Hutchinson { .. })
                    && self.sys.n_mesh() <= EXACT_FALLBACK_N =>
            {
                log::warn!("{msg}; retrying with exact traces");
                let post = self.sys.posterior(theta, TraceMode::Exact)?;
                self.m_step(theta, &post)
            }
            other => other,
        }
    }

    fn m_step(&self, theta: &Hyperparameters, post: &PosteriorField) -> Result<Hyperparameters> {
        let sigma2 = update_sigma2(&self.sys, post)?;
        let traces = post.traces.as_ref().expect("m-step needs traces");
        let op = self.sys.operator();
        let n = self.sys.n_mesh();
        let per_task = par::try_map_range(self.sys.n_tasks(), |k| {
            let tr = TaskTraces::from_summaries(traces, k);
            let old = theta.kappa2[k];
            let phi = update_phi(&tr, old, n)?;
            let opt = optimize_kappa2(op, phi, &tr)?;
            // never step downhill
            let kappa2 = if kappa2_objective(op, old, phi, &tr)? > opt.value {
                old
            } else {
                opt.kappa2
            };
            Ok::<_, Error>((kappa2, phi))
        })?;
        let (kappa2, phi) = per_task.into_iter().unzip();
        Hyperparameters::new(kappa2, phi, sigma2)
    }

    /// `E[log p(y, w | θ)]` over `w | y, θ_post` up to a constant.
    pub fn expected_complete_loglik(
        &self,
        theta: &Hyperparameters,
        post: &PosteriorField,
    ) -> Result<f64> {
        let traces = post
            .traces
            .as_ref()
            .ok_or_else(|| Error::Validation("posterior has no trace summaries".into()))?;
        let nobs = self.sys.n_obs() as f64;
        let s2 = theta.sigma2;
        let r1 =
            -0.5 * nobs * s2.ln() - (self.sys.yty() - 2.0 * post.b_dot_mu + traces.b) / (2.0 * s2);
        let n = self.sys.n_mesh() as f64;
        let op = self.sys.operator();
        let mut r2 = 0.0;
        for k in 0..theta.n_tasks() {
            let tr = TaskTraces::from_summaries(traces, k);
            let (k2, phi) = (theta.kappa2[k], theta.phi[k]);
            r2 += 0.5 * (op.log_det_qtilde(k2)? - n * (4.0 * PI * phi).ln())
                - tr.qtilde(k2) / (8.0 * PI * phi);
        }
        Ok(r1 + r2)
    }

    /// Accelerated (or plain) fixed-point iteration from `theta0`.
    pub fn run(&self, theta0: &Hyperparameters) -> Result<SquaremResult> {
        let k = theta0.n_tasks();
        let mut eval = 0u64;
        let f = |v: &[f64]| {
            let th = Hyperparameters::from_vec(k, v)?;
            let mode = self.trace_mode(eval);
            eval += 1;
            Ok(self.update(&th, mode)?.to_vec())
        };
        let valid = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        let sq = SquaremOptions {
            epsilon: self.opts.epsilon,
            max_iter: self.opts.max_iter,
            accelerate: self.opts.accelerate,
            metric: self.opts.metric,
        };
        squarem(f, valid, &theta0.to_vec(), &sq)
    }
}

/// Classical GLM, initialization, accelerated EM, and a final E-step.
pub fn fit_subject(
    input: &SubjectInput,
    op: Arc<SpdeOperator>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let start = Instant::now();
    let classical = classical_glm(input)?;
    let theta0 = initial_theta(input, &op, &classical)?;
    let init_secs = start.elapsed().as_secs_f64();
    log::info!("initial theta {:?}", theta0.to_vec());

    let model = EmModel::new(input, op, *opts)?;
    let res = model.run(&theta0)?;
    let theta = Hyperparameters::from_vec(theta0.n_tasks(), &res.theta)?;
    let em_secs = start.elapsed().as_secs_f64() - init_secs;

    let posterior = model.sys.posterior(&theta, TraceMode::Skip)?;
    let beta_mean = posterior.beta_mean(input.projector());
    Ok(FitResult {
        theta,
        theta0,
        converged: res.converged,
        iterations: res.iterations,
        evaluations: res.evaluations,
        history: res.history,
        beta_mean,
        posterior,
        classical,
        timing: Timing {
            init_secs,
            em_secs,
            total_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// `θ⁰` from a classical fit: back-projected estimates and the mean residual
/// variance over valid locations.
pub fn initial_theta(
    input: &SubjectInput,
    op: &SpdeOperator,
    classical: &ClassicalFit,
) -> Result<Hyperparameters> {
    let proj = input.projector();
    let w_hat: Vec<Vec<f64>> = (0..input.n_tasks())
        .map(|k| proj.back_project(classical.beta.column(k).as_slice()))
        .collect();
    let resid: Vec<f64> = classical
        .resid_var
        .iter()
        .zip(&classical.valid)
        .filter(|(_, &ok)| ok)
        .map(|(&r, _)| r)
        .collect();
    init_hyperparameters(op, &w_hat, &resid)
}
