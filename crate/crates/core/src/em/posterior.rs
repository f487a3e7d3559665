use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glm::SubjectInput;
use crate::cholesky::{CholeskyFactor, Ordering, SymbolicCholesky};
use crate::error::{Error, Result};
use crate::mesh::Projector;
use crate::par;
use crate::seed;
use crate::sparse::CscMatrix;
use crate::spde::{Hyperparameters, SpdeOperator};

/// How the E-step obtains `Tr(A Σ)` terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceMode {
    /// No traces (posterior mean and factor only).
    Skip,
    /// Exact, from the selected inverse of the posterior precision.
    Exact,
    /// Hutchinson estimate with `ns` Rademacher probes drawn from `seed`.
    Hutchinson { ns: usize, seed: u64 },
}

/// Traces of `E = Σ + μμᵀ` against the FEM blocks (per task) and against
/// `B = ΨᵀXᵀXΨ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummaries {
    pub c: Vec<f64>,
    pub g: Vec<f64>,
    pub gcg: Vec<f64>,
    pub b: f64,
}

/// Posterior of the stacked (task-major) mesh weights `w` at fixed `θ`.
#[derive(Debug, Clone)]
pub struct PosteriorField {
    pub theta: Hyperparameters,
    pub mu: Vec<f64>,
    pub factor: CholeskyFactor,
    pub traces: Option<TraceSummaries>,
    /// `bᵀμ` with `b = ΨᵀXᵀy`.
    pub b_dot_mu: f64,
}

impl PosteriorField {
    pub fn n_tasks(&self) -> usize {
        self.theta.n_tasks()
    }

    pub fn mu_task(&self, k: usize) -> &[f64] {
        let n = self.mu.len() / self.n_tasks();
        &self.mu[k * n..(k + 1) * n]
    }

    /// `Ψ μ_k` for each task, `N × K` column-major as `Vec` per task.
    pub fn beta_mean(&self, projector: &Projector) -> Vec<Vec<f64>> {
        (0..self.n_tasks())
            .map(|k| projector.apply(self.mu_task(k)))
            .collect()
    }

    /// Posterior sd of `Ψ w_k` at each data location, exact via the selected inverse.
    pub fn beta_sd(&self, projector: &Projector) -> Result<Vec<Vec<f64>>> {
        let z = self.factor.selected_inverse();
        let n = projector.n_mesh();
        (0..self.n_tasks())
            .map(|k| {
                projector
                    .rows()
                    .iter()
                    .map(|row| {
                        let mut var = 0.0;
                        for &(i, a) in row {
                            for &(j, b) in row {
                                let s = z.get(k * n + i, k * n + j).ok_or_else(|| {
                                    Error::Numerical(
                                        "projector pair outside the factor pattern".into(),
                                    )
                                })?;
                                var += a * b * s;
                            }
                        }
                        Ok(var.max(0.0).sqrt())
                    })
                    .collect()
            })
            .collect()
    }
}

/// `Σ⁻¹ = blockdiag(Q̃_k/(4πφ_k)) + σ⁻²B` on a fixed pattern with one
/// symbolic analysis.
#[derive(Debug, Clone)]
pub struct PosteriorSystem {
    op: Arc<SpdeOperator>,
    n: usize,
    k: usize,
    b_mat: CscMatrix,
    b_vec: Vec<f64>,
    yty: f64,
    n_obs: usize,
    pattern: CscMatrix,
    q_pos: Vec<usize>,
    b_pos: Vec<usize>,
    symbolic: Arc<SymbolicCholesky>,
    c_mat: CscMatrix,
}

impl PosteriorSystem {
    pub fn new(input: &SubjectInput, op: Arc<SpdeOperator>) -> Result<Self> {
        let n = op.n();
        let k = input.n_tasks();
        if input.n_mesh() != n {
            return Err(Error::DimensionMismatch(format!(
                "projector spans {} mesh vertices, operator has {n}",
                input.n_mesh()
            )));
        }
        let nk = n * k;
        let proj = input.projector();
        let mut trip = Vec::new();
        let mut b_vec = vec![0.0; nk];
        for (v, row) in proj.rows().iter().enumerate() {
            let xtx = input.xtx(v);
            let xty = input.xty(v);
            for a in 0..k {
                for &(i, wi) in row {
                    b_vec[a * n + i] += wi * xty[a];
                    for b in 0..k {
                        let s = xtx[a * k + b] * wi;
                        for &(j, wj) in row {
                            trip.push((a * n + i, b * n + j, s * wj));
                        }
                    }
                }
            }
        }
        let b_mat = CscMatrix::from_triplets(nk, nk, &trip);

        let qp = op.pattern();
        for a in 0..k {
            trip.extend(qp.triplets().map(|(i, j, _)| (a * n + i, a * n + j, 0.0)));
        }
        let pattern = CscMatrix::from_triplets(nk, nk, &trip);
        let pattern = pattern.with_values(vec![0.0; pattern.nnz()]);
        let mut q_pos = Vec::with_capacity(k * qp.nnz());
        for a in 0..k {
            for (i, j, _) in qp.triplets() {
                q_pos.push(
                    pattern
                        .find(a * n + i, a * n + j)
                        .expect("block entry in union pattern"),
                );
            }
        }
        let b_pos = b_mat
            .triplets()
            .map(|(i, j, _)| pattern.find(i, j).expect("data entry in union pattern"))
            .collect();
        let symbolic = SymbolicCholesky::analyze(&pattern, Ordering::BlockAmd { blocks: k })?;
        let c_mat = op.fem().c_matrix();
        Ok(Self {
            n,
            k,
            b_mat,
            b_vec,
            yty: input.yty_total(),
            n_obs: input.n_obs(),
            pattern,
            q_pos,
            b_pos,
            symbolic,
            c_mat,
            op,
        })
    }

    pub fn operator(&self) -> &Arc<SpdeOperator> {
        &self.op
    }

    pub fn n_mesh(&self) -> usize {
        self.n
    }

    pub fn n_tasks(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.n * self.k
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    /// `B = ΨᵀXᵀXΨ`.
    pub fn data_precision(&self) -> &CscMatrix {
        &self.b_mat
    }

    /// `b = ΨᵀXᵀy`.
    pub fn data_vector(&self) -> &[f64] {
        &self.b_vec
    }

    /// Assembled `Σ⁻¹(θ)`.
    pub fn precision(&self, theta: &Hyperparameters) -> Result<CscMatrix> {
        theta.validate()?;
        if theta.n_tasks() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} tasks, data has {}",
                theta.n_tasks(),
                self.k
            )));
        }
        let mut vals = vec![0.0; self.pattern.nnz()];
        let qnnz = self.op.pattern().nnz();
        for a in 0..self.k {
            let scale = 1.0 / (4.0 * PI * theta.phi[a]);
            let qv = self.op.qtilde_values(theta.kappa2[a]);
            for (p, q) in qv.iter().enumerate() {
                vals[self.q_pos[a * qnnz + p]] += scale * q;
            }
        }
        let inv_s2 = 1.0 / theta.sigma2;
        for (p, &b) in self.b_mat.values().iter().enumerate() {
            vals[self.b_pos[p]] += inv_s2 * b;
        }
        Ok(self.pattern.with_values(vals))
    }

    /// E-step: factor `Σ⁻¹`, solve for `μ`, and summarize `E(wwᵀ)`.
    pub fn posterior(&self, theta: &Hyperparameters, mode: TraceMode) -> Result<PosteriorField> {
        let prec = self.precision(theta)?;
        let factor = self.symbolic.factor(&prec)?;
        let rhs: Vec<f64> = self.b_vec.iter().map(|b| b / theta.sigma2).collect();
        let mu = factor.solve(&rhs);
        let b_dot_mu = dot(&self.b_vec, &mu);
        let traces = match mode {
            TraceMode::Skip => None,
            TraceMode::Exact => Some(self.exact_traces(&factor, &mu)?),
            TraceMode::Hutchinson { ns, seed } => {
                Some(self.hutchinson_traces(&factor, &mu, ns, seed))
            }
        };
        Ok(PosteriorField {
            theta: theta.clone(),
            mu,
            factor,
            traces,
            b_dot_mu,
        })
    }

    fn task_targets(&self) -> Vec<(usize, &CscMatrix)> {
        let fem = self.op.fem();
        (0..self.k)
            .flat_map(|a| {
                let off = a * self.n;
                [(off, &self.c_mat), (off, &fem.g), (off, &fem.gcinvg)]
            })
            .collect()
    }

    fn add_mean_terms(&self, mu: &[f64], sigma_part: Vec<f64>) -> TraceSummaries {
        let n = self.n;
        let fem = self.op.fem();
        let mut out = TraceSummaries {
            c: Vec::with_capacity(self.k),
            g: Vec::with_capacity(self.k),
            gcg: Vec::with_capacity(self.k),
            b: sigma_part[3 * self.k] + self.b_mat.quad_form(mu),
        };
        for a in 0..self.k {
            let m = &mu[a * n..(a + 1) * n];
            let cm: f64 = m.iter().zip(&fem.c).map(|(x, c)| c * x * x).sum();
            out.c.push(sigma_part[3 * a] + cm);
            out.g.push(sigma_part[3 * a + 1] + fem.g.quad_form(m));
            out.gcg
                .push(sigma_part[3 * a + 2] + fem.gcinvg.quad_form(m));
        }
        out
    }

    fn exact_traces(&self, factor: &CholeskyFactor, mu: &[f64]) -> Result<TraceSummaries> {
        let z = factor.selected_inverse();
        let mut parts = Vec::with_capacity(3 * self.k + 1);
        for (off, a) in self.task_targets() {
            let mut acc = 0.0;
            for (i, j, v) in a.triplets() {
                acc += v * z
                    .get(off + i, off + j)
                    .ok_or_else(|| Error::Numerical("trace entry outside pattern".into()))?;
            }
            parts.push(acc);
        }
        parts.push(z.trace_product(&self.b_mat)?);
        Ok(self.add_mean_terms(mu, parts))
    }

    fn hutchinson_traces(
        &self,
        factor: &CholeskyFactor,
        mu: &[f64],
        ns: usize,
        seed: u64,
    ) -> TraceSummaries {
        let mut targets = self.task_targets();
        targets.push((0, &self.b_mat));
        let parts = hutchinson_block_traces(factor, &targets, ns, seed);
        self.add_mean_terms(mu, parts)
    }

    /// `log p(y | θ)` up to nothing: the full Gaussian marginal likelihood.
    pub fn marginal_loglik(&self, theta: &Hyperparameters) -> Result<f64> {
        let post = self.posterior(theta, TraceMode::Skip)?;
        let mut log_det_q = 0.0;
        for a in 0..self.k {
            log_det_q += self.op.log_det_qtilde(theta.kappa2[a])?
                - self.n as f64 * (4.0 * PI * theta.phi[a]).ln();
        }
        let s2 = theta.sigma2;
        let nobs = self.n_obs as f64;
        // ½ mᵀ Σ⁻¹ m = ½ bᵀμ / σ² since Σ⁻¹μ = b/σ²
        Ok(
            -0.5 * nobs * (2.0 * PI * s2).ln() - self.yty / (2.0 * s2) + 0.5 * log_det_q
                - 0.5 * post.factor.log_det()
                + 0.5 * post.b_dot_mu / s2,
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rademacher probes `v_s`, `s < ns`, for a `dim`-vector, from one seed.
pub fn rademacher_probes(dim: usize, ns: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed, &[seed::TAG_PROBES]);
    (0..ns)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

/// Hutchinson estimates of `Tr(A_t Σ_tt)` for block targets `(offset, A_t)`
/// sharing one probe set; `Σ = A⁻¹` is given by its factor.
pub fn hutchinson_block_traces(
    factor: &CholeskyFactor,
    targets: &[(usize, &CscMatrix)],
    ns: usize,
    seed: u64,
) -> Vec<f64> {
    let v = rademacher_probes(factor.dim(), ns, seed);
    let solved = factor.solve_many(&v);
    let pairs: Vec<(&Vec<f64>, &Vec<f64>)> = v.iter().zip(&solved).collect();
    let per_probe: Vec<Vec<f64>> = par::map_slice(&pairs, |&(vs, p)| {
        targets
            .iter()
            .map(|&(off, a)| {
                let m = a.nrows();
                a.bilinear(&p[off..off + m], &vs[off..off + m])
            })
            .collect()
    });
    let mut out = vec![0.0; targets.len()];
    for row in &per_probe {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r;
        }
    }
    out.iter().map(|o| o / ns as f64).collect()
}

/// `(1/Ns) Tr(PᵀAV)` with `Σ⁻¹P = V`.
pub fn hutchinson_trace(a: &CscMatrix, factor: &CholeskyFactor, ns: usize, seed: u64) -> f64 {
    hutchinson_block_traces(factor, &[(0, a)], ns, seed)[0]
}
