//! Multi-subject combination: pooled hyperparameters, recomputed subject
//! posteriors, and contrasts over subjects and tasks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::em::{ClassicalFit, PosteriorField, PosteriorSystem, TraceMode};
use crate::error::{Error, Result};
use crate::inference::{benjamini_hochberg, excursion_set, ExcursionResult, MIN_DRAWS};
use crate::mesh::Projector;
use crate::par;
use crate::seed;
use crate::spde::{draw_one, Hyperparameters};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineScale {
    /// Weighted arithmetic mean of the raw values.
    #[default]
    Raw,
    /// Weighted geometric mean.
    Log,
}

/// `λ_m = 1/M`.
pub fn equal_weights(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// `λ_m = T_m / ΣT`.
pub fn scan_length_weights(t: &[usize]) -> Vec<f64> {
    let total: usize = t.iter().sum();
    t.iter().map(|&x| x as f64 / total as f64).collect()
}

/// `θ_G = Σ λ_m θ_m`; weights are normalized to sum to one.
pub fn combine_theta(
    thetas: &[Hyperparameters],
    lambda: &[f64],
    scale: CombineScale,
) -> Result<Hyperparameters> {
    let first = thetas
        .first()
        .ok_or_else(|| Error::Validation("no subjects to combine".into()))?;
    if lambda.len() != thetas.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} subjects",
            lambda.len(),
            thetas.len()
        )));
    }
    if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidParameter(
            "subject weights must be nonnegative".into(),
        ));
    }
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter(
            "subject weights sum to zero".into(),
        ));
    }
    let k = first.n_tasks();
    if thetas.iter().any(|t| t.n_tasks() != k) {
        return Err(Error::DimensionMismatch(
            "subjects differ in number of tasks".into(),
        ));
    }
    let vecs: Vec<Vec<f64>> = thetas.iter().map(|t| t.to_vec()).collect();
    let combined: Vec<f64> = (0..vecs[0].len())
        .map(|i| {
            let terms = vecs.iter().zip(lambda).map(|(v, &l)| (v[i], l / total));
            match scale {
                CombineScale::Raw => terms.map(|(x, l)| l * x).sum(),
                CombineScale::Log => terms.map(|(x, l)| l * x.ln()).sum::<f64>().exp(),
            }
        })
        .collect();
    Hyperparameters::from_vec(k, &combined)
}

/// Subject posterior at fixed group hyperparameters.
pub fn recompute_posterior(
    sys: &PosteriorSystem,
    theta_g: &Hyperparameters,
) -> Result<PosteriorField> {
    sys.posterior(theta_g, TraceMode::Skip)
}

/// Linear combination of per-(subject, task) fields, applied per location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub n_subjects: usize,
    pub n_tasks: usize,
    /// Subject-major weights of length `M·K`.
    pub weights: Vec<f64>,
}

impl Contrast {
    pub fn new(n_subjects: usize, n_tasks: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n_subjects * n_tasks {
            return Err(Error::DimensionMismatch(format!(
                "contrast has {} weights, expected {}",
                weights.len(),
                n_subjects * n_tasks
            )));
        }
        Ok(Self {
            n_subjects,
            n_tasks,
            weights,
        })
    }

    /// Average of one task over subjects: `c_m = e_task / M`.
    pub fn task_average(n_subjects: usize, n_tasks: usize, task: usize) -> Result<Self> {
        if task >= n_tasks {
            return Err(Error::InvalidParameter(format!(
                "task {task} out of {n_tasks}"
            )));
        }
        let mut w = vec![0.0; n_subjects * n_tasks];
        for m in 0..n_subjects {
            w[m * n_tasks + task] = 1.0 / n_subjects as f64;
        }
        Self::new(n_subjects, n_tasks, w)
    }

    pub fn weight(&self, subject: usize, task: usize) -> f64 {
        self.weights[subject * self.n_tasks + task]
    }

    /// Applies `(I_N ⊗ c′)` to `β` stacked as `[(m·K + k)·N + v]`.
    pub fn apply(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let blocks = self.n_subjects * self.n_tasks;
        if blocks == 0 || !beta.len().is_multiple_of(blocks) {
            return Err(Error::DimensionMismatch(format!(
                "stacked field of length {} for {blocks} blocks",
                beta.len()
            )));
        }
        let n = beta.len() / blocks;
        let mut out = vec![0.0; n];
        for (b, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                for (o, x) in out.iter_mut().zip(&beta[b * n..(b + 1) * n]) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }
}

/// Subject posteriors recomputed at the pooled hyperparameters.
#[derive(Debug, Clone)]
pub struct GroupModel {
    pub theta_g: Hyperparameters,
    pub lambda: Vec<f64>,
    pub posteriors: Vec<PosteriorField>,
    pub projectors: Vec<Projector>,
}

impl GroupModel {
    pub fn new(
        systems: &[PosteriorSystem],
        projectors: Vec<Projector>,
        theta_g: Hyperparameters,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        if systems.len() != projectors.len() {
            return Err(Error::DimensionMismatch(
                "one projector per subject is required".into(),
            ));
        }
        let n_data = projectors.first().map(|p| p.n_data());
        if projectors.iter().any(|p| Some(p.n_data()) != n_data) {
            return Err(Error::DimensionMismatch(
                "subjects must share data locations".into(),
            ));
        }
        let posteriors = par::try_map_slice(systems, |s| recompute_posterior(s, &theta_g))?;
        Ok(Self {
            theta_g,
            lambda,
            posteriors,
            projectors,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.posteriors.len()
    }

    /// Posterior mean of the contrast.
    pub fn contrast_mean(&self, contrast: &Contrast) -> Result<Vec<f64>> {
        self.check(contrast)?;
        let n = self.projectors[0].n_data();
        let mut out = vec![0.0; n];
        for (m, (post, proj)) in self.posteriors.iter().zip(&self.projectors).enumerate() {
            for k in 0..contrast.n_tasks {
                let w = contrast.weight(m, k);
                if w != 0.0 {
                    for (o, b) in out.iter_mut().zip(proj.apply(post.mu_task(k))) {
                        *o += w * b;
                    }
                }
            }
        }
        Ok(out)
    }

    fn check(&self, contrast: &Contrast) -> Result<()> {
        if contrast.n_subjects != self.n_subjects() || contrast.n_tasks != self.theta_g.n_tasks() {
            return Err(Error::DimensionMismatch(format!(
                "contrast is {}x{}, model has {} subjects and {} tasks",
                contrast.n_subjects,
                contrast.n_tasks,
                self.n_subjects(),
                self.theta_g.n_tasks()
            )));
        }
        Ok(())
    }

    /// `h` draws of the contrast; subject `m` draws from its own stream
    /// under `seed`.
    pub fn contrast_draws(
        &self,
        contrast: &Contrast,
        h: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        self.check(contrast)?;
        let n = self.projectors[0].n_data();
        Ok(par::map_range(h, |i| {
            let mut out = vec![0.0; n];
            for (m, (post, proj)) in self.posteriors.iter().zip(&self.projectors).enumerate() {
                if (0..contrast.n_tasks).all(|k| contrast.weight(m, k) == 0.0) {
                    continue;
                }
                let w = draw_one(&post.factor, &post.mu, seed::derive(seed, &[m as u64]), i);
                let nm = proj.n_mesh();
                for k in 0..contrast.n_tasks {
                    let c = contrast.weight(m, k);
                    if c != 0.0 {
                        for (o, b) in out.iter_mut().zip(proj.apply(&w[k * nm..(k + 1) * nm])) {
                            *o += c * b;
                        }
                    }
                }
            }
            out
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInference {
    pub mean: Vec<f64>,
    pub excursions: Vec<ExcursionResult>,
}

/// Contrast posterior mean and one excursion set per threshold.
pub fn group_inference(
    model: &GroupModel,
    contrast: &Contrast,
    gammas: &[f64],
    alpha: f64,
    h: usize,
    seed: u64,
) -> Result<GroupInference> {
    if h < MIN_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "group inference needs at least {MIN_DRAWS} draws"
        )));
    }
    let mean = model.contrast_mean(contrast)?;
    let draws = model.contrast_draws(contrast, h, seed)?;
    let excursions = gammas
        .iter()
        .map(|&g| excursion_set(&draws, g, alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupInference { mean, excursions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalGroup {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub df: usize,
}

/// Summary-statistics combination of classical fits. With `M ≥ 2` subjects
/// the contrast `Σ_m u_m`, `u_m = Σ_k c_mk β̂_mk`, is tested against the
/// between-subject spread: `se = sd(M·u_m)/√M` on `M − 1` degrees of freedom.
/// A single subject falls back to its own standard errors and residual
/// degrees of freedom.
pub fn classical_group(fits: &[ClassicalFit], contrast: &Contrast) -> Result<ClassicalGroup> {
    if fits.len() != contrast.n_subjects {
        return Err(Error::DimensionMismatch(format!(
            "{} fits for a {}-subject contrast",
            fits.len(),
            contrast.n_subjects
        )));
    }
    let n = fits.first().map_or(0, |f| f.beta.nrows());
    if fits
        .iter()
        .any(|f| f.beta.nrows() != n || f.beta.ncols() != contrast.n_tasks)
    {
        return Err(Error::DimensionMismatch(
            "classical fits differ in shape".into(),
        ));
    }
    let m = fits.len();
    let u: Vec<Vec<f64>> = fits
        .iter()
        .enumerate()
        .map(|(j, f)| {
            (0..n)
                .map(|v| {
                    (0..contrast.n_tasks)
                        .map(|k| contrast.weight(j, k) * f.beta[(v, k)])
                        .sum()
                })
                .collect()
        })
        .collect();
    let estimate: Vec<f64> = (0..n).map(|v| u.iter().map(|x| x[v]).sum()).collect();
    if m == 1 {
        let f = &fits[0];
        let se = (0..n)
            .map(|v| {
                (0..contrast.n_tasks)
                    .map(|k| (contrast.weight(0, k) * f.se[(v, k)]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        return Ok(ClassicalGroup {
            estimate,
            se,
            df: f.df,
        });
    }
    let mf = m as f64;
    let se = (0..n)
        .map(|v| {
            let mean = estimate[v];
            let ss: f64 = u.iter().map(|x| (mf * x[v] - mean).powi(2)).sum();
            (ss / (mf - 1.0) / mf).sqrt()
        })
        .collect();
    Ok(ClassicalGroup {
        estimate,
        se,
        df: m - 1,
    })
}

/// BH-thresholded one-sided tests of the group contrast at `γ`.
pub fn classical_group_activation(group: &ClassicalGroup, gamma: f64, q: f64) -> Result<Vec<bool>> {
    let t = StudentsT::new(0.0, 1.0, group.df as f64)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let p: Vec<f64> = group
        .estimate
        .iter()
        .zip(&group.se)
        .map(|(&b, &s)| if s > 0.0 { t.sf((b - gamma) / s) } else { 1.0 })
        .collect();
    Ok(benjamini_hochberg(&p, q))
}
