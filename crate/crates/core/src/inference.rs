//! Activation maps and accuracy metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::em::PosteriorField;
use crate::error::{Error, Result};
use crate::mesh::Projector;
use crate::par;
use crate::spde::draw_one;

/// Minimum number of draws accepted by [`excursion_set`].
pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcursionResult {
    pub active: Vec<bool>,
    pub gamma: f64,
    pub alpha: f64,
    /// Empirical joint exceedance probability after each inclusion.
    pub joint_prob_trace: Vec<f64>,
    pub n_samples: usize,
}

impl ExcursionResult {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Empirical `P(β_v > γ)` per location.
pub fn empirical_exceedance(samples: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let h = samples.len();
    let v = samples.first().map_or(0, |s| s.len());
    par::map_range(v, |j| {
        samples.iter().filter(|s| s[j] > gamma).count() as f64 / h as f64
    })
}

/// Largest set of locations that jointly exceed `gamma` in at least a
/// `1 − alpha` fraction of the draws. Locations enter in order of decreasing
/// marginal exceedance (ties by index) and the set grows while the joint
/// fraction stays above the bound. `samples` holds one draw per row.
pub fn excursion_set(samples: &[Vec<f64>], gamma: f64, alpha: f64) -> Result<ExcursionResult> {
    let h = samples.len();
    if h < MIN_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "excursion sets need at least {MIN_DRAWS} draws, got {h}"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let v = samples[0].len();
    if samples.iter().any(|s| s.len() != v) {
        return Err(Error::DimensionMismatch("draws differ in length".into()));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Validation("non-finite posterior draw".into()));
    }
    let marg = empirical_exceedance(samples, gamma);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| marg[b].total_cmp(&marg[a]).then(a.cmp(&b)));

    let need = 1.0 - alpha;
    let mut alive = vec![true; h];
    let mut active = vec![false; v];
    let mut trace = Vec::new();
    for &j in &order {
        let next: Vec<bool> = alive
            .iter()
            .zip(samples)
            .map(|(&a, s)| a && s[j] > gamma)
            .collect();
        let p = next.iter().filter(|&&a| a).count() as f64 / h as f64;
        if p < need {
            break;
        }
        alive = next;
        active[j] = true;
        trace.push(p);
    }
    Ok(ExcursionResult {
        active,
        gamma,
        alpha,
        joint_prob_trace: trace,
        n_samples: h,
    })
}

/// `1 − Φ((γ − μ)/sd)`.
pub fn marginal_exceedance(mu: f64, sd: f64, gamma: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sd must be positive, got {sd}"
        )));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.sf((gamma - mu) / sd))
}

/// Benjamini–Hochberg step-up: rejections at level `q`.
pub fn benjamini_hochberg(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut out = vec![false; m];
    if m == 0 || q <= 0.0 {
        return out;
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let cutoff = (0..m)
        .rev()
        .find(|&i| p[order[i]] <= (i + 1) as f64 * q / m as f64);
    if let Some(c) = cutoff {
        for &i in &order[..=c] {
            out[i] = true;
        }
    }
    out
}

/// One-sided `t` tests of `β > γ` with BH control at level `q`. Locations
/// with a nonpositive standard error get p = 1.
pub fn classical_activation(
    beta: &[f64],
    se: &[f64],
    df: usize,
    gamma: f64,
    q: f64,
) -> Result<Vec<bool>> {
    if beta.len() != se.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} standard errors",
            beta.len(),
            se.len()
        )));
    }
    if df == 0 {
        return Err(Error::InvalidParameter("zero degrees of freedom".into()));
    }
    let t =
        StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let p: Vec<f64> = beta
        .iter()
        .zip(se)
        .map(|(&b, &s)| if s > 0.0 { t.sf((b - gamma) / s) } else { 1.0 })
        .collect();
    Ok(benjamini_hochberg(&p, q))
}

pub fn rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "rmse of lengths {} and {}",
            estimate.len(),
            truth.len()
        )));
    }
    let s: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((s / truth.len() as f64).sqrt())
}

/// `2|A∩B| / (|A|+|B|)` on index sets; two empty sets give 1.
pub fn dice(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// [`dice`] on equal-length masks.
pub fn dice_masks(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "masks of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let idx = |m: &[bool]| {
        m.iter()
            .enumerate()
            .filter(|e| *e.1)
            .map(|e| e.0)
            .collect::<Vec<_>>()
    };
    Ok(dice(&idx(a), &idx(b)))
}

/// `h` posterior draws of `Ψw_k` for task `k`, one row per draw.
pub fn posterior_beta_draws(
    post: &PosteriorField,
    projector: &Projector,
    k: usize,
    h: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let n = projector.n_mesh();
    par::map_range(h, |i| {
        let w = draw_one(&post.factor, &post.mu, seed, i);
        projector.apply(&w[k * n..(k + 1) * n])
    })
}

/// `h` posterior draws of `Ψw_k` for every task, indexed `[k][draw]`; draw
/// `i` is shared by all tasks.
pub fn posterior_task_draws(
    post: &PosteriorField,
    projector: &Projector,
    h: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let n = projector.n_mesh();
    let k = post.n_tasks();
    let draws = par::map_range(h, |i| {
        let w = draw_one(&post.factor, &post.mu, seed, i);
        (0..k)
            .map(|t| projector.apply(&w[t * n..(t + 1) * n]))
            .collect::<Vec<_>>()
    });
    let mut out = vec![Vec::with_capacity(h); k];
    for d in draws {
        for (t, x) in d.into_iter().enumerate() {
            out[t].push(x);
        }
    }
    out
}
