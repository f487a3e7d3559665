use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquaremOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    /// `false` runs the plain fixed-point iteration.
    pub accelerate: bool,
    pub metric: StopMetric,
}

impl Default for SquaremOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iter: 100,
            accelerate: true,
            metric: StopMetric::Raw,
        }
    }
}

/// Scale on which successive iterates are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Mean squared difference of `θ`.
    #[default]
    Raw,
    /// Mean squared difference of `log θ`.
    Log,
}

impl StopMetric {
    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            StopMetric::Raw => mean_sq_diff(a, b),
            StopMetric::Log => {
                let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
                let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
                mean_sq_diff(&la, &lb)
            }
        }
    }
}

/// One accepted iterate and its convergence metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub theta: Vec<f64>,
    pub metric: f64,
    /// Extrapolated candidate was accepted.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquaremResult {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<HistoryEntry>,
}

/// `mean((a − b)²)`.
pub fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Squared-extrapolation acceleration of `θ ↦ f(θ)` with the S3 step length.
/// Stops when the mean squared change of `θ` over one cycle is below
/// `epsilon`. `valid` rejects candidates outside the parameter space.
pub fn squarem<F, V>(
    mut f: F,
    valid: V,
    theta0: &[f64],
    opts: &SquaremOptions,
) -> Result<SquaremResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    V: Fn(&[f64]) -> bool,
{
    let mut theta = theta0.to_vec();
    let mut history = Vec::new();
    let mut evaluations = 0;
    for it in 1..=opts.max_iter {
        let (next, extrapolated) = if opts.accelerate {
            let t1 = f(&theta)?;
            let t2 = f(&t1)?;
            evaluations += 2;
            let r: Vec<f64> = t1.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let v: Vec<f64> = t2
                .iter()
                .zip(&t1)
                .zip(&r)
                .map(|((a, b), r)| a - b - r)
                .collect();
            let nv = norm(&v);
            if nv == 0.0 {
                (t2, false)
            } else {
                let alpha = (-norm(&r) / nv).min(-1.0);
                let cand: Vec<f64> = (0..theta.len())
                    .map(|i| theta[i] - 2.0 * alpha * r[i] + alpha * alpha * v[i])
                    .collect();
                let r2 = r.iter().map(|x| x * x).sum::<f64>() / r.len().max(1) as f64;
                let stabilized = if valid(&cand) {
                    evaluations += 1;
                    match f(&cand) {
                        Ok(fc) if valid(&fc) && mean_sq_diff(&fc, &cand) <= r2 => Some(fc),
                        Ok(_) => None,
                        Err(e) => {
                            log::debug!("extrapolated candidate rejected: {e}");
                            None
                        }
                    }
                } else {
                    None
                };
                match stabilized {
                    Some(fc) => (fc, true),
                    None => (t2, false),
                }
            }
        } else {
            evaluations += 1;
            (f(&theta)?, false)
        };
        let metric = opts.metric.between(&next, &theta);
        history.push(HistoryEntry {
            theta: next.clone(),
            metric,
            extrapolated,
        });
        theta = next;
        log::debug!("iteration {it}: metric {metric:e}");
        if metric < opts.epsilon {
            return Ok(SquaremResult {
                theta,
                converged: true,
                iterations: it,
                evaluations,
                history,
            });
        }
    }
    log::warn!("no convergence after {} iterations", opts.max_iter);
    Ok(SquaremResult {
        theta,
        converged: false,
        iterations: opts.max_iter,
        evaluations,
        history,
    })
}
