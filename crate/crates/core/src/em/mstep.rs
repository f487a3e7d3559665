use std::f64::consts::PI;

use super::posterior::{PosteriorField, PosteriorSystem, TraceSummaries};
use crate::error::{Error, Result};
use crate::spde::SpdeOperator;

/// Default `κ²` search bracket.
pub const KAPPA2_BRACKET: (f64, f64) = (1e-4, 1e4);
/// Golden-section tolerance on `log κ²`.
pub const KAPPA2_TOL: f64 = 1e-4;

/// `Tr(C·E)`, `Tr(G·E)`, `Tr(GC⁻¹G·E)` for one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskTraces {
    pub c: f64,
    pub g: f64,
    pub gcg: f64,
}

impl TaskTraces {
    pub fn from_summaries(t: &TraceSummaries, k: usize) -> Self {
        Self {
            c: t.c[k],
            g: t.g[k],
            gcg: t.gcg[k],
        }
    }

    /// `Tr(Q̃(κ²)·E) = κ²Tr(CE) + 2Tr(GE) + κ⁻²Tr(GC⁻¹G·E)`.
    pub fn qtilde(&self, kappa2: f64) -> f64 {
        kappa2 * self.c + 2.0 * self.g + self.gcg / kappa2
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            c: s * self.c,
            g: s * self.g,
            gcg: s * self.gcg,
        }
    }
}

/// Smallest `σ²` relative to `yᵀy / TN`; noiseless data cancels to rounding
/// error in the update.
const SIGMA2_REL_FLOOR: f64 = 1e-12;

/// `σ̂² = (yᵀy − 2bᵀμ + Tr(B·E)) / TN`, floored at `SIGMA2_REL_FLOOR · yᵀy/TN`.
pub fn update_sigma2(sys: &PosteriorSystem, post: &PosteriorField) -> Result<f64> {
    let t = post
        .traces
        .as_ref()
        .ok_or_else(|| Error::Validation("posterior has no trace summaries".into()))?;
    let nobs = sys.n_obs() as f64;
    let s2 = (sys.yty() - 2.0 * post.b_dot_mu + t.b) / nobs;
    let s2 = if s2.is_finite() {
        s2.max(SIGMA2_REL_FLOOR * sys.yty() / nobs)
    } else {
        s2
    };
    if !(s2 > 0.0) || !s2.is_finite() {
        return Err(Error::Numerical(format!(
            "sigma2 update is not positive ({s2:e})"
        )));
    }
    Ok(s2)
}

/// `φ̂ = Tr(Q̃E) / (4πn)` at the current `κ²`.
pub fn update_phi(traces: &TaskTraces, kappa2: f64, n: usize) -> Result<f64> {
    let phi = traces.qtilde(kappa2) / (4.0 * PI * n as f64);
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::Numerical(format!(
            "phi update is not positive ({phi:e})"
        )));
    }
    Ok(phi)
}

/// `f(κ²) = ½log|Q̃| − Tr(Q̃E)/(8πφ)`.
pub fn kappa2_objective(
    op: &SpdeOperator,
    kappa2: f64,
    phi: f64,
    traces: &TaskTraces,
) -> Result<f64> {
    Ok(Kappa2Target::Fixed { phi }.value(op.log_det_qtilde(kappa2)?, kappa2, traces))
}

/// What is maximized over `κ²`.
#[derive(Debug, Clone, Copy)]
enum Kappa2Target {
    /// `f(κ²|φ)` at fixed `φ`.
    Fixed { phi: f64 },
    /// `f` with `φ = Tr(Q̃E)/(4πn)` substituted: `½log|Q̃| − (n/2)log Tr(Q̃E)`.
    Profile { n: f64 },
}

impl Kappa2Target {
    fn value(&self, log_det: f64, k2: f64, tr: &TaskTraces) -> f64 {
        match *self {
            Kappa2Target::Fixed { phi } => 0.5 * log_det - tr.qtilde(k2) / (8.0 * PI * phi),
            Kappa2Target::Profile { n } => 0.5 * log_det - 0.5 * n * tr.qtilde(k2).ln(),
        }
    }

    /// Derivative in `log κ²` given `d log|Q̃| / dκ²`.
    fn slope(&self, d_log_det: f64, k2: f64, tr: &TaskTraces) -> f64 {
        let dq = tr.c - tr.gcg / (k2 * k2);
        k2 * match *self {
            Kappa2Target::Fixed { phi } => 0.5 * d_log_det - dq / (8.0 * PI * phi),
            Kappa2Target::Profile { n } => 0.5 * d_log_det - 0.5 * n * dq / tr.qtilde(k2),
        }
    }
}

/// Outcome of the `κ²` search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa2Optimum {
    pub kappa2: f64,
    pub value: f64,
    /// Optimum still on the bracket edge after widening.
    pub at_edge: bool,
}

fn golden(
    lo: f64,
    hi: f64,
    tol: f64,
    f: &mut impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while b - a > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2)?;
        }
    }
    Ok(if f1 >= f2 { (x1, f1) } else { (x2, f2) })
}

/// Coarse log-grid points used to bracket the global maximum; `f` need
/// not be unimodal over the whole range.
const SCAN_POINTS: usize = 49;

/// Best grid point over `[lo, hi]`, then golden section between its grid
/// neighbours.
fn bracketed_max(
    op: &SpdeOperator,
    target: Kappa2Target,
    tr: &TaskTraces,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64)> {
    let h = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let grid = op.log_det_qtilde_grid(lo, hi, SCAN_POINTS)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &ld) in grid.iter().enumerate() {
        let v = target.value(ld, (lo + i as f64 * h).exp(), tr);
        if v > best.1 {
            best = (i, v);
        }
    }
    let s = lo + best.0 as f64 * h;
    let (a, b) = ((s - h).max(lo), (s + h).min(hi));
    let mut obj = |s: f64| Ok(target.value(op.log_det_qtilde(s.exp())?, s.exp(), tr));
    let g = golden(a, b, KAPPA2_TOL, &mut obj)?;
    Ok(if g.1 >= best.1 { g } else { (s, best.1) })
}

/// Maximize `f(κ²|φ)` over `log κ²`.
pub fn optimize_kappa2(op: &SpdeOperator, phi: f64, traces: &TaskTraces) -> Result<Kappa2Optimum> {
    if !(phi > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "phi must be positive, got {phi}"
        )));
    }
    maximize(op, Kappa2Target::Fixed { phi }, traces)
}

/// Maximize `f` jointly over `κ²` and `φ`; the optimal `φ` is
/// [`update_phi`] at the returned `κ²`.
pub fn optimize_kappa2_profile(op: &SpdeOperator, traces: &TaskTraces) -> Result<Kappa2Optimum> {
    maximize(op, Kappa2Target::Profile { n: op.n() as f64 }, traces)
}

/// Grid scan and golden section, then polish the stationary point with
/// safeguarded root finding on the exact slope. The bracket widens once by
/// 10× on each side if the optimum lands on an edge.
fn maximize(op: &SpdeOperator, target: Kappa2Target, traces: &TaskTraces) -> Result<Kappa2Optimum> {
    let (mut lo, mut hi) = (KAPPA2_BRACKET.0.ln(), KAPPA2_BRACKET.1.ln());
    let mut best = bracketed_max(op, target, traces, lo, hi)?;
    let near = |s: f64, lo: f64, hi: f64| s - lo < 2.0 * KAPPA2_TOL || hi - s < 2.0 * KAPPA2_TOL;
    if near(best.0, lo, hi) {
        lo -= 10f64.ln();
        hi += 10f64.ln();
        best = bracketed_max(op, target, traces, lo, hi)?;
    }
    let at_edge = near(best.0, lo, hi);
    if at_edge {
        log::warn!(
            "kappa2 optimum {:e} is on the search bracket edge",
            best.0.exp()
        );
        return Ok(Kappa2Optimum {
            kappa2: best.0.exp(),
            value: best.1,
            at_edge,
        });
    }

    let slope = |s: f64| -> Result<f64> {
        let k2 = s.exp();
        let (_, d) = op.log_det_qtilde_with_derivative(k2)?;
        Ok(target.slope(d, k2, traces))
    };
    // polish on the slope: f is smooth and the bracket is tiny
    let (mut a, mut b) = (best.0 - 2.0 * KAPPA2_TOL, best.0 + 2.0 * KAPPA2_TOL);
    let mut fa = slope(a)?;
    let mut fb = slope(b)?;
    if fa > 0.0 && fb < 0.0 {
        let mut side = 0i8;
        for _ in 0..100 {
            if b - a < 1e-12 {
                break;
            }
            // Illinois false position
            let mut x = (a * fb - b * fa) / (fb - fa);
            if !(x > a && x < b) {
                x = 0.5 * (a + b);
            }
            let fx = slope(x)?;
            if fx == 0.0 {
                a = x;
                b = x;
                break;
            }
            if fx > 0.0 {
                a = x;
                fa = fx;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            } else {
                b = x;
                fb = fx;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            }
        }
        let s = 0.5 * (a + b);
        let v = target.value(op.log_det_qtilde(s.exp())?, s.exp(), traces);
        if v >= best.1 {
            best = (s, v);
        }
    }
    Ok(Kappa2Optimum {
        kappa2: best.0.exp(),
        value: best.1,
        at_edge,
    })
}
