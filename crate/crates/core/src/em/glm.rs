use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mesh::Projector;
use crate::par;
use crate::preprocess::Design;

/// Per-location sufficient statistics `XᵥᵀXᵥ`, `Xᵥᵀyᵥ`, `yᵥᵀyᵥ` plus the
/// projector from mesh to data locations. Everything the EM needs from the
/// data is in here.
#[derive(Debug, Clone)]
pub struct SubjectInput {
    k: usize,
    n_time: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: Vec<f64>,
    projector: Projector,
}

impl SubjectInput {
    /// `y` is `T × N` (one column per data location).
    pub fn new(y: &DMatrix<f64>, design: &Design, projector: Projector) -> Result<Self> {
        let (t, n_loc) = y.shape();
        if projector.n_data() != n_loc {
            return Err(Error::DimensionMismatch(format!(
                "projector has {} rows for {n_loc} data locations",
                projector.n_data()
            )));
        }
        if let Design::PerLocation(xs) = design {
            if xs.len() != n_loc {
                return Err(Error::DimensionMismatch(format!(
                    "{} location designs for {n_loc} locations",
                    xs.len()
                )));
            }
        }
        let k = design.n_tasks();
        if k == 0 {
            return Err(Error::Validation("design has no tasks".into()));
        }
        let stats = par::try_map_range(n_loc, |v| {
            let x = design.location(v);
            if x.shape() != (t, k) {
                return Err(Error::DimensionMismatch(format!(
                    "design at location {v} is {}x{}, expected {t}x{k}",
                    x.nrows(),
                    x.ncols()
                )));
            }
            if x.iter().chain(y.column(v).iter()).any(|a| !a.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite data at location {v}"
                )));
            }
            let yv = y.column(v);
            let xtx = x.transpose() * x;
            let xty = x.transpose() * yv;
            Ok((xtx, xty, yv.dot(&yv)))
        })?;
        let mut xtx = Vec::with_capacity(n_loc * k * k);
        let mut xty = Vec::with_capacity(n_loc * k);
        let mut yty = Vec::with_capacity(n_loc);
        for (a, b, c) in stats {
            xtx.extend(a.iter().copied());
            xty.extend(b.iter().copied());
            yty.push(c);
        }
        Ok(Self {
            k,
            n_time: t,
            xtx,
            xty,
            yty,
            projector,
        })
    }

    /// Stack runs that share one model (sums the statistics).
    pub fn stack_runs(runs: &[SubjectInput]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Validation("no runs".into()))?;
        let mut out = first.clone();
        for r in &runs[1..] {
            if r.k != out.k || r.projector != out.projector {
                return Err(Error::DimensionMismatch(
                    "runs differ in tasks or locations".into(),
                ));
            }
            out.n_time += r.n_time;
            for (a, b) in out.xtx.iter_mut().zip(&r.xtx) {
                *a += b;
            }
            for (a, b) in out.xty.iter_mut().zip(&r.xty) {
                *a += b;
            }
            for (a, b) in out.yty.iter_mut().zip(&r.yty) {
                *a += b;
            }
        }
        Ok(out)
    }

    pub fn n_tasks(&self) -> usize {
        self.k
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_locations(&self) -> usize {
        self.yty.len()
    }

    pub fn n_mesh(&self) -> usize {
        self.projector.n_mesh()
    }

    /// `T·N`.
    pub fn n_obs(&self) -> usize {
        self.n_time * self.n_locations()
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// `XᵥᵀXᵥ` (row-major `K × K`).
    pub fn xtx(&self, v: usize) -> &[f64] {
        &self.xtx[v * self.k * self.k..(v + 1) * self.k * self.k]
    }

    pub fn xty(&self, v: usize) -> &[f64] {
        &self.xty[v * self.k..(v + 1) * self.k]
    }

    pub fn yty(&self, v: usize) -> f64 {
        self.yty[v]
    }

    pub fn yty_total(&self) -> f64 {
        self.yty.iter().sum()
    }
}

/// Massive-univariate OLS fit.
#[derive(Debug, Clone)]
pub struct ClassicalFit {
    /// `N × K`
    pub beta: DMatrix<f64>,
    pub resid_var: Vec<f64>,
    pub se: DMatrix<f64>,
    pub df: usize,
    /// `false` where the location design is rank deficient; such rows are zero.
    pub valid: Vec<bool>,
}

pub fn classical_glm(input: &SubjectInput) -> Result<ClassicalFit> {
    let k = input.k;
    let n_loc = input.n_locations();
    if input.n_time <= k {
        return Err(Error::Validation(format!(
            "{} time points cannot fit {k} regressors",
            input.n_time
        )));
    }
    let df = input.n_time - k;
    let fits = par::map_range(n_loc, |v| {
        let a = DMatrix::from_row_slice(k, k, input.xtx(v));
        let b = DVector::from_column_slice(input.xty(v));
        let chol = a.cholesky()?;
        let l = chol.l();
        let diag = l.diagonal();
        if diag.amin() <= 1e-8 * diag.amax() {
            return None;
        }
        let beta = chol.solve(&b);
        let rss = (input.yty(v) - beta.dot(&b)).max(0.0);
        let s2 = rss / df as f64;
        let inv = chol.inverse();
        let se: Vec<f64> = (0..k).map(|j| (s2 * inv[(j, j)]).sqrt()).collect();
        Some((beta, s2, se))
    });
    let mut beta = DMatrix::zeros(n_loc, k);
    let mut se = DMatrix::zeros(n_loc, k);
    let mut resid_var = vec![0.0; n_loc];
    let mut valid = vec![false; n_loc];
    for (v, f) in fits.into_iter().enumerate() {
        match f {
            Some((b, s2, s)) => {
                for j in 0..k {
                    beta[(v, j)] = b[j];
                    se[(v, j)] = s[j];
                }
                resid_var[v] = s2;
                valid[v] = true;
            }
            None => {
                log::warn!("location {v}: rank-deficient design, masked from the classical fit")
            }
        }
    }
    if !valid.iter().any(|&x| x) {
        return Err(Error::RankDeficient(
            "design is rank deficient at every location".into(),
        ));
    }
    Ok(ClassicalFit {
        beta,
        resid_var,
        se,
        df,
        valid,
    })
}
