//! SPDE (Matérn, smoothness 1) precision matrices on a mesh.
//!
//! With lumped mass `C` and stiffness `G`, the unscaled precision is
//! `Q̃(κ²) = κ²C + 2G + κ⁻²GC⁻¹G` and the prior precision of a task field is
//! `Q = Q̃ / (4πφ)`, where `φ` is the marginal variance.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cholesky::{CholeskyFactor, Ordering, SymbolicCholesky};
use crate::error::{Error, Result};
use crate::mesh::FemMatrices;
use crate::par;
use crate::seed;
use crate::sparse::CscMatrix;

/// EM state `θ = (κ²₁…κ²_K, φ₁…φ_K, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub kappa2: Vec<f64>,
    pub phi: Vec<f64>,
    pub sigma2: f64,
}

impl Hyperparameters {
    pub fn new(kappa2: Vec<f64>, phi: Vec<f64>, sigma2: f64) -> Result<Self> {
        let h = Self {
            kappa2,
            phi,
            sigma2,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn n_tasks(&self) -> usize {
        self.kappa2.len()
    }

    pub fn is_valid(&self) -> bool {
        self.kappa2.len() == self.phi.len()
            && !self.kappa2.is_empty()
            && self.to_vec().iter().all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa2.len() != self.phi.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} kappa2 values but {} phi values",
                self.kappa2.len(),
                self.phi.len()
            )));
        }
        if !self.is_valid() {
            return Err(Error::InvalidParameter(format!(
                "hyperparameters must be finite and positive: {:?}",
                self.to_vec()
            )));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.kappa2.len() + 1);
        v.extend_from_slice(&self.kappa2);
        v.extend_from_slice(&self.phi);
        v.push(self.sigma2);
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec); does not validate.
    pub fn from_vec(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 2 * k + 1 {
            return Err(Error::DimensionMismatch(format!(
                "theta of length {} for {k} tasks",
                v.len()
            )));
        }
        Ok(Self {
            kappa2: v[..k].to_vec(),
            phi: v[k..2 * k].to_vec(),
            sigma2: v[2 * k],
        })
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

/// `φ = 1 / (4π κ² τ²)`.
pub fn marginal_variance(kappa2: f64, tau2: f64) -> Result<f64> {
    positive("kappa2", kappa2)?;
    positive("tau2", tau2)?;
    Ok(1.0 / (4.0 * PI * kappa2 * tau2))
}

/// `τ² = 1 / (4π κ² φ)`.
pub fn tau2(kappa2: f64, phi: f64) -> Result<f64> {
    positive("kappa2", kappa2)?;
    positive("phi", phi)?;
    Ok(1.0 / (4.0 * PI * kappa2 * phi))
}

/// Log-κ² bounds (as bits) and grid size of a cached log-determinant grid.
type GridKey = (u64, u64, usize);

/// FEM matrices laid out on the fixed union pattern of `Q̃`, with cached
/// symbolic factorizations.
#[derive(Debug, Clone)]
pub struct SpdeOperator {
    fem: FemMatrices,
    pattern: CscMatrix,
    c_vals: Vec<f64>,
    g_vals: Vec<f64>,
    gcg_vals: Vec<f64>,
    symbolic: Arc<SymbolicCholesky>,
    // κ²C + G, used for the cheap log-determinant route
    shifted: CscMatrix,
    shifted_c: Vec<f64>,
    shifted_g: Vec<f64>,
    shifted_symbolic: Arc<SymbolicCholesky>,
    log_det_c: f64,
    grid_cache: Arc<Mutex<HashMap<GridKey, Arc<Vec<f64>>>>>,
}

impl SpdeOperator {
    pub fn new(fem: FemMatrices) -> Result<Self> {
        let c = fem.c_matrix();
        let pattern = CscMatrix::pattern_union(&[&c, &fem.g, &fem.gcinvg]);
        let c_vals = c.aligned_to(&pattern)?;
        let g_vals = fem.g.aligned_to(&pattern)?;
        let gcg_vals = fem.gcinvg.aligned_to(&pattern)?;
        let symbolic = SymbolicCholesky::analyze(&pattern, Ordering::Amd)?;

        let shifted = CscMatrix::pattern_union(&[&c, &fem.g]);
        let shifted_c = c.aligned_to(&shifted)?;
        let shifted_g = fem.g.aligned_to(&shifted)?;
        let shifted_symbolic = SymbolicCholesky::analyze(&shifted, Ordering::Amd)?;
        let log_det_c = fem.c.iter().map(|v| v.ln()).sum();
        Ok(Self {
            fem,
            pattern,
            c_vals,
            g_vals,
            gcg_vals,
            symbolic,
            shifted,
            shifted_c,
            shifted_g,
            shifted_symbolic,
            log_det_c,
            grid_cache: Arc::default(),
        })
    }

    pub fn fem(&self) -> &FemMatrices {
        &self.fem
    }

    pub fn n(&self) -> usize {
        self.fem.n()
    }

    /// The `κ²`-independent sparsity pattern of `Q̃`.
    pub fn pattern(&self) -> &CscMatrix {
        &self.pattern
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// Values of `Q̃(κ²)` on [`pattern`](Self::pattern).
    pub fn qtilde_values(&self, kappa2: f64) -> Vec<f64> {
        let inv = 1.0 / kappa2;
        (0..self.pattern.nnz())
            .map(|p| kappa2 * self.c_vals[p] + 2.0 * self.g_vals[p] + inv * self.gcg_vals[p])
            .collect()
    }

    pub fn qtilde(&self, kappa2: f64) -> Result<CscMatrix> {
        positive("kappa2", kappa2)?;
        Ok(self.pattern.with_values(self.qtilde_values(kappa2)))
    }

    pub fn factor_qtilde(&self, kappa2: f64) -> Result<CholeskyFactor> {
        self.symbolic.factor(&self.qtilde(kappa2)?)
    }

    fn factor_shifted(&self, kappa2: f64) -> Result<CholeskyFactor> {
        positive("kappa2", kappa2)?;
        let vals = self
            .shifted_c
            .iter()
            .zip(&self.shifted_g)
            .map(|(c, g)| kappa2 * c + g)
            .collect();
        self.shifted_symbolic
            .factor(&self.shifted.with_values(vals))
    }

    /// `log|Q̃|` via `Q̃ = κ⁻²(κ²C + G)C⁻¹(κ²C + G)`, which only needs a
    /// factorization of the much sparser `κ²C + G`.
    pub fn log_det_qtilde(&self, kappa2: f64) -> Result<f64> {
        let f = self.factor_shifted(kappa2)?;
        Ok(2.0 * f.log_det() - self.log_det_c - self.n() as f64 * kappa2.ln())
    }

    /// `log|Q̃(e^s)|` at `points` equally spaced `s` in `[lo, hi]`, memoized
    /// per operator.
    pub fn log_det_qtilde_grid(&self, lo: f64, hi: f64, points: usize) -> Result<Arc<Vec<f64>>> {
        let key = (lo.to_bits(), hi.to_bits(), points);
        if let Some(v) = self.grid_cache.lock().expect("grid cache lock").get(&key) {
            return Ok(Arc::clone(v));
        }
        let h = if points > 1 {
            (hi - lo) / (points - 1) as f64
        } else {
            0.0
        };
        let vals = par::try_map_range(points, |i| self.log_det_qtilde((lo + i as f64 * h).exp()))?;
        let vals = Arc::new(vals);
        self.grid_cache
            .lock()
            .expect("grid cache lock")
            .insert(key, Arc::clone(&vals));
        Ok(vals)
    }

    /// `log|Q̃|` from a factorization of `Q̃` itself.
    pub fn log_det_qtilde_direct(&self, kappa2: f64) -> Result<f64> {
        Ok(self.factor_qtilde(kappa2)?.log_det())
    }

    /// `log|Q̃|` and its derivative in `κ²`,
    /// `d log|Q̃| / dκ² = 2 Tr((κ²C + G)⁻¹ C) − n/κ²`.
    pub fn log_det_qtilde_with_derivative(&self, kappa2: f64) -> Result<(f64, f64)> {
        let f = self.factor_shifted(kappa2)?;
        let n = self.n() as f64;
        let log_det = 2.0 * f.log_det() - self.log_det_c - n * kappa2.ln();
        let z = f.selected_inverse().diag();
        let tr: f64 = z.iter().zip(&self.fem.c).map(|(a, b)| a * b).sum();
        Ok((log_det, 2.0 * tr - n / kappa2))
    }

    pub fn precision(&self, kappa2: f64, phi: f64) -> Result<PrecisionOperator> {
        positive("phi", phi)?;
        Ok(PrecisionOperator {
            qtilde: self.qtilde(kappa2)?,
            scale: 1.0 / (4.0 * PI * phi),
            kappa2,
            phi,
            symbolic: Arc::clone(&self.symbolic),
        })
    }
}

/// `Q̃(κ²)` assembled directly from FEM matrices.
pub fn build_qtilde(kappa2: f64, fem: &FemMatrices) -> Result<CscMatrix> {
    SpdeOperator::new(fem.clone())?.qtilde(kappa2)
}

pub fn build_precision(kappa2: f64, phi: f64, fem: &FemMatrices) -> Result<PrecisionOperator> {
    SpdeOperator::new(fem.clone())?.precision(kappa2, phi)
}

/// `Q = scale · Q̃` kept in factored form: the scaled matrix is only built on request.
#[derive(Debug, Clone)]
pub struct PrecisionOperator {
    pub qtilde: CscMatrix,
    pub scale: f64,
    pub kappa2: f64,
    pub phi: f64,
    symbolic: Arc<SymbolicCholesky>,
}

impl PrecisionOperator {
    pub fn matrix(&self) -> CscMatrix {
        self.qtilde.scaled(self.scale)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.qtilde
            .mul_vec(x)
            .into_iter()
            .map(|v| v * self.scale)
            .collect()
    }

    pub fn factor_qtilde(&self) -> Result<CholeskyFactor> {
        self.symbolic.factor(&self.qtilde)
    }

    pub fn log_det(&self) -> Result<f64> {
        let n = self.qtilde.nrows() as f64;
        Ok(self.factor_qtilde()?.log_det() + n * self.scale.ln())
    }

    /// Zero-mean prior draws.
    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
        let f = self.factor_qtilde()?;
        let s = 1.0 / self.scale.sqrt();
        let zero = vec![0.0; self.qtilde.nrows()];
        Ok(draws_from_factor(&f, &zero, seed, count)
            .into_iter()
            .map(|x| x.into_iter().map(|v| v * s).collect())
            .collect())
    }
}

/// `log|A|` of a sparse SPD matrix.
pub fn log_det(a: &CscMatrix) -> Result<f64> {
    Ok(CholeskyFactor::new(a)?.log_det())
}

/// `count` draws from `N(mean, A⁻¹)` where `A` is the precision.
pub fn sample_gaussian_field(
    precision: &CscMatrix,
    mean: &[f64],
    seed: u64,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    if mean.len() != precision.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "mean of length {} for a {}x{} precision",
            mean.len(),
            precision.nrows(),
            precision.ncols()
        )));
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite mean".into()));
    }
    let f = CholeskyFactor::new(precision)?;
    Ok(draws_from_factor(&f, mean, seed, count))
}

/// One draw `mean + Pᵀ L⁻ᵀ z`; draw `h` uses its own derived stream.
pub fn draw_one(factor: &CholeskyFactor, mean: &[f64], seed: u64, h: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed, &[seed::TAG_DRAWS, h as u64]);
    let z: Vec<f64> = (0..mean.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut x = factor.solve_lt_permuted(&z);
    for (xi, m) in x.iter_mut().zip(mean) {
        *xi += m;
    }
    x
}

pub fn draws_from_factor(
    factor: &CholeskyFactor,
    mean: &[f64],
    seed: u64,
    count: usize,
) -> Vec<Vec<f64>> {
    par::map_range(count, |h| draw_one(factor, mean, seed, h))
}
