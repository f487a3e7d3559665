use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Divide each column by its maximum, then center it.
pub fn scale_design(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let max = col.max();
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::Validation(format!(
                "design column {j} has nonpositive maximum {max}"
            )));
        }
        col /= max;
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        if col.amax() == 0.0 {
            return Err(Error::Validation(format!("design column {j} is constant")));
        }
    }
    Ok(out)
}

/// `100 (y − ȳ) / ȳ`.
pub fn scale_percent_change(y: &[f64]) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::Validation("empty series".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if mean == 0.0 || !mean.is_finite() {
        return Err(Error::Validation(format!("series mean is {mean}")));
    }
    Ok(y.iter().map(|v| 100.0 * (v - mean) / mean).collect())
}

/// Projection onto the orthogonal complement of the nuisance columns.
#[derive(Debug, Clone)]
pub struct NuisanceRegressor {
    q: DMatrix<f64>,
}

impl NuisanceRegressor {
    pub fn new(z: &DMatrix<f64>) -> Result<Self> {
        if z.nrows() < z.ncols() {
            return Err(Error::RankDeficient(format!(
                "{} nuisance columns for {} time points",
                z.ncols(),
                z.nrows()
            )));
        }
        let qr = z.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) || scale == 0.0 {
            return Err(Error::RankDeficient(
                "nuisance matrix lacks full column rank".into(),
            ));
        }
        Ok(Self { q: qr.q() })
    }

    pub fn residual(&self, y: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(y);
        let fit = &self.q * (self.q.transpose() * &y);
        (y - fit).iter().copied().collect()
    }
}

pub fn nuisance_regress(y: &[f64], z: &DMatrix<f64>) -> Result<Vec<f64>> {
    if y.len() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "series of length {} against {} nuisance rows",
            y.len(),
            z.nrows()
        )));
    }
    Ok(NuisanceRegressor::new(z)?.residual(y))
}
