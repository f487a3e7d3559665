//! Task-fMRI preprocessing: HRF-convolved design, percent-signal-change
//! scaling, nuisance regression and AR prewhitening with spatially smoothed
//! coefficients.

mod ar;
mod hrf;
mod scaling;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::EdgeGraph;
use crate::par;

pub use ar::{
    ar_covariance, estimate_ar_yule_walker, is_stationary, prewhiten, project_stationary,
    smooth_ar_params, unit_autocovariance, whitening_matrices, whitening_matrix, ArModel,
    STATIONARITY_RADIUS,
};
pub use hrf::{convolve_design, convolve_with, hrf_double_gamma, Event, HrfParams, Stimulus};
pub use scaling::{nuisance_regress, scale_design, scale_percent_change, NuisanceRegressor};

/// BOLD time series, one column per data location.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanData {
    pub y: DMatrix<f64>,
    pub tr: f64,
}

impl ScanData {
    pub fn new(y: DMatrix<f64>, tr: f64) -> Result<Self> {
        if y.nrows() < 2 {
            return Err(Error::Validation(format!(
                "scan has {} time points",
                y.nrows()
            )));
        }
        if !(tr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "TR must be positive, got {tr}"
            )));
        }
        Ok(Self { y, tr })
    }

    pub fn n_time(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_locations(&self) -> usize {
        self.y.ncols()
    }
}

/// Task regressors, shared across locations or one matrix per location.
#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    Shared(DMatrix<f64>),
    PerLocation(Vec<DMatrix<f64>>),
}

impl Design {
    pub fn n_tasks(&self) -> usize {
        match self {
            Design::Shared(x) => x.ncols(),
            Design::PerLocation(xs) => xs.first().map_or(0, |x| x.ncols()),
        }
    }

    pub fn location(&self, v: usize) -> &DMatrix<f64> {
        match self {
            Design::Shared(x) => x,
            Design::PerLocation(xs) => &xs[v],
        }
    }

    pub fn select(&self, keep: &[usize]) -> Design {
        match self {
            Design::Shared(x) => Design::Shared(x.clone()),
            Design::PerLocation(xs) => {
                Design::PerLocation(keep.iter().map(|&i| xs[i].clone()).collect())
            }
        }
    }
}

/// HRF-convolve each stimulus on the scan grid and scale the columns.
pub fn build_design(
    stimuli: &[Stimulus],
    t: usize,
    tr: f64,
    hrf: &HrfParams,
) -> Result<DMatrix<f64>> {
    if stimuli.is_empty() {
        return Err(Error::Validation("no task stimuli".into()));
    }
    let mut x = DMatrix::zeros(t, stimuli.len());
    for (k, s) in stimuli.iter().enumerate() {
        let col = convolve_with(&s.series(t, tr), tr, hrf);
        x.set_column(k, &nalgebra::DVector::from_vec(col));
    }
    scale_design(&x)
        .map_err(|e| Error::Validation(format!("{e} (task order: {:?})", names(stimuli))))
}

fn names(stimuli: &[Stimulus]) -> Vec<&str> {
    stimuli.iter().map(|s| s.name.as_str()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessOptions {
    pub hrf: HrfParams,
    pub prewhiten: bool,
    pub ar_order: usize,
    pub fwhm_mm: f64,
    /// Round AR coefficients to this many decimals and share whitening
    /// matrices between locations with equal rounded coefficients.
    pub ar_round_decimals: Option<u32>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            hrf: HrfParams::default(),
            prewhiten: true,
            ar_order: 6,
            fwhm_mm: 6.0,
            ar_round_decimals: None,
        }
    }
}

/// Where each data location sits on the surface, for AR smoothing.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingGraph<'a> {
    pub graph: &'a EdgeGraph,
    pub location_vertex: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedLocation {
    pub index: usize,
    pub reason: String,
}

/// Model-ready data for the kept locations.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub y: DMatrix<f64>,
    pub design: Design,
    pub kept: Vec<usize>,
    pub masked: Vec<MaskedLocation>,
    pub ar: Option<Vec<ArModel>>,
    pub task_names: Vec<String>,
}

/// Full pipeline: design → percent change → nuisance regression → residual
/// AR fit → smoothing → prewhitening.
pub fn run_preprocessing(
    scan: &ScanData,
    stimuli: &[Stimulus],
    nuisance: Option<&DMatrix<f64>>,
    smoothing: Option<SmoothingGraph<'_>>,
    opts: &PreprocessOptions,
) -> Result<Preprocessed> {
    let t = scan.n_time();
    let x = build_design(stimuli, t, scan.tr, &opts.hrf)?;
    let regressor = match nuisance {
        Some(z) => {
            if z.nrows() != t {
                return Err(Error::DimensionMismatch(format!(
                    "nuisance matrix has {} rows for {t} time points",
                    z.nrows()
                )));
            }
            Some(NuisanceRegressor::new(z)?)
        }
        None => None,
    };
    if let Some(s) = &smoothing {
        if s.location_vertex.len() != scan.n_locations() {
            return Err(Error::DimensionMismatch(
                "smoothing map does not cover every location".into(),
            ));
        }
    }

    let cleaned: Vec<Result<Vec<f64>>> = par::map_range(scan.n_locations(), |v| {
        let col: Vec<f64> = scan.y.column(v).iter().copied().collect();
        if col.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite values".into()));
        }
        let pc = scale_percent_change(&col)?;
        Ok(match &regressor {
            Some(r) => r.residual(&pc),
            None => pc,
        })
    });
    let mut kept = Vec::new();
    let mut masked = Vec::new();
    let mut series = Vec::new();
    for (v, r) in cleaned.into_iter().enumerate() {
        match r {
            Ok(s) => {
                kept.push(v);
                series.push(s);
            }
            Err(e) => {
                log::warn!("location {v} masked: {e}");
                masked.push(MaskedLocation {
                    index: v,
                    reason: e.to_string(),
                });
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation("every location was masked".into()));
    }

    if !opts.prewhiten {
        let y = DMatrix::from_fn(t, kept.len(), |i, j| series[j][i]);
        return Ok(Preprocessed {
            y,
            design: Design::Shared(x),
            kept,
            masked,
            ar: None,
            task_names: names(stimuli).into_iter().map(String::from).collect(),
        });
    }

    let design_resid = NuisanceRegressor::new(&x)?;
    let fits: Vec<Option<ArModel>> = par::map_slice(&series, |s| {
        let r = design_resid.residual(s);
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let rs: f64 = r.iter().map(|v| v * v).sum();
        if rs <= 1e-20 * ss || ss == 0.0 {
            return None;
        }
        estimate_ar_yule_walker(&r, opts.ar_order)
            .ok()
            .map(|m| ArModel {
                coeffs: project_stationary(&m.coeffs),
                innovation_var: m.innovation_var,
            })
    });
    let fitted: Vec<bool> = fits.iter().map(Option::is_some).collect();
    let n_white = fitted.iter().filter(|f| !**f).count();
    if n_white > 0 {
        log::info!("{n_white} locations have no residual signal and are left unwhitened");
    }
    let raw: Vec<ArModel> = fits
        .into_iter()
        .map(|m| m.unwrap_or_else(|| ArModel::white(opts.ar_order)))
        .collect();
    let models = match smoothing {
        Some(s) if opts.fwhm_mm > 0.0 => {
            let lv: Vec<usize> = kept.iter().map(|&v| s.location_vertex[v]).collect();
            smooth_ar_params(s.graph, &lv, &raw, &fitted, opts.fwhm_mm)
        }
        _ => raw,
    };
    let ds = whitening_matrices(&models, t, opts.ar_round_decimals)?;
    let whitened: Vec<(Vec<f64>, DMatrix<f64>)> = par::map_range(series.len(), |j| {
        ar::apply_whitening(&ds[j], &series[j], &x)
    });
    let y = DMatrix::from_fn(t, kept.len(), |i, j| whitened[j].0[i]);
    let xs = whitened.into_iter().map(|(_, xw)| xw).collect();
    Ok(Preprocessed {
        y,
        design: Design::PerLocation(xs),
        kept,
        masked,
        ar: Some(models),
        task_names: names(stimuli).into_iter().map(String::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stimuli() -> Vec<Stimulus> {
        vec![
            Stimulus::block("a", &[10.0, 50.0, 90.0], 15.0),
            Stimulus::block("b", &[30.0, 70.0], 12.0),
        ]
    }

    fn scan(t: usize, n: usize, noise: f64, seed: u64) -> ScanData {
        let x = build_design(&stimuli(), t, 1.0, &HrfParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(t, n, |i, v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            100.0 + x[(i, 0)] * (v as f64 * 0.1) + x[(i, 1)] + noise * e
        });
        ScanData::new(y, 1.0).unwrap()
    }

    #[test]
    fn pass_through_without_whitening() {
        let s = scan(120, 4, 0.5, 1);
        let opts = PreprocessOptions {
            prewhiten: false,
            ..Default::default()
        };
        let out = run_preprocessing(&s, &stimuli(), None, None, &opts).unwrap();
        for v in 0..4 {
            let col: Vec<f64> = s.y.column(v).iter().copied().collect();
            let pc = scale_percent_change(&col).unwrap();
            for (i, &x) in pc.iter().enumerate() {
                assert_eq!(out.y[(i, v)], x);
            }
            assert!(out.y.column(v).sum().abs() < 1e-10 * 120.0);
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_whitens() {
        let s = scan(150, 6, 1.0, 2);
        let edges: Vec<(usize, usize, f64)> = (0..5).map(|i| (i, i + 1, 2.0)).collect();
        let g = EdgeGraph::from_edges(6, &edges);
        let lv: Vec<usize> = (0..6).collect();
        let sm = SmoothingGraph {
            graph: &g,
            location_vertex: &lv,
        };
        let opts = PreprocessOptions::default();
        let a = run_preprocessing(&s, &stimuli(), None, Some(sm), &opts).unwrap();
        let b = run_preprocessing(&s, &stimuli(), None, Some(sm), &opts).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.design, b.design);
        assert_eq!(a.ar.as_ref().unwrap().len(), 6);
        for m in a.ar.as_ref().unwrap() {
            assert!(is_stationary(&m.coeffs, STATIONARITY_RADIUS));
        }
    }

    #[test]
    fn zero_mean_location_is_masked() {
        let mut s = scan(80, 3, 0.5, 3);
        s.y.column_mut(1).fill(0.0);
        let opts = PreprocessOptions {
            prewhiten: false,
            ..Default::default()
        };
        let out = run_preprocessing(&s, &stimuli(), None, None, &opts).unwrap();
        assert_eq!(out.kept, vec![0, 2]);
        assert_eq!(out.masked[0].index, 1);
    }

    #[test]
    fn noiseless_locations_stay_unwhitened() {
        let s = scan(100, 3, 0.0, 4);
        let out =
            run_preprocessing(&s, &stimuli(), None, None, &PreprocessOptions::default()).unwrap();
        for m in out.ar.unwrap() {
            assert_eq!(m, ArModel::white(6));
        }
    }
}
