use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::EdgeGraph;
use crate::par;

/// Roots of the AR polynomial must lie outside this radius.
pub const STATIONARITY_RADIUS: f64 = 1.01;

/// `x_t = Σ coeffs[i] x_{t−1−i} + e_t`, `Var(e_t) = innovation_var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub coeffs: Vec<f64>,
    pub innovation_var: f64,
}

impl ArModel {
    pub fn white(order: usize) -> Self {
        Self {
            coeffs: vec![0.0; order],
            innovation_var: 1.0,
        }
    }
}

/// Yule–Walker fit through the Levinson–Durbin recursion on the biased
/// sample autocovariance.
pub fn estimate_ar_yule_walker(resid: &[f64], order: usize) -> Result<ArModel> {
    let t = resid.len();
    if t <= order {
        return Err(Error::Validation(format!(
            "series of length {t} too short for AR({order})"
        )));
    }
    let mean = resid.iter().sum::<f64>() / t as f64;
    let x: Vec<f64> = resid.iter().map(|v| v - mean).collect();
    let r: Vec<f64> = (0..=order)
        .map(|k| {
            x[..t - k]
                .iter()
                .zip(&x[k..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / t as f64
        })
        .collect();
    if !(r[0] > 0.0) {
        return Err(Error::Singular(
            "constant series has a singular Toeplitz system".into(),
        ));
    }
    let mut a: Vec<f64> = Vec::with_capacity(order);
    let mut e = r[0];
    for m in 1..=order {
        let acc = r[m] - (1..m).map(|i| a[i - 1] * r[m - i]).sum::<f64>();
        let k = acc / e;
        let prev = a.clone();
        for i in 1..m {
            a[i - 1] = prev[i - 1] - k * prev[m - i - 1];
        }
        a.push(k);
        e *= 1.0 - k * k;
        if !(e > 0.0) {
            return Err(Error::Singular(
                "Yule-Walker recursion lost positive definiteness".into(),
            ));
        }
    }
    Ok(ArModel {
        coeffs: a,
        innovation_var: e,
    })
}

/// Step-down test: all roots of `1 − Σ φ_i z^i` lie outside `radius`.
pub fn is_stationary(coeffs: &[f64], radius: f64) -> bool {
    let mut a: Vec<f64> = coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| c * radius.powi(i as i32 + 1))
        .collect();
    while let Some(&k) = a.last() {
        if !(k.abs() < 1.0) {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - k * k;
        let prev = a.clone();
        a.pop();
        for i in 0..m - 1 {
            a[i] = (prev[i] + k * prev[m - 2 - i]) / denom;
        }
    }
    true
}

/// Shrink by the largest factor in `{1, 0.98, 0.96, …, 0}` that yields a
/// stationary model at [`STATIONARITY_RADIUS`].
pub fn project_stationary(coeffs: &[f64]) -> Vec<f64> {
    for step in 0..=50 {
        let f = 1.0 - 0.02 * step as f64;
        let c: Vec<f64> = coeffs.iter().map(|v| v * f).collect();
        if is_stationary(&c, STATIONARITY_RADIUS) {
            return c;
        }
    }
    vec![0.0; coeffs.len()]
}

/// Autocovariances `γ_0…γ_{len−1}` of the AR process with unit innovation variance.
pub fn unit_autocovariance(coeffs: &[f64], len: usize) -> Result<Vec<f64>> {
    let p = coeffs.len();
    let mut m = DMatrix::<f64>::identity(p + 1, p + 1);
    for k in 0..=p {
        for (i, c) in coeffs.iter().enumerate() {
            m[(k, k.abs_diff(i + 1))] -= c;
        }
    }
    let mut rhs = DVector::zeros(p + 1);
    rhs[0] = 1.0;
    let g0 = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("AR autocovariance system is singular".into()))?;
    let mut g: Vec<f64> = g0.iter().copied().collect();
    while g.len() < len {
        let k = g.len();
        g.push(
            coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| c * g[k - 1 - i])
                .sum(),
        );
    }
    g.truncate(len);
    if !(g[0] > 0.0) {
        return Err(Error::Numerical("AR model has nonpositive variance".into()));
    }
    Ok(g)
}

/// `S = σ² Toeplitz(γ)` for the fitted process.
pub fn ar_covariance(model: &ArModel, t: usize) -> Result<DMatrix<f64>> {
    let g = unit_autocovariance(&model.coeffs, t)?;
    Ok(DMatrix::from_fn(t, t, |i, j| {
        model.innovation_var * g[i.abs_diff(j)]
    }))
}

/// `S^{-1/2}` with unit innovation variance, via symmetric eigendecomposition.
fn unit_whitening(coeffs: &[f64], t: usize) -> Result<DMatrix<f64>> {
    let s = ar_covariance(
        &ArModel {
            coeffs: coeffs.to_vec(),
            innovation_var: 1.0,
        },
        t,
    )?;
    let eig = s.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: eig.eigenvalues.min(),
        });
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&d) * v.transpose())
}

/// `D = S^{-1/2}`.
pub fn whitening_matrix(model: &ArModel, t: usize) -> Result<DMatrix<f64>> {
    if !(model.innovation_var > 0.0) {
        return Err(Error::InvalidParameter(
            "innovation variance must be positive".into(),
        ));
    }
    Ok(unit_whitening(&model.coeffs, t)? / model.innovation_var.sqrt())
}

/// `(D y, D X)`.
pub fn prewhiten(y: &[f64], x: &DMatrix<f64>, model: &ArModel) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = whitening_matrix(model, y.len())?;
    Ok(apply_whitening(&d, y, x))
}

pub(crate) fn apply_whitening(
    d: &DMatrix<f64>,
    y: &[f64],
    x: &DMatrix<f64>,
) -> (Vec<f64>, DMatrix<f64>) {
    let yw = d * DVector::from_column_slice(y);
    (yw.iter().copied().collect(), d * x)
}

/// Whitening matrices for many locations. With `round_decimals`, coefficient
/// vectors are rounded and each distinct rounded vector is decomposed once.
pub fn whitening_matrices(
    models: &[ArModel],
    t: usize,
    round_decimals: Option<u32>,
) -> Result<Vec<DMatrix<f64>>> {
    match round_decimals {
        None => par::try_map_slice(models, |m| whitening_matrix(m, t)),
        Some(dec) => {
            let scale = 10f64.powi(dec as i32);
            let keys: Vec<Vec<i64>> = models
                .iter()
                .map(|m| {
                    m.coeffs
                        .iter()
                        .map(|c| (c * scale).round() as i64)
                        .collect()
                })
                .collect();
            let mut unique: Vec<Vec<i64>> = Vec::new();
            let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
            for k in &keys {
                if !index.contains_key(k) {
                    index.insert(k.clone(), unique.len());
                    unique.push(k.clone());
                }
            }
            let bases = par::try_map_slice(&unique, |k| {
                let c: Vec<f64> = k.iter().map(|&v| v as f64 / scale).collect();
                unit_whitening(&project_stationary(&c), t)
            })?;
            Ok(models
                .iter()
                .zip(&keys)
                .map(|(m, k)| &bases[index[k]] / m.innovation_var.sqrt())
                .collect())
        }
    }
}

/// Gaussian-kernel smoothing of AR coefficients and innovation variances over
/// the edge graph. `location_vertex[v]` is the mesh vertex of data location
/// `v`; `fitted[v] = false` locations neither contribute nor get replaced.
/// Smoothed coefficients are projected back to stationarity.
pub fn smooth_ar_params(
    graph: &EdgeGraph,
    location_vertex: &[usize],
    models: &[ArModel],
    fitted: &[bool],
    fwhm: f64,
) -> Vec<ArModel> {
    let sd = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    if !(sd > 0.0) {
        return models.to_vec();
    }
    let mut at_vertex: HashMap<usize, Vec<usize>> = HashMap::new();
    for (loc, &v) in location_vertex.iter().enumerate() {
        if fitted[loc] {
            at_vertex.entry(v).or_default().push(loc);
        }
    }
    par::map_range(models.len(), |loc| {
        if !fitted[loc] {
            return models[loc].clone();
        }
        let p = models[loc].coeffs.len();
        let mut coeffs = vec![0.0; p];
        let mut var = 0.0;
        let mut wsum = 0.0;
        for (vertex, d) in graph.within(location_vertex[loc], 3.0 * sd) {
            let Some(locs) = at_vertex.get(&vertex) else {
                continue;
            };
            let w = (-d * d / (2.0 * sd * sd)).exp();
            for &other in locs {
                for (c, o) in coeffs.iter_mut().zip(&models[other].coeffs) {
                    *c += w * o;
                }
                var += w * models[other].innovation_var;
                wsum += w;
            }
        }
        ArModel {
            coeffs: project_stationary(&coeffs.iter().map(|c| c / wsum).collect::<Vec<_>>()),
            innovation_var: var / wsum,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ar_series(coeffs: &[f64], t: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let burn = 500;
        let mut x = vec![0.0; t + burn];
        for i in 0..t + burn {
            let mut v: f64 = rng.sample(StandardNormal);
            for (k, c) in coeffs.iter().enumerate() {
                if i > k {
                    v += c * x[i - 1 - k];
                }
            }
            x[i] = v;
        }
        x.split_off(burn)
    }

    pub(crate) fn random_stationary(p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        // random reflection coefficients in (−0.9, 0.9) map to a stationary model
        let mut a: Vec<f64> = Vec::new();
        for _ in 0..p {
            let k = 1.8 * rng.random::<f64>() - 0.9;
            let prev = a.clone();
            let m = prev.len() + 1;
            for i in 0..m - 1 {
                a[i] = prev[i] - k * prev[m - 2 - i];
            }
            a.push(k);
        }
        a
    }

    #[test]
    fn white_noise_coefficients_near_zero() {
        let x = ar_series(&[], 10_000, 1);
        let m = estimate_ar_yule_walker(&x, 6).unwrap();
        assert!(m.coeffs.iter().all(|c| c.abs() < 0.05), "{:?}", m.coeffs);
        assert!((m.innovation_var - 1.0).abs() < 0.05);
    }

    #[test]
    fn ar1_recovered() {
        let x = ar_series(&[0.5], 10_000, 2);
        let m = estimate_ar_yule_walker(&x, 6).unwrap();
        assert!((m.coeffs[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn constant_series_is_an_error() {
        assert!(estimate_ar_yule_walker(&[1.0; 50], 6).is_err());
    }

    #[test]
    fn levinson_matches_direct_toeplitz_solve() {
        let x = ar_series(&[0.4, -0.2, 0.1], 2_000, 3);
        let m = estimate_ar_yule_walker(&x, 3).unwrap();
        let t = x.len();
        let mean = x.iter().sum::<f64>() / t as f64;
        let r: Vec<f64> = (0..4)
            .map(|k| {
                (0..t - k)
                    .map(|i| (x[i] - mean) * (x[i + k] - mean))
                    .sum::<f64>()
                    / t as f64
            })
            .collect();
        let a = DMatrix::from_fn(3, 3, |i, j| r[i.abs_diff(j)]);
        let b = DVector::from_column_slice(&r[1..4]);
        let phi = a.lu().solve(&b).unwrap();
        for i in 0..3 {
            assert!((phi[i] - m.coeffs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stationarity_checks() {
        assert!(is_stationary(&[0.5], 1.0));
        assert!(!is_stationary(&[1.2], 1.0));
        assert!(!is_stationary(&[0.995], STATIONARITY_RADIUS));
        let p = project_stationary(&[1.5, -0.2]);
        assert!(is_stationary(&p, STATIONARITY_RADIUS));
        assert!(p[0].abs() <= 1.5 && p[1].abs() <= 0.2);
        assert_eq!(project_stationary(&[0.3, 0.1]), vec![0.3, 0.1]);
    }

    #[test]
    fn autocovariance_of_ar1() {
        let g = unit_autocovariance(&[0.6], 5).unwrap();
        let g0 = 1.0 / (1.0 - 0.36);
        for (k, v) in g.iter().enumerate() {
            assert!((v - g0 * 0.6f64.powi(k as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn whitening_identity_on_random_ar6() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let model = ArModel {
                coeffs: random_stationary(6, &mut rng),
                innovation_var: 0.5 + rng.random::<f64>(),
            };
            let s = ar_covariance(&model, 120).unwrap();
            let d = whitening_matrix(&model, 120).unwrap();
            let id = &d * s * &d;
            assert!((id - DMatrix::identity(120, 120)).amax() < 1e-8);
        }
    }

    #[test]
    fn zero_coefficients_whiten_to_identity() {
        let d = whitening_matrix(&ArModel::white(6), 30).unwrap();
        assert!((d - DMatrix::identity(30, 30)).amax() < 1e-12);
    }

    #[test]
    fn rounding_cache_matches_direct_for_exact_keys() {
        let models = vec![
            ArModel {
                coeffs: vec![0.25, -0.5],
                innovation_var: 2.0,
            },
            ArModel {
                coeffs: vec![0.25, -0.5],
                innovation_var: 0.5,
            },
        ];
        let cached = whitening_matrices(&models, 40, Some(3)).unwrap();
        let direct = whitening_matrices(&models, 40, None).unwrap();
        for (a, b) in cached.iter().zip(&direct) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    fn model(c: f64, v: f64) -> ArModel {
        ArModel {
            coeffs: vec![c],
            innovation_var: v,
        }
    }

    #[test]
    fn smoothing_two_vertices_closed_form() {
        let d = 3.0;
        let g = EdgeGraph::from_edges(2, &[(0, 1, d)]);
        let fwhm = 6.0;
        let sd = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let w = (-d * d / (2.0 * sd * sd)).exp();
        let out = smooth_ar_params(
            &g,
            &[0, 1],
            &[model(0.0, 1.0), model(0.5, 2.0)],
            &[true, true],
            fwhm,
        );
        // the vertex holding 0 moves to w·0.5/(1+w) = 0.5·w/(1+w)
        assert!((out[0].coeffs[0] - 0.5 * w / (1.0 + w)).abs() < 1e-12);
        assert!((out[0].innovation_var - (1.0 + 2.0 * w) / (1.0 + w)).abs() < 1e-12);
    }

    #[test]
    fn smoothing_constants_and_outliers() {
        let edges: Vec<(usize, usize, f64)> = (0..4).map(|i| (i, i + 1, 1.0)).collect();
        let g = EdgeGraph::from_edges(5, &edges);
        let same = vec![model(0.3, 1.5); 5];
        let out = smooth_ar_params(&g, &[0, 1, 2, 3, 4], &same, &[true; 5], 6.0);
        for m in &out {
            assert!((m.coeffs[0] - 0.3).abs() < 1e-14 && (m.innovation_var - 1.5).abs() < 1e-14);
        }
        let mut spiky = vec![model(0.1, 1.0); 5];
        spiky[2] = model(0.8, 1.0);
        let out = smooth_ar_params(&g, &[0, 1, 2, 3, 4], &spiky, &[true; 5], 2.0);
        assert!(out[2].coeffs[0] < 0.8 && out[2].coeffs[0] > 0.1);
    }
}
