use super::mstep::{optimize_kappa2_profile, update_phi, TaskTraces};
use crate::error::{Error, Result};
use crate::spde::{Hyperparameters, SpdeOperator};

/// Quadratic forms `ŵᵀCŵ`, `ŵᵀGŵ`, `ŵᵀGC⁻¹Gŵ`, which play the role of the
/// traces when `E(wwᵀ)` is replaced by `ŵŵᵀ`.
pub fn point_traces(op: &SpdeOperator, w: &[f64]) -> TaskTraces {
    let fem = op.fem();
    TaskTraces {
        c: w.iter().zip(&fem.c).map(|(x, c)| c * x * x).sum(),
        g: fem.g.quad_form(w),
        gcg: fem.gcinvg.quad_form(w),
    }
}

/// Joint solution of `φ = ŵᵀQ̃ŵ/(4πn)` and `κ² = argmax f(κ²|φ)` for one
/// task, found by maximizing `f` with the first equation substituted.
pub fn init_task(op: &SpdeOperator, w: &[f64]) -> Result<(f64, f64)> {
    if w.len() != op.n() {
        return Err(Error::DimensionMismatch(format!(
            "initial field has {} entries, mesh has {}",
            w.len(),
            op.n()
        )));
    }
    if w.iter().all(|&x| x == 0.0) {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        log::warn!("initial field is identically zero; using kappa2 = 1");
        return Ok((1.0, var + 1e-6));
    }
    let tr = point_traces(op, w);
    let kappa2 = optimize_kappa2_profile(op, &tr)?.kappa2;
    Ok((kappa2, update_phi(&tr, kappa2, op.n())?))
}

/// Starting hyperparameters from classical estimates back-projected to the
/// mesh (`w_hat[k]`) and the classical residual variances.
pub fn init_hyperparameters(
    op: &SpdeOperator,
    w_hat: &[Vec<f64>],
    resid_var: &[f64],
) -> Result<Hyperparameters> {
    if resid_var.is_empty() {
        return Err(Error::Validation(
            "no residual variances to initialize sigma2".into(),
        ));
    }
    let sigma2 = resid_var.iter().sum::<f64>() / resid_var.len() as f64;
    let sigma2 = if sigma2 > 0.0 { sigma2 } else { 1e-6 };
    let mut kappa2 = Vec::with_capacity(w_hat.len());
    let mut phi = Vec::with_capacity(w_hat.len());
    for w in w_hat {
        let (k, p) = init_task(op, w)?;
        kappa2.push(k);
        phi.push(p);
    }
    Hyperparameters::new(kappa2, phi, sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_fem_matrices;
    use crate::spde::sample_gaussian_field;
    use crate::spde::tests::grid;

    fn op(m: usize, h: f64) -> SpdeOperator {
        SpdeOperator::new(build_fem_matrices(&grid(m, h)).unwrap()).unwrap()
    }

    #[test]
    fn recovers_prior_variance_from_a_draw() {
        // 23 x 23 = 529 vertices
        let op = op(23, 1.0);
        let (k2, phi) = (0.5, 2.0);
        let q = op.precision(k2, phi).unwrap().matrix();
        let w = sample_gaussian_field(&q, &vec![0.0; op.n()], 11, 1)
            .unwrap()
            .remove(0);
        let (_, phi_hat) = init_task(&op, &w).unwrap();
        assert!((phi_hat / phi - 1.0).abs() < 0.3, "phi_hat {phi_hat}");
    }

    #[test]
    fn matches_alternating_fixed_point() {
        use crate::em::optimize_kappa2;
        let op = op(9, 1.0);
        let w: Vec<f64> = (0..op.n())
            .map(|i| ((i as f64) * 0.21).sin() + 0.3 * ((i as f64) * 1.7).cos())
            .collect();
        let (k2, phi) = init_task(&op, &w).unwrap();
        let tr = point_traces(&op, &w);
        let (mut ka, mut pa) = (1.0, update_phi(&tr, 1.0, op.n()).unwrap());
        for _ in 0..500 {
            ka = optimize_kappa2(&op, pa, &tr).unwrap().kappa2;
            pa = update_phi(&tr, ka, op.n()).unwrap();
        }
        assert!((ka / k2 - 1.0).abs() < 1e-6, "{ka} vs {k2}");
        assert!((pa / phi - 1.0).abs() < 1e-6);
        // a fixed point of the alternation
        let again = optimize_kappa2(&op, phi, &tr).unwrap().kappa2;
        assert!((again / k2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scaling_field_scales_phi_only() {
        let op = op(8, 1.0);
        let w: Vec<f64> = (0..op.n()).map(|i| ((i as f64) * 0.37).sin()).collect();
        let (k1, p1) = init_task(&op, &w).unwrap();
        let w3: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
        let (k3, p3) = init_task(&op, &w3).unwrap();
        assert!((k1 / k3 - 1.0).abs() < 1e-6);
        assert!((p3 / p1 - 9.0).abs() < 1e-5);
    }

    #[test]
    fn sigma2_is_mean_residual_variance_and_zero_field_falls_back() {
        let op = op(4, 1.0);
        let th = init_hyperparameters(&op, &[vec![0.0; 16]], &[1.0, 2.0, 4.5]).unwrap();
        assert_eq!(th.sigma2, 2.5);
        assert_eq!(th.kappa2, vec![1.0]);
        assert!((th.phi[0] - 1e-6).abs() < 1e-18);
    }
}
