//! Dense reference implementation of one EM update on small problems.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surface_glm::em::SubjectInput;
use surface_glm::preprocess::Design;
use surface_glm::{build_fem_matrices, Hyperparameters, Mesh, Projector};

pub struct Toy {
    pub mesh: Mesh,
    pub k: usize,
    pub t: usize,
    /// Per-location designs, `T × K`.
    pub x: Vec<DMatrix<f64>>,
    /// `T × N`.
    pub y: DMatrix<f64>,
    pub projector: Projector,
    pub theta: Hyperparameters,
}

pub fn grid(m: usize, h: f64) -> Mesh {
    let mut v = Vec::new();
    for r in 0..m {
        for c in 0..m {
            v.push([c as f64 * h, r as f64 * h, 0.0]);
        }
    }
    let mut t = Vec::new();
    for r in 0..m - 1 {
        for c in 0..m - 1 {
            let a = r * m + c;
            t.push([a, a + 1, a + m + 1]);
            t.push([a, a + m + 1, a + m]);
        }
    }
    Mesh::new(v, t).unwrap()
}

/// Random grid mesh with `n ≤ 49`, `K ≤ 3`, `T = 40`, per-location designs
/// and a barycentric projector (or the identity on even seeds).
pub fn random_toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(4..=7);
    let k = rng.random_range(1..=3);
    let t = 40;
    let mesh = grid(m, rng.random_range(0.5..1.5));
    let n = mesh.n_vertices();
    let projector = if seed.is_multiple_of(2) {
        Projector::identity(n)
    } else {
        let n_data = rng.random_range(n / 2..=n);
        let rows = (0..n_data)
            .map(|_| {
                let tri = mesh.triangles()[rng.random_range(0..mesh.n_triangles())];
                let a: f64 = rng.random();
                let b: f64 = rng.random::<f64>() * (1.0 - a);
                vec![(tri[0], a), (tri[1], b), (tri[2], 1.0 - a - b)]
            })
            .collect();
        Projector::from_rows(n, rows).unwrap()
    };
    let n_data = projector.n_data();
    let x: Vec<DMatrix<f64>> = (0..n_data)
        .map(|_| DMatrix::from_fn(t, k, |_, _| rng.random::<f64>() - 0.5))
        .collect();
    let w: Vec<f64> = (0..n * k).map(|i| ((i as f64) * 0.7).sin()).collect();
    let mut y = DMatrix::zeros(t, n_data);
    for v in 0..n_data {
        for kk in 0..k {
            let beta: f64 = projector
                .row(v)
                .iter()
                .map(|&(j, a)| a * w[kk * n + j])
                .sum();
            for tt in 0..t {
                y[(tt, v)] += x[v][(tt, kk)] * beta;
            }
        }
        for tt in 0..t {
            y[(tt, v)] += rng.random::<f64>() - 0.5;
        }
    }
    let theta = Hyperparameters::new(
        (0..k).map(|_| rng.random_range(0.2..3.0)).collect(),
        (0..k).map(|_| rng.random_range(0.05..1.0)).collect(),
        rng.random_range(0.05..0.5),
    )
    .unwrap();
    Toy {
        mesh,
        k,
        t,
        x,
        y,
        projector,
        theta,
    }
}

impl Toy {
    pub fn input(&self) -> SubjectInput {
        SubjectInput::new(
            &self.y,
            &Design::PerLocation(self.x.clone()),
            self.projector.clone(),
        )
        .unwrap()
    }
}

/// Dense matrices and the one-step update.
pub struct DenseModel {
    pub n: usize,
    pub k: usize,
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub gcg: DMatrix<f64>,
    /// `TN × nK` matrix `XΨ`.
    pub xpsi: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub struct DenseStep {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma2: f64,
    pub phi: Vec<f64>,
    pub kappa2: Vec<f64>,
}

impl DenseModel {
    pub fn new(toy: &Toy) -> Self {
        let fem = build_fem_matrices(&toy.mesh).unwrap();
        let n = fem.n();
        let k = toy.k;
        let c = DMatrix::from_diagonal(&DVector::from_vec(fem.c.clone()));
        let g = fem.g.to_dense();
        let cinv =
            DMatrix::from_diagonal(&DVector::from_vec(fem.c.iter().map(|v| 1.0 / v).collect()));
        let gcg = &g * cinv * &g;
        let n_data = toy.projector.n_data();
        let t = toy.t;
        let mut psi = DMatrix::<f64>::zeros(n_data, n);
        for v in 0..n_data {
            for &(j, a) in toy.projector.row(v) {
                psi[(v, j)] += a;
            }
        }
        // rows ordered location-major: (v, t)
        let mut xpsi = DMatrix::<f64>::zeros(t * n_data, n * k);
        let mut y = DVector::zeros(t * n_data);
        for v in 0..n_data {
            for tt in 0..t {
                y[v * t + tt] = toy.y[(tt, v)];
                for kk in 0..k {
                    for j in 0..n {
                        xpsi[(v * t + tt, kk * n + j)] = toy.x[v][(tt, kk)] * psi[(v, j)];
                    }
                }
            }
        }
        Self {
            n,
            k,
            c,
            g,
            gcg,
            xpsi,
            y,
        }
    }

    pub fn qtilde(&self, kappa2: f64) -> DMatrix<f64> {
        &self.c * kappa2 + &self.g * 2.0 + &self.gcg / kappa2
    }

    pub fn precision(&self, theta: &Hyperparameters) -> DMatrix<f64> {
        let n = self.n;
        let mut p = self.xpsi.transpose() * &self.xpsi / theta.sigma2;
        for kk in 0..self.k {
            let q = self.qtilde(theta.kappa2[kk]) / (4.0 * PI * theta.phi[kk]);
            let mut blk = p.view_mut((kk * n, kk * n), (n, n));
            blk += q;
        }
        p
    }

    /// `μ` and `Σ` at `θ`.
    pub fn posterior(&self, theta: &Hyperparameters) -> (DVector<f64>, DMatrix<f64>) {
        let sigma = self.precision(theta).try_inverse().unwrap();
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let mu = &sigma * self.xpsi.transpose() * &self.y / theta.sigma2;
        (mu, sigma)
    }

    fn second_moment(&self, theta: &Hyperparameters) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (mu, sigma) = self.posterior(theta);
        let e = &sigma + &mu * mu.transpose();
        (mu, sigma, e)
    }

    fn block(&self, e: &DMatrix<f64>, kk: usize) -> DMatrix<f64> {
        e.view((kk * self.n, kk * self.n), (self.n, self.n))
            .into_owned()
    }

    fn log_det(a: &DMatrix<f64>) -> f64 {
        let l = a.clone().cholesky().expect("SPD").l();
        2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `f(κ²) = ½log|Q̃| − Tr(Q̃E)/(8πφ)`, dense.
    pub fn kappa2_objective(&self, kappa2: f64, phi: f64, ek: &DMatrix<f64>) -> f64 {
        let q = self.qtilde(kappa2);
        0.5 * Self::log_det(&q) - (&q * ek).trace() / (8.0 * PI * phi)
    }

    /// `df/dκ²` with `dQ̃/dκ² = C − κ⁻⁴GC⁻¹G`, dense inverse.
    fn kappa2_derivative(&self, kappa2: f64, phi: f64, ek: &DMatrix<f64>) -> f64 {
        let q = self.qtilde(kappa2);
        let dq = &self.c - &self.gcg / (kappa2 * kappa2);
        let qinv = q.try_inverse().unwrap();
        0.5 * (&qinv * &dq).trace() - (&dq * ek).trace() / (8.0 * PI * phi)
    }

    /// Maximizer over log κ² ∈ [ln 1e-4, ln 1e4]: coarse grid, then bisection
    /// on the dense derivative.
    pub fn argmax_kappa2(&self, phi: f64, ek: &DMatrix<f64>) -> f64 {
        let (lo, hi) = (1e-4f64.ln(), 1e4f64.ln());
        let steps = 400;
        let mut best = (lo, f64::NEG_INFINITY);
        for i in 0..=steps {
            let s = lo + (hi - lo) * i as f64 / steps as f64;
            let f = self.kappa2_objective(s.exp(), phi, ek);
            if f > best.1 {
                best = (s, f);
            }
        }
        let h = (hi - lo) / steps as f64;
        let (mut a, mut b) = (best.0 - h, best.0 + h);
        let d = |s: f64| self.kappa2_derivative(s.exp(), phi, ek);
        assert!(
            d(a) > 0.0 && d(b) < 0.0,
            "oracle bracket lacks a sign change"
        );
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if d(m) > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        (0.5 * (a + b)).exp()
    }

    /// One EM update at `θ` with exact second moments.
    pub fn step(&self, theta: &Hyperparameters) -> DenseStep {
        let (mu, sigma, e) = self.second_moment(theta);
        let tn = self.y.len() as f64;
        let b = self.xpsi.transpose() * &self.xpsi;
        let sigma2 =
            (self.y.dot(&self.y) - 2.0 * self.y.dot(&(&self.xpsi * &mu)) + (&b * &e).trace()) / tn;
        let mut phi = Vec::new();
        let mut kappa2 = Vec::new();
        for kk in 0..self.k {
            let ek = self.block(&e, kk);
            let p = (self.qtilde(theta.kappa2[kk]) * &ek).trace() / (4.0 * PI * self.n as f64);
            phi.push(p);
            kappa2.push(self.argmax_kappa2(p, &ek));
        }
        DenseStep {
            mu,
            sigma,
            sigma2,
            phi,
            kappa2,
        }
    }

    /// `E[log p(y, w | θ_new)]` under `w | y, θ_post`, dropping constants.
    pub fn expected_complete_loglik(
        &self,
        theta_new: &Hyperparameters,
        theta_post: &Hyperparameters,
    ) -> f64 {
        let (mu, _, e) = self.second_moment(theta_post);
        let tn = self.y.len() as f64;
        let b = self.xpsi.transpose() * &self.xpsi;
        let s2 = theta_new.sigma2;
        let r1 = -0.5 * tn * s2.ln()
            - (self.y.dot(&self.y) - 2.0 * self.y.dot(&(&self.xpsi * &mu)) + (&b * &e).trace())
                / (2.0 * s2);
        let mut r2 = 0.0;
        for kk in 0..self.k {
            let q = self.qtilde(theta_new.kappa2[kk]);
            let phi = theta_new.phi[kk];
            r2 += 0.5 * (Self::log_det(&q) - self.n as f64 * (4.0 * PI * phi).ln())
                - (&q * self.block(&e, kk)).trace() / (8.0 * PI * phi);
        }
        r1 + r2
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
