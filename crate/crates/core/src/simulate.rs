//! Synthetic cortical-surface fMRI: meshes, sparse smooth activation fields,
//! translated subject maps, block designs and AR-noised scans.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{triangle_area, Mesh, Point3};
use crate::par;
use crate::preprocess::{build_design, is_stationary, HrfParams, ScanData, Stimulus};
use crate::seed;

/// Sphere radius in mm.
pub const SPHERE_RADIUS: f64 = 100.0;
/// Mean scan intensity added before percent-change scaling.
pub const BASELINE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Sphere,
    Grid,
}

/// Geometry used for exact distances and center moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Surface {
    Sphere { radius: f64 },
    Plane { extent: [f64; 2] },
}

impl Surface {
    pub fn distance(&self, a: &Point3, b: &Point3) -> f64 {
        match *self {
            Surface::Sphere { radius } => {
                let na = norm(a);
                let nb = norm(b);
                let c = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
                radius * c.acos()
            }
            Surface::Plane { .. } => {
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                norm(&d)
            }
        }
    }

    /// Uniform random point on the surface (away from plane edges by `margin`).
    pub fn random_point(&self, margin: f64, rng: &mut impl Rng) -> Point3 {
        match *self {
            Surface::Sphere { radius } => loop {
                let p: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let n = norm(&p);
                if n > 1e-12 {
                    return [radius * p[0] / n, radius * p[1] / n, radius * p[2] / n];
                }
            },
            Surface::Plane { extent } => {
                let m = margin.min(0.45 * extent[0].min(extent[1]));
                [
                    rng.random_range(m..=extent[0] - m),
                    rng.random_range(m..=extent[1] - m),
                    0.0,
                ]
            }
        }
    }

    /// Move `p` a surface distance `d` in a uniformly random direction.
    pub fn move_point(&self, p: &Point3, d: f64, rng: &mut impl Rng) -> Point3 {
        let theta = rng.random_range(0.0..2.0 * PI);
        match *self {
            Surface::Sphere { radius } => {
                let u = scale(p, 1.0 / norm(p));
                // orthonormal tangent basis at u
                let helper = if u[0].abs() < 0.9 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 1.0, 0.0]
                };
                let e1 = normalize(&cross(&u, &helper));
                let e2 = cross(&u, &e1);
                let t = add(&scale(&e1, theta.cos()), &scale(&e2, theta.sin()));
                let a = d / radius;
                scale(&add(&scale(&u, a.cos()), &scale(&t, a.sin())), radius)
            }
            Surface::Plane { .. } => [p[0] + d * theta.cos(), p[1] + d * theta.sin(), p[2]],
        }
    }
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn normalize(a: &Point3) -> Point3 {
    scale(a, 1.0 / norm(a))
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// A mesh with the analytic surface it discretizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMesh {
    pub mesh: Mesh,
    pub surface: Surface,
}

const ICO_FACES: [[usize; 3]; 20] = [
    [0, 11, 5],
    [0, 5, 1],
    [0, 1, 7],
    [0, 7, 10],
    [0, 10, 11],
    [1, 5, 9],
    [5, 11, 4],
    [11, 10, 2],
    [10, 7, 6],
    [7, 1, 8],
    [3, 9, 4],
    [3, 4, 2],
    [3, 2, 6],
    [3, 6, 8],
    [3, 8, 9],
    [4, 9, 5],
    [2, 4, 11],
    [6, 2, 10],
    [8, 6, 7],
    [9, 8, 1],
];

/// Icosphere with each face split into `f²` triangles (`10f² + 2` vertices)
/// projected to a sphere of the given radius.
pub fn icosphere(frequency: usize, radius: f64) -> Result<Mesh> {
    if frequency == 0 {
        return Err(Error::InvalidParameter(
            "icosphere frequency must be positive".into(),
        ));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let base: [Point3; 12] = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let f = frequency;
    let mut index: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
    let mut verts: Vec<Point3> = Vec::new();
    let mut tris = Vec::with_capacity(20 * f * f);
    for face in ICO_FACES {
        let mut id = |i: usize, j: usize| -> usize {
            // integer barycentric weights on (a, b, c), keyed by base vertex
            let mut key: Vec<(usize, usize)> = [(face[0], f - i - j), (face[1], i), (face[2], j)]
                .into_iter()
                .filter(|e| e.1 > 0)
                .collect();
            key.sort_unstable();
            *index.entry(key).or_insert_with(|| {
                let w = [(f - i - j) as f64, i as f64, j as f64];
                let mut p = [0.0; 3];
                for (c, &wc) in w.iter().enumerate() {
                    for d in 0..3 {
                        p[d] += wc * base[face[c]][d];
                    }
                }
                verts.push(scale(&normalize(&p), radius));
                verts.len() - 1
            })
        };
        for i in 0..f {
            for j in 0..f - i {
                tris.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
                if i + j + 1 < f {
                    tris.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
                }
            }
        }
    }
    Mesh::new(verts, tris)
}

/// Planar `rows × cols` grid with the given spacing, two triangles per cell.
pub fn grid_mesh(rows: usize, cols: usize, spacing: f64) -> Result<Mesh> {
    if rows < 2 || cols < 2 || !(spacing > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "grid {rows}x{cols} with spacing {spacing}"
        )));
    }
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            v.push([c as f64 * spacing, r as f64 * spacing, 0.0]);
        }
    }
    let mut t = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let a = r * cols + c;
            t.push([a, a + 1, a + cols + 1]);
            t.push([a, a + cols + 1, a + cols]);
        }
    }
    Mesh::new(v, t)
}

/// Smallest icosphere (radius 100 mm) or square grid with at least
/// `n_target` vertices.
pub fn make_synthetic_mesh(
    kind: MeshKind,
    n_target: usize,
    grid_spacing: f64,
) -> Result<SyntheticMesh> {
    match kind {
        MeshKind::Sphere => {
            if n_target < 12 {
                return Err(Error::InvalidParameter(
                    "a sphere mesh needs at least 12 vertices".into(),
                ));
            }
            let mut f = 1;
            while 10 * f * f + 2 < n_target {
                f += 1;
            }
            Ok(SyntheticMesh {
                mesh: icosphere(f, SPHERE_RADIUS)?,
                surface: Surface::Sphere {
                    radius: SPHERE_RADIUS,
                },
            })
        }
        MeshKind::Grid => {
            if n_target < 4 {
                return Err(Error::InvalidParameter(
                    "a grid mesh needs at least 4 vertices".into(),
                ));
            }
            let side = (n_target as f64).sqrt().ceil() as usize;
            let extent = (side - 1) as f64 * grid_spacing;
            Ok(SyntheticMesh {
                mesh: grid_mesh(side, side, grid_spacing)?,
                surface: Surface::Plane {
                    extent: [extent, extent],
                },
            })
        }
    }
}

/// Shape of the simulated activation regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub n_regions: usize,
    pub radius_mm: f64,
    pub fwhm_mm: f64,
    /// Values below this fraction of the maximum are set to zero.
    pub threshold: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            n_regions: 3,
            radius_mm: 10.0,
            fwhm_mm: 10.0,
            threshold: 0.01,
        }
    }
}

/// Disk centers and the resulting per-vertex amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationField {
    pub centers: Vec<Point3>,
    pub values: Vec<f64>,
}

fn vertex_areas(mesh: &Mesh) -> Vec<f64> {
    let v = mesh.vertices();
    let mut a = vec![0.0; mesh.n_vertices()];
    for t in mesh.triangles() {
        let ar = triangle_area(&v[t[0]], &v[t[1]], &v[t[2]]) / 3.0;
        for &i in t {
            a[i] += ar;
        }
    }
    a
}

/// Field from fixed disk centers: disk indicators smoothed by a Gaussian,
/// rescaled to peak `max_coef`, and zeroed below the threshold.
pub fn field_from_centers(
    sm: &SyntheticMesh,
    centers: &[Point3],
    spec: &FieldSpec,
    max_coef: f64,
) -> Result<Vec<f64>> {
    if !(max_coef > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "max_coef must be positive, got {max_coef}"
        )));
    }
    let verts = sm.mesh.vertices();
    let n = verts.len();
    let mut in_disk: Vec<usize> = (0..n)
        .filter(|&v| {
            centers
                .iter()
                .any(|c| sm.surface.distance(&verts[v], c) <= spec.radius_mm)
        })
        .collect();
    // coarse meshes: a disk with no vertex keeps its nearest one
    for c in centers {
        let nearest = (0..n)
            .min_by(|&a, &b| {
                sm.surface
                    .distance(&verts[a], c)
                    .total_cmp(&sm.surface.distance(&verts[b], c))
            })
            .expect("nonempty mesh");
        if !in_disk.contains(&nearest) {
            in_disk.push(nearest);
        }
    }
    in_disk.sort_unstable();
    let mut values = if spec.fwhm_mm > 0.0 {
        let sd = spec.fwhm_mm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let areas = vertex_areas(&sm.mesh);
        par::map_range(n, |v| {
            in_disk
                .iter()
                .map(|&u| {
                    let d = sm.surface.distance(&verts[v], &verts[u]);
                    areas[u] * (-d * d / (2.0 * sd * sd)).exp()
                })
                .sum::<f64>()
        })
    } else {
        let mut x = vec![0.0; n];
        for &u in &in_disk {
            x[u] = 1.0;
        }
        x
    };
    let max = values.iter().cloned().fold(0.0, f64::max);
    for x in values.iter_mut() {
        *x *= max_coef / max;
        if *x < spec.threshold * max_coef {
            *x = 0.0;
        }
    }
    Ok(values)
}

/// Random disk centers and their field.
pub fn simulate_coefficient_field(
    sm: &SyntheticMesh,
    max_coef: f64,
    spec: &FieldSpec,
    rng: &mut impl Rng,
) -> Result<ActivationField> {
    if spec.n_regions == 0 {
        return Err(Error::InvalidParameter(
            "at least one activation region is required".into(),
        ));
    }
    let margin = spec.radius_mm + spec.fwhm_mm;
    let centers: Vec<Point3> = (0..spec.n_regions)
        .map(|_| sm.surface.random_point(margin, rng))
        .collect();
    let values = field_from_centers(sm, &centers, spec, max_coef)?;
    Ok(ActivationField { centers, values })
}

/// Move every disk center by an exponential distance with mean `shift_mm`
/// in a random direction and regenerate the field.
pub fn translate_field(
    sm: &SyntheticMesh,
    field: &ActivationField,
    spec: &FieldSpec,
    max_coef: f64,
    shift_mm: f64,
    rng: &mut impl Rng,
) -> Result<ActivationField> {
    if shift_mm < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "shift must be nonnegative, got {shift_mm}"
        )));
    }
    if shift_mm == 0.0 {
        return Ok(field.clone());
    }
    let law = Exp::new(1.0 / shift_mm).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let centers: Vec<Point3> = field
        .centers
        .iter()
        .map(|c| {
            let d: f64 = law.sample(rng);
            sm.surface.move_point(c, d, rng)
        })
        .collect();
    let values = field_from_centers(sm, &centers, spec, max_coef)?;
    Ok(ActivationField { centers, values })
}

/// One AR series of length `t` after a burn-in, innovations `N(0, var)`.
pub fn ar_noise(t: usize, coeffs: &[f64], var: f64, rng: &mut impl Rng) -> Vec<f64> {
    let burn = 50 + 20 * coeffs.len();
    let sd = var.sqrt();
    let mut x = vec![0.0; t + burn];
    for i in 0..x.len() {
        let z: f64 = rng.sample(StandardNormal);
        let mut v = sd * z;
        for (j, &a) in coeffs.iter().enumerate() {
            if i > j {
                v += a * x[i - j - 1];
            }
        }
        x[i] = v;
    }
    x.split_off(burn)
}

/// `y_v = BASELINE + Σ_k x_k β_{v,k} + e_v` with AR noise; `beta[k][v]`.
/// Location `v` draws its noise from stream `(stream..., v)` under `seed`.
pub fn simulate_scan(
    beta: &[Vec<f64>],
    design: &DMatrix<f64>,
    tr: f64,
    noise_var: f64,
    ar_coeffs: &[f64],
    seed: u64,
    stream: &[u64],
) -> Result<ScanData> {
    let (t, k) = design.shape();
    if beta.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficient fields for {k} tasks",
            beta.len()
        )));
    }
    let n = beta.first().map_or(0, |b| b.len());
    if beta.iter().any(|b| b.len() != n) {
        return Err(Error::DimensionMismatch(
            "coefficient fields differ in length".into(),
        ));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be nonnegative, got {noise_var}"
        )));
    }
    if !ar_coeffs.is_empty() && !is_stationary(ar_coeffs, 1.0) {
        return Err(Error::InvalidParameter(format!(
            "AR coefficients {ar_coeffs:?} are not stationary"
        )));
    }
    let cols = par::map_range(n, |v| {
        let mut path = stream.to_vec();
        path.push(v as u64);
        let mut rng = seed::rng(seed, &path);
        let noise = if noise_var > 0.0 {
            ar_noise(t, ar_coeffs, noise_var, &mut rng)
        } else {
            vec![0.0; t]
        };
        (0..t)
            .map(|i| BASELINE + (0..k).map(|j| design[(i, j)] * beta[j][v]).sum::<f64>() + noise[i])
            .collect::<Vec<f64>>()
    });
    let mut y = DMatrix::zeros(t, n);
    for (v, c) in cols.into_iter().enumerate() {
        y.set_column(v, &nalgebra::DVector::from_vec(c));
    }
    ScanData::new(y, tr)
}

/// Block design: task `k` is on for `block_secs` starting at
/// `k·block_secs` in every cycle of `(K + 1)·block_secs`.
pub fn block_stimuli(k: usize, t: usize, tr: f64, block_secs: f64) -> Vec<Stimulus> {
    let cycle = (k + 1) as f64 * block_secs;
    let total = t as f64 * tr;
    (0..k)
        .map(|task| {
            let mut onsets = Vec::new();
            let mut start = task as f64 * block_secs;
            while start < total {
                onsets.push(start);
                start += cycle;
            }
            Stimulus::block(format!("task{}", task + 1), &onsets, block_secs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationScenario {
    pub name: String,
    pub mesh: MeshKind,
    pub n_target: usize,
    pub grid_spacing_mm: f64,
    pub k: usize,
    pub t: usize,
    pub tr: f64,
    pub block_secs: f64,
    pub max_coef: f64,
    pub noise_var: f64,
    pub ar_coeffs: Vec<f64>,
    pub subjects: usize,
    pub subject_shift_mm: f64,
    pub runs: usize,
    /// Per-run amplitude perturbation as a fraction of `max_coef`.
    pub run_effect: f64,
    pub field: FieldSpec,
    pub seed: u64,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self::single_subject(2000, 2)
    }
}

impl SimulationScenario {
    /// Single-subject setting: `T = 300`, peak 2, unit white noise.
    pub fn single_subject(n: usize, k: usize) -> Self {
        Self {
            name: format!("n{n}_k{k}"),
            mesh: MeshKind::Sphere,
            n_target: n,
            grid_spacing_mm: 5.0,
            k,
            t: 300,
            tr: 1.0,
            block_secs: 15.0,
            max_coef: 2.0,
            noise_var: 1.0,
            ar_coeffs: Vec::new(),
            subjects: 1,
            subject_shift_mm: 0.0,
            runs: 1,
            run_effect: 0.0,
            field: FieldSpec::default(),
            seed: 0,
        }
    }

    /// Population setting: about 5000 vertices, two tasks, TR 1 s for 300 s,
    /// peak SNR 2, 5 mm mean subject translations.
    pub fn population(subjects: usize) -> Self {
        Self {
            name: format!("population_m{subjects}"),
            n_target: 5000,
            subjects,
            subject_shift_mm: 5.0,
            ..Self::single_subject(5000, 2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.t <= self.k
            || self.subjects == 0
            || self.runs == 0
            || self.n_target == 0
        {
            return Err(Error::Validation(format!(
                "scenario {:?} has a nonpositive count",
                self.name
            )));
        }
        if !(self.max_coef > 0.0) || !(self.tr > 0.0) || !(self.block_secs > 0.0) {
            return Err(Error::Validation(format!(
                "scenario {:?} has a nonpositive amplitude or timing",
                self.name
            )));
        }
        if !(self.noise_var >= 0.0) || !(self.subject_shift_mm >= 0.0) || !(self.run_effect >= 0.0)
        {
            return Err(Error::Validation(format!(
                "scenario {:?} has a negative variance or shift",
                self.name
            )));
        }
        Ok(())
    }
}

/// Simulated data for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSim {
    pub runs: Vec<ScanData>,
    /// `truth[k][v]`, averaged over runs.
    pub truth: Vec<Vec<f64>>,
    /// `run_truth[r][k][v]`.
    pub run_truth: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub scenario: SimulationScenario,
    pub mesh: SyntheticMesh,
    pub stimuli: Vec<Stimulus>,
    pub design: DMatrix<f64>,
    pub population_fields: Vec<ActivationField>,
    pub subjects: Vec<SubjectSim>,
}

impl Population {
    /// `β_k > γ` mask of the population truth.
    pub fn active_set(&self, k: usize, gamma: f64) -> Vec<bool> {
        self.population_fields[k]
            .values
            .iter()
            .map(|&b| b > gamma)
            .collect()
    }
}

/// Population fields per task, translated subject fields, a shared block
/// design and per-run scans.
pub fn simulate_population(sc: &SimulationScenario) -> Result<Population> {
    sc.validate()?;
    let mesh = make_synthetic_mesh(sc.mesh, sc.n_target, sc.grid_spacing_mm)?;
    let stimuli = block_stimuli(sc.k, sc.t, sc.tr, sc.block_secs);
    let design = build_design(&stimuli, sc.t, sc.tr, &HrfParams::default())?;
    let population_fields = (0..sc.k)
        .map(|k| {
            let mut rng = seed::rng(sc.seed, &[seed::TAG_FIELDS, k as u64]);
            simulate_coefficient_field(&mesh, sc.max_coef, &sc.field, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let subjects = par::try_map_range(sc.subjects, |m| {
        let truth = (0..sc.k)
            .map(|k| {
                let mut rng = seed::rng(sc.seed, &[seed::TAG_SHIFT, m as u64, k as u64]);
                let f = translate_field(
                    &mesh,
                    &population_fields[k],
                    &sc.field,
                    sc.max_coef,
                    sc.subject_shift_mm,
                    &mut rng,
                )?;
                Ok(f.values)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut run_truth = Vec::with_capacity(sc.runs);
        let mut runs = Vec::with_capacity(sc.runs);
        for r in 0..sc.runs {
            let rt: Vec<Vec<f64>> = if sc.runs > 1 && sc.run_effect > 0.0 {
                let mut rng = seed::rng(sc.seed, &[seed::TAG_SHIFT, m as u64, 1000 + r as u64]);
                truth
                    .iter()
                    .map(|b| {
                        let u: f64 = rng.random_range(-1.0..1.0);
                        b.iter().map(|x| x * (1.0 + sc.run_effect * u)).collect()
                    })
                    .collect()
            } else {
                truth.clone()
            };
            runs.push(simulate_scan(
                &rt,
                &design,
                sc.tr,
                sc.noise_var,
                &sc.ar_coeffs,
                sc.seed,
                &[seed::TAG_NOISE, m as u64, r as u64],
            )?);
            run_truth.push(rt);
        }
        let truth = (0..sc.k)
            .map(|k| {
                (0..truth[k].len())
                    .map(|v| run_truth.iter().map(|rt| rt[k][v]).sum::<f64>() / sc.runs as f64)
                    .collect()
            })
            .collect();
        Ok::<_, Error>(SubjectSim {
            runs,
            truth,
            run_truth,
        })
    })?;
    Ok(Population {
        scenario: sc.clone(),
        mesh,
        stimuli,
        design,
        population_fields,
        subjects,
    })
}
