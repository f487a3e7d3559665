use super::{Mesh, Point3};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::CscMatrix;

/// Linear finite-element matrices on a mesh.
///
/// `c` is the lumped mass (one third of the incident triangle area per
/// vertex), `g` the stiffness matrix of piecewise-linear hat functions and
/// `gcinvg` the product `G C⁻¹ G`.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pub c: Vec<f64>,
    pub g: CscMatrix,
    pub gcinvg: CscMatrix,
}

impl FemMatrices {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn c_matrix(&self) -> CscMatrix {
        CscMatrix::diagonal(&self.c)
    }
}

pub fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    let u = sub(b, a);
    let v = sub(c, a);
    let cr = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt()
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Local stiffness: `K_ij = (e_i · e_j) / (4A)` with `e_i` the edge opposite vertex `i`.
fn local_stiffness(p: [&Point3; 3]) -> Result<([[f64; 3]; 3], f64)> {
    let area = triangle_area(p[0], p[1], p[2]);
    if !(area > 0.0) {
        return Err(Error::Validation(
            "degenerate triangle in FEM assembly".into(),
        ));
    }
    let e = [sub(p[2], p[1]), sub(p[0], p[2]), sub(p[1], p[0])];
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = dot(&e[i], &e[j]) / (4.0 * area);
        }
    }
    Ok((k, area))
}

pub fn build_fem_matrices(mesh: &Mesh) -> Result<FemMatrices> {
    let n = mesh.n_vertices();
    let verts = mesh.vertices();
    let locals = par::try_map_range(mesh.n_triangles(), |t| {
        let tri = mesh.triangles()[t];
        local_stiffness([&verts[tri[0]], &verts[tri[1]], &verts[tri[2]]])
    })?;

    let mut c = vec![0.0; n];
    let mut trip = Vec::with_capacity(9 * locals.len());
    for (tri, (k, area)) in mesh.triangles().iter().zip(&locals) {
        for a in 0..3 {
            c[tri[a]] += area / 3.0;
            for b in 0..3 {
                trip.push((tri[a], tri[b], k[a][b]));
            }
        }
    }
    if let Some(i) = c.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Validation(format!(
            "vertex {i} belongs to no triangle"
        )));
    }
    let g = CscMatrix::from_triplets(n, n, &trip);
    let cinv: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
    let prod = g.matmul(&g.scale_rows(&cinv));
    let gcinvg = symmetrize(&prod);
    Ok(FemMatrices { c, g, gcinvg })
}

/// `(A + Aᵀ) / 2` on the union pattern; exactly symmetric in floating point.
fn symmetrize(a: &CscMatrix) -> CscMatrix {
    let trip: Vec<(usize, usize, f64)> = a
        .triplets()
        .flat_map(|(i, j, _)| [(i, j, 0.0), (j, i, 0.0)])
        .collect();
    let pattern = CscMatrix::from_triplets(a.nrows(), a.ncols(), &trip);
    let vals = (0..pattern.ncols())
        .flat_map(|j| {
            pattern
                .column(j)
                .map(move |(i, _)| 0.5 * (a.get(i, j) + a.get(j, i)))
                .collect::<Vec<_>>()
        })
        .collect();
    pattern.with_values(vals)
}
