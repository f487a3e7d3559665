use super::{Mesh, Point3};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::CscMatrix;

/// Where the data live relative to the mesh.
#[derive(Debug, Clone, PartialEq)]
pub enum DataLocations {
    /// Each data location is a mesh vertex.
    Vertices(Vec<usize>),
    /// Arbitrary points on (or within snap tolerance of) the surface.
    Points(Vec<Point3>),
}

/// Sparse `N × n` map from mesh coefficients to data locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    n_mesh: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Projector {
    pub fn identity(n: usize) -> Self {
        Self {
            n_mesh: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn from_rows(n_mesh: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if row.iter().any(|&(j, _)| j >= n_mesh) {
                return Err(Error::Validation(format!(
                    "projector row {r} has an out-of-range column"
                )));
            }
            let s: f64 = row.iter().map(|e| e.1).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("projector row {r} sums to {s}")));
            }
        }
        Ok(Self { n_mesh, rows })
    }

    pub fn n_data(&self) -> usize {
        self.rows.len()
    }

    pub fn n_mesh(&self) -> usize {
        self.n_mesh
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Keep only the listed data rows.
    pub fn select_rows(&self, keep: &[usize]) -> Projector {
        Projector {
            n_mesh: self.n_mesh,
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// `Ψ w`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.n_mesh);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, a)| a * w[j]).sum())
            .collect()
    }

    /// `Ψᵀ x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows.len());
        let mut out = vec![0.0; self.n_mesh];
        for (row, &xi) in self.rows.iter().zip(x) {
            for &(j, a) in row {
                out[j] += a * xi;
            }
        }
        out
    }

    /// Least-squares-free back projection: `(diag(Ψᵀ1))⁻¹ Ψᵀ x`, zero where
    /// a vertex receives no data.
    pub fn back_project(&self, x: &[f64]) -> Vec<f64> {
        let num = self.apply_transpose(x);
        let den = self.apply_transpose(&vec![1.0; self.rows.len()]);
        num.iter()
            .zip(&den)
            .map(|(&a, &d)| if d > 0.0 { a / d } else { 0.0 })
            .collect()
    }

    /// Node of the mesh carrying the largest weight for each data row.
    pub fn dominant_vertex(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .copied()
                    .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, a)| {
                        if a > best.1 {
                            (j, a)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn to_csc(&self) -> CscMatrix {
        let trip: Vec<_> = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, a)| (i, j, a)))
            .collect();
        CscMatrix::from_triplets(self.rows.len(), self.n_mesh, &trip)
    }

    pub fn is_identity(&self) -> bool {
        self.rows.len() == self.n_mesh
            && self
                .rows
                .iter()
                .enumerate()
                .all(|(i, row)| row.len() == 1 && row[0] == (i, 1.0))
    }
}

pub fn build_projector(mesh: &Mesh, locations: &DataLocations) -> Result<Projector> {
    let n = mesh.n_vertices();
    match locations {
        DataLocations::Vertices(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!(
                    "data location vertex {bad} out of range"
                )));
            }
            Ok(Projector {
                n_mesh: n,
                rows: idx.iter().map(|&i| vec![(i, 1.0)]).collect(),
            })
        }
        DataLocations::Points(points) => {
            let tol = 1e-6 * mesh.bbox_diagonal();
            let rows =
                par::try_map_range(points.len(), |p| barycentric_row(mesh, &points[p], tol, p))?;
            Ok(Projector { n_mesh: n, rows })
        }
    }
}

fn barycentric_row(mesh: &Mesh, p: &Point3, tol: f64, index: usize) -> Result<Vec<(usize, f64)>> {
    let v = mesh.vertices();
    let mut best: Option<(f64, usize, [f64; 3])> = None;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (d2, bary) = closest_point_barycentric(p, &v[tri[0]], &v[tri[1]], &v[tri[2]]);
        if best.is_none_or(|b| d2 < b.0) {
            best = Some((d2, t, bary));
        }
    }
    let (d2, t, bary) = best.ok_or_else(|| Error::Validation("mesh has no triangles".into()))?;
    if d2.sqrt() > tol {
        return Err(Error::Validation(format!(
            "data point {index} lies {:.3e} from the surface (tolerance {tol:.3e})",
            d2.sqrt()
        )));
    }
    let tri = mesh.triangles()[t];
    let mut row: Vec<(usize, f64)> = (0..3)
        .filter(|&a| bary[a] > 1e-12)
        .map(|a| (tri[a], bary[a]))
        .collect();
    let s: f64 = row.iter().map(|e| e.1).sum();
    for e in &mut row {
        e.1 /= s;
    }
    row.sort_by_key(|e| e.0);
    Ok(row)
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Squared distance from `p` to triangle `abc` and barycentric coordinates
/// of the closest point (region tests after Ericson, *Real-Time Collision Detection*).
fn closest_point_barycentric(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> (f64, [f64; 3]) {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    let bary = if d1 <= 0.0 && d2 <= 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        let bp = sub(p, b);
        let d3 = dot(&ab, &bp);
        let d4 = dot(&ac, &bp);
        if d3 >= 0.0 && d4 <= d3 {
            [0.0, 1.0, 0.0]
        } else {
            let vc = d1 * d4 - d3 * d2;
            if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
                let v = d1 / (d1 - d3);
                [1.0 - v, v, 0.0]
            } else {
                let cp = sub(p, c);
                let d5 = dot(&ab, &cp);
                let d6 = dot(&ac, &cp);
                if d6 >= 0.0 && d5 <= d6 {
                    [0.0, 0.0, 1.0]
                } else {
                    let vb = d5 * d2 - d1 * d6;
                    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
                        let w = d2 / (d2 - d6);
                        [1.0 - w, 0.0, w]
                    } else {
                        let va = d3 * d6 - d5 * d4;
                        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
                            let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
                            [0.0, 1.0 - w, w]
                        } else {
                            let denom = 1.0 / (va + vb + vc);
                            let v = vb * denom;
                            let w = vc * denom;
                            [1.0 - v - w, v, w]
                        }
                    }
                }
            }
        }
    };
    let q = [
        bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
        bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
        bary[0] * a[2] + bary[1] * b[2] + bary[2] * c[2],
    ];
    let d = sub(p, &q);
    (dot(&d, &d), bary)
}
