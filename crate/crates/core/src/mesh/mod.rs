//! Triangular surface meshes, their finite-element matrices, data-to-mesh
//! projection and edge-graph distances.

mod fem;
mod geodesic;
mod projector;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use fem::{build_fem_matrices, triangle_area, FemMatrices};
pub use geodesic::{graph_geodesic_distances, EdgeGraph};
pub use projector::{build_projector, DataLocations, Projector};

pub type Point3 = [f64; 3];

/// A validated triangulated surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point3>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    /// Validates indices and triangle areas. A mesh with more than one
    /// connected component is accepted with a logged warning.
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if n == 0 {
            return Err(Error::Validation("mesh has no vertices".into()));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite vertex coordinate".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!(
                    "triangle {t} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Validation(format!("triangle {t} repeats a vertex")));
            }
            let area = triangle_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::Validation(format!(
                    "triangle {t} is degenerate (zero area)"
                )));
            }
        }
        let mesh = Self {
            vertices,
            triangles,
        };
        let components = mesh.connected_components();
        if components > 1 {
            log::warn!("mesh has {components} connected components");
        }
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                triangle_area(
                    &self.vertices[t[0]],
                    &self.vertices[t[1]],
                    &self.vertices[t[2]],
                )
            })
            .sum()
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt()
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn mean_edge_length(&self) -> f64 {
        let e = self.edges();
        e.iter()
            .map(|&(a, b)| dist(&self.vertices[a], &self.vertices[b]))
            .sum::<f64>()
            / e.len().max(1) as f64
    }

    pub fn edge_graph(&self) -> EdgeGraph {
        EdgeGraph::from_mesh(self)
    }

    pub fn connected_components(&self) -> usize {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2])] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Parse the `mesh <n> <m>` / `v x y z` / `f i j k` text format.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut header: Option<(usize, usize)> = None;
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            let ln = ln + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            match (f[0], header) {
                ("mesh", None) => {
                    if f.len() != 3 {
                        return Err(Error::parse(
                            ln,
                            "expected `mesh <n_vertices> <n_triangles>`",
                        ));
                    }
                    header = Some((parse_usize(f[1], ln)?, parse_usize(f[2], ln)?));
                }
                ("mesh", Some(_)) => return Err(Error::parse(ln, "duplicate header")),
                (_, None) => return Err(Error::parse(ln, "missing `mesh` header")),
                ("v", Some(_)) => {
                    if f.len() != 4 {
                        return Err(Error::parse(ln, "expected `v x y z`"));
                    }
                    vertices.push([
                        parse_f64(f[1], ln)?,
                        parse_f64(f[2], ln)?,
                        parse_f64(f[3], ln)?,
                    ]);
                }
                ("f", Some(_)) => {
                    if f.len() != 4 {
                        return Err(Error::parse(ln, "expected `f i j k`"));
                    }
                    triangles.push([
                        parse_usize(f[1], ln)?,
                        parse_usize(f[2], ln)?,
                        parse_usize(f[3], ln)?,
                    ]);
                }
                (other, _) => return Err(Error::parse(ln, format!("unknown record `{other}`"))),
            }
        }
        let (nv, nt) = header.ok_or_else(|| Error::parse(0, "empty mesh file"))?;
        if vertices.len() != nv || triangles.len() != nt {
            return Err(Error::parse(
                0,
                format!(
                    "header declares {nv} vertices / {nt} triangles, found {} / {}",
                    vertices.len(),
                    triangles.len()
                ),
            ));
        }
        Self::new(vertices, triangles)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "mesh {} {}", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Read a mesh file from disk.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    Mesh::read(BufReader::new(File::open(path)?))
}

pub(crate) fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("invalid index `{s}`")))
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("invalid number `{s}`")))
}

/// Vertex adjacency lists, sorted.
pub fn vertex_neighbors(mesh: &Mesh) -> Vec<Vec<usize>> {
    let mut nb: HashMap<usize, Vec<usize>> = HashMap::new();
    for (a, b) in mesh.edges() {
        nb.entry(a).or_default().push(b);
        nb.entry(b).or_default().push(a);
    }
    (0..mesh.n_vertices())
        .map(|i| {
            let mut v = nb.remove(&i).unwrap_or_default();
            v.sort_unstable();
            v
        })
        .collect()
}
