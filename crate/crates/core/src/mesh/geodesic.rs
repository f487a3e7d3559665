use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{dist, Mesh};

/// Undirected graph on mesh vertices with Euclidean edge lengths.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    d: f64,
    v: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties by vertex index
        other
            .d
            .total_cmp(&self.d)
            .then_with(|| other.v.cmp(&self.v))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl EdgeGraph {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let mut adj = vec![Vec::new(); mesh.n_vertices()];
        let v = mesh.vertices();
        for (a, b) in mesh.edges() {
            let w = dist(&v[a], &v[b]);
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        Self { adj }
    }

    /// Graph from explicit weighted edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in &mut adj {
            list.sort_by_key(|x| x.0);
        }
        Self { adj }
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adj[v]
    }

    /// Multi-source Dijkstra. Unreachable nodes get `+inf`.
    pub fn distances(&self, sources: &[usize]) -> Vec<f64> {
        let mut d = vec![f64::INFINITY; self.adj.len()];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            d[s] = 0.0;
            heap.push(Entry { d: 0.0, v: s });
        }
        while let Some(Entry { d: du, v: u }) = heap.pop() {
            if du > d[u] {
                continue;
            }
            for &(w, len) in &self.adj[u] {
                let nd = du + len;
                if nd < d[w] {
                    d[w] = nd;
                    heap.push(Entry { d: nd, v: w });
                }
            }
        }
        d
    }

    /// Nodes within `radius` of `source` with their distances, sorted by node index.
    pub fn within(&self, source: usize, radius: f64) -> Vec<(usize, f64)> {
        let mut best: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
        let mut heap = BinaryHeap::new();
        best.insert(source, 0.0);
        heap.push(Entry { d: 0.0, v: source });
        while let Some(Entry { d: du, v: u }) = heap.pop() {
            if du > best[&u] {
                continue;
            }
            for &(w, len) in &self.adj[u] {
                let nd = du + len;
                if nd <= radius && best.get(&w).is_none_or(|&old| nd < old) {
                    best.insert(w, nd);
                    heap.push(Entry { d: nd, v: w });
                }
            }
        }
        let mut out: Vec<(usize, f64)> = best.into_iter().collect();
        out.sort_by_key(|e| e.0);
        out
    }
}

/// Shortest edge-path distance from the nearest source (mm).
pub fn graph_geodesic_distances(mesh: &Mesh, sources: &[usize]) -> Vec<f64> {
    EdgeGraph::from_mesh(mesh).distances(sources)
}
