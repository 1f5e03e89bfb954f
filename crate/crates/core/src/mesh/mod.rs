//! Triangulated surfaces and their attributed graphs.

mod coarsen;
mod synth;

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

pub use coarsen::{
    graclus_coarsen, pool_features, unpool_features, Assignment, CoarseEdges, GraphHierarchy,
};
pub use synth::{synth_mesh, MeshKind};

pub type Point = [f64; 3];

pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
}

/// Inverse-distance edge weight used by matching and by the Laplacian.
pub fn inverse_distance(a: &Point, b: &Point) -> f64 {
    1.0 / (1e-9 + dist(a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!("face {fi} references a vertex >= {n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Edges belonging to exactly one face (empty for a closed surface).
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut count = alloc::collections::BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        count.into_iter().filter(|(_, c)| *c == 1).map(|(e, _)| e).collect()
    }
}

/// Node positions, symmetric adjacency (CSR), and per-directed-edge
/// pseudo-coordinates in `[0,1]³`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGraph {
    positions: Vec<Point>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    pseudo: Vec<Point>,
}

impl MeshGraph {
    /// Builds the graph from undirected edges; pseudo-coordinates are
    /// `δ / (2·max‖δ‖∞) + 0.5` with `δ = V[j] − V[i]`.
    pub fn from_edges(positions: Vec<Point>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = positions.len();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                continue;
            }
            adj[a].insert(b);
            adj[b].insert(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for set in &adj {
            neighbors.extend(set.iter().copied());
            offsets.push(neighbors.len());
        }
        let mut max_norm: f64 = 0.0;
        for i in 0..n {
            for &j in &neighbors[offsets[i]..offsets[i + 1]] {
                let d = dist(&positions[i], &positions[j]);
                if d == 0.0 {
                    return Err(Error::InvalidMesh(format!("edge ({i}, {j}) has coincident endpoints")));
                }
                for k in 0..3 {
                    max_norm = max_norm.max(libm::fabs(positions[j][k] - positions[i][k]));
                }
            }
        }
        let mut pseudo = Vec::with_capacity(neighbors.len());
        for i in 0..n {
            for &j in &neighbors[offsets[i]..offsets[i + 1]] {
                let mut w = [0.5; 3];
                for k in 0..3 {
                    w[k] = ((positions[j][k] - positions[i][k]) / (2.0 * max_norm) + 0.5).clamp(0.0, 1.0);
                }
                pseudo.push(w);
            }
        }
        Ok(Self {
            positions,
            offsets,
            neighbors,
            pseudo,
        })
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    /// Number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Pseudo-coordinates of the edges leaving `i`, aligned with [`neighbors`](Self::neighbors).
    pub fn pseudo_coords(&self, i: usize) -> &[Point] {
        &self.pseudo[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Pseudo-coordinate of directed edge `(i, j)`, if present.
    pub fn pseudo(&self, i: usize, j: usize) -> Option<Point> {
        let nb = self.neighbors(i);
        nb.binary_search(&j).ok().map(|k| self.pseudo[self.offsets[i] + k])
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        (0..self.node_count())
            .flat_map(|i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Hop distances from the nearest of `sources` (`usize::MAX` if unreachable).
    pub fn hop_distances(&self, sources: &[usize]) -> Vec<usize> {
        let mut d = vec![usize::MAX; self.node_count()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if d[s] != 0 {
                d[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if d[v] == usize::MAX {
                    d[v] = d[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        d
    }

    pub fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }
}

/// Attributed graph of a mesh. The mesh must form a single component.
pub fn build_graph(mesh: &Mesh) -> Result<MeshGraph> {
    let g = MeshGraph::from_edges(mesh.vertices.clone(), &mesh.edges())?;
    let components = g.component_count();
    if components > 1 {
        return Err(Error::Disconnected { components });
    }
    Ok(g)
}

/// Symmetrized k-nearest-neighbor edges (Euclidean; ties go to the lower index).
pub fn knn_rewire(positions: &[Point], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = positions.len();
    if k == 0 {
        return Err(invalid("knn_rewire: k must be positive"));
    }
    if k >= n {
        return Err(invalid(format!("knn_rewire: k = {k} must be below node count {n}")));
    }
    let mut set = BTreeSet::new();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (dist(&positions[i], &positions[j]), j)));
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            set.insert((i.min(j), i.max(j)));
        }
    }
    Ok(set.into_iter().collect())
}
