//! Graclus-style heavy-edge matching and the pooling operators it induces.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{inverse_distance, knn_rewire, MeshGraph, Point};
use crate::error::{invalid, Error, Result};
use crate::sparse::SparseOp;

/// Fine-node → cluster map (the one-hot rows of `P`) with cluster sizes
/// (the inverse diagonal of `Δ_c`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    cluster_of: Vec<usize>,
    sizes: Vec<usize>,
}

impl Assignment {
    pub fn new(cluster_of: Vec<usize>) -> Result<Self> {
        let clusters = cluster_of.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; clusters];
        for &c in &cluster_of {
            sizes[c] += 1;
        }
        if sizes.contains(&0) {
            return Err(invalid("assignment leaves a cluster empty"));
        }
        Ok(Self { cluster_of, sizes })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            cluster_of: (0..n).collect(),
            sizes: vec![1; n],
        }
    }

    pub fn fine_count(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// `Δ_c P` as a sparse operator (coarse × fine).
    pub fn pool_op(&self) -> SparseOp {
        let entries = self
            .cluster_of
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i, 0, 1.0 / self.sizes[c] as f64))
            .collect();
        SparseOp::from_entries(self.coarse_count(), self.fine_count(), 1, entries)
    }

    /// `Pᵀ` as a sparse operator (fine × coarse).
    pub fn unpool_op(&self) -> SparseOp {
        let entries = self.cluster_of.iter().enumerate().map(|(i, &c)| (i, c, 0, 1.0)).collect();
        SparseOp::from_entries(self.fine_count(), self.coarse_count(), 1, entries)
    }

    /// Cluster centroids of `positions`.
    pub fn centroids(&self, positions: &[Point]) -> Vec<Point> {
        let mut c = vec![[0.0; 3]; self.coarse_count()];
        for (i, &k) in self.cluster_of.iter().enumerate() {
            for d in 0..3 {
                c[k][d] += positions[i][d];
            }
        }
        for (k, p) in c.iter_mut().enumerate() {
            for v in p.iter_mut() {
                *v /= self.sizes[k] as f64;
            }
        }
        c
    }
}

/// How the coarse graph's edges are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseEdges {
    /// Clusters are adjacent when any of their members were.
    ClusterAdjacency,
    /// k-nearest neighbors of the coarse centroids.
    Knn(usize),
}

/// One level of greedy heavy-edge matching.
///
/// Nodes are visited in a seeded random order; an unmatched node pairs with
/// the unmatched neighbor maximizing `e(i,j)·(1/deg i + 1/deg j)` with
/// inverse-distance `e`, otherwise it stays a singleton.
pub fn graclus_coarsen(graph: &MeshGraph, seed: u64, edges: CoarseEdges) -> Result<(MeshGraph, Assignment)> {
    let n = graph.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pos = graph.positions();
    let mut cluster_of = vec![usize::MAX; n];
    let mut next = 0;
    for &i in &order {
        if cluster_of[i] != usize::MAX {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &j in graph.neighbors(i) {
            if cluster_of[j] != usize::MAX {
                continue;
            }
            let w = inverse_distance(&pos[i], &pos[j])
                * (1.0 / graph.degree(i) as f64 + 1.0 / graph.degree(j) as f64);
            if best.is_none_or(|(bw, _)| w > bw) {
                best = Some((w, j));
            }
        }
        cluster_of[i] = next;
        if let Some((_, j)) = best {
            cluster_of[j] = next;
        }
        next += 1;
    }
    let assignment = Assignment::new(cluster_of)?;
    let centroids = assignment.centroids(pos);
    let coarse_edges = match edges {
        CoarseEdges::ClusterAdjacency => {
            let mut set = BTreeSet::new();
            for (i, j) in graph.undirected_edges() {
                let (a, b) = (assignment.cluster_of[i], assignment.cluster_of[j]);
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
            set.into_iter().collect()
        }
        CoarseEdges::Knn(k) => {
            let k = k.min(centroids.len().saturating_sub(1));
            if k == 0 {
                Vec::new()
            } else {
                knn_rewire(&centroids, k)?
            }
        }
    };
    let coarse = MeshGraph::from_edges(centroids, &coarse_edges)?;
    Ok((coarse, assignment))
}

/// Per-cluster mean (`Δ_c P X`); `x` holds `fine_count` rows of `channels`.
pub fn pool_features(x: &[f64], channels: usize, assignment: &Assignment) -> Result<Vec<f64>> {
    if x.len() != assignment.fine_count() * channels {
        return Err(Error::ShapeMismatch {
            op: "pool_features",
            lhs: vec![x.len()],
            rhs: vec![assignment.fine_count(), channels],
        });
    }
    Ok(assignment.pool_op().apply(x, channels))
}

/// Broadcast of cluster features back to members (`Pᵀ X_c`).
pub fn unpool_features(xc: &[f64], channels: usize, assignment: &Assignment) -> Result<Vec<f64>> {
    if xc.len() != assignment.coarse_count() * channels {
        return Err(Error::ShapeMismatch {
            op: "unpool_features",
            lhs: vec![xc.len()],
            rhs: vec![assignment.coarse_count(), channels],
        });
    }
    Ok(assignment.unpool_op().apply(xc, channels))
}

/// Fine-to-coarse sequence of graphs with the assignments between them.
#[derive(Debug, Clone)]
pub struct GraphHierarchy {
    levels: Vec<MeshGraph>,
    assignments: Vec<Assignment>,
    pool_ops: Vec<Arc<SparseOp>>,
    unpool_ops: Vec<Arc<SparseOp>>,
}

impl GraphHierarchy {
    /// Coarsens `graph` `depth` times, seeding level `l` with `seed + l`.
    pub fn build(graph: MeshGraph, depth: usize, seed: u64, edges: CoarseEdges) -> Result<Self> {
        if graph.node_count() == 0 {
            return Err(invalid("cannot coarsen an empty graph"));
        }
        let mut levels = vec![graph];
        let mut assignments = Vec::new();
        for l in 0..depth {
            let (coarse, a) = graclus_coarsen(&levels[l], seed.wrapping_add(l as u64), edges)?;
            assignments.push(a);
            levels.push(coarse);
        }
        let pool_ops = assignments.iter().map(|a| Arc::new(a.pool_op())).collect();
        let unpool_ops = assignments.iter().map(|a| Arc::new(a.unpool_op())).collect();
        Ok(Self {
            levels,
            assignments,
            pool_ops,
            unpool_ops,
        })
    }

    pub fn depth(&self) -> usize {
        self.assignments.len()
    }

    pub fn level(&self, l: usize) -> &MeshGraph {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[MeshGraph] {
        &self.levels
    }

    pub fn assignment(&self, l: usize) -> &Assignment {
        &self.assignments[l]
    }

    /// Pooling operator from level `l` to `l + 1`.
    pub fn pool_op(&self, l: usize) -> &Arc<SparseOp> {
        &self.pool_ops[l]
    }

    /// Unpooling operator from level `l + 1` back to `l`.
    pub fn unpool_op(&self, l: usize) -> &Arc<SparseOp> {
        &self.unpool_ops[l]
    }

    pub fn fine_count(&self) -> usize {
        self.levels[0].node_count()
    }

    pub fn coarsest_count(&self) -> usize {
        self.levels.last().map_or(0, MeshGraph::node_count)
    }

    pub fn describe(&self) -> alloc::string::String {
        let counts: Vec<_> = self.levels.iter().map(|g| format!("{}", g.node_count())).collect();
        counts.join(" -> ")
    }
}
