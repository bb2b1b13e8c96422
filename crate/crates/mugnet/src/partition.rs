//! Greedy variance-bounded partition of a pointcloud into geometrically
//! homogeneous clusters, plus the directed cluster-adjacency graph.
//!
//! Points are linked by a k-NN graph; point pairs are merged best-first
//! (most feature-similar edges first, union-find underneath) as long as
//! the merged cluster's internal feature variance stays below `lambda`.
//! Cluster adjacency follows from k-NN pairs that end up crossing
//! clusters.

use crate::error::{Error, Result};
use crate::features::GeometricFeatures;
use crate::kdtree::KdTree;
use crate::pointcloud::PointCloud;
use crate::tensor::Adjacency;

/// Feature dimensions used for merge decisions.
const MERGE_DIM: usize = 4;
/// Per-edge feature width exposed to the network.
pub const EDGE_FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Sorted member point indices.
    pub members: Vec<usize>,
    pub centroid: [f64; 3],
    /// Mean of the five geometric feature columns over members.
    pub mean_features: [f64; 5],
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEdge {
    pub src: usize,
    pub dst: usize,
    /// Destination centroid minus source centroid.
    pub centroid_offset: [f64; 3],
    /// ln(|src| / |dst|).
    pub log_size_ratio: f64,
    /// Number of k-NN point pairs crossing this cluster pair.
    pub boundary_pairs: usize,
}

impl ClusterEdge {
    pub fn feature_row(&self) -> [f64; EDGE_FEATURE_DIM] {
        [
            self.centroid_offset[0],
            self.centroid_offset[1],
            self.centroid_offset[2],
            self.log_size_ratio,
            (1.0 + self.boundary_pairs as f64).ln(),
        ]
    }
}

/// Clusters as nodes, adjacency between spatially touching clusters as
/// directed symmetric edges. Self-edges are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointGraph {
    pub num_points: usize,
    pub clusters: Vec<Cluster>,
    pub edges: Vec<ClusterEdge>,
}

impl SuperpointGraph {
    pub fn num_nodes(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster id of every point.
    pub fn point_cluster_ids(&self) -> Vec<usize> {
        let mut ids = vec![usize::MAX; self.num_points];
        for (ci, c) in self.clusters.iter().enumerate() {
            for &m in &c.members {
                ids[m] = ci;
            }
        }
        ids
    }

    /// Neighbour lists in CSR form for mean aggregation.
    pub fn adjacency(&self) -> Adjacency {
        let mut lists = vec![Vec::new(); self.num_nodes()];
        for e in &self.edges {
            lists[e.src].push(e.dst);
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Adjacency::from_lists(&lists)
    }

    /// Disjointness + completeness of the clusters over [0, num_points).
    pub fn validate_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.num_points];
        for c in &self.clusters {
            if c.members.is_empty() {
                return Err(Error::Validation("empty cluster".into()));
            }
            for &m in &c.members {
                if m >= self.num_points || seen[m] {
                    return Err(Error::Validation(format!(
                        "point {m} missing or assigned twice"
                    )));
                }
                seen[m] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::Validation(
                "partition does not cover all points".into(),
            ))
        }
    }
}

/// Cluster-count and label-purity summary of a partition.
#[derive(Debug, Clone)]
pub struct PartitionQuality {
    pub cluster_count: usize,
    pub mean_cluster_size: f64,
    pub per_cluster_purity: Vec<f64>,
    /// Size-weighted mean purity.
    pub mean_purity: f64,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
    /// Per-root aggregates over merge features.
    count: Vec<usize>,
    sum: Vec<[f64; MERGE_DIM]>,
    sum_sq: Vec<[f64; MERGE_DIM]>,
}

impl UnionFind {
    fn new(rows: &[[f64; MERGE_DIM]]) -> Self {
        let n = rows.len();
        let mut sum = vec![[0.0; MERGE_DIM]; n];
        let mut sum_sq = vec![[0.0; MERGE_DIM]; n];
        for (i, row) in rows.iter().enumerate() {
            for d in 0..MERGE_DIM {
                sum[i][d] = row[d];
                sum_sq[i][d] = row[d] * row[d];
            }
        }
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
            count: vec![1; n],
            sum,
            sum_sq,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Mean per-dimension variance the union of two roots would have.
    fn merged_variance(&self, a: usize, b: usize) -> f64 {
        let n = (self.count[a] + self.count[b]) as f64;
        let mut total = 0.0;
        for d in 0..MERGE_DIM {
            let s = self.sum[a][d] + self.sum[b][d];
            let sq = self.sum_sq[a][d] + self.sum_sq[b][d];
            let var = (sq / n - (s / n) * (s / n)).max(0.0);
            total += var;
        }
        total / MERGE_DIM as f64
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (a, b);
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] += 1;
        }
        self.count[a] += self.count[b];
        for d in 0..MERGE_DIM {
            self.sum[a][d] += self.sum[b][d];
            self.sum_sq[a][d] += self.sum_sq[b][d];
        }
    }
}

/// Partitions a cloud into superpoints.
///
/// `knn` is the number of neighbours per point in the spatial graph;
/// `lambda` bounds the mean feature variance a cluster may reach, so 0
/// keeps every point separate and infinity merges every connected
/// component.
pub fn partition(
    cloud: &PointCloud,
    feats: &GeometricFeatures,
    knn: usize,
    lambda: f64,
) -> Result<SuperpointGraph> {
    let n = cloud.len();
    if feats.len() != n {
        return Err(Error::Contract(format!(
            "{} feature rows for {} points",
            feats.len(),
            n
        )));
    }
    if knn < 3 {
        return Err(Error::Parameter(format!("knn = {knn} must be >= 3")));
    }
    if knn > n {
        return Err(Error::Parameter(format!(
            "knn = {knn} exceeds cloud size {n}"
        )));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Parameter(format!("lambda = {lambda} must be >= 0")));
    }

    let rows: Vec<[f64; MERGE_DIM]> = (0..n).map(|i| feats.shape_row(i)).collect();

    // Undirected k-NN edge set (i < j).
    let tree = KdTree::build(cloud.positions());
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(n * knn);
    let query_k = (knn + 1).min(n);
    for i in 0..n {
        let nbrs = tree.knn(cloud.positions()[i], query_k)?;
        for &j in nbrs.iter().filter(|&&j| j != i).take(knn) {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            pairs.push((a as u32, b as u32));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();

    // Similarity weights; sigma^2 is the mean squared feature distance.
    let dist_sq: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| feature_dist_sq(&rows[i as usize], &rows[j as usize]))
        .collect();
    let sigma_sq = {
        let s: f64 = dist_sq.iter().sum();
        let m = s / dist_sq.len().max(1) as f64;
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let mut edge_order: Vec<(f64, u32, u32)> = pairs
        .iter()
        .zip(&dist_sq)
        .map(|(&(i, j), &d2)| ((-d2 / sigma_sq).exp(), i, j))
        .collect();
    // Highest-similarity first; ties broken by the index pair.
    edge_order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut uf = UnionFind::new(&rows);
    for &(_w, i, j) in &edge_order {
        let (ra, rb) = (uf.find(i as usize), uf.find(j as usize));
        if ra == rb {
            continue;
        }
        if uf.merged_variance(ra, rb) < lambda {
            uf.union(ra, rb);
        }
    }

    build_graph(cloud, feats, &pairs, &mut uf)
}

fn feature_dist_sq(a: &[f64; MERGE_DIM], b: &[f64; MERGE_DIM]) -> f64 {
    let mut s = 0.0;
    for d in 0..MERGE_DIM {
        let diff = a[d] - b[d];
        s += diff * diff;
    }
    s
}

fn build_graph(
    cloud: &PointCloud,
    feats: &GeometricFeatures,
    pairs: &[(u32, u32)],
    uf: &mut UnionFind,
) -> Result<SuperpointGraph> {
    let n = cloud.len();
    // Cluster ids ordered by smallest member index.
    let mut root_to_id = vec![usize::MAX; n];
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in 0..n {
        let root = uf.find(i);
        if root_to_id[root] == usize::MAX {
            root_to_id[root] = clusters.len();
            clusters.push(Cluster {
                members: Vec::new(),
                centroid: [0.0; 3],
                mean_features: [0.0; 5],
            });
        }
        clusters[root_to_id[root]].members.push(i);
    }
    for c in &mut clusters {
        let inv = 1.0 / c.members.len() as f64;
        for &m in &c.members {
            let p = cloud.positions()[m];
            let f = feats.row(m);
            for d in 0..3 {
                c.centroid[d] += p[d] * inv;
            }
            for d in 0..5 {
                c.mean_features[d] += f[d] * inv;
            }
        }
    }

    // Boundary pair counts between cluster pairs (a < b).
    let mut boundary: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for &(i, j) in pairs {
        let ci = root_to_id[uf.find(i as usize)];
        let cj = root_to_id[uf.find(j as usize)];
        if ci != cj {
            let key = (ci.min(cj), ci.max(cj));
            *boundary.entry(key).or_insert(0) += 1;
        }
    }
    let mut edges = Vec::with_capacity(boundary.len() * 2);
    for (&(a, b), &count) in &boundary {
        let (ca, cb) = (&clusters[a], &clusters[b]);
        let offset = [
            cb.centroid[0] - ca.centroid[0],
            cb.centroid[1] - ca.centroid[1],
            cb.centroid[2] - ca.centroid[2],
        ];
        let ratio = (ca.size() as f64 / cb.size() as f64).ln();
        edges.push(ClusterEdge {
            src: a,
            dst: b,
            centroid_offset: offset,
            log_size_ratio: ratio,
            boundary_pairs: count,
        });
        edges.push(ClusterEdge {
            src: b,
            dst: a,
            centroid_offset: [-offset[0], -offset[1], -offset[2]],
            log_size_ratio: -ratio,
            boundary_pairs: count,
        });
    }
    edges.sort_by_key(|e| (e.src, e.dst));

    let graph = SuperpointGraph {
        num_points: n,
        clusters,
        edges,
    };
    graph.validate_partition()?;
    Ok(graph)
}

/// Per-cluster majority-label purity; the mean is weighted by cluster size.
pub fn purity(graph: &SuperpointGraph, cloud: &PointCloud) -> Result<PartitionQuality> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::Contract("purity requires a labeled cloud".into()))?;
    if cloud.len() != graph.num_points {
        return Err(Error::Contract(format!(
            "graph over {} points, cloud has {}",
            graph.num_points,
            cloud.len()
        )));
    }
    let mut per_cluster = Vec::with_capacity(graph.num_nodes());
    let mut weighted = 0.0;
    for c in &graph.clusters {
        let mut counts: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for &m in &c.members {
            *counts.entry(labels[m]).or_insert(0) += 1;
        }
        let majority = counts.values().copied().max().unwrap_or(0);
        let p = majority as f64 / c.size() as f64;
        per_cluster.push(p);
        weighted += p * c.size() as f64;
    }
    Ok(PartitionQuality {
        cluster_count: graph.num_nodes(),
        mean_cluster_size: graph.num_points as f64 / graph.num_nodes() as f64,
        per_cluster_purity: per_cluster,
        mean_purity: weighted / graph.num_points as f64,
    })
}

/// Majority ground-truth label of every cluster.
pub fn majority_labels(graph: &SuperpointGraph, labels: &[usize]) -> Result<Vec<usize>> {
    if labels.len() != graph.num_points {
        return Err(Error::Contract(format!(
            "{} labels for {} points",
            labels.len(),
            graph.num_points
        )));
    }
    let mut out = Vec::with_capacity(graph.num_nodes());
    for c in &graph.clusters {
        let mut counts: std::collections::BTreeMap<usize, usize> =
            std::collections::BTreeMap::new();
        for &m in &c.members {
            *counts.entry(labels[m]).or_insert(0) += 1;
        }
        // Lowest label wins ties (BTreeMap iterates in key order).
        let (&label, _) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty cluster");
        out.push(label);
    }
    Ok(out)
}

pub fn compression_ratio(graph: &SuperpointGraph) -> f64 {
    graph.num_points as f64 / graph.num_nodes() as f64
}
