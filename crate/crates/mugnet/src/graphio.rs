//! Versioned binary container for a partitioned scene.
//!
//! Holds everything the network needs downstream of partitioning:
//! point positions, per-point geometric features, optional colors and
//! labels, the clusters and the cluster adjacency. Written by `cluster`,
//! consumed by `train`, `infer` and `bench`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::GeometricFeatures;
use crate::partition::{Cluster, ClusterEdge, SuperpointGraph};
use crate::pointcloud::PointCloud;

const MAGIC: &[u8; 8] = b"MGSPG\x00\x00\x01";
/// Guards against absurd allocation requests from corrupt headers.
const MAX_SANE_COUNT: usize = 1 << 28;

/// A partitioned scene ready for embedding and classification.
#[derive(Debug, Clone)]
pub struct GraphFile {
    pub graph: SuperpointGraph,
    pub positions: Vec<[f64; 3]>,
    pub geo: GeometricFeatures,
    pub colors: Option<Vec<[f64; 3]>>,
    pub labels: Option<Vec<usize>>,
    /// 0 when unknown.
    pub class_count: usize,
}

impl GraphFile {
    pub fn new(
        graph: SuperpointGraph,
        cloud: &PointCloud,
        geo: GeometricFeatures,
        class_count: usize,
    ) -> Result<Self> {
        if cloud.len() != graph.num_points || geo.len() != graph.num_points {
            return Err(Error::Contract(format!(
                "graph {} points, cloud {}, features {}",
                graph.num_points,
                cloud.len(),
                geo.len()
            )));
        }
        Ok(GraphFile {
            graph,
            positions: cloud.positions().to_vec(),
            geo,
            colors: cloud.colors().map(|c| c.to_vec()),
            labels: cloud.labels().map(|l| l.to_vec()),
            class_count,
        })
    }

    /// Width of the per-point input feature rows: centroid offset (3),
    /// geometric features (5), rgb (3) when colors are present.
    pub fn point_feature_dim(&self) -> usize {
        3 + GeometricFeatures::DIM + if self.colors.is_some() { 3 } else { 0 }
    }
}

pub fn write_graph_file(gf: &GraphFile, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = Sink {
        inner: BufWriter::new(file),
        path,
    };
    w.bytes(MAGIC)?;
    let n = gf.graph.num_points;
    w.u64(n as u64)?;
    w.u8(gf.colors.is_some() as u8)?;
    w.u8(gf.labels.is_some() as u8)?;
    for p in &gf.positions {
        w.f64s(p)?;
    }
    for i in 0..n {
        w.f64s(&gf.geo.row(i))?;
    }
    if let Some(colors) = &gf.colors {
        for c in colors {
            w.f64s(c)?;
        }
    }
    if let Some(labels) = &gf.labels {
        for &l in labels {
            w.u64(l as u64)?;
        }
    }
    w.u64(gf.graph.clusters.len() as u64)?;
    for c in &gf.graph.clusters {
        w.u64(c.members.len() as u64)?;
        for &m in &c.members {
            w.u64(m as u64)?;
        }
        w.f64s(&c.centroid)?;
        w.f64s(&c.mean_features)?;
    }
    w.u64(gf.graph.edges.len() as u64)?;
    for e in &gf.graph.edges {
        w.u64(e.src as u64)?;
        w.u64(e.dst as u64)?;
        w.f64s(&e.centroid_offset)?;
        w.f64s(&[e.log_size_ratio])?;
        w.u64(e.boundary_pairs as u64)?;
    }
    w.u64(gf.class_count as u64)?;
    w.inner
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_graph_file(path: &Path) -> Result<GraphFile> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Source {
        inner: BufReader::new(file),
        path,
    };
    let mut magic = [0u8; 8];
    r.bytes(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt {
            kind: "graph",
            path: path.display().to_string(),
            msg: "bad magic or unsupported version".into(),
        });
    }
    let n = r.u64()? as usize;
    if n == 0 || n > MAX_SANE_COUNT {
        return Err(Error::Corrupt {
            kind: "graph",
            path: path.display().to_string(),
            msg: format!("implausible point count {n}"),
        });
    }
    let has_colors = r.u8()? != 0;
    let has_labels = r.u8()? != 0;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push(r.f64_array::<3>()?);
    }
    let mut geo = GeometricFeatures {
        linearity: Vec::with_capacity(n),
        planarity: Vec::with_capacity(n),
        scattering: Vec::with_capacity(n),
        verticality: Vec::with_capacity(n),
        elevation: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let row = r.f64_array::<5>()?;
        geo.linearity.push(row[0]);
        geo.planarity.push(row[1]);
        geo.scattering.push(row[2]);
        geo.verticality.push(row[3]);
        geo.elevation.push(row[4]);
    }
    let colors = if has_colors {
        let mut c = Vec::with_capacity(n);
        for _ in 0..n {
            c.push(r.f64_array::<3>()?);
        }
        Some(c)
    } else {
        None
    };
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u64()? as usize);
        }
        Some(l)
    } else {
        None
    };
    let num_clusters = r.u64()? as usize;
    if num_clusters > n {
        return Err(Error::Corrupt {
            kind: "graph",
            path: path.display().to_string(),
            msg: format!("{num_clusters} clusters for {n} points"),
        });
    }
    let mut clusters = Vec::with_capacity(num_clusters);
    for _ in 0..num_clusters {
        let size = r.u64()? as usize;
        if size > n {
            return Err(Error::Corrupt {
                kind: "graph",
                path: path.display().to_string(),
                msg: format!("cluster of {size} members for {n} points"),
            });
        }
        let mut members = Vec::with_capacity(size);
        for _ in 0..size {
            members.push(r.u64()? as usize);
        }
        let centroid = r.f64_array::<3>()?;
        let mean_features = r.f64_array::<5>()?;
        clusters.push(Cluster {
            members,
            centroid,
            mean_features,
        });
    }
    let num_edges = r.u64()? as usize;
    if num_edges > MAX_SANE_COUNT {
        return Err(Error::Corrupt {
            kind: "graph",
            path: path.display().to_string(),
            msg: format!("implausible edge count {num_edges}"),
        });
    }
    let mut edges = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        let src = r.u64()? as usize;
        let dst = r.u64()? as usize;
        let centroid_offset = r.f64_array::<3>()?;
        let log_size_ratio = r.f64_array::<1>()?[0];
        let boundary_pairs = r.u64()? as usize;
        edges.push(ClusterEdge {
            src,
            dst,
            centroid_offset,
            log_size_ratio,
            boundary_pairs,
        });
    }
    let class_count = r.u64()? as usize;

    let graph = SuperpointGraph {
        num_points: n,
        clusters,
        edges,
    };
    graph.validate_partition().map_err(|e| Error::Corrupt {
        kind: "graph",
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    for e in &graph.edges {
        if e.src >= graph.num_nodes() || e.dst >= graph.num_nodes() || e.src == e.dst {
            return Err(Error::Corrupt {
                kind: "graph",
                path: path.display().to_string(),
                msg: format!("bad edge {} -> {}", e.src, e.dst),
            });
        }
    }
    Ok(GraphFile {
        graph,
        positions,
        geo,
        colors,
        labels,
        class_count,
    })
}

struct Sink<'a, W: Write> {
    inner: W,
    path: &'a Path,
}

impl<W: Write> Sink<'_, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner
            .write_all(b)
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Source<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Source<'_, R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b)?;
        Ok(b[0])
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64_array<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            let mut b = [0u8; 8];
            self.bytes(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(out)
    }
}
