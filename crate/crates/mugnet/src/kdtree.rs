//! Exact k-nearest-neighbour queries over 3D positions.
//!
//! Median-split kd-tree. Neighbours are ranked by squared distance with
//! index as the tie-break, so results are deterministic and match the
//! brute-force ordering exactly.

use crate::error::{Error, Result};

pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// Point indices permuted into tree order.
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

struct KdNode {
    /// Split axis; leaves use 3.
    axis: u8,
    split: f64,
    /// Range into `order` (leaves), or child node ids (internal).
    lo: u32,
    hi: u32,
}

const LEAF_SIZE: usize = 16;
const LEAF_AXIS: u8 = 3;

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(points, &mut order, 0, points.len(), &mut nodes);
        }
        KdTree {
            points,
            order,
            nodes,
        }
    }

    /// Indices of the k nearest points to `query` (the query point itself
    /// included when it belongs to the set), ordered by (distance, index).
    pub fn knn(&self, query: [f64; 3], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::Parameter(format!(
                "k = {} out of range for {} points",
                k,
                self.points.len()
            )));
        }
        let mut best = BestList::new(k);
        self.search(0, query, &mut best);
        Ok(best.into_indices())
    }

    fn search(&self, node_id: usize, query: [f64; 3], best: &mut BestList) {
        let node = &self.nodes[node_id];
        if node.axis == LEAF_AXIS {
            for &idx in &self.order[node.lo as usize..node.hi as usize] {
                let p = self.points[idx as usize];
                let d2 = dist2(p, query);
                best.offer(d2, idx as usize);
            }
            return;
        }
        let axis = node.axis as usize;
        let delta = query[axis] - node.split;
        let (near, far) = if delta <= 0.0 {
            (node.lo as usize, node.hi as usize)
        } else {
            (node.hi as usize, node.lo as usize)
        };
        self.search(near, query, best);
        if !best.full() || delta * delta <= best.worst() {
            self.search(far, query, best);
        }
    }
}

fn build_node(
    points: &[[f64; 3]],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<KdNode>,
) -> usize {
    let id = nodes.len();
    nodes.push(KdNode {
        axis: LEAF_AXIS,
        split: 0.0,
        lo: start as u32,
        hi: end as u32,
    });
    if end - start <= LEAF_SIZE {
        return id;
    }
    // Split on the axis with the largest extent.
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &idx in &order[start..end] {
        let p = points[idx as usize];
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
        .unwrap();
    if max[axis] - min[axis] == 0.0 {
        // All points coincide; leave as a (large) leaf.
        return id;
    }
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
        points[i as usize][axis]
            .total_cmp(&points[j as usize][axis])
            .then(i.cmp(&j))
    });
    let split = points[order[mid] as usize][axis];
    let left = build_node(points, order, start, mid, nodes);
    let right = build_node(points, order, mid, end, nodes);
    nodes[id] = KdNode {
        axis: axis as u8,
        split,
        lo: left as u32,
        hi: right as u32,
    };
    id
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Fixed-capacity candidate list ordered by (distance², index).
struct BestList {
    k: usize,
    entries: Vec<(f64, usize)>,
}

impl BestList {
    fn new(k: usize) -> Self {
        BestList {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.entries.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.entries.last().map(|e| e.0).unwrap_or(f64::INFINITY)
    }

    fn offer(&mut self, d2: f64, idx: usize) {
        if self.full() {
            let worst = *self.entries.last().unwrap();
            if (d2, idx) >= worst {
                return;
            }
        }
        let pos = self.entries.partition_point(|&(d, i)| (d, i) < (d2, idx));
        self.entries.insert(pos, (d2, idx));
        if self.entries.len() > self.k {
            self.entries.pop();
        }
    }

    fn into_indices(self) -> Vec<usize> {
        self.entries.into_iter().map(|(_, i)| i).collect()
    }
}

/// O(N²) reference used to validate the tree in tests.
pub fn brute_force_knn(points: &[[f64; 3]], query: [f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (dist2(p, query), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_cloud(rng: &mut Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.range(-5.0, 5.0),
                    rng.range(-5.0, 5.0),
                    rng.range(-2.0, 2.0),
                ]
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = Rng::new(31);
        for &n in &[1usize, 5, 60, 500, 2000] {
            let pts = random_cloud(&mut rng, n);
            let tree = KdTree::build(&pts);
            for qi in (0..n).step_by((n / 17).max(1)) {
                for &k in &[1usize, 3, 10] {
                    if k > n {
                        continue;
                    }
                    let got = tree.knn(pts[qi], k).unwrap();
                    let want = brute_force_knn(&pts, pts[qi], k);
                    assert_eq!(got, want, "n={n} qi={qi} k={k}");
                }
            }
        }
    }

    #[test]
    fn self_is_first_neighbor() {
        let mut rng = Rng::new(8);
        let pts = random_cloud(&mut rng, 50);
        let tree = KdTree::build(&pts);
        for (i, &p) in pts.iter().enumerate() {
            let nn = tree.knn(p, 1).unwrap();
            assert_eq!(nn[0], i);
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        let pts = vec![[1.0, 1.0, 1.0]; 40];
        let tree = KdTree::build(&pts);
        let got = tree.knn([1.0, 1.0, 1.0], 5).unwrap();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn k_out_of_range_is_parameter_error() {
        let pts = vec![[0.0; 3]; 4];
        let tree = KdTree::build(&pts);
        assert!(tree.knn([0.0; 3], 5).is_err());
        assert!(tree.knn([0.0; 3], 0).is_err());
    }
}
