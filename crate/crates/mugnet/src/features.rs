//! Per-point geometric features from the eigenstructure of local
//! neighbourhood covariance.
//!
//! For each point, the covariance of its k nearest neighbours (the point
//! included) is eigen-decomposed. With eigenvalues l1 >= l2 >= l3 >= 0
//! normalized by their sum:
//!
//!   linearity  = (l1 - l2) / l1
//!   planarity  = (l2 - l3) / l1
//!   scattering =  l3 / l1
//!
//! renormalized to sum to one. Verticality is the |z| component of the
//! least-eigenvalue eigenvector (the local normal), elevation is height
//! above the lowest point of the cloud.

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::pointcloud::PointCloud;

/// Per-point feature columns; all vectors share the cloud's length.
#[derive(Debug, Clone)]
pub struct GeometricFeatures {
    pub linearity: Vec<f64>,
    pub planarity: Vec<f64>,
    pub scattering: Vec<f64>,
    pub verticality: Vec<f64>,
    pub elevation: Vec<f64>,
}

impl GeometricFeatures {
    pub const DIM: usize = 5;

    pub fn len(&self) -> usize {
        self.linearity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linearity.is_empty()
    }

    pub fn row(&self, i: usize) -> [f64; 5] {
        [
            self.linearity[i],
            self.planarity[i],
            self.scattering[i],
            self.verticality[i],
            self.elevation[i],
        ]
    }

    /// The dimensionality triple used for cluster merging decisions.
    pub fn shape_row(&self, i: usize) -> [f64; 4] {
        [
            self.linearity[i],
            self.planarity[i],
            self.scattering[i],
            self.verticality[i],
        ]
    }
}

pub fn geometric_features(cloud: &PointCloud, k: usize) -> Result<GeometricFeatures> {
    let n = cloud.len();
    if k < 3 {
        return Err(Error::Parameter(format!("feature k = {k} must be >= 3")));
    }
    if k > n {
        return Err(Error::Parameter(format!(
            "feature k = {k} exceeds cloud size {n}"
        )));
    }
    let positions = cloud.positions();
    let tree = KdTree::build(positions);
    let min_z = cloud.min_z();

    let mut feats = GeometricFeatures {
        linearity: vec![0.0; n],
        planarity: vec![0.0; n],
        scattering: vec![0.0; n],
        verticality: vec![0.0; n],
        elevation: vec![0.0; n],
    };

    for i in 0..n {
        let nbrs = tree.knn(positions[i], k)?;
        let cov = covariance(positions, &nbrs);
        let (vals, vecs) = eigen_symmetric3(cov);
        let sum = vals[0] + vals[1] + vals[2];
        let (lin, plan, scat) = if sum <= 0.0 {
            // Coincident neighbourhood: no structure at all.
            (0.0, 0.0, 1.0)
        } else {
            let l1 = vals[0] / sum;
            let l2 = vals[1] / sum;
            let l3 = vals[2] / sum;
            let lin = (l1 - l2) / l1;
            let plan = (l2 - l3) / l1;
            let scat = l3 / l1;
            let t = lin + plan + scat;
            (lin / t, plan / t, scat / t)
        };
        feats.linearity[i] = lin.clamp(0.0, 1.0);
        feats.planarity[i] = plan.clamp(0.0, 1.0);
        feats.scattering[i] = scat.clamp(0.0, 1.0);
        // Column 2 of the eigenvector matrix belongs to the smallest
        // eigenvalue; its |z| measures how vertical the local normal is.
        feats.verticality[i] = vecs[2][2].abs().clamp(0.0, 1.0);
        feats.elevation[i] = positions[i][2] - min_z;
    }
    Ok(feats)
}

fn covariance(points: &[[f64; 3]], idx: &[usize]) -> [[f64; 3]; 3] {
    let k = idx.len() as f64;
    let mut mean = [0.0; 3];
    for &i in idx {
        for d in 0..3 {
            mean[d] += points[i][d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut cov = [[0.0; 3]; 3];
    for &i in idx {
        let d = [
            points[i][0] - mean[0],
            points[i][1] - mean[1],
            points[i][2] - mean[2],
        ];
        for r in 0..3 {
            for c in r..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for r in 0..3 {
        for c in r..3 {
            cov[r][c] /= k;
            cov[c][r] = cov[r][c];
        }
    }
    cov
}

/// Eigen decomposition of a symmetric 3x3 matrix.
///
/// Returns eigenvalues in descending order (clamped at zero from below to
/// absorb rounding on PSD inputs) and the matching eigenvectors as rows.
/// The analytic trigonometric form is used when it reconstructs the matrix
/// well; otherwise cyclic Jacobi finishes the job.
pub fn eigen_symmetric3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let scale = m.iter().flatten().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if scale == 0.0 {
        return (
            [0.0; 3],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        );
    }
    if let Some(result) = analytic_eigen(m, scale) {
        return result;
    }
    jacobi_eigen(m)
}

fn analytic_eigen(m: [[f64; 3]; 3], scale: f64) -> Option<([f64; 3], [[f64; 3]; 3])> {
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    if p2 <= 0.0 {
        // Scalar multiple of the identity.
        return Some((
            [q.max(0.0); 3],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        ));
    }
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            b[r][c] = (m[r][c] - if r == c { q } else { 0.0 }) / p;
        }
    }
    let r = (det3(b) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let vals = [e1, e2, e3];

    let mut vecs = [[0.0; 3]; 3];
    for (slot, &val) in vals.iter().enumerate() {
        vecs[slot] = eigenvector_for(m, val)?;
    }
    // Accept only if residuals are small relative to the matrix scale.
    for slot in 0..3 {
        let v = vecs[slot];
        let mv = mat_vec(m, v);
        let mut res = 0.0f64;
        for d in 0..3 {
            res = res.max((mv[d] - vals[slot] * v[d]).abs());
        }
        if res > 1e-9 * scale.max(1.0) {
            return None;
        }
    }
    Some(([vals[0].max(0.0), vals[1].max(0.0), vals[2].max(0.0)], vecs))
}

/// Null vector of (m - val*I) via the largest cross product of its rows.
fn eigenvector_for(m: [[f64; 3]; 3], val: f64) -> Option<[f64; 3]> {
    let a = [
        [m[0][0] - val, m[0][1], m[0][2]],
        [m[1][0], m[1][1] - val, m[1][2]],
        [m[2][0], m[2][1], m[2][2] - val],
    ];
    let candidates = [cross(a[0], a[1]), cross(a[0], a[2]), cross(a[1], a[2])];
    let best = candidates
        .iter()
        .max_by(|x, y| norm2(**x).total_cmp(&norm2(**y)))
        .copied()?;
    let n = norm2(best).sqrt();
    if n < 1e-30 {
        return None;
    }
    Some([best[0] / n, best[1] / n, best[2] / n])
}

fn jacobi_eigen(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..50 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            rot[p][p] = c;
            rot[q][q] = c;
            rot[p][q] = s;
            rot[q][p] = -s;
            a = mat_mul(mat_mul(transpose(rot), a), rot);
            v = mat_mul(v, rot);
        }
    }
    // Sort descending, carrying eigenvector columns along.
    let mut pairs: Vec<(f64, [f64; 3])> = (0..3)
        .map(|i| (a[i][i], [v[0][i], v[1][i], v[2][i]]))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    (
        [
            pairs[0].0.max(0.0),
            pairs[1].0.max(0.0),
            pairs[2].0.max(0.0),
        ],
        [pairs[0].1, pairs[1].1, pairs[2].1],
    )
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm2(v: [f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

fn mat_vec(m: [[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}
