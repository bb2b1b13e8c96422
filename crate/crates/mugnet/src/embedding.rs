//! Three-resolution cluster-feature embedding.
//!
//! Every cluster's member points (centroid-relative offsets plus geometric
//! and color features) are brought to a canonical n1-row matrix; two
//! learnable linear maps over the point axis downsample it to n2 and n3
//! rows. Each resolution runs its own shared per-point MLP, max-pools over
//! points, and the three pooled vectors are concatenated.
//!
//! The canonical matrix is permutation-invariant: farthest-point sampling
//! and the final ordering use only point values (distance to centroid,
//! then lexicographic comparison), never the input order.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    /// Width of one point feature row.
    pub input_dim: usize,
    /// Point budgets per resolution, n1 >= n2 >= n3 >= 1.
    pub budgets: [usize; 3],
    /// Hidden width of each per-resolution MLP.
    pub mlp_hidden: usize,
    /// Pooled output width per resolution.
    pub out_width: usize,
}

impl EmbeddingConfig {
    pub fn desk_default(input_dim: usize) -> Self {
        EmbeddingConfig {
            input_dim,
            budgets: [64, 32, 16],
            mlp_hidden: 32,
            out_width: 64,
        }
    }

    /// Concatenated embedding width.
    pub fn embed_dim(&self) -> usize {
        3 * self.out_width
    }

    pub fn validate(&self) -> Result<()> {
        let [n1, n2, n3] = self.budgets;
        if n3 < 1 || n2 < n3 || n1 < n2 {
            return Err(Error::Config(format!(
                "budgets must satisfy n1 >= n2 >= n3 >= 1, got {:?}",
                self.budgets
            )));
        }
        if self.input_dim == 0 || self.mlp_hidden == 0 || self.out_width == 0 {
            return Err(Error::Config("zero embedding width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        MlpParams {
            w1: Tensor::xavier(input, hidden, rng),
            b1: Tensor::param(vec![0.0; hidden], &[hidden]).expect("bias"),
            w2: Tensor::xavier(hidden, output, rng),
            b2: Tensor::param(vec![0.0; output], &[output]).expect("bias"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub mlps: [MlpParams; 3],
    /// Point-axis downsampling maps: `[n2, n1]` and `[n3, n2]`.
    pub down1: Tensor,
    pub down2: Tensor,
}

impl EmbeddingParams {
    pub fn init(cfg: &EmbeddingConfig, rng: &mut Rng) -> Self {
        let [n1, n2, n3] = cfg.budgets;
        EmbeddingParams {
            mlps: [
                MlpParams::init(cfg.input_dim, cfg.mlp_hidden, cfg.out_width, rng),
                MlpParams::init(cfg.input_dim, cfg.mlp_hidden, cfg.out_width, rng),
                MlpParams::init(cfg.input_dim, cfg.mlp_hidden, cfg.out_width, rng),
            ],
            down1: Tensor::xavier(n2, n1, rng),
            down2: Tensor::xavier(n3, n2, rng),
        }
    }
}

pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct EmbeddingVars {
    pub mlps: [MlpVars; 3],
    pub down1: Var,
    pub down2: Var,
}

impl EmbeddingParams {
    pub fn bind(&self, tape: &mut Tape) -> EmbeddingVars {
        let bind_mlp = |tape: &mut Tape, m: &MlpParams| MlpVars {
            w1: tape.leaf(&m.w1),
            b1: tape.leaf(&m.b1),
            w2: tape.leaf(&m.w2),
            b2: tape.leaf(&m.b2),
        };
        EmbeddingVars {
            mlps: [
                bind_mlp(tape, &self.mlps[0]),
                bind_mlp(tape, &self.mlps[1]),
                bind_mlp(tape, &self.mlps[2]),
            ],
            down1: tape.leaf(&self.down1),
            down2: tape.leaf(&self.down2),
        }
    }
}

/// Builds the canonical `n1 x dim` matrix for one cluster from its member
/// feature rows (first three columns are centroid-relative offsets).
///
/// More members than n1: farthest-point selection over the offsets.
/// Fewer: cyclic replication. Rows are finally ordered by distance to the
/// centroid with full-row lexicographic tie-break.
pub fn canonical_cluster_matrix(rows: &[Vec<f64>], dim: usize, n1: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Contract("cluster with no member rows".into()));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Contract(format!(
            "feature rows must all have width {dim}"
        )));
    }
    let m = rows.len();
    let dist = |r: &[f64]| r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let lex_less = |a: &[f64], b: &[f64]| -> bool {
        for (x, y) in a.iter().zip(b) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
        false
    };

    let selected: Vec<usize> = if m > n1 {
        farthest_point_selection(rows, n1, &dist, &lex_less)
    } else {
        (0..m).collect()
    };

    let mut ordered = selected;
    ordered.sort_by(|&a, &b| {
        dist(&rows[a]).total_cmp(&dist(&rows[b])).then_with(|| {
            if lex_less(&rows[a], &rows[b]) {
                std::cmp::Ordering::Less
            } else if lex_less(&rows[b], &rows[a]) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        })
    });

    let mut data = Vec::with_capacity(n1 * dim);
    for i in 0..n1 {
        data.extend_from_slice(&rows[ordered[i % ordered.len()]]);
    }
    Tensor::new(data, &[n1, dim])
}

/// Deterministic, order-independent farthest point sampling over the
/// offset columns. Starts at the point farthest from the centroid.
fn farthest_point_selection(
    rows: &[Vec<f64>],
    n: usize,
    dist: &dyn Fn(&[f64]) -> f64,
    lex_less: &dyn Fn(&[f64], &[f64]) -> bool,
) -> Vec<usize> {
    let m = rows.len();
    let better = |cand: usize, best: usize, key_c: f64, key_b: f64| -> bool {
        match key_c.total_cmp(&key_b) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => lex_less(&rows[cand], &rows[best]),
        }
    };

    let mut start = 0usize;
    for i in 1..m {
        if better(i, start, dist(&rows[i]), dist(&rows[start])) {
            start = i;
        }
    }

    let offset_d2 = |a: usize, b: usize| -> f64 {
        let (ra, rb) = (&rows[a], &rows[b]);
        (ra[0] - rb[0]).powi(2) + (ra[1] - rb[1]).powi(2) + (ra[2] - rb[2]).powi(2)
    };

    let mut selected = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; m];
    let mut in_set = vec![false; m];
    selected.push(start);
    in_set[start] = true;
    while selected.len() < n {
        let last = *selected.last().unwrap();
        let mut best = usize::MAX;
        for i in 0..m {
            if in_set[i] {
                continue;
            }
            min_d2[i] = min_d2[i].min(offset_d2(i, last));
            if best == usize::MAX || better(i, best, min_d2[i], min_d2[best]) {
                best = i;
            }
        }
        selected.push(best);
        in_set[best] = true;
    }
    selected
}

fn mlp_forward(tape: &mut Tape, x: Var, mlp: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add(h, mlp.b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, mlp.w2)?;
    let h = tape.add(h, mlp.b2)?;
    Ok(tape.relu(h))
}

/// Embeds one canonical cluster matrix into a `[1, embed_dim]` row.
pub fn embed_cluster(
    tape: &mut Tape,
    cluster_matrix: Var,
    cfg: &EmbeddingConfig,
    vars: &EmbeddingVars,
) -> Result<Var> {
    let shape = tape.shape(cluster_matrix).to_vec();
    if shape != [cfg.budgets[0], cfg.input_dim] {
        return Err(Error::Contract(format!(
            "cluster matrix {:?} does not match config [{}, {}]",
            shape, cfg.budgets[0], cfg.input_dim
        )));
    }
    let r1 = cluster_matrix;
    let r2 = tape.matmul(vars.down1, r1)?;
    let r3 = tape.matmul(vars.down2, r2)?;

    let mut pooled = Vec::with_capacity(3);
    for (r, mlp) in [r1, r2, r3].into_iter().zip(&vars.mlps) {
        let h = mlp_forward(tape, r, mlp)?;
        let p = tape.max(h, 0)?;
        pooled.push(tape.reshape(p, &[1, cfg.out_width])?);
    }
    tape.concat(&pooled, 1)
}

/// Embeds every cluster of a scene; row i is cluster i.
pub fn embed_graph(
    tape: &mut Tape,
    cluster_matrices: &[Tensor],
    cfg: &EmbeddingConfig,
    vars: &EmbeddingVars,
) -> Result<Var> {
    if cluster_matrices.is_empty() {
        return Err(Error::Contract("scene with no clusters".into()));
    }
    let mut rows = Vec::with_capacity(cluster_matrices.len());
    for t in cluster_matrices {
        let leaf = tape.leaf(t);
        rows.push(embed_cluster(tape, leaf, cfg, vars)?);
    }
    tape.concat(&rows, 0)
}
