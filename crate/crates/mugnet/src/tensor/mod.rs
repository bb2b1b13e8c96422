//! Dense float64 tensors and tape-based reverse-mode automatic
//! differentiation.
//!
//! [`Tensor`] is the persistent value container (parameters, constants);
//! [`Tape`] records a forward computation over lightweight [`Var`] handles
//! and replays it in reverse to accumulate gradients.

mod tape;

pub use tape::{Adjacency, BnMode, RunningStats, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major float64 array with optional gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape).expect("positive shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![1.0; numel], shape).expect("positive shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], &[1]).expect("scalar")
    }

    /// Xavier-uniform init for a `rows x cols` weight matrix.
    pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
        let mut t = Tensor::new(data, &[rows, cols]).expect("positive shape");
        t.requires_grad = true;
        t
    }

    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let mut t = Tensor::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numpy-style trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

/// Row-major strides with zeros on broadcast dimensions, padded to `rank`.
pub(crate) fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in 0..shape.len() {
        let d = shape[shape.len() - 1 - i];
        strides[rank - 1 - i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Iterates flat indices of two broadcast operands over the output shape.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for flat in 0..numel {
        f(flat, ai, bi);
        // Odometer increment keeps the operand indices in sync.
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += a_strides[d];
            bi += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ai -= a_strides[d] * out_shape[d];
            bi -= b_strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

#[cfg(test)]
mod shape_tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_mismatch() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[4, 1], &[4, 3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[1], &[5, 2]).unwrap(), vec![5, 2]);
        assert!(broadcast_shape(&[4, 2], &[3]).is_err());
    }

    #[test]
    fn broadcast_iteration_matches_manual_expansion() {
        // [2,3] + [3]
        let out = vec![2usize, 3];
        let sa = broadcast_strides(&[2, 3], 2);
        let sb = broadcast_strides(&[3], 2);
        let mut triples = Vec::new();
        for_each_broadcast(&out, &sa, &sb, |o, a, b| triples.push((o, a, b)));
        assert_eq!(
            triples,
            vec![
                (0, 0, 0),
                (1, 1, 1),
                (2, 2, 2),
                (3, 3, 0),
                (4, 4, 1),
                (5, 5, 2)
            ]
        );
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[0.5, 1.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[1.0, 1.5]);
        t.zero_grad();
        assert_eq!(t.grad.as_deref().unwrap(), &[0.0, 0.0]);
    }
}
