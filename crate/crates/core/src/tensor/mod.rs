//! Dense 64-bit float tensors and the reverse-mode tape they run on.
//!
//! `Tensor` is an immutable row-major value; all differentiable computation
//! goes through a [`Graph`], which records operations in append order and
//! replays them backwards to accumulate gradients.

mod graph;

pub use graph::{Graph, NodeId};

use thiserror::Error;

/// Errors produced by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array of f64 in row-major order.
///
/// Immutable after construction; gradient bookkeeping lives on the
/// [`Graph`] node that wraps it, not on the value itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D tensor from a value list.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major 2-D tensor.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::Contract("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element at a full multi-index. Test and debugging convenience.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = row_major_strides(&self.shape);
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            assert!(ix < self.shape[i], "index out of bounds");
            off += ix * strides[i];
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum over the last axis, shape `[.., 1]`. Used for detached
    /// softmax stabilisation; not a recorded graph operation.
    pub fn max_last_keepdim(&self) -> Tensor {
        let last = *self.shape.last().expect("max over scalar");
        let rows = self.numel() / last.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data[r * last..(r + 1) * last];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        Tensor { shape, data: out }
    }
}

// ── Shape helpers ────────────────────────────────────────────────────

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i, rank);
        let db = dim_from_right(b, rank - 1 - i, rank);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], pos: usize, rank: usize) -> usize {
    // pos counts from the left of the padded shape
    let pad = rank - shape.len();
    let i = rank - 1 - pos;
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Strides of `shape` viewed as `out_shape`, with zero stride on
/// broadcast axes. `shape` must be broadcast-compatible with `out_shape`.
pub(crate) fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let own = row_major_strides(shape);
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i >= pad {
            let d = shape[i - pad];
            strides[i] = if d == 1 { 0 } else { own[i - pad] };
        }
    }
    strides
}

/// Odometer walk over `out_shape`, calling `f(out_index, off_a, off_b)`
/// for every element with the broadcast offsets into two operands.
pub(crate) fn zip_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut offa = 0usize;
    let mut offb = 0usize;
    for i in 0..numel {
        f(i, offa, offb);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offa += sa[ax];
            offb += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            offa -= sa[ax] * out_shape[ax];
            offb -= sb[ax] * out_shape[ax];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[2]), Some(vec![2]));
    }

    #[test]
    fn strides_zeroed_on_broadcast_axes() {
        assert_eq!(bcast_strides(&[3], &[2, 3]), vec![0, 1]);
        assert_eq!(bcast_strides(&[2, 1], &[2, 4]), vec![1, 0]);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }

    #[test]
    fn max_last_keepdim_rows() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, -1.0, -7.0, -2.0]).unwrap();
        let m = t.max_last_keepdim();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[5.0, -1.0]);
    }
}
