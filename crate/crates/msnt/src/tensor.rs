//! Dense row-major tensors and boolean masks.

use crate::scalar::Scalar;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array, contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ONE; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data: data.iter().map(|&v| E::from_f64(v)).collect(),
        }
    }

    /// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn rand_fan_in(shape: &[usize], fan_in: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut (impl Rng + ?Sized)) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Boolean validity mask. `true` marks a live entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Mask { shape, data }
    }

    pub fn all_true(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![true; shape.iter().product()],
        }
    }

    /// Prefix mask for a padded set axis: first `n_valid` of `n_max` entries live.
    pub fn prefix(n_valid: usize, n_max: usize) -> Self {
        Mask {
            shape: vec![n_max],
            data: (0..n_max).map(|i| i < n_valid).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Materialize this mask broadcast to `target`, numpy alignment rules.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Mask> {
        let strides = broadcast_strides(&self.shape, target).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "mask broadcast",
                lhs: self.shape.to_vec(),
                rhs: target.to_vec(),
            }
        })?;
        let n: usize = target.iter().product();
        let rank = target.len();
        let mut out = vec![false; n];
        let mut coords = vec![0usize; rank];
        let mut off = 0usize;
        for o in out.iter_mut() {
            *o = self.data[off];
            for ax in (0..rank).rev() {
                coords[ax] += 1;
                off += strides[ax];
                if coords[ax] < target[ax] {
                    break;
                }
                coords[ax] = 0;
                off -= strides[ax] * target[ax];
            }
        }
        Ok(Mask {
            shape: target.to_vec(),
            data: out,
        })
    }
}

/// Result of broadcasting two shapes together (numpy rules).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Element strides of `shape` when broadcast to `target`; broadcast axes get stride 0.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if shape.len() > target.len() {
        return None;
    }
    let offset = target.len() - shape.len();
    let mut strides = vec![0usize; target.len()];
    let own = contiguous_strides(shape);
    for i in 0..shape.len() {
        let t = target[offset + i];
        if shape[i] == t {
            strides[offset + i] = own[i];
        } else if shape[i] == 1 {
            strides[offset + i] = 0;
        } else {
            return None;
        }
    }
    Some(strides)
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[inline]
pub fn linear_to_coords(mut i: usize, shape: &[usize], coords: &mut [usize]) {
    for ax in (0..shape.len()).rev() {
        coords[ax] = i % shape[ax];
        i /= shape[ax];
    }
}
