//! Dense row-major tensor value type plus broadcasting helpers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// N-dimensional dense array. Feature maps use `[batch, channel, height, width]`.
///
/// The data is contiguous row-major; `shape.iter().product() == data.len()` is
/// established at construction and preserved by every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeExpected {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeExpected {
                op: "reshape",
                expected: shape,
                got: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Maps into another dtype, element by element.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Shape of the broadcast result under trailing-dimension rules, or an error
/// naming both operand shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = dim_from_trailing(a, ndim, i);
        let db = dim_from_trailing(b, ndim, i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn dim_from_trailing(shape: &[usize], ndim: usize, i: usize) -> usize {
    let offset = ndim - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Row-major strides with zeros on broadcast (size-1 or missing) dimensions,
/// aligned to an `ndim`-long output shape.
pub fn broadcast_strides(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut strides = vec![0usize; ndim];
    let offset = ndim - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Sums `grad` (shaped `from`) down to `to`, undoing trailing-dimension broadcast.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let to_numel: usize = to.iter().product();
    if from == to {
        return grad.to_vec();
    }
    let ndim = from.len();
    let strides = broadcast_strides(to, ndim);
    let mut out = vec![T::ZERO; to_numel];
    let mut idx = vec![0usize; ndim];
    for (flat, g) in grad.iter().enumerate() {
        let mut target = 0usize;
        for d in 0..ndim {
            target += idx[d] * strides[d];
        }
        out[target] += *g;
        // advance the multi-index
        let _ = flat;
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeExpected { .. }));
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(
            broadcast_shape("t", &[2, 3, 4], &[1]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(
            broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert!(broadcast_shape("t", &[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // grad of shape [2,2] reduced to [2] sums over the leading axis
        let g = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(reduce_to_shape(&g, &[2, 2], &[2]), vec![4.0, 6.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 2], &[1]), vec![10.0]);
    }
}
