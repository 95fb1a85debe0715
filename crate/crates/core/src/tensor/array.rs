//! Dense row-major n-d array value type.

use crate::error::{Error, Result};
use crate::tensor::scalar::Scalar;

/// Row-major dense array. Immutable in spirit: tape nodes never mutate their
/// values after creation; host-side code (optimizer, EMA, data pipeline) may
/// build and edit arrays freely before handing them to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Array<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows/cols of a 2-d array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected 2-d array, got {:?}", s))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> E {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: E) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Array::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "zip_map shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().fold(E::zero(), |a, b| a + b)
    }

    pub fn mean(&self) -> E {
        self.sum() / E::c(self.data.len() as f64)
    }

    pub fn min(&self) -> E {
        self.data
            .iter()
            .copied()
            .fold(E::infinity(), |a, b| if b < a { b } else { a })
    }

    pub fn max(&self) -> E {
        self.data
            .iter()
            .copied()
            .fold(E::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Plain 2-d matrix product, also the host-side reference for the tape op.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {} vs {}",
                k, k2
            )));
        }
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == E::zero() {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] = dst[j] + a * row[j];
                }
            }
        }
        Array::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array::new(vec![c, r], out)
    }

    /// Min-max normalize to [0,1]; a constant array maps to uniform 0.5.
    /// Returns (normalized, was_constant).
    pub fn minmax_normalize(&self) -> (Self, bool) {
        let lo = self.min();
        let hi = self.max();
        if hi == lo {
            return (Array::full(&self.shape, E::c(0.5)), true);
        }
        let span = hi - lo;
        (self.map(|v| (v - lo) / span), false)
    }

    pub fn to_f64(&self) -> Array<f64> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn from_f64(src: &Array<f64>) -> Self {
        Array {
            shape: src.shape.to_vec(),
            data: src.data().iter().map(|&v| E::c(v)).collect(),
        }
    }
}
