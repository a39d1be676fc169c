//! Row-major dense tensors for weights, inputs, and outputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MgluError, Result};
use crate::real::Real;

/// Storage width modelled for memory-traffic accounting. Arithmetic always
/// runs at the scalar's own precision; 16 marks the matrix as half-precision
/// resident for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageWidth {
    B16,
    B32,
}

impl StorageWidth {
    pub fn bits(self) -> u64 {
        match self {
            StorageWidth::B16 => 16,
            StorageWidth::B32 => 32,
        }
    }
}

/// Dense `rows x cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    storage: StorageWidth,
}

impl<T: Real> DenseMatrix<T> {
    /// Build from row-major data, checking shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MgluError::DimMismatch(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MgluError::NonFinite("matrix data".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            storage: StorageWidth::B32,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
            storage: StorageWidth::B32,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            data,
            storage: StorageWidth::B32,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn random_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            rows,
            cols,
            data,
            storage: StorageWidth::B32,
        }
    }

    pub fn with_storage(mut self, storage: StorageWidth) -> Self {
        self.storage = storage;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn storage(&self) -> StorageWidth {
        self.storage
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Row `r` as a contiguous slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// x^T W for x of length `rows`, producing a vector of length `cols`.
    /// Accumulates in ascending row order, streaming the matrix once.
    pub fn vec_mat(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows, "vec_mat input length");
        let mut out = vec![T::zero(); self.cols];
        for (k, &xk) in x.iter().enumerate() {
            let row = self.row(k);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xk * w;
            }
        }
        out
    }
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector<T> {
    data: Vec<T>,
}

impl<T: Real> DenseVector<T> {
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MgluError::NonFinite("vector data".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    pub fn random_normal<R: Rng>(len: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> T {
        self.data[i]
    }
}

impl<T: Real> From<DenseVector<T>> for Vec<T> {
    fn from(v: DenseVector<T>) -> Self {
        v.data
    }
}
