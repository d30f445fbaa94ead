use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            let mut l = f.debug_list();
            for r in 0..self.rows {
                l.entry(&self.row(r));
            }
            l.finish()?;
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::spec(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn select_rows(&self, ids: &[usize]) -> Self {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &r in ids {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, ids: &[usize]) -> Self {
        Self::from_fn(self.rows, ids.len(), |r, j| self.get(r, ids[j]))
    }

    /// Leading `n` columns.
    pub fn prefix_cols(&self, n: usize) -> Self {
        Self::from_fn(self.rows, n, |r, c| self.get(r, c))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::spec(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = out.row_mut(r);
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `v^T * self`.
    pub fn vecmat(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::spec(format!(
                "vector of length {} does not match {} matrix rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &a) in v.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::spec(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |r, c| self.data[r * self.cols + c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn matmul_small() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, DenseMatrix::from_rows(&[[2.0, 1.0], [4.0, 3.0]]));
        assert!(a.matmul(&DenseMatrix::zeros(3, 1)).is_err());
        assert_eq!(a.vecmat(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn selection_and_transpose() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(a.select_rows(&[1]).row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(a.select_cols(&[2, 0]), DenseMatrix::from_rows(&[[3.0, 1.0], [6.0, 4.0]]));
        assert_eq!(a.transpose().shape(), (3, 2));
        assert_eq!(a.transpose().get(2, 1), 6.0);
        assert_eq!(a.prefix_cols(1).column(0), vec![1.0, 4.0]);
    }
}
