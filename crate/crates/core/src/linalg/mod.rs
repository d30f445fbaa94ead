//! Dense linear-algebra kernels: SVD, Moore-Penrose pseudo-inverse, numerical
//! rank, relative Frobenius error and CUR (skeleton) reconstruction.
//!
//! The SVD itself is delegated to `faer`, run sequentially so results do not
//! depend on the thread count; everything above it lives here.
//! Singular vectors are normalised so that the first nonzero entry of each left
//! singular vector is positive, which makes persisted artifacts reproducible.

mod matrix;

use std::collections::HashSet;

pub use matrix::DenseMatrix;

use crate::error::{Error, Result};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::svd::{svd as faer_svd, svd_scratch, ComputeSvdVectors};
use faer::{Mat, Par};

/// Runs faer's SVD with sequential execution. Returns `(s, u, v)`; `u` and
/// `v` are thin and present only when `vectors` is set.
fn raw_svd(a: &DenseMatrix, vectors: bool) -> Result<(Vec<f64>, Option<(Mat<f64>, Mat<f64>)>)> {
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    let m = a.to_faer();
    let mut s = Mat::<f64>::zeros(k, 1);
    let mode = if vectors { ComputeSvdVectors::Thin } else { ComputeSvdVectors::No };
    let mut u = vectors.then(|| Mat::<f64>::zeros(rows, k));
    let mut v = vectors.then(|| Mat::<f64>::zeros(cols, k));
    let params = Default::default();
    let mut buf = MemBuffer::new(svd_scratch::<f64>(rows, cols, mode, mode, Par::Seq, params));
    faer_svd(
        m.as_ref(),
        s.as_mut().col_mut(0).as_diagonal_mut(),
        u.as_mut().map(|u| u.as_mut()),
        v.as_mut().map(|v| v.as_mut()),
        Par::Seq,
        MemStack::new(&mut buf),
        params,
    )
    .map_err(|e| Error::Numerical(format!("SVD of {rows}x{cols} matrix did not converge: {e:?}")))?;
    let values = (0..k).map(|j| s[(j, 0)]).collect();
    Ok((values, u.zip(v)))
}

/// Relative singular-value cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Rcond {
    /// `f64::EPSILON * max(rows, cols)`.
    #[default]
    Default,
    Fixed(f64),
}

impl Rcond {
    pub fn resolve(self, rows: usize, cols: usize) -> f64 {
        match self {
            Rcond::Default => f64::EPSILON * rows.max(cols) as f64,
            Rcond::Fixed(v) => v,
        }
    }

    fn check(self) -> Result<()> {
        match self {
            Rcond::Fixed(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(Error::spec(format!("rcond must be finite and >= 0, got {v}")))
            }
            _ => Ok(()),
        }
    }
}

/// Thin SVD `A = U diag(s) Vt`, singular values in non-increasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: DenseMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            vt: DenseMatrix::zeros(0, cols),
        });
    }
    let (singular_values, vectors) = raw_svd(a, true)?;
    let (fu, fv) = vectors.expect("vectors requested");
    let mut u = DenseMatrix::from_fn(rows, k, |r, c| fu[(r, c)]);
    let mut vt = DenseMatrix::from_fn(k, cols, |r, c| fv[(c, r)]);

    for j in 0..k {
        let first = (0..rows).map(|r| u.get(r, j)).find(|&v| v != 0.0);
        if matches!(first, Some(v) if v < 0.0) {
            for r in 0..rows {
                u.set(r, j, -u.get(r, j));
            }
            for v in vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
    Ok(Svd {
        u,
        singular_values,
        vt,
    })
}

/// Moore-Penrose pseudo-inverse. Singular values `<= rcond * sigma_max` are
/// treated as zero.
pub fn pseudo_inverse(a: &DenseMatrix, rcond: Rcond) -> Result<DenseMatrix> {
    rcond.check()?;
    let (rows, cols) = a.shape();
    let dec = svd(a)?;
    let cutoff = rcond.resolve(rows, cols) * dec.singular_values.first().copied().unwrap_or(0.0);
    let mut out = DenseMatrix::zeros(cols, rows);
    for (j, &s) in dec.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        let v_row = dec.vt.row(j);
        for (c, &v) in v_row.iter().enumerate() {
            let scale = v * inv;
            if scale == 0.0 {
                continue;
            }
            let out_row = out.row_mut(c);
            for (r, o) in out_row.iter_mut().enumerate() {
                *o += scale * dec.u.get(r, j);
            }
        }
    }
    Ok(out)
}

pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>> {
    let (rows, cols) = a.shape();
    if rows.min(cols) == 0 {
        return Ok(Vec::new());
    }
    Ok(raw_svd(a, false)?.0)
}

/// Number of singular values strictly above `rcond * sigma_max`.
pub fn numerical_rank(a: &DenseMatrix, rcond: Rcond) -> Result<usize> {
    rcond.check()?;
    let s = singular_values(a)?;
    let Some(&max) = s.first() else {
        return Ok(0);
    };
    let cutoff = rcond.resolve(a.rows(), a.cols()) * max;
    Ok(s.iter().filter(|&&v| v > cutoff).count())
}

/// `||M - approx||_F / ||M||_F`.
pub fn frob_rel_error(m: &DenseMatrix, approx: &DenseMatrix) -> Result<f64> {
    let norm = m.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("reference matrix has zero Frobenius norm".into()));
    }
    Ok(m.sub(approx)?.frobenius_norm() / norm)
}

fn check_ids(ids: &[usize], bound: usize, what: &'static str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::spec(format!("{what} id list is empty")));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if id >= bound {
            return Err(Error::Index { what, id, bound });
        }
        if !seen.insert(id) {
            return Err(Error::spec(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

/// Skeleton approximation `C U R` with `C = M[:, cols]`, `R = M[rows, :]` and
/// `U = pinv(M[rows, cols])`. Analysis only: it needs all of `M`.
pub fn cur_skeleton(
    m: &DenseMatrix,
    row_ids: &[usize],
    col_ids: &[usize],
    rcond: Rcond,
) -> Result<DenseMatrix> {
    check_ids(row_ids, m.rows(), "row")?;
    check_ids(col_ids, m.cols(), "column")?;
    let c = m.select_cols(col_ids);
    let r = m.select_rows(row_ids);
    let u = pseudo_inverse(&r.select_cols(col_ids), rcond)?;
    c.matmul(&u)?.matmul(&r)
}

/// Joining matrix `U = pinv(C) M pinv(R)` minimising `||M - C U R||_F`.
pub fn oracle_u(c: &DenseMatrix, m: &DenseMatrix, r: &DenseMatrix, rcond: Rcond) -> Result<DenseMatrix> {
    if c.rows() != m.rows() || r.cols() != m.cols() {
        return Err(Error::spec(format!(
            "oracle U needs C: n x k_i, M: n x m, R: k_q x m; got C {:?}, M {:?}, R {:?}",
            c.shape(),
            m.shape(),
            r.shape()
        )));
    }
    let c_pinv = pseudo_inverse(c, rcond)?;
    let r_pinv = pseudo_inverse(r, rcond)?;
    c_pinv.matmul(m)?.matmul(&r_pinv)
}
