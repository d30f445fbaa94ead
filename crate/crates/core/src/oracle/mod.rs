//! Black-box scoring functions with exact call accounting.
//!
//! A [`ScoreSource`] is the pure function `f(q, i)`. A [`ScoreOracle`] wraps a
//! shared source with a call ledger; every metered evaluation bumps the ledger
//! by one. [`ScoreOracle::unmetered`] hands out a second handle on the same
//! source with its own ledger, used for ground truth and analysis so those
//! calls never leak into a method's cost.

mod matrix;
mod synthetic;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

pub use matrix::MatrixOracle;
pub use synthetic::{generate, Skew, SyntheticKind, SyntheticOracle, SyntheticSpec};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub item_item_scoring: bool,
    pub latent_features: bool,
}

pub trait ScoreSource: Send + Sync + fmt::Debug {
    fn n_queries(&self) -> usize;
    fn n_items(&self) -> usize;

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    /// `f(q, i)`; ids are validated by the caller.
    fn eval(&self, q: usize, i: usize) -> f64;

    fn eval_items(&self, _i: usize, _j: usize) -> Option<f64> {
        None
    }

    fn query_features(&self, _q: usize) -> Option<&[f64]> {
        None
    }

    fn item_features(&self, _i: usize) -> Option<&[f64]> {
        None
    }
}

/// Scoring function plus call ledger. Clones share the ledger.
#[derive(Clone)]
pub struct ScoreOracle {
    source: Arc<dyn ScoreSource>,
    ledger: Arc<AtomicU64>,
}

impl fmt::Debug for ScoreOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScoreOracle")
            .field("source", &self.source)
            .field("calls", &self.call_count())
            .finish()
    }
}

impl ScoreOracle {
    pub fn new(source: impl ScoreSource + 'static) -> Self {
        Self::from_arc(Arc::new(source))
    }

    pub fn from_arc(source: Arc<dyn ScoreSource>) -> Self {
        Self {
            source,
            ledger: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Handle on the same scoring function with a fresh, independent ledger.
    pub fn unmetered(&self) -> Self {
        Self::from_arc(Arc::clone(&self.source))
    }

    pub fn source(&self) -> &dyn ScoreSource {
        self.source.as_ref()
    }

    pub fn n_queries(&self) -> usize {
        self.source.n_queries()
    }

    pub fn n_items(&self) -> usize {
        self.source.n_items()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.source.capabilities()
    }

    pub fn call_count(&self) -> u64 {
        self.ledger.load(Ordering::SeqCst)
    }

    fn check_query(&self, q: usize) -> Result<()> {
        let bound = self.n_queries();
        if q >= bound {
            return Err(Error::Index {
                what: "query",
                id: q,
                bound,
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        let bound = self.n_items();
        if i >= bound {
            return Err(Error::Index {
                what: "item",
                id: i,
                bound,
            });
        }
        Ok(())
    }

    fn charge(&self, n: usize) {
        self.ledger.fetch_add(n as u64, Ordering::SeqCst);
    }

    pub fn score(&self, q: usize, i: usize) -> Result<f64> {
        self.check_query(q)?;
        self.check_item(i)?;
        self.charge(1);
        Ok(self.source.eval(q, i))
    }

    /// Same semantics as scoring each pair in turn. Nothing is charged if any
    /// id is out of range.
    pub fn score_batch(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        for &(q, i) in pairs {
            self.check_query(q)?;
            self.check_item(i)?;
        }
        self.charge(pairs.len());
        Ok(pairs.iter().map(|&(q, i)| self.source.eval(q, i)).collect())
    }

    /// Scores one query against a list of items.
    pub fn score_row(&self, q: usize, items: &[usize]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        for &i in items {
            self.check_item(i)?;
        }
        self.charge(items.len());
        Ok(items.iter().map(|&i| self.source.eval(q, i)).collect())
    }

    pub fn score_items(&self, i: usize, j: usize) -> Result<f64> {
        if !self.capabilities().item_item_scoring {
            return Err(Error::Capability("item_item_scoring"));
        }
        self.check_item(i)?;
        self.check_item(j)?;
        let v = self
            .source
            .eval_items(i, j)
            .ok_or(Error::Capability("item_item_scoring"))?;
        self.charge(1);
        Ok(v)
    }

    pub fn query_features(&self, q: usize) -> Result<&[f64]> {
        self.check_query(q)?;
        self.source
            .query_features(q)
            .ok_or(Error::Capability("latent_features"))
    }

    pub fn item_features(&self, i: usize) -> Result<&[f64]> {
        self.check_item(i)?;
        self.source
            .item_features(i)
            .ok_or(Error::Capability("latent_features"))
    }

    /// The full `n_queries x n_items` score matrix, without touching the ledger.
    pub fn materialize(&self) -> DenseMatrix {
        self.materialize_rows(&(0..self.n_queries()).collect::<Vec<_>>())
    }

    /// Selected rows of the score matrix, without touching the ledger.
    pub fn materialize_rows(&self, queries: &[usize]) -> DenseMatrix {
        let n = self.n_items();
        let rows: Vec<Vec<f64>> = queries
            .par_iter()
            .map(|&q| (0..n).map(|i| self.source.eval(q, i)).collect())
            .collect();
        let mut data = Vec::with_capacity(queries.len() * n);
        for r in rows {
            data.extend(r);
        }
        DenseMatrix::new(queries.len(), n, data).expect("scores are finite")
    }
}
