use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

use super::{Capabilities, ScoreSource};

/// Scores read from a materialised `n_queries x n_items` table.
#[derive(Debug, Clone)]
pub struct MatrixOracle {
    scores: DenseMatrix,
    item_scores: Option<DenseMatrix>,
}

impl MatrixOracle {
    pub fn new(scores: DenseMatrix) -> Self {
        Self {
            scores,
            item_scores: None,
        }
    }

    /// Attaches an `n_items x n_items` item-item score table.
    pub fn with_item_scores(mut self, item_scores: DenseMatrix) -> Result<Self> {
        let n = self.scores.cols();
        if item_scores.shape() != (n, n) {
            return Err(Error::spec(format!(
                "item-item table must be {n}x{n}, got {:?}",
                item_scores.shape()
            )));
        }
        self.item_scores = Some(item_scores);
        Ok(self)
    }

    pub fn scores(&self) -> &DenseMatrix {
        &self.scores
    }
}

impl ScoreSource for MatrixOracle {
    fn n_queries(&self) -> usize {
        self.scores.rows()
    }

    fn n_items(&self) -> usize {
        self.scores.cols()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            item_item_scoring: self.item_scores.is_some(),
            latent_features: false,
        }
    }

    fn eval(&self, q: usize, i: usize) -> f64 {
        self.scores.get(q, i)
    }

    fn eval_items(&self, i: usize, j: usize) -> Option<f64> {
        self.item_scores.as_ref().map(|m| m.get(i, j))
    }
}
