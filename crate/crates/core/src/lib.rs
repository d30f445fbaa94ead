//! Approximate k-nearest-neighbour search under an expensive black-box
//! similarity function.
//!
//! Items are indexed offline from the scores of a few anchor queries; a test
//! query is embedded by scoring it against a few anchor items, and item scores
//! are approximated by inner products with a CUR (skeleton) decomposition of
//! the query-item score matrix. Every oracle evaluation is counted.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod format;
pub mod index;
pub mod linalg;
pub mod oracle;
pub mod retrieve;
pub mod rng;

pub use error::{Error, Result};
pub use index::{build_index, select_anchors, AnchorSet, CurIndex, CurIndexer};
pub use linalg::{DenseMatrix, Rcond};
pub use oracle::{generate, MatrixOracle, ScoreOracle, SyntheticKind, SyntheticSpec};
pub use retrieve::{BudgetSplit, QueryEmbedding, RetrievalResult};
