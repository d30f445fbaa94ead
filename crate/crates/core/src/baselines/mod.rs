//! Comparison retrievers that embed queries and items separately and score by
//! inner product: precomputed embeddings, FixedItem, ItemCUR and a linear
//! dual encoder distilled from the oracle.

mod linear_de;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use linear_de::{
    loss_and_gradient, mine_negatives, train_linear_de, train_on, DeHyper, DeLoss, DistillationData, LinearDeModel,
};

use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, DenseMatrix, Rcond};
use crate::oracle::ScoreOracle;
use crate::retrieve::{top_k_by_score, RetrievalResult};
use crate::rng::rng_from_seed;

/// Maps a query id to its embedding.
pub trait QueryEmbedder: Send + Sync + fmt::Debug {
    fn embed(&self, oracle: &ScoreOracle, q: usize) -> Result<Vec<f64>>;

    /// Oracle calls spent per embedded query.
    fn cost(&self) -> u64;
}

/// Embeddings stored as an `n_queries x d` table.
#[derive(Debug, Clone)]
pub struct PrecomputedQueries(DenseMatrix);

impl QueryEmbedder for PrecomputedQueries {
    fn embed(&self, _oracle: &ScoreOracle, q: usize) -> Result<Vec<f64>> {
        if q >= self.0.rows() {
            return Err(Error::Index {
                what: "query",
                id: q,
                bound: self.0.rows(),
            });
        }
        Ok(self.0.row(q).to_vec())
    }

    fn cost(&self) -> u64 {
        0
    }
}

/// Oracle scores against a fixed list of items.
#[derive(Debug, Clone)]
pub struct AnchorScoreQueries(pub Vec<usize>);

impl QueryEmbedder for AnchorScoreQueries {
    fn embed(&self, oracle: &ScoreOracle, q: usize) -> Result<Vec<f64>> {
        oracle.score_row(q, &self.0)
    }

    fn cost(&self) -> u64 {
        self.0.len() as u64
    }
}

#[derive(Debug)]
pub struct EmbeddingRetriever {
    pub name: String,
    query_embedder: Box<dyn QueryEmbedder>,
    /// `d x n_items`.
    item_embeddings: DenseMatrix,
}

impl EmbeddingRetriever {
    pub fn new(name: impl Into<String>, query_embedder: Box<dyn QueryEmbedder>, item_embeddings: DenseMatrix) -> Self {
        Self {
            name: name.into(),
            query_embedder,
            item_embeddings,
        }
    }

    /// Retriever over fixed embeddings: `queries` is `d x n_queries`, `items`
    /// is `d x n_items`.
    pub fn precomputed(name: impl Into<String>, queries: &DenseMatrix, items: DenseMatrix) -> Result<Self> {
        if queries.rows() != items.rows() {
            return Err(Error::spec(format!(
                "query embeddings have dimension {}, item embeddings {}",
                queries.rows(),
                items.rows()
            )));
        }
        Ok(Self::new(name, Box::new(PrecomputedQueries(queries.transpose())), items))
    }

    pub fn cost_per_query(&self) -> u64 {
        self.query_embedder.cost()
    }

    pub fn dim(&self) -> usize {
        self.item_embeddings.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.cols()
    }

    pub fn item_embeddings(&self) -> &DenseMatrix {
        &self.item_embeddings
    }

    pub fn embed_query(&self, oracle: &ScoreOracle, q: usize) -> Result<Vec<f64>> {
        let e = self.query_embedder.embed(oracle, q)?;
        if e.len() != self.dim() {
            return Err(Error::spec(format!(
                "query embedding has dimension {}, items {}",
                e.len(),
                self.dim()
            )));
        }
        Ok(e)
    }

    pub fn scores(&self, oracle: &ScoreOracle, q: usize) -> Result<Vec<f64>> {
        let e = self.embed_query(oracle, q)?;
        self.item_embeddings.vecmat(&e)
    }
}

/// Top-`k_r` items by inner product, ties to the lower id.
pub fn retrieve_with(retriever: &EmbeddingRetriever, oracle: &ScoreOracle, q: usize, k_r: usize) -> Result<RetrievalResult> {
    if k_r == 0 || k_r > retriever.n_items() {
        return Err(Error::spec(format!("k_r = {k_r} outside [1, {}]", retriever.n_items())));
    }
    let scores = retriever.scores(oracle, q)?;
    let items = top_k_by_score(&scores, k_r);
    let approx = items.iter().map(|&i| scores[i]).collect();
    Ok(RetrievalResult {
        query: q,
        items,
        approx_scores: Some(approx),
        exact_scores: None,
        embed_calls: retriever.cost_per_query(),
        rerank_calls: 0,
    })
}

fn require_item_scores(oracle: &ScoreOracle) -> Result<()> {
    if oracle.capabilities().item_item_scoring {
        Ok(())
    } else {
        Err(Error::Capability("item_item_scoring"))
    }
}

fn shuffled_items(n: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng_from_seed(seed));
    ids
}

/// `rows x n_items` table of item-item scores for the given row anchors.
fn item_item_rows(oracle: &ScoreOracle, anchors: &[usize]) -> Result<DenseMatrix> {
    let n = oracle.n_items();
    let rows = anchors
        .par_iter()
        .map(|&a| (0..n).map(|j| oracle.score_items(j, a)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(anchors.len() * n);
    for r in rows {
        data.extend(r);
    }
    DenseMatrix::new(anchors.len(), n, data)
}

/// FixedItem: items and queries are both embedded by their scores against
/// `k_i` random anchor items. Indexing costs `k_i * n_items` item-item calls.
pub fn fixed_item_index(oracle: &ScoreOracle, k_i: usize, seed: u64) -> Result<EmbeddingRetriever> {
    require_item_scores(oracle)?;
    let n = oracle.n_items();
    if k_i == 0 || k_i > n {
        return Err(Error::spec(format!("k_i = {k_i} outside [1, {n}]")));
    }
    let mut anchors = shuffled_items(n, seed);
    anchors.truncate(k_i);
    fixed_item_index_with(oracle, anchors)
}

pub fn fixed_item_index_with(oracle: &ScoreOracle, anchors: Vec<usize>) -> Result<EmbeddingRetriever> {
    require_item_scores(oracle)?;
    let embeddings = item_item_rows(oracle, &anchors)?;
    Ok(EmbeddingRetriever::new(
        format!("fixed_item_{}", anchors.len()),
        Box::new(AnchorScoreQueries(anchors)),
        embeddings,
    ))
}

/// ItemCUR: CUR indexing where `k_ind` anchor items play the role of anchor
/// queries, and test queries are embedded against a second, disjoint set of
/// `k_query` anchor items.
pub fn item_cur_index(oracle: &ScoreOracle, k_ind: usize, k_query: usize, seed: u64) -> Result<EmbeddingRetriever> {
    require_item_scores(oracle)?;
    let n = oracle.n_items();
    if k_ind == 0 || k_query == 0 || k_ind + k_query > n {
        return Err(Error::spec(format!(
            "ItemCUR needs k_ind, k_query >= 1 and k_ind + k_query <= {n}; got {k_ind} + {k_query}"
        )));
    }
    let ids = shuffled_items(n, seed);
    item_cur_index_with(oracle, &ids[..k_ind], &ids[k_ind..k_ind + k_query], Rcond::Default)
}

pub fn item_cur_index_with(
    oracle: &ScoreOracle,
    index_anchors: &[usize],
    query_anchors: &[usize],
    rcond: Rcond,
) -> Result<EmbeddingRetriever> {
    require_item_scores(oracle)?;
    if index_anchors.is_empty() || query_anchors.is_empty() {
        return Err(Error::spec("ItemCUR anchor sets must be non-empty"));
    }
    let ind: HashSet<_> = index_anchors.iter().collect();
    if ind.len() != index_anchors.len() {
        return Err(Error::spec("duplicate ItemCUR indexing anchor"));
    }
    if let Some(a) = query_anchors.iter().find(|a| ind.contains(a)) {
        return Err(Error::spec(format!("item {a} is in both ItemCUR anchor sets")));
    }
    let r = item_item_rows(oracle, index_anchors)?;
    let c = r.select_cols(query_anchors);
    if c.is_zero() {
        return Err(Error::Degenerate("ItemCUR anchor intersection is all zeros".into()));
    }
    let embeddings = pseudo_inverse(&c, rcond)?.matmul(&r)?;
    Ok(EmbeddingRetriever::new(
        format!("item_cur_{}_{}", index_anchors.len(), query_anchors.len()),
        Box::new(AnchorScoreQueries(query_anchors.to_vec())),
        embeddings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate, MatrixOracle, SyntheticKind, SyntheticSpec};

    fn featured(nq: usize, ni: usize, r: usize, seed: u64) -> ScoreOracle {
        generate(SyntheticSpec::new(SyntheticKind::Featured, nq, ni, r, seed)).unwrap()
    }

    #[test]
    fn precomputed_costs_nothing() {
        let o = ScoreOracle::new(MatrixOracle::new(DenseMatrix::zeros(2, 3)));
        let q = DenseMatrix::from_rows(&[[1.0, 0.0]]);
        let items = DenseMatrix::from_rows(&[[0.5, 2.0, 2.0]]);
        let ret = EmbeddingRetriever::precomputed("pre", &q, items).unwrap();
        assert_eq!(ret.cost_per_query(), 0);
        let r = retrieve_with(&ret, &o, 0, 3).unwrap();
        assert_eq!(r.items, vec![1, 2, 0]);
        assert_eq!(r.embed_calls, 0);
        assert_eq!(o.call_count(), 0);
        let r = retrieve_with(&ret, &o, 1, 1).unwrap();
        assert_eq!(r.items, vec![0]);
        assert!(EmbeddingRetriever::precomputed("x", &DenseMatrix::zeros(3, 2), DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn fixed_item_embeddings_match_feature_formula() {
        let o = featured(10, 40, 3, 1);
        let ret = fixed_item_index(&o, 6, 2).unwrap();
        assert_eq!(o.call_count(), 6 * 40);
        assert_eq!(ret.cost_per_query(), 6);
        let anchors = {
            let mut ids = shuffled_items(40, 2);
            ids.truncate(6);
            ids
        };
        for j in [0, 17, 39] {
            let yj = o.item_features(j).unwrap();
            for (a_row, &a) in anchors.iter().enumerate() {
                let ya = o.item_features(a).unwrap();
                let expected: f64 = ya.iter().zip(yj).map(|(p, q)| p * q).sum();
                assert!((ret.item_embeddings().get(a_row, j) - expected).abs() < 1e-12);
            }
        }
        let before = o.call_count();
        let r = retrieve_with(&ret, &o, 3, 5).unwrap();
        assert_eq!(r.embed_calls, 6);
        assert_eq!(o.call_count() - before, 6);
    }

    #[test]
    fn fixed_item_single_anchor_sorts_by_product() {
        let o = featured(4, 12, 2, 5);
        let ret = fixed_item_index_with(&o, vec![7]).unwrap();
        let side = o.unmetered();
        let sq = side.score(2, 7).unwrap();
        let mut products: Vec<(usize, f64)> = (0..12).map(|j| (j, sq * side.score_items(j, 7).unwrap())).collect();
        products.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let r = retrieve_with(&ret, &o, 2, 12).unwrap();
        assert_eq!(r.items, products.iter().map(|p| p.0).collect::<Vec<_>>());
    }

    #[test]
    fn item_baselines_need_capability() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 5, 10, 2, 0)).unwrap();
        assert!(matches!(fixed_item_index(&o, 2, 0), Err(Error::Capability(_))));
        assert!(matches!(item_cur_index(&o, 2, 2, 0), Err(Error::Capability(_))));
    }

    #[test]
    fn item_cur_recovers_scores_exactly() {
        let r = 4;
        let o = featured(30, 200, r, 3);
        let ret = item_cur_index(&o, r, r, 8).unwrap();
        assert_eq!(o.call_count(), (r * 200) as u64);
        let side = o.unmetered();
        for q in 0..30 {
            let approx = ret.scores(&o, q).unwrap();
            for (i, a) in approx.iter().enumerate() {
                let exact = side.score(q, i).unwrap();
                assert!((a - exact).abs() < 1e-8, "q {q} item {i}: {a} vs {exact}");
            }
        }
    }

    #[test]
    fn item_cur_rejects_overlap() {
        let o = featured(5, 20, 2, 0);
        assert!(matches!(item_cur_index_with(&o, &[1, 2], &[2, 3], Rcond::Default), Err(Error::Spec(_))));
        assert!(item_cur_index(&o, 15, 6, 0).is_err());
    }
}
