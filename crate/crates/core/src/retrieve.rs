//! Test-time inference: embed a query against the anchor items, score every
//! item by inner product, take the exact top-`k_r` and optionally rerank with
//! the oracle, all with exact call accounting.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::index::{CurIndex, CurIndexer};
use crate::oracle::ScoreOracle;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub query: usize,
    /// Raw oracle scores against the anchor-item prefix.
    pub values: Vec<f64>,
    pub calls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query: usize,
    pub items: Vec<usize>,
    /// Approximate scores aligned with `items`, when known.
    pub approx_scores: Option<Vec<f64>>,
    /// Exact oracle scores aligned with `items`, present after reranking.
    pub exact_scores: Option<Vec<f64>>,
    pub embed_calls: u64,
    pub rerank_calls: u64,
}

impl RetrievalResult {
    pub fn total_calls(&self) -> u64 {
        self.embed_calls + self.rerank_calls
    }
}

/// Per-query oracle-call budget split between embedding and reranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSplit {
    pub budget: usize,
    pub k_i: usize,
    pub k_r: usize,
}

impl BudgetSplit {
    pub fn new(budget: usize, k_i: usize, k_r: usize) -> Result<Self> {
        if k_i == 0 {
            return Err(Error::spec("budget split needs k_i >= 1"));
        }
        if k_r == 0 {
            return Err(Error::spec("budget split needs k_r >= 1"));
        }
        if k_i + k_r > budget {
            return Err(Error::spec(format!("k_i + k_r = {} exceeds budget {budget}", k_i + k_r)));
        }
        Ok(Self { budget, k_i, k_r })
    }
}

/// Descending by score, ties to the lower id.
#[inline]
pub(crate) fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest scores, best first, ties to the lower index.
pub fn top_k_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        ids.truncate(k);
    }
    ids.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    ids
}

pub fn embed_query(oracle: &ScoreOracle, index: &CurIndex, q: usize, k_i_use: usize) -> Result<QueryEmbedding> {
    if k_i_use == 0 || k_i_use > index.k_i() {
        return Err(Error::spec(format!("k_i_use = {k_i_use} outside [1, {}]", index.k_i())));
    }
    let values = oracle.score_row(q, &index.anchor_items()[..k_i_use])?;
    Ok(QueryEmbedding {
        query: q,
        values,
        calls: k_i_use as u64,
    })
}

/// `e_q^T E` for every item; no oracle calls.
pub fn approx_scores(e: &QueryEmbedding, index: &CurIndex) -> Result<Vec<f64>> {
    if e.values.len() != index.k_i() {
        return Err(Error::spec(format!(
            "embedding has {} entries but the index has {} anchor items; use a sub-index built on that prefix",
            e.values.len(),
            index.k_i()
        )));
    }
    index.item_embeddings().vecmat(&e.values)
}

/// Exact maximum-inner-product search over all items.
pub fn retrieve_topk(e: &QueryEmbedding, index: &CurIndex, k_r: usize) -> Result<RetrievalResult> {
    if k_r == 0 || k_r > index.n_items() {
        return Err(Error::spec(format!("k_r = {k_r} outside [1, {}]", index.n_items())));
    }
    let scores = approx_scores(e, index)?;
    let items = top_k_by_score(&scores, k_r);
    let approx = items.iter().map(|&i| scores[i]).collect();
    Ok(RetrievalResult {
        query: e.query,
        items,
        approx_scores: Some(approx),
        exact_scores: None,
        embed_calls: e.calls,
        rerank_calls: 0,
    })
}

/// Scores every candidate exactly and keeps the top `k`.
pub fn rerank(oracle: &ScoreOracle, q: usize, candidates: &[usize], k: usize) -> Result<RetrievalResult> {
    if k > candidates.len() {
        return Err(Error::spec(format!("k = {k} exceeds {} candidates", candidates.len())));
    }
    let mut seen = HashSet::with_capacity(candidates.len());
    if let Some(d) = candidates.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::spec(format!("duplicate candidate id {d}")));
    }
    let exact = oracle.score_row(q, candidates)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_unstable_by(|&a, &b| exact[b].total_cmp(&exact[a]).then(candidates[a].cmp(&candidates[b])));
    order.truncate(k);
    Ok(RetrievalResult {
        query: q,
        items: order.iter().map(|&j| candidates[j]).collect(),
        approx_scores: None,
        exact_scores: Some(order.iter().map(|&j| exact[j]).collect()),
        embed_calls: 0,
        rerank_calls: candidates.len() as u64,
    })
}

/// Retrieves `k_r` items and reranks all of them, keeping approximate scores
/// alongside the exact ones.
pub fn retrieve_and_rerank(oracle: &ScoreOracle, retrieved: RetrievalResult, k: usize) -> Result<RetrievalResult> {
    let reranked = rerank(oracle, retrieved.query, &retrieved.items, k)?;
    let approx = retrieved.approx_scores.map(|scores| {
        reranked
            .items
            .iter()
            .map(|id| scores[retrieved.items.iter().position(|x| x == id).unwrap()])
            .collect()
    });
    Ok(RetrievalResult {
        approx_scores: approx,
        embed_calls: retrieved.embed_calls,
        ..reranked
    })
}

/// Embeds with `split.k_i` calls, retrieves `split.k_r` items, reranks them
/// with `split.k_r` calls and returns the top `k`.
pub fn query_under_budget(
    oracle: &ScoreOracle,
    indexer: &CurIndexer,
    q: usize,
    split: BudgetSplit,
    k: usize,
) -> Result<RetrievalResult> {
    let split = BudgetSplit::new(split.budget, split.k_i, split.k_r)?;
    if k == 0 || k > split.k_r {
        return Err(Error::spec(format!("k = {k} must lie in [1, k_r = {}]", split.k_r)));
    }
    let index = indexer.index(split.k_i)?;
    if split.k_r > index.n_items() {
        return Err(Error::spec(format!("k_r = {} exceeds {} items", split.k_r, index.n_items())));
    }
    let e = embed_query(oracle, &index, q, split.k_i)?;
    let retrieved = retrieve_topk(&e, &index, split.k_r)?;
    retrieve_and_rerank(oracle, retrieved, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build_index, select_anchors, AnchorSet, AnchorStrategy};
    use crate::linalg::{DenseMatrix, Rcond};
    use crate::oracle::{generate, MatrixOracle, SyntheticKind, SyntheticSpec};
    use proptest::prelude::*;

    fn brute_top(scores: &[f64], k: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..scores.len()).collect();
        ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        ids.truncate(k);
        ids
    }

    fn toy_index(embeddings: DenseMatrix, anchors: Vec<usize>) -> CurIndex {
        CurIndex::from_parts(anchors, vec![0], embeddings, 0.0, 0).unwrap()
    }

    #[test]
    fn embedding_reads_anchor_scores() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]);
        let o = ScoreOracle::new(MatrixOracle::new(m));
        let idx = toy_index(DenseMatrix::zeros(2, 4), vec![1, 3]);
        let e = embed_query(&o, &idx, 1, 2).unwrap();
        assert_eq!(e.values, vec![6.0, 8.0]);
        assert_eq!(o.call_count(), 2);
        let e = embed_query(&o, &idx, 0, 1).unwrap();
        assert_eq!(e.values, vec![2.0]);
        assert_eq!(o.call_count(), 3);
        assert!(matches!(embed_query(&o, &idx, 0, 0), Err(Error::Spec(_))));
        assert!(approx_scores(&e, &idx).is_err());
    }

    #[test]
    fn approx_scores_identity_and_zero() {
        let idx = toy_index(DenseMatrix::identity(3), vec![0, 1, 2]);
        let e = QueryEmbedding {
            query: 0,
            values: vec![0.5, -1.0, 2.0],
            calls: 3,
        };
        assert_eq!(approx_scores(&e, &idx).unwrap(), vec![0.5, -1.0, 2.0]);
        let zero = QueryEmbedding {
            values: vec![0.0; 3],
            ..e
        };
        assert_eq!(approx_scores(&zero, &idx).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn approx_scores_match_independent_loop() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRankNoisy, 40, 70, 4, 1).with_noise(0.3)).unwrap();
        let idx = build_index(&o, &select_anchors(40, 70, 12, 9, 2).unwrap(), Rcond::Default).unwrap();
        let e = embed_query(&o, &idx, 39, 9).unwrap();
        let scores = approx_scores(&e, &idx).unwrap();
        let emb = idx.item_embeddings();
        for i in 0..70 {
            let mut s = 0.0;
            for j in 0..9 {
                s += e.values[j] * emb.get(j, i);
            }
            assert_eq!(scores[i], s);
        }
    }

    #[test]
    fn ties_break_to_lower_id() {
        let idx = toy_index(DenseMatrix::from_rows(&[[1.0, 3.0, 3.0, 0.0]]), vec![0]);
        let e = QueryEmbedding {
            query: 0,
            values: vec![1.0],
            calls: 1,
        };
        let r = retrieve_topk(&e, &idx, 4).unwrap();
        assert_eq!(r.items, vec![1, 2, 0, 3]);
        assert_eq!(r.approx_scores.unwrap(), vec![3.0, 3.0, 1.0, 0.0]);
        assert!(retrieve_topk(&e, &idx, 0).is_err());
        assert!(retrieve_topk(&e, &idx, 5).is_err());
    }

    #[test]
    fn rerank_contracts() {
        let m = DenseMatrix::from_rows(&[[0.1, 0.9, 0.5, 0.7, 0.9]]);
        let o = ScoreOracle::new(MatrixOracle::new(m));
        let r = rerank(&o, 0, &[0, 2, 3, 4, 1], 5).unwrap();
        assert_eq!(r.items, vec![1, 4, 3, 2, 0]);
        assert_eq!(r.rerank_calls, 5);
        assert_eq!(o.call_count(), 5);
        let r = rerank(&o, 0, &[4, 1, 3], 2).unwrap();
        assert_eq!(r.items, vec![1, 4]);
        assert!(matches!(rerank(&o, 0, &[1, 1], 1), Err(Error::Spec(_))));
        assert!(rerank(&o, 0, &[1], 2).is_err());
    }

    #[test]
    fn budget_split_validation() {
        assert!(BudgetSplit::new(500, 250, 250).is_ok());
        assert!(matches!(BudgetSplit::new(500, 0, 500), Err(Error::Spec(_))));
        assert!(BudgetSplit::new(500, 251, 250).is_err());
    }

    #[test]
    fn budget_query_spends_exactly_budget() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 300, 1000, 5, 4)).unwrap();
        let anchors = select_anchors(300, 1000, 260, 250, 1).unwrap();
        let indexer = CurIndexer::build(&o, &anchors, Rcond::Default).unwrap();
        let before = o.call_count();
        let split = BudgetSplit::new(500, 250, 250).unwrap();
        let q = anchors.held_out_queries(300)[0];
        let r = query_under_budget(&o, &indexer, q, split, 10).unwrap();
        assert_eq!(o.call_count() - before, 500);
        assert_eq!(r.embed_calls, 250);
        assert_eq!(r.rerank_calls, 250);
        assert_eq!(r.items.len(), 10);
        assert!(query_under_budget(&o, &indexer, q, BudgetSplit { budget: 500, k_i: 0, k_r: 500 }, 10).is_err());
        assert!(query_under_budget(&o, &indexer, q, BudgetSplit::new(20, 10, 10).unwrap(), 11).is_err());
    }

    #[test]
    fn noiseless_pipeline_returns_exact_top_k() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 120, 800, 5, 6)).unwrap();
        let anchors = select_anchors(120, 800, 30, 20, 3).unwrap();
        let indexer = CurIndexer::build(&o, &anchors, Rcond::Default).unwrap();
        let idx = indexer.full_index().unwrap();
        let m = o.materialize();
        for q in anchors.held_out_queries(120).into_iter().take(25) {
            let e = embed_query(&o, &idx, q, idx.k_i()).unwrap();
            let approx = approx_scores(&e, &idx).unwrap();
            for (a, b) in approx.iter().zip(m.row(q)) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
            }
            let retrieved = retrieve_topk(&e, &idx, 100).unwrap();
            let r = retrieve_and_rerank(&o, retrieved, 10).unwrap();
            assert_eq!(r.items, brute_top(m.row(q), 10));
            for k in [1, 5, 10] {
                let split = BudgetSplit::new(40, 20, 20).unwrap();
                let r = query_under_budget(&o, &indexer, q, split, k).unwrap();
                assert_eq!(r.items, brute_top(m.row(q), k));
            }
        }
    }

    #[test]
    fn rerank_never_loses_retrieved_truth() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRankNoisy, 100, 400, 5, 2).with_noise(0.5)).unwrap();
        let anchors = AnchorSet {
            queries: (0..30).collect(),
            items: (0..12).collect(),
            seed: 0,
            strategy: AnchorStrategy::Uniform,
        };
        let idx = build_index(&o, &anchors, Rcond::Default).unwrap();
        let m = o.materialize();
        let k = 10;
        for q in 30..100 {
            let truth: HashSet<usize> = brute_top(m.row(q), k).into_iter().collect();
            let e = embed_query(&o, &idx, q, 12).unwrap();
            let retrieved = retrieve_topk(&e, &idx, 60).unwrap();
            let prefix_hits = retrieved.items[..k].iter().filter(|i| truth.contains(i)).count();
            let reranked = retrieve_and_rerank(&o, retrieved, k).unwrap();
            let hits = reranked.items.iter().filter(|i| truth.contains(i)).count();
            assert!(hits >= prefix_hits);
            let exact = reranked.exact_scores.unwrap();
            assert!(exact.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(scores in prop::collection::vec(-5i32..5, 1..60), k in 1usize..70) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let k = k.min(scores.len());
            prop_assert_eq!(top_k_by_score(&scores, k), brute_top(&scores, k));
        }

        #[test]
        fn retrieved_scores_are_non_increasing(values in prop::collection::vec(-1.0f64..1.0, 3), k in 1usize..20) {
            let emb = DenseMatrix::from_fn(3, 20, |r, c| ((r * 7 + c * 13) % 11) as f64 - 5.0);
            let idx = toy_index(emb, vec![0, 1, 2]);
            let e = QueryEmbedding { query: 0, values, calls: 3 };
            let r = retrieve_topk(&e, &idx, k).unwrap();
            let s = r.approx_scores.unwrap();
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
            let distinct: HashSet<_> = r.items.iter().collect();
            prop_assert_eq!(distinct.len(), k);
        }
    }
}
