//! Offline indexing: anchor selection, anchor-query scoring and latent item
//! embeddings `E = pinv(C_anc) * R_anc`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, DenseMatrix, Rcond};
use crate::oracle::ScoreOracle;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorStrategy {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub queries: Vec<usize>,
    pub items: Vec<usize>,
    pub seed: u64,
    pub strategy: AnchorStrategy,
}

impl AnchorSet {
    pub fn k_q(&self) -> usize {
        self.queries.len()
    }

    pub fn k_i(&self) -> usize {
        self.items.len()
    }

    /// Queries outside the anchor set, ascending.
    pub fn held_out_queries(&self, n_queries: usize) -> Vec<usize> {
        let anchors: HashSet<_> = self.queries.iter().copied().collect();
        (0..n_queries).filter(|q| !anchors.contains(q)).collect()
    }
}

/// Uniform sampling without replacement.
///
/// Each id list is a prefix of a seeded permutation (queries are permuted
/// first, then items), so for a fixed seed smaller anchor sets are prefixes of
/// larger ones.
pub fn select_anchors(n_queries: usize, n_items: usize, k_q: usize, k_i: usize, seed: u64) -> Result<AnchorSet> {
    if k_q == 0 || k_q > n_queries {
        return Err(Error::spec(format!("k_q = {k_q} outside [1, {n_queries}]")));
    }
    if k_i == 0 || k_i > n_items {
        return Err(Error::spec(format!("k_i = {k_i} outside [1, {n_items}]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut queries: Vec<usize> = (0..n_queries).collect();
    queries.shuffle(&mut rng);
    queries.truncate(k_q);
    let mut items: Vec<usize> = (0..n_items).collect();
    items.shuffle(&mut rng);
    items.truncate(k_i);
    Ok(AnchorSet {
        queries,
        items,
        seed,
        strategy: AnchorStrategy::Uniform,
    })
}

fn check_distinct(ids: &[usize], bound: usize, what: &'static str) -> Result<()> {
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

/// Persisted retrieval index: anchor items and the `k_i x n_items` latent item
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CurIndex {
    anchor_items: Vec<usize>,
    anchor_queries: Vec<usize>,
    item_embeddings: DenseMatrix,
    rcond: f64,
    build_cost: u64,
}

impl CurIndex {
    pub fn from_parts(
        anchor_items: Vec<usize>,
        anchor_queries: Vec<usize>,
        item_embeddings: DenseMatrix,
        rcond: f64,
        build_cost: u64,
    ) -> Result<Self> {
        if item_embeddings.rows() != anchor_items.len() {
            return Err(Error::spec(format!(
                "{} anchor items but {} embedding rows",
                anchor_items.len(),
                item_embeddings.rows()
            )));
        }
        if anchor_items.is_empty() {
            return Err(Error::spec("index has no anchor items"));
        }
        check_distinct(&anchor_items, item_embeddings.cols(), "item")?;
        let mut seen = HashSet::new();
        if let Some(d) = anchor_queries.iter().find(|q| !seen.insert(**q)) {
            return Err(Error::spec(format!("duplicate query id {d}")));
        }
        Ok(Self {
            anchor_items,
            anchor_queries,
            item_embeddings,
            rcond,
            build_cost,
        })
    }

    pub fn k_i(&self) -> usize {
        self.anchor_items.len()
    }

    pub fn k_q(&self) -> usize {
        self.anchor_queries.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.cols()
    }

    pub fn anchor_items(&self) -> &[usize] {
        &self.anchor_items
    }

    pub fn anchor_queries(&self) -> &[usize] {
        &self.anchor_queries
    }

    pub fn item_embeddings(&self) -> &DenseMatrix {
        &self.item_embeddings
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    /// Oracle calls spent building `R_anc`.
    pub fn build_cost(&self) -> u64 {
        self.build_cost
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::format::save_index(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::format::load_index(path)
    }
}

/// Anchor-query scores `R_anc` plus a cache of indexes built on prefixes of
/// the anchor-item list.
#[derive(Debug)]
pub struct CurIndexer {
    anchors: AnchorSet,
    r_anc: DenseMatrix,
    build_cost: u64,
    rcond: Rcond,
    cache: Mutex<BTreeMap<usize, Arc<CurIndex>>>,
}

impl CurIndexer {
    /// Scores every anchor query against every item: exactly `k_q * n_items`
    /// oracle calls.
    pub fn build(oracle: &ScoreOracle, anchors: &AnchorSet, rcond: Rcond) -> Result<Self> {
        check_distinct(&anchors.queries, oracle.n_queries(), "query")?;
        check_distinct(&anchors.items, oracle.n_items(), "item")?;
        if anchors.queries.is_empty() || anchors.items.is_empty() {
            return Err(Error::spec("anchor sets must be non-empty"));
        }
        let n_items = oracle.n_items();
        let all_items: Vec<usize> = (0..n_items).collect();
        let rows = anchors
            .queries
            .par_iter()
            .map(|&q| oracle.score_row(q, &all_items))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(rows.len() * n_items);
        for r in rows {
            data.extend(r);
        }
        let r_anc = DenseMatrix::new(anchors.k_q(), n_items, data)?;
        Ok(Self {
            anchors: anchors.clone(),
            r_anc,
            build_cost: (anchors.k_q() * n_items) as u64,
            rcond,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn r_anc(&self) -> &DenseMatrix {
        &self.r_anc
    }

    pub fn build_cost(&self) -> u64 {
        self.build_cost
    }

    pub fn max_k_i(&self) -> usize {
        self.anchors.k_i()
    }

    /// Index over the first `k_i` anchor items. `U` and `E` are recomputed for
    /// the prefix since rows of `E` are coupled through `U`.
    pub fn index(&self, k_i: usize) -> Result<Arc<CurIndex>> {
        if k_i == 0 || k_i > self.max_k_i() {
            return Err(Error::spec(format!("k_i = {k_i} outside [1, {}]", self.max_k_i())));
        }
        if let Some(hit) = self.cache.lock().unwrap().get(&k_i) {
            return Ok(Arc::clone(hit));
        }
        let built = Arc::new(self.compute(k_i)?);
        let mut cache = self.cache.lock().unwrap();
        Ok(Arc::clone(cache.entry(k_i).or_insert(built)))
    }

    pub fn full_index(&self) -> Result<Arc<CurIndex>> {
        self.index(self.max_k_i())
    }

    fn compute(&self, k_i: usize) -> Result<CurIndex> {
        let items = &self.anchors.items[..k_i];
        let k_q = self.anchors.k_q();
        if k_q == k_i {
            log::warn!("k_q = k_i = {k_i}: the anchor intersection is square and tends to be ill-conditioned");
        }
        let c_anc = self.r_anc.select_cols(items);
        if c_anc.is_zero() {
            return Err(Error::Degenerate("anchor intersection C_anc is all zeros".into()));
        }
        let u = pseudo_inverse(&c_anc, self.rcond)?;
        let embeddings = u.matmul(&self.r_anc)?;
        CurIndex::from_parts(
            items.to_vec(),
            self.anchors.queries.clone(),
            embeddings,
            self.rcond.resolve(c_anc.rows(), c_anc.cols()),
            self.build_cost,
        )
    }
}

/// Scores `R_anc` and returns the index over all anchor items.
pub fn build_index(oracle: &ScoreOracle, anchors: &AnchorSet, rcond: Rcond) -> Result<CurIndex> {
    let indexer = CurIndexer::build(oracle, anchors, rcond)?;
    let index = indexer.full_index()?;
    Ok(Arc::try_unwrap(index).unwrap_or_else(|a| (*a).clone()))
}

pub fn save_index(index: &CurIndex, path: &Path) -> Result<()> {
    index.save(path)
}

pub fn load_index(path: &Path) -> Result<CurIndex> {
    CurIndex::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate, MatrixOracle, SyntheticKind, SyntheticSpec};

    #[test]
    fn exhaustive_and_deterministic_selection() {
        let a = select_anchors(10, 20, 10, 5, 3).unwrap();
        let mut q = a.queries.clone();
        q.sort_unstable();
        assert_eq!(q, (0..10).collect::<Vec<_>>());
        assert_eq!(a, select_anchors(10, 20, 10, 5, 3).unwrap());
        assert_ne!(a.items, select_anchors(10, 20, 10, 5, 4).unwrap().items);
    }

    #[test]
    fn smaller_selections_are_prefixes() {
        let big = select_anchors(50, 80, 20, 30, 9).unwrap();
        let small = select_anchors(50, 80, 5, 10, 9).unwrap();
        assert_eq!(small.queries, big.queries[..5]);
        assert_eq!(small.items, big.items[..10]);
    }

    #[test]
    fn selection_frequency_is_uniform() {
        let mut counts = [0usize; 100];
        for seed in 1..=100 {
            for q in select_anchors(100, 1, 10, 1, seed).unwrap().queries {
                counts[q] += 1;
            }
        }
        // Per-id counts are binomial(100, 0.1): about 6% of ids fall outside
        // 0.10 +- 0.05 by chance, so the band is checked on the bulk.
        let mean = counts.iter().sum::<usize>() as f64 / (100.0 * 100.0);
        assert!((mean - 0.10).abs() < 1e-12);
        let within = counts.iter().filter(|&&c| (c as f64 / 100.0 - 0.10).abs() <= 0.05).count();
        assert!(within >= 90, "{within} of 100 ids within 0.10 +- 0.05");
    }

    #[test]
    fn selection_rejects_out_of_range() {
        assert!(select_anchors(5, 5, 0, 1, 0).is_err());
        assert!(select_anchors(5, 5, 6, 1, 0).is_err());
        assert!(select_anchors(5, 5, 1, 6, 0).is_err());
    }

    #[test]
    fn identity_oracle_embeddings() {
        let o = ScoreOracle::new(MatrixOracle::new(DenseMatrix::identity(4)));
        let anchors = AnchorSet {
            queries: vec![0, 1],
            items: vec![0, 1],
            seed: 0,
            strategy: AnchorStrategy::Uniform,
        };
        let idx = build_index(&o, &anchors, Rcond::Default).unwrap();
        let expected = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(idx.item_embeddings(), &expected);
        assert_eq!(idx.build_cost(), 8);
        assert_eq!(o.call_count(), 8);
    }

    #[test]
    fn all_zero_intersection_is_degenerate() {
        let o = ScoreOracle::new(MatrixOracle::new(DenseMatrix::identity(4)));
        let anchors = AnchorSet {
            queries: vec![0, 1],
            items: vec![2, 3],
            seed: 0,
            strategy: AnchorStrategy::Uniform,
        };
        assert!(matches!(build_index(&o, &anchors, Rcond::Default), Err(Error::Degenerate(_))));
    }

    #[test]
    fn build_cost_is_exact_and_build_is_deterministic() {
        let spec = SyntheticSpec::new(SyntheticKind::LowRank, 60, 90, 5, 2);
        let o = generate(spec).unwrap();
        let anchors = select_anchors(60, 90, 20, 25, 1).unwrap();
        let a = build_index(&o, &anchors, Rcond::Default).unwrap();
        assert_eq!(o.call_count(), 20 * 90);
        assert_eq!(a.build_cost(), 20 * 90);
        let b = build_index(&o, &anchors, Rcond::Default).unwrap();
        assert_eq!(a.item_embeddings().data(), b.item_embeddings().data());
    }

    #[test]
    fn held_out_rows_are_reproduced_on_exact_low_rank() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 80, 120, 5, 3)).unwrap();
        let m = o.materialize();
        let anchors = select_anchors(80, 120, 20, 25, 5).unwrap();
        let idx = build_index(&o, &anchors, Rcond::Default).unwrap();
        for q in anchors.held_out_queries(80) {
            let e: Vec<f64> = idx.anchor_items().iter().map(|&i| m.get(q, i)).collect();
            let approx = idx.item_embeddings().vecmat(&e).unwrap();
            let diff: f64 = approx.iter().zip(m.row(q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = m.row(q).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-8, "query {q}: {}", diff / norm);
        }
    }

    #[test]
    fn anchor_rows_follow_skeleton_identity() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 40, 60, 4, 8)).unwrap();
        let anchors = select_anchors(40, 60, 10, 6, 2).unwrap();
        let indexer = CurIndexer::build(&o, &anchors, Rcond::Default).unwrap();
        let idx = indexer.full_index().unwrap();
        let r = indexer.r_anc();
        for (row, _) in anchors.queries.iter().enumerate() {
            let e: Vec<f64> = anchors.items.iter().map(|&i| r.get(row, i)).collect();
            let approx = idx.item_embeddings().vecmat(&e).unwrap();
            for (a, b) in approx.iter().zip(r.row(row)) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn sub_indexes_are_cached_prefixes() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 30, 50, 3, 1)).unwrap();
        let anchors = select_anchors(30, 50, 10, 8, 0).unwrap();
        let indexer = CurIndexer::build(&o, &anchors, Rcond::Default).unwrap();
        let a = indexer.index(4).unwrap();
        let b = indexer.index(4).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(a.anchor_items(), &anchors.items[..4]);
        assert_eq!(a.item_embeddings().shape(), (4, 50));
        assert!(indexer.index(0).is_err());
        assert!(indexer.index(9).is_err());
        assert_eq!(o.call_count(), 10 * 50);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.anci");
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 30, 50, 3, 1)).unwrap();
        let idx = build_index(&o, &select_anchors(30, 50, 6, 4, 0).unwrap(), Rcond::Default).unwrap();
        idx.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = CurIndex::load(&p).unwrap();
        assert_eq!(loaded, idx);
        loaded.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);

        let mut bad = first.clone();
        bad[1] = b'Z';
        std::fs::write(&p, bad).unwrap();
        assert!(matches!(CurIndex::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &first[..first.len() - 3]).unwrap();
        assert!(matches!(CurIndex::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn large_item_count_metadata_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.anci");
        let n_items = 10031;
        let idx = CurIndex::from_parts(vec![0, 17], vec![3], DenseMatrix::zeros(2, n_items), 1e-12, 10031).unwrap();
        idx.save(&p).unwrap();
        assert_eq!(CurIndex::load(&p).unwrap().n_items(), 10031);
    }
}
