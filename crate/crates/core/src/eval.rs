//! Ground truth, Top-k-Recall@k_r and the sweeps behind the recall curves and
//! anchor-grid heatmaps.
//!
//! Ground truth is always computed on an unmetered oracle handle, so method
//! call counts never include it.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::baselines::{retrieve_with, EmbeddingRetriever};
use crate::error::{Error, Result};
use crate::format::key_values_to_string;
use crate::index::{select_anchors, AnchorSet, CurIndex, CurIndexer};
use crate::linalg::{oracle_u, pseudo_inverse, DenseMatrix, Rcond};
use crate::oracle::ScoreOracle;
use crate::retrieve::{embed_query, rerank, retrieve_topk, top_k_by_score, BudgetSplit, RetrievalResult};
use crate::rng::{stream, streams};

/// Fraction of test queries held back to pick budget splits.
pub const TUNING_FRACTION: f64 = 0.1;

pub const REPORT_HEADER: &str = "method,k,kr_or_budget,split_ki,split_kr,recall_mean,recall_stderr,n_queries,seed";

/// Exact top-`k` under the oracle, ties to the lower id. Costs `n_items`
/// calls on the handle it is given.
pub fn brute_force_topk(oracle: &ScoreOracle, q: usize, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = oracle.n_items();
    if k == 0 || k > n {
        return Err(Error::spec(format!("k = {k} outside [1, {n}]")));
    }
    let scores = oracle.score_row(q, &(0..n).collect::<Vec<_>>())?;
    let ids = top_k_by_score(&scores, k);
    let top = ids.iter().map(|&i| scores[i]).collect();
    Ok((ids, top))
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    k_max: usize,
    entries: BTreeMap<usize, (Vec<usize>, Vec<f64>)>,
}

impl GroundTruth {
    /// Exact top-`k_max` for each query, scored through a ledger-exempt handle.
    pub fn compute(oracle: &ScoreOracle, queries: &[usize], k_max: usize) -> Result<Self> {
        let side = oracle.unmetered();
        let tops = queries
            .par_iter()
            .map(|&q| brute_force_topk(&side, q, k_max).map(|t| (q, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            k_max,
            entries: tops.into_iter().collect(),
        })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn top(&self, q: usize, k: usize) -> Result<&[usize]> {
        if k > self.k_max {
            return Err(Error::spec(format!("ground truth holds only top-{}", self.k_max)));
        }
        let (ids, _) = self
            .entries
            .get(&q)
            .ok_or_else(|| Error::spec(format!("no ground truth for query {q}")))?;
        Ok(&ids[..k])
    }

    pub fn scores(&self, q: usize) -> Option<&[f64]> {
        self.entries.get(&q).map(|(_, s)| s.as_slice())
    }
}

/// `100 * |retrieved ∩ truth| / |truth|`.
pub fn recall_at(retrieved: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::spec("empty ground-truth list"));
    }
    let truth_set: HashSet<usize> = truth.iter().copied().collect();
    if truth_set.len() != truth.len() {
        return Err(Error::spec("duplicate id in ground truth"));
    }
    let mut seen = HashSet::with_capacity(retrieved.len());
    let mut hits = 0usize;
    for id in retrieved {
        if !seen.insert(id) {
            return Err(Error::spec(format!("duplicate retrieved id {id}")));
        }
        hits += usize::from(truth_set.contains(id));
    }
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Mean and standard error of the mean; summed in input order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub method: String,
    pub k: usize,
    pub kr_or_budget: usize,
    pub split_ki: usize,
    pub split_kr: usize,
    pub recall_mean: f64,
    pub recall_stderr: f64,
    pub n_queries: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
    pub config: Vec<(String, String)>,
}

impl RecallReport {
    pub fn merge(&mut self, other: RecallReport) {
        self.rows.extend(other.rows);
        for (k, v) in other.config {
            if !self.config.iter().any(|(k2, v2)| *k2 == k && *v2 == v) {
                self.config.push((k, v));
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{},{}",
                r.method, r.k, r.kr_or_budget, r.split_ki, r.split_kr, r.recall_mean, r.recall_stderr, r.n_queries, r.seed
            )
            .unwrap();
        }
        out
    }

    pub fn config_snapshot(&self) -> String {
        key_values_to_string(self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Writes `<stem>.csv` and `<stem>.config` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let cfg = dir.join(format!("{stem}.config"));
        std::fs::write(&cfg, self.config_snapshot()).map_err(|e| Error::io(&cfg, e))
    }

    pub fn find(&self, method: &str, k: usize, kr_or_budget: usize) -> Option<&RecallRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.k == k && r.kr_or_budget == kr_or_budget)
    }
}

/// Method under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// CUR retrieval; `k_i` is used by the fixed-`k_r` sweep, budget sweeps
    /// choose their own split.
    Anncur { indexer: &'a CurIndexer, k_i: usize },
    /// A fixed, possibly loaded, CUR index used at its full `k_i`.
    Index(&'a CurIndex),
    Embedding(&'a EmbeddingRetriever),
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Anncur { k_i, .. } => format!("anncur_{k_i}"),
            Method::Index(index) => format!("anncur_{}", index.k_i()),
            Method::Embedding(r) => r.name.clone(),
        }
    }

    fn retrieve(&self, oracle: &ScoreOracle, q: usize, k_r: usize) -> Result<RetrievalResult> {
        match *self {
            Method::Anncur { indexer, k_i } => {
                let index = indexer.index(k_i)?;
                let e = embed_query(oracle, &index, q, k_i)?;
                retrieve_topk(&e, &index, k_r)
            }
            Method::Index(index) => retrieve_topk(&embed_query(oracle, index, q, index.k_i())?, index, k_r),
            Method::Embedding(r) => retrieve_with(r, oracle, q, k_r),
        }
    }

    fn embed_cost(&self) -> usize {
        match *self {
            Method::Anncur { k_i, .. } => k_i,
            Method::Index(index) => index.k_i(),
            Method::Embedding(r) => r.cost_per_query() as usize,
        }
    }
}

fn check_lists(queries: &[usize], ks: &[usize], truth: &GroundTruth) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::spec("empty query set"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::spec("k list must be non-empty and positive"));
    }
    if let Some(k) = ks.iter().find(|&&k| k > truth.k_max()) {
        return Err(Error::spec(format!("k = {k} exceeds ground truth depth {}", truth.k_max())));
    }
    Ok(())
}

/// Recall of every `(k, k_r)` cell when each method retrieves `k_r` items.
/// Cells with `k_r < k` keep denominator `k`, capping recall below 100; they
/// are listed under `capped_cells` in the config.
pub fn sweep_recall_vs_kr(
    method: Method<'_>,
    oracle: &ScoreOracle,
    truth: &GroundTruth,
    test_queries: &[usize],
    k_list: &[usize],
    kr_list: &[usize],
    seed: u64,
) -> Result<RecallReport> {
    check_lists(test_queries, k_list, truth)?;
    let kr_max = *kr_list.iter().max().ok_or_else(|| Error::spec("empty k_r list"))?;
    if kr_list.contains(&0) {
        return Err(Error::spec("k_r must be positive"));
    }
    let retrieved = test_queries
        .par_iter()
        .map(|&q| method.retrieve(oracle, q, kr_max).map(|r| r.items))
        .collect::<Result<Vec<_>>>()?;

    let name = method.name();
    let mut report = RecallReport::default();
    let mut capped = Vec::new();
    for &k in k_list {
        for &kr in kr_list {
            if kr < k {
                capped.push(format!("{k}@{kr}"));
            }
            let per_query = test_queries
                .iter()
                .zip(&retrieved)
                .map(|(&q, items)| recall_at(&items[..kr], truth.top(q, k)?))
                .collect::<Result<Vec<_>>>()?;
            let (mean, se) = mean_stderr(&per_query);
            report.rows.push(RecallRow {
                method: name.clone(),
                k,
                kr_or_budget: kr,
                split_ki: method.embed_cost(),
                split_kr: kr,
                recall_mean: mean,
                recall_stderr: se,
                n_queries: test_queries.len(),
                seed,
            });
        }
    }
    report.config.push(("mode".into(), "kr".into()));
    if !capped.is_empty() {
        log::warn!("{name}: k_r < k in cells {capped:?}; recall is capped below 100");
        report.config.push((format!("capped_cells.{name}"), capped.join(";")));
    }
    Ok(report)
}

/// Splits test queries into a seeded tuning subset (10%, at least one) and the
/// evaluation remainder.
pub fn tuning_split(test_queries: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if test_queries.len() < 2 {
        return Err(Error::spec("budget sweeps need at least two test queries"));
    }
    let mut shuffled = test_queries.to_vec();
    shuffled.shuffle(&mut stream(seed, streams::TUNING));
    let n_tune = ((test_queries.len() as f64 * TUNING_FRACTION).round() as usize).clamp(1, test_queries.len() - 1);
    let mut tune = shuffled[..n_tune].to_vec();
    let mut eval = shuffled[n_tune..].to_vec();
    tune.sort_unstable();
    eval.sort_unstable();
    Ok((tune, eval))
}

/// Reranked top-`k_r` lists of one CUR budget split for each query.
fn run_split(oracle: &ScoreOracle, indexer: &CurIndexer, queries: &[usize], split: BudgetSplit) -> Result<Vec<Vec<usize>>> {
    let index = indexer.index(split.k_i)?;
    queries
        .par_iter()
        .map(|&q| {
            let e = embed_query(oracle, &index, q, split.k_i)?;
            let retrieved = retrieve_topk(&e, &index, split.k_r)?;
            Ok(rerank(oracle, q, &retrieved.items, split.k_r)?.items)
        })
        .collect()
}

fn mean_recall(lists: &[Vec<usize>], queries: &[usize], truth: &GroundTruth, k: usize) -> Result<(f64, f64)> {
    let per_query = queries
        .iter()
        .zip(lists)
        .map(|(&q, items)| recall_at(&items[..k.min(items.len())], truth.top(q, k)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_stderr(&per_query))
}

/// Mean Top-k-Recall of a fixed CUR split (embed `k_i`, rerank `k_r`, return
/// top `k`) for each `k` in `k_list`.
pub fn evaluate_split(
    oracle: &ScoreOracle,
    indexer: &CurIndexer,
    truth: &GroundTruth,
    queries: &[usize],
    split: BudgetSplit,
    k_list: &[usize],
) -> Result<Vec<f64>> {
    check_lists(queries, k_list, truth)?;
    let split = BudgetSplit::new(split.budget, split.k_i, split.k_r)?;
    if let Some(k) = k_list.iter().find(|&&k| k > split.k_r) {
        return Err(Error::spec(format!("k = {k} exceeds k_r = {}", split.k_r)));
    }
    let lists = run_split(oracle, indexer, queries, split)?;
    k_list
        .iter()
        .map(|&k| mean_recall(&lists, queries, truth, k).map(|(m, _)| m))
        .collect()
}

/// `k_i = round(fraction * budget)` clamped to the feasible range for `k`.
fn split_for(budget: usize, fraction: f64, k: usize, max_k_i: usize, n_items: usize) -> Option<BudgetSplit> {
    if budget < k + 1 {
        return None;
    }
    let hi = (budget - k).min(max_k_i);
    let k_i = ((fraction * budget as f64).round() as usize).clamp(1, hi);
    let k_r = (budget - k_i).min(n_items);
    (k_r >= k).then_some(BudgetSplit { budget, k_i, k_r })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSplit {
    pub k: usize,
    pub budget: usize,
    pub split: BudgetSplit,
    pub tuning_recall: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BudgetSweep {
    pub report: RecallReport,
    pub best_splits: Vec<BestSplit>,
}

/// Recall under a fixed per-query call budget.
///
/// CUR picks, per `(k, budget)`, the split from `split_fractions` with the
/// best recall on the tuning subset and reports recall on the remaining test
/// queries. Embedding baselines spend whatever their query embedding does not
/// use on reranking.
#[allow(clippy::too_many_arguments)]
pub fn sweep_recall_vs_budget(
    method: Method<'_>,
    oracle: &ScoreOracle,
    truth: &GroundTruth,
    test_queries: &[usize],
    k_list: &[usize],
    budgets: &[usize],
    split_fractions: &[f64],
    seed: u64,
) -> Result<BudgetSweep> {
    check_lists(test_queries, k_list, truth)?;
    let (tune, eval) = tuning_split(test_queries, seed)?;
    let mut sweep = BudgetSweep::default();
    sweep.report.config.extend([
        ("mode".to_string(), "budget".to_string()),
        ("tuning_fraction".to_string(), TUNING_FRACTION.to_string()),
        ("n_tuning_queries".to_string(), tune.len().to_string()),
        ("split_selection".to_string(), "best tuning-subset recall; ties to smaller k_i".to_string()),
    ]);

    match method {
        Method::Anncur { indexer, .. } => {
            if split_fractions.is_empty() {
                return Err(Error::spec("empty split grid"));
            }
            sweep.report.config.push((
                "anncur_k_i_semantics".into(),
                "sub-index rebuilt on the anchor-item prefix for each k_i".into(),
            ));
            let n_items = oracle.n_items();
            for &budget in budgets {
                if budget < 2 {
                    return Err(Error::spec(format!("budget {budget} < 2 leaves no room for k_i and k_r")));
                }
                let mut splits: Vec<BudgetSplit> = k_list
                    .iter()
                    .flat_map(|&k| {
                        split_fractions
                            .iter()
                            .filter_map(move |&f| split_for(budget, f, k, indexer.max_k_i(), n_items))
                    })
                    .collect();
                splits.sort_by_key(|s| s.k_i);
                splits.dedup();
                let mut tune_lists = Vec::with_capacity(splits.len());
                let mut eval_lists = Vec::with_capacity(splits.len());
                for &s in &splits {
                    tune_lists.push(run_split(oracle, indexer, &tune, s)?);
                    eval_lists.push(run_split(oracle, indexer, &eval, s)?);
                }
                for &k in k_list {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, s) in splits.iter().enumerate() {
                        if s.k_r < k {
                            continue;
                        }
                        let (r, _) = mean_recall(&tune_lists[j], &tune, truth, k)?;
                        if best.is_none_or(|(_, b)| r > b) {
                            best = Some((j, r));
                        }
                    }
                    let Some((j, tuning_recall)) = best else {
                        log::warn!("budget {budget} has no feasible split for k = {k}");
                        continue;
                    };
                    let (mean, se) = mean_recall(&eval_lists[j], &eval, truth, k)?;
                    let s = splits[j];
                    sweep.report.rows.push(RecallRow {
                        method: "anncur".into(),
                        k,
                        kr_or_budget: budget,
                        split_ki: s.k_i,
                        split_kr: s.k_r,
                        recall_mean: mean,
                        recall_stderr: se,
                        n_queries: eval.len(),
                        seed,
                    });
                    sweep.best_splits.push(BestSplit {
                        k,
                        budget,
                        split: s,
                        tuning_recall,
                    });
                }
            }
        }
        Method::Index(_) | Method::Embedding(_) => {
            let cost = method.embed_cost();
            let name = method.name();
            let n_items = oracle.n_items();
            for &budget in budgets {
                let k_r = budget.saturating_sub(cost).min(n_items);
                if k_r == 0 {
                    log::warn!("{name}: budget {budget} does not cover query embedding");
                    continue;
                }
                let lists = eval
                    .par_iter()
                    .map(|&q| {
                        let r = method.retrieve(oracle, q, k_r)?;
                        Ok(rerank(oracle, q, &r.items, k_r)?.items)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for &k in k_list {
                    let (mean, se) = mean_recall(&lists, &eval, truth, k)?;
                    sweep.report.rows.push(RecallRow {
                        method: name.clone(),
                        k,
                        kr_or_budget: budget,
                        split_ki: cost,
                        split_kr: k_r,
                        recall_mean: mean,
                        recall_stderr: se,
                        n_queries: eval.len(),
                        seed,
                    });
                }
            }
        }
    }
    Ok(sweep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMetric {
    /// Top-k-Recall@k_r without reranking.
    Recall { k: usize, k_r: usize },
    /// Relative Frobenius error on the held-out rows.
    FrobError,
}

impl GridMetric {
    pub fn name(&self) -> String {
        match self {
            GridMetric::Recall { k, k_r } => format!("top{k}_recall@{k_r}"),
            GridMetric::FrobError => "frob_error".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub k_q: usize,
    pub k_i: usize,
    pub value: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub metric: GridMetric,
    pub cells: Vec<HeatmapCell>,
}

impl Heatmap {
    pub fn get(&self, k_q: usize, k_i: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.k_q == k_q && c.k_i == k_i).map(|c| c.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k_q,k_i,metric,value,n_queries\n");
        let name = self.metric.name();
        for c in &self.cells {
            writeln!(out, "{},{},{},{:.10},{}", c.k_q, c.k_i, name, c.value, c.n_queries).unwrap();
        }
        out
    }
}

/// Builds an index for every `(k_q, k_i)` cell and evaluates `metric` on the
/// queries outside that cell's anchor set. Anchor lists are prefixes of one
/// seeded permutation, so cells are nested.
pub fn grid_heatmap(
    oracle: &ScoreOracle,
    k_q_list: &[usize],
    k_i_list: &[usize],
    metric: GridMetric,
    seed: u64,
    rcond: Rcond,
) -> Result<Heatmap> {
    if k_q_list.is_empty() || k_i_list.is_empty() {
        return Err(Error::spec("grid lists must be non-empty"));
    }
    let (nq, ni) = (oracle.n_queries(), oracle.n_items());
    if let Some(&k_q) = k_q_list.iter().find(|&&k| k >= nq) {
        return Err(Error::spec(format!("k_q = {k_q} leaves no held-out queries out of {nq}")));
    }
    let max_k_i = *k_i_list.iter().max().unwrap();
    let side = oracle.unmetered();
    let mut cells = Vec::new();
    for &k_q in k_q_list {
        let anchors = select_anchors(nq, ni, k_q, max_k_i, seed)?;
        let held_out = anchors.held_out_queries(nq);
        let indexer = CurIndexer::build(&side, &anchors, rcond)?;
        let rows = side.materialize_rows(&held_out);
        let truth = match metric {
            GridMetric::Recall { k, .. } => Some(GroundTruth::compute(&side, &held_out, k)?),
            GridMetric::FrobError => None,
        };
        for &k_i in k_i_list {
            let index = indexer.index(k_i)?;
            let items = index.anchor_items();
            let emb = index.item_embeddings();
            let per_query = (0..held_out.len())
                .into_par_iter()
                .map(|h| -> Result<(f64, f64)> {
                    let row = rows.row(h);
                    let e: Vec<f64> = items.iter().map(|&i| row[i]).collect();
                    let approx = emb.vecmat(&e)?;
                    Ok(match metric {
                        GridMetric::FrobError => {
                            let err = approx.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
                            let norm = row.iter().map(|b| b * b).sum();
                            (err, norm)
                        }
                        GridMetric::Recall { k, k_r } => {
                            let top = top_k_by_score(&approx, k_r);
                            let t = truth.as_ref().unwrap().top(held_out[h], k)?;
                            (recall_at(&top, t)?, 0.0)
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let value = match metric {
                GridMetric::FrobError => {
                    let err: f64 = per_query.iter().map(|p| p.0).sum();
                    let norm: f64 = per_query.iter().map(|p| p.1).sum();
                    if norm == 0.0 {
                        return Err(Error::Degenerate("held-out rows are all zero".into()));
                    }
                    (err / norm).sqrt()
                }
                GridMetric::Recall { .. } => {
                    let v: Vec<f64> = per_query.iter().map(|p| p.0).collect();
                    mean_stderr(&v).0
                }
            };
            cells.push(HeatmapCell {
                k_q,
                k_i,
                value,
                n_queries: held_out.len(),
            });
        }
    }
    Ok(Heatmap { metric, cells })
}

/// Which joining matrix to use for an analysis-only CUR reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Joining {
    /// `pinv(M[anchor queries, anchor items])`.
    Skeleton,
    /// `pinv(C) M pinv(R)`; needs the whole matrix.
    Oracle,
}

/// Relative Frobenius error of `C U R` on the non-anchor rows, computed from
/// the full materialised matrix.
pub fn heldout_approx_error(oracle: &ScoreOracle, anchors: &AnchorSet, joining: Joining, rcond: Rcond) -> Result<f64> {
    let m = oracle.materialize();
    heldout_approx_error_on(&m, anchors, joining, rcond)
}

pub fn heldout_approx_error_on(m: &DenseMatrix, anchors: &AnchorSet, joining: Joining, rcond: Rcond) -> Result<f64> {
    let c = m.select_cols(&anchors.items);
    let r = m.select_rows(&anchors.queries);
    let u = match joining {
        Joining::Skeleton => pseudo_inverse(&r.select_cols(&anchors.items), rcond)?,
        Joining::Oracle => oracle_u(&c, m, &r, rcond)?,
    };
    let held = anchors.held_out_queries(m.rows());
    if held.is_empty() {
        return Err(Error::spec("no held-out queries"));
    }
    let approx = c.select_rows(&held).matmul(&u)?.matmul(&r)?;
    crate::linalg::frob_rel_error(&m.select_rows(&held), &approx)
}
