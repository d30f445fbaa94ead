//! Linear dual encoder distilled from oracle scores.
//!
//! Queries and items carry latent feature vectors `x_q`, `y_i` of dimension
//! `r`; the model scores `(W_q x_q) . (W_i y_i)` with `W_q`, `W_i` of shape
//! `d x r`. Two objectives over the oracle's top-`k_d` items `T(q)`:
//!
//! * `Match`: cross-entropy from `softmax(oracle scores on T(q))` to
//!   `softmax(model scores on T(q))`, temperature 1.
//! * `Pair`: logistic loss `log(1 + exp(-(s_pos - s_neg)))` on `k_d` pairs
//!   formed by the j-th item of `T(q)` and the j-th hard negative, the model's
//!   top-ranked items outside `T(q)`. Negatives are re-mined once per epoch.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format;
use crate::linalg::DenseMatrix;
use crate::oracle::ScoreOracle;
use crate::retrieve::top_k_by_score;
use crate::rng::rng_from_seed;

use super::{EmbeddingRetriever, QueryEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeLoss {
    Match,
    Pair,
}

impl DeLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            DeLoss::Match => "match",
            DeLoss::Pair => "pair",
        }
    }
}

impl std::str::FromStr for DeLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(DeLoss::Match),
            "pair" => Ok(DeLoss::Pair),
            other => Err(Error::spec(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeHyper {
    /// Embedding dimension; `None` means `2 * r`.
    pub d: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DeHyper {
    fn default() -> Self {
        Self {
            d: None,
            lr: 1e-2,
            epochs: 50,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDeModel {
    pub w_query: DenseMatrix,
    pub w_item: DenseMatrix,
    pub loss: DeLoss,
    /// Mean per-query training loss before training, then after each epoch.
    pub log: Vec<f64>,
}

impl LinearDeModel {
    /// Random initialisation with `N(0, 1/d)` entries.
    pub fn init(r: usize, d: usize, loss: DeLoss, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = |_, _| -> f64 { rng.sample::<f64, _>(StandardNormal) * scale };
        let w_query = DenseMatrix::from_fn(d, r, &mut draw);
        let w_item = DenseMatrix::from_fn(d, r, &mut draw);
        Self {
            w_query,
            w_item,
            loss,
            log: Vec::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.w_query.rows()
    }

    pub fn r(&self) -> usize {
        self.w_query.cols()
    }

    fn project(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|k| w.row(k).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn embed_query(&self, x: &[f64]) -> Vec<f64> {
        Self::project(&self.w_query, x)
    }

    pub fn embed_item(&self, y: &[f64]) -> Vec<f64> {
        Self::project(&self.w_item, y)
    }

    /// `d x n_items` item embeddings from an `n_items x r` feature table.
    pub fn item_embeddings(&self, item_features: &DenseMatrix) -> DenseMatrix {
        item_features.matmul(&self.w_item.transpose()).expect("feature width matches r").transpose()
    }

    /// Retriever that embeds queries from the oracle's latent features.
    pub fn retriever(&self, oracle: &ScoreOracle) -> Result<EmbeddingRetriever> {
        let items = item_feature_table(oracle)?;
        Ok(EmbeddingRetriever::new(
            format!("linear_de_{}", self.loss.as_str()),
            Box::new(LinearQueries(self.w_query.clone())),
            self.item_embeddings(&items),
        ))
    }

    /// Writes `[W_q; W_i]` as an `ANCM` matrix followed by a metadata blob.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut stacked = self.w_query.data().to_vec();
        stacked.extend_from_slice(self.w_item.data());
        let m = DenseMatrix::new(2 * self.d(), self.r(), stacked)?;
        let mut meta = extra.clone();
        meta.insert("d".into(), self.d().to_string());
        meta.insert("r".into(), self.r().to_string());
        meta.insert("loss".into(), self.loss.as_str().into());
        let log: Vec<String> = self.log.iter().map(|v| format!("{v:e}")).collect();
        meta.insert("log".into(), log.join(","));
        format::write_matrix_with_metadata(path, &m, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, meta) = format::read_matrix_with_metadata(path)?;
        let bad = |what: &str| Error::format(path, format!("checkpoint metadata: {what}"));
        let d: usize = meta.get("d").and_then(|v| v.parse().ok()).ok_or_else(|| bad("d"))?;
        let loss: DeLoss = meta.get("loss").and_then(|v| v.parse().ok()).ok_or_else(|| bad("loss"))?;
        if m.rows() != 2 * d {
            return Err(bad("row count does not equal 2d"));
        }
        let log = meta
            .get("log")
            .filter(|s| !s.is_empty())
            .map(|s| s.split(',').map(|v| v.parse::<f64>().map_err(|_| bad("log"))).collect())
            .transpose()?
            .unwrap_or_default();
        let w_query = m.select_rows(&(0..d).collect::<Vec<_>>());
        let w_item = m.select_rows(&(d..2 * d).collect::<Vec<_>>());
        Ok(Self {
            w_query,
            w_item,
            loss,
            log,
        })
    }
}

#[derive(Debug, Clone)]
struct LinearQueries(DenseMatrix);

impl QueryEmbedder for LinearQueries {
    fn embed(&self, oracle: &ScoreOracle, q: usize) -> Result<Vec<f64>> {
        Ok(LinearDeModel::project(&self.0, oracle.query_features(q)?))
    }

    fn cost(&self) -> u64 {
        0
    }
}

fn item_feature_table(oracle: &ScoreOracle) -> Result<DenseMatrix> {
    let n = oracle.n_items();
    let rows = (0..n).map(|i| oracle.item_features(i).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
    Ok(DenseMatrix::from_rows(&rows))
}

/// Training inputs: features, oracle scores for every training query over all
/// items, and each query's oracle top-`k_d` list.
#[derive(Debug, Clone)]
pub struct DistillationData {
    /// `n_train x r`.
    pub query_features: DenseMatrix,
    /// `n_items x r`.
    pub item_features: DenseMatrix,
    /// `n_train x n_items`.
    pub target_scores: DenseMatrix,
    pub k_d: usize,
    pub target_top: Vec<Vec<usize>>,
}

impl DistillationData {
    pub fn new(query_features: DenseMatrix, item_features: DenseMatrix, target_scores: DenseMatrix, k_d: usize) -> Result<Self> {
        let n_items = item_features.rows();
        if query_features.cols() != item_features.cols() {
            return Err(Error::spec("query and item features differ in width"));
        }
        if target_scores.shape() != (query_features.rows(), n_items) {
            return Err(Error::spec(format!(
                "target scores {:?} do not match {} queries x {n_items} items",
                target_scores.shape(),
                query_features.rows()
            )));
        }
        if k_d == 0 || k_d > n_items {
            return Err(Error::spec(format!("k_d = {k_d} outside [1, {n_items}]")));
        }
        let target_top = (0..target_scores.rows())
            .map(|q| top_k_by_score(target_scores.row(q), k_d))
            .collect();
        Ok(Self {
            query_features,
            item_features,
            target_scores,
            k_d,
            target_top,
        })
    }

    /// Scores each training query against every item with the metered oracle.
    pub fn from_oracle(oracle: &ScoreOracle, train_queries: &[usize], k_d: usize) -> Result<Self> {
        if train_queries.is_empty() {
            return Err(Error::spec("no training queries"));
        }
        let n = oracle.n_items();
        let all: Vec<usize> = (0..n).collect();
        let rows = train_queries
            .par_iter()
            .map(|&q| oracle.score_row(q, &all))
            .collect::<Result<Vec<_>>>()?;
        let features = train_queries
            .iter()
            .map(|&q| oracle.query_features(q).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            DenseMatrix::from_rows(&features),
            item_feature_table(oracle)?,
            DenseMatrix::from_rows(&rows),
            k_d,
        )
    }

    pub fn n_train(&self) -> usize {
        self.query_features.rows()
    }
}

/// Hard negatives per training query: the model's top-ranked items that are
/// not in the oracle top-`k_d`, `k_d` of them (fewer if items run out).
pub fn mine_negatives(model: &LinearDeModel, data: &DistillationData) -> Vec<Vec<usize>> {
    let items = model.item_embeddings(&data.item_features);
    (0..data.n_train())
        .into_par_iter()
        .map(|t| {
            let u = model.embed_query(data.query_features.row(t));
            let scores = items.vecmat(&u).expect("dimension matches");
            let positives: HashSet<usize> = data.target_top[t].iter().copied().collect();
            top_k_by_score(&scores, data.k_d + positives.len())
                .into_iter()
                .filter(|i| !positives.contains(i))
                .take(data.k_d)
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed loss over the training rows `rows`, with gradients with respect to
/// `W_q` and `W_i`. `negatives` is only read for [`DeLoss::Pair`].
pub fn loss_and_gradient(
    model: &LinearDeModel,
    data: &DistillationData,
    rows: &[usize],
    negatives: &[Vec<usize>],
) -> (f64, DenseMatrix, DenseMatrix) {
    let (d, r) = (model.d(), model.r());
    let mut g_query = DenseMatrix::zeros(d, r);
    let mut g_item = DenseMatrix::zeros(d, r);
    let mut total = 0.0;

    for &t in rows {
        let x = data.query_features.row(t);
        let u = model.embed_query(x);
        // (item, dL/ds_item) contributions for this query.
        let mut score_grads: Vec<(usize, f64)> = Vec::new();
        match model.loss {
            DeLoss::Match => {
                let top = &data.target_top[t];
                let target: Vec<f64> = top.iter().map(|&i| data.target_scores.get(t, i)).collect();
                let p = softmax(&target);
                let s: Vec<f64> = top
                    .iter()
                    .map(|&i| dot(&u, &model.embed_item(data.item_features.row(i))))
                    .collect();
                let log_q = log_softmax(&s);
                total -= p.iter().zip(&log_q).map(|(a, b)| a * b).sum::<f64>();
                for ((&i, pi), lq) in top.iter().zip(&p).zip(&log_q) {
                    score_grads.push((i, lq.exp() - pi));
                }
            }
            DeLoss::Pair => {
                for (&pos, &neg) in data.target_top[t].iter().zip(&negatives[t]) {
                    let sp = dot(&u, &model.embed_item(data.item_features.row(pos)));
                    let sn = dot(&u, &model.embed_item(data.item_features.row(neg)));
                    let margin = sp - sn;
                    total += softplus(-margin);
                    let g = -sigmoid(-margin);
                    score_grads.push((pos, g));
                    score_grads.push((neg, -g));
                }
            }
        }

        // s_i = u . (W_i y_i), u = W_q x.
        let mut g_u = vec![0.0; d];
        for &(i, g) in &score_grads {
            let y = data.item_features.row(i);
            let v = model.embed_item(y);
            for k in 0..d {
                g_u[k] += g * v[k];
                let gv = g * u[k];
                for (c, &yc) in g_item.row_mut(k).iter_mut().zip(y) {
                    *c += gv * yc;
                }
            }
        }
        for k in 0..d {
            for (c, &xc) in g_query.row_mut(k).iter_mut().zip(x) {
                *c += g_u[k] * xc;
            }
        }
    }
    (total, g_query, g_item)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_loss(model: &LinearDeModel, data: &DistillationData, negatives: &[Vec<usize>]) -> f64 {
    let rows: Vec<usize> = (0..data.n_train()).collect();
    loss_and_gradient(model, data, &rows, negatives).0 / data.n_train() as f64
}

fn sgd_step(w: &mut DenseMatrix, g: &DenseMatrix, step: f64) {
    let updated: Vec<f64> = w.data().iter().zip(g.data()).map(|(a, b)| a - step * b).collect();
    *w = DenseMatrix::from_fn(w.rows(), w.cols(), |r, c| updated[r * w.cols() + c]);
}

/// Minibatch SGD on the mean per-query loss. Deterministic for a given seed.
pub fn train_on(data: &DistillationData, loss: DeLoss, hyper: &DeHyper) -> Result<LinearDeModel> {
    let r = data.query_features.cols();
    let d = hyper.d.unwrap_or(2 * r);
    if d == 0 || hyper.batch == 0 || !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Error::spec("linear DE needs d >= 1, batch >= 1 and a positive learning rate"));
    }
    let mut model = LinearDeModel::init(r, d, loss, hyper.seed);
    let mut order_rng = rng_from_seed(hyper.seed ^ 0x005E_ED0F_0DE5);
    let mut order: Vec<usize> = (0..data.n_train()).collect();

    let mut negatives = match loss {
        DeLoss::Pair => mine_negatives(&model, data),
        DeLoss::Match => vec![Vec::new(); data.n_train()],
    };
    model.log.push(mean_loss(&model, data, &negatives));

    for epoch in 1..=hyper.epochs {
        let checkpoint = model.clone();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(hyper.batch) {
            let (_, gq, gi) = loss_and_gradient(&model, data, batch, &negatives);
            let step = hyper.lr / batch.len() as f64;
            sgd_step(&mut model.w_query, &gq, step);
            sgd_step(&mut model.w_item, &gi, step);
        }
        if loss == DeLoss::Pair {
            negatives = mine_negatives(&model, data);
        }
        let value = mean_loss(&model, data, &negatives);
        let finite = value.is_finite()
            && model.w_query.data().iter().chain(model.w_item.data()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence {
                epoch,
                checkpoint: Box::new(checkpoint),
            });
        }
        model.log.push(value);
    }
    Ok(model)
}

/// Scores the training queries with the (metered) oracle, then trains.
pub fn train_linear_de(
    oracle: &ScoreOracle,
    train_queries: &[usize],
    k_d: usize,
    loss: DeLoss,
    hyper: &DeHyper,
) -> Result<LinearDeModel> {
    let data = DistillationData::from_oracle(oracle, train_queries, k_d)?;
    train_on(&data, loss, hyper)
}
