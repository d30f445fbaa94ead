//! Experiment drivers: the default synthetic scenarios and the multi-method
//! comparison behind the recall-vs-k_r and recall-vs-budget tables.
//!
//! One master seed drives everything; sub-streams are derived per purpose
//! with [`derive_seed`] (`anchors`, `training`, `tuning`, `fixed_item`,
//! `item_cur`, `proxy`).

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::baselines::{fixed_item_index, item_cur_index, train_linear_de, DeHyper, DeLoss, EmbeddingRetriever};
use crate::error::{Error, Result};
use crate::eval::{sweep_recall_vs_budget, sweep_recall_vs_kr, GroundTruth, Method, RecallReport};
use crate::index::{select_anchors, CurIndexer};
use crate::linalg::{DenseMatrix, Rcond};
use crate::oracle::{ScoreOracle, SyntheticKind, SyntheticSpec};
use crate::rng::{derive_seed, stream, streams};

/// Noisy low-rank scenario used for the grid and budget experiments:
/// 1000 queries, 5000 items, rank 20, noise sigma 0.2.
pub fn noisy_default(seed: u64) -> SyntheticSpec {
    SyntheticSpec::new(SyntheticKind::LowRankNoisy, 1000, 5000, 20, seed).with_noise(0.2)
}

/// Featured scenario for comparisons that include feature-based baselines.
pub fn featured_default(seed: u64) -> SyntheticSpec {
    SyntheticSpec::new(SyntheticKind::Featured, 1000, 5000, 20, seed)
}

pub const DEFAULT_BUDGETS: [usize; 4] = [50, 100, 200, 500];
pub const DEFAULT_K_LIST: [usize; 2] = [1, 10];
pub const DEFAULT_KR_LIST: [usize; 5] = [10, 50, 100, 200, 500];
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
/// Anchor grids for heatmaps; nested so each cell reuses the same permutation.
pub const DEFAULT_GRID_K_Q: [usize; 3] = [50, 100, 200];
pub const DEFAULT_GRID_K_I: [usize; 4] = [25, 50, 100, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodKind {
    Anncur,
    FixedItem,
    ItemCur,
    LinearDe,
    Precomputed,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Anncur,
        MethodKind::FixedItem,
        MethodKind::ItemCur,
        MethodKind::LinearDe,
        MethodKind::Precomputed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Anncur => "anncur",
            MethodKind::FixedItem => "fixed_item",
            MethodKind::ItemCur => "item_cur",
            MethodKind::LinearDe => "linear_de",
            MethodKind::Precomputed => "precomputed",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::spec(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Kr,
    Budget,
}

impl SweepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::Kr => "kr",
            SweepMode::Budget => "budget",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub seed: u64,
    pub methods: Vec<MethodKind>,
    pub mode: SweepMode,
    pub k_list: Vec<usize>,
    pub kr_list: Vec<usize>,
    pub budgets: Vec<usize>,
    pub split_fractions: Vec<f64>,
    /// CUR anchor queries; also the DE training queries.
    pub k_q: usize,
    /// CUR anchor items (largest sub-index available to budget sweeps).
    pub k_i: usize,
    pub fixed_item_k_i: usize,
    pub item_cur_k_ind: usize,
    pub item_cur_k_query: usize,
    pub de_loss: DeLoss,
    pub de_k_d: usize,
    pub de_hyper: DeHyper,
    /// Std-dev of the noise added to latent features for the proxy
    /// precomputed embeddings.
    pub proxy_noise: f64,
    /// Explicit precomputed embeddings `(queries d x n_q, items d x n_i)`.
    pub precomputed: Option<(DenseMatrix, DenseMatrix)>,
    pub rcond: Rcond,
}

impl CompareConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            methods: MethodKind::ALL.to_vec(),
            mode: SweepMode::Budget,
            k_list: DEFAULT_K_LIST.to_vec(),
            kr_list: DEFAULT_KR_LIST.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            split_fractions: DEFAULT_SPLIT_FRACTIONS.to_vec(),
            k_q: 500,
            k_i: 450,
            fixed_item_k_i: 50,
            item_cur_k_ind: 50,
            item_cur_k_query: 50,
            de_loss: DeLoss::Pair,
            de_k_d: 100,
            de_hyper: DeHyper::default(),
            proxy_noise: 0.5,
            precomputed: None,
            rcond: Rcond::Default,
        }
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        let mut kv = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("seed.anchors".into(), derive_seed(self.seed, streams::ANCHORS).to_string()),
            ("seed.training".into(), derive_seed(self.seed, streams::TRAINING).to_string()),
            ("seed.tuning".into(), derive_seed(self.seed, streams::TUNING).to_string()),
            (
                "methods".into(),
                self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(";"),
            ),
            ("mode".into(), self.mode.as_str().into()),
            ("k_list".into(), list(&self.k_list)),
            ("kr_list".into(), list(&self.kr_list)),
            ("budgets".into(), list(&self.budgets)),
            (
                "split_fractions".into(),
                self.split_fractions.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";"),
            ),
            ("k_q".into(), self.k_q.to_string()),
            ("k_i".into(), self.k_i.to_string()),
            ("fixed_item.k_i".into(), self.fixed_item_k_i.to_string()),
            ("item_cur.k_ind".into(), self.item_cur_k_ind.to_string()),
            ("item_cur.k_query".into(), self.item_cur_k_query.to_string()),
            ("linear_de.loss".into(), self.de_loss.as_str().into()),
            ("linear_de.k_d".into(), self.de_k_d.to_string()),
            (
                "linear_de.d".into(),
                self.de_hyper.d.map_or_else(|| "2r".to_string(), |d| d.to_string()),
            ),
            ("linear_de.lr".into(), self.de_hyper.lr.to_string()),
            ("linear_de.epochs".into(), self.de_hyper.epochs.to_string()),
            ("linear_de.batch".into(), self.de_hyper.batch.to_string()),
            ("proxy_noise".into(), self.proxy_noise.to_string()),
            (
                "precomputed.source".into(),
                if self.precomputed.is_some() { "file" } else { "feature_proxy" }.into(),
            ),
        ];
        kv.push((
            "rcond".into(),
            match self.rcond {
                Rcond::Default => "default".into(),
                Rcond::Fixed(v) => v.to_string(),
            },
        ));
        kv
    }
}

/// Noisy copies of the latent features, standing in for an independently
/// trained dual encoder. Returns `(queries r x n_q, items r x n_i)`.
pub fn feature_proxy(oracle: &ScoreOracle, noise: f64, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    if !oracle.capabilities().latent_features {
        return Err(Error::Capability("latent_features"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::spec(format!("proxy noise {noise} must be >= 0")));
    }
    let mut rng = stream(seed, streams::PROXY);
    let r = oracle.query_features(0)?.len();
    let mut noisy = |n: usize, get: &dyn Fn(usize) -> Result<Vec<f64>>| -> Result<DenseMatrix> {
        let mut m = DenseMatrix::zeros(r, n);
        for j in 0..n {
            let f = get(j)?;
            for (k, v) in f.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                m.set(k, j, v + noise * e);
            }
        }
        Ok(m)
    };
    let q = noisy(oracle.n_queries(), &|j| oracle.query_features(j).map(<[f64]>::to_vec))?;
    let i = noisy(oracle.n_items(), &|j| oracle.item_features(j).map(<[f64]>::to_vec))?;
    Ok((q, i))
}

fn skip(report: &mut RecallReport, m: MethodKind, why: &str) {
    log::warn!("skipping {m}: {why}");
    report.config.push((format!("skipped.{m}"), why.to_string()));
}

/// Runs every configured method on the same held-out test queries and joins
/// their rows into one report. Methods whose oracle capability is missing
/// are skipped and listed in the config snapshot.
pub fn run_compare(oracle: &ScoreOracle, cfg: &CompareConfig) -> Result<RecallReport> {
    let (nq, ni) = (oracle.n_queries(), oracle.n_items());
    let k_max = *cfg.k_list.iter().max().ok_or_else(|| Error::spec("empty k list"))?;
    let anchors = select_anchors(nq, ni, cfg.k_q, cfg.k_i, derive_seed(cfg.seed, streams::ANCHORS))?;
    let test = anchors.held_out_queries(nq);
    let truth = GroundTruth::compute(oracle, &test, k_max)?;
    let caps = oracle.capabilities();

    let mut report = RecallReport {
        rows: Vec::new(),
        config: cfg.to_key_values(),
    };
    report.config.push(("n_test_queries".into(), test.len().to_string()));

    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    for m in methods {
        let retriever: Option<EmbeddingRetriever> = match m {
            MethodKind::Anncur => None,
            MethodKind::FixedItem | MethodKind::ItemCur if !caps.item_item_scoring => {
                skip(&mut report, m, "oracle has no item-item scores");
                continue;
            }
            MethodKind::FixedItem => Some(fixed_item_index(
                oracle,
                cfg.fixed_item_k_i,
                derive_seed(cfg.seed, streams::FIXED_ITEM),
            )?),
            MethodKind::ItemCur => Some(item_cur_index(
                oracle,
                cfg.item_cur_k_ind,
                cfg.item_cur_k_query,
                derive_seed(cfg.seed, streams::ITEM_CUR),
            )?),
            MethodKind::LinearDe if !caps.latent_features => {
                skip(&mut report, m, "oracle has no latent features");
                continue;
            }
            MethodKind::LinearDe => {
                let hyper = DeHyper {
                    seed: derive_seed(cfg.seed, streams::TRAINING),
                    ..cfg.de_hyper.clone()
                };
                let model = train_linear_de(oracle, &anchors.queries, cfg.de_k_d, cfg.de_loss, &hyper)?;
                Some(model.retriever(oracle)?)
            }
            MethodKind::Precomputed => {
                let (q, i) = match &cfg.precomputed {
                    Some(pair) => pair.clone(),
                    None if caps.latent_features => feature_proxy(oracle, cfg.proxy_noise, cfg.seed)?,
                    None => {
                        skip(&mut report, m, "no embeddings given and oracle has no latent features");
                        continue;
                    }
                };
                Some(EmbeddingRetriever::precomputed("precomputed", &q, i)?)
            }
        };

        let part = match (&retriever, cfg.mode) {
            (None, SweepMode::Kr) => {
                let indexer = CurIndexer::build(oracle, &anchors, cfg.rcond)?;
                let method = Method::Anncur {
                    indexer: &indexer,
                    k_i: cfg.k_i,
                };
                sweep_recall_vs_kr(method, oracle, &truth, &test, &cfg.k_list, &cfg.kr_list, cfg.seed)?
            }
            (None, SweepMode::Budget) => {
                let indexer = CurIndexer::build(oracle, &anchors, cfg.rcond)?;
                let method = Method::Anncur {
                    indexer: &indexer,
                    k_i: cfg.k_i,
                };
                sweep_recall_vs_budget(
                    method,
                    oracle,
                    &truth,
                    &test,
                    &cfg.k_list,
                    &cfg.budgets,
                    &cfg.split_fractions,
                    cfg.seed,
                )?
                .report
            }
            (Some(r), SweepMode::Kr) => {
                sweep_recall_vs_kr(Method::Embedding(r), oracle, &truth, &test, &cfg.k_list, &cfg.kr_list, cfg.seed)?
            }
            (Some(r), SweepMode::Budget) => {
                sweep_recall_vs_budget(
                    Method::Embedding(r),
                    oracle,
                    &truth,
                    &test,
                    &cfg.k_list,
                    &cfg.budgets,
                    &cfg.split_fractions,
                    cfg.seed,
                )?
                .report
            }
        };
        report.merge(part);
    }
    report.config.push(("oracle_calls".into(), oracle.call_count().to_string()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::generate;

    fn small_cfg(seed: u64) -> CompareConfig {
        CompareConfig {
            k_q: 40,
            k_i: 30,
            budgets: vec![30, 60],
            kr_list: vec![10, 40],
            fixed_item_k_i: 10,
            item_cur_k_ind: 8,
            item_cur_k_query: 8,
            de_k_d: 10,
            de_hyper: DeHyper {
                epochs: 3,
                ..DeHyper::default()
            },
            ..CompareConfig::new(seed)
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.as_str().parse::<MethodKind>().unwrap(), m);
        }
        assert!("bm25".parse::<MethodKind>().is_err());
    }

    #[test]
    fn compare_has_one_row_per_method_k_budget() {
        let o = generate(SyntheticSpec::new(SyntheticKind::Featured, 120, 200, 4, 1)).unwrap();
        let cfg = small_cfg(3);
        let report = run_compare(&o, &cfg).unwrap();
        assert_eq!(report.rows.len(), 5 * 2 * 2);
        let mut names: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
        names.dedup();
        assert_eq!(names.len(), 5, "{names:?}");
        let again = run_compare(&generate(SyntheticSpec::new(SyntheticKind::Featured, 120, 200, 4, 1)).unwrap(), &cfg).unwrap();
        assert_eq!(report.to_csv(), again.to_csv());
    }

    #[test]
    fn compare_skips_methods_without_capabilities() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 120, 200, 4, 1)).unwrap();
        let cfg = CompareConfig {
            mode: SweepMode::Kr,
            ..small_cfg(0)
        };
        let report = run_compare(&o, &cfg).unwrap();
        assert!(report.rows.iter().all(|r| r.method.starts_with("anncur")));
        assert_eq!(report.rows.len(), 2 * 2);
        assert_eq!(report.config.iter().filter(|(k, _)| k.starts_with("skipped.")).count(), 4);
    }

    #[test]
    fn proxy_is_noisy_copy_of_features() {
        let o = generate(SyntheticSpec::new(SyntheticKind::Featured, 5, 7, 3, 2)).unwrap();
        let (q, i) = feature_proxy(&o, 0.0, 1).unwrap();
        assert_eq!(q.shape(), (3, 5));
        assert_eq!(i.column(6), o.item_features(6).unwrap().to_vec());
        let (q1, _) = feature_proxy(&o, 0.5, 1).unwrap();
        assert_ne!(q1.data(), q.data());
    }
}
