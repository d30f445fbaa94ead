use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anncur_core::baselines::{DeHyper, DeLoss};
use anncur_core::eval::{
    grid_heatmap, sweep_recall_vs_budget, sweep_recall_vs_kr, GridMetric, GroundTruth, Method, RecallReport,
};
use anncur_core::experiment::{featured_default, noisy_default, run_compare, CompareConfig, MethodKind, SweepMode};
use anncur_core::format::{key_values_to_string, parse_key_values, read_matrix, read_scores, write_matrix};
use anncur_core::index::{load_index, save_index};
use anncur_core::retrieve::{embed_query, retrieve_and_rerank, retrieve_topk};
use anncur_core::rng::{derive_seed, streams};
use anncur_core::{
    build_index, generate, select_anchors, CurIndexer, DenseMatrix, Error, MatrixOracle, Rcond, ScoreOracle,
    SyntheticKind, SyntheticSpec,
};
use rayon::prelude::*;

use crate::{
    CompareArgs, CompareModeArg, EvalArgs, GenArgs, GridMetricArg, IndexArgs, Kind, LossArg, OracleArgs, QueryArgs,
    Scenario, SweepArgs, SweepModeArg,
};
use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag values; exit code 2.
    Usage(String),
    /// Missing or inconsistent data, numerical failures; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Spec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;
type Config = Vec<(String, String)>;

/// Errors from reading user-supplied files are data errors even when the
/// core reports them as spec violations.
fn data<T>(r: anncur_core::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).map_err(|e| CliError::Runtime(format!("{}: {e}", cli.out.display())))?;
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Index(a) => index(cli, a),
        Command::Query(a) => query(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Compare(a) => compare(cli, a),
    }
}

fn resolve(cli: &Cli, p: &Path) -> Result<PathBuf> {
    let path = cli.out.join(p);
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Runtime(format!("{}: no such file", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_config(cli: &Cli, name: &str, config: &Config) -> Result<()> {
    write_text(
        &cli.out.join(format!("{name}.config")),
        &key_values_to_string(config.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
    )
}

fn base_config(cli: &Cli, command: &str) -> Config {
    vec![
        ("command".into(), command.into()),
        ("seed".into(), cli.seed.to_string()),
    ]
}

fn rcond_of(v: Option<f64>) -> Rcond {
    v.map_or(Rcond::Default, Rcond::Fixed)
}

fn rcond_text(v: Option<f64>) -> String {
    v.map_or_else(|| "default".to_string(), |x| x.to_string())
}

fn shape(m: &DenseMatrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

fn load_oracle(cli: &Cli, args: &OracleArgs) -> Result<(ScoreOracle, Config)> {
    let mut config = Config::new();
    let oracle = match (&args.oracle, args.scenario) {
        (None, None) => return Err(CliError::Usage("one of --oracle or --scenario is required".into())),
        (Some(_), Some(_)) => return Err(CliError::Usage("--oracle and --scenario are exclusive".into())),
        (None, Some(s)) => {
            let seed = derive_seed(cli.seed, streams::SYNTHETIC);
            let spec = match s {
                Scenario::Noisy => noisy_default(seed),
                Scenario::Featured => featured_default(seed),
            };
            config.push(("oracle".into(), format!("scenario:{s:?}").to_lowercase()));
            config.extend(spec.to_key_values().into_iter().map(|(k, v)| (format!("oracle.{k}"), v)));
            generate(spec)?
        }
        (Some(p), None) => {
            let path = resolve(cli, p)?;
            config.push(("oracle".into(), path.display().to_string()));
            if path.extension().is_some_and(|e| e == "spec") {
                let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
                let spec = data(SyntheticSpec::from_key_values(&parse_key_values(&text)))?;
                config.extend(spec.to_key_values().into_iter().map(|(k, v)| (format!("oracle.{k}"), v)));
                data(generate(spec))?
            } else {
                let scores = data(read_scores(&path))?;
                config.push(("oracle.shape".into(), shape(&scores)));
                let mut source = MatrixOracle::new(scores);
                if let Some(ip) = &args.item_scores {
                    let ipath = resolve(cli, ip)?;
                    let items = data(read_scores(&ipath))?;
                    let n = source.scores().cols();
                    if items.shape() != (n, n) {
                        return Err(CliError::Runtime(format!(
                            "item scores {} are {} but the score matrix {} needs {n}x{n}",
                            ipath.display(),
                            shape(&items),
                            shape(source.scores())
                        )));
                    }
                    config.push(("item_scores".into(), ipath.display().to_string()));
                    source = data(source.with_item_scores(items))?;
                }
                ScoreOracle::new(source)
            }
        }
    };
    Ok((oracle, config))
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let kind = match a.kind {
        Kind::LowRank => SyntheticKind::LowRank,
        Kind::LowRankNoisy => SyntheticKind::LowRankNoisy,
        Kind::Skewed => SyntheticKind::Skewed,
        Kind::Featured => SyntheticKind::Featured,
    };
    let spec = SyntheticSpec::new(kind, a.nq, a.ni, a.rank, derive_seed(cli.seed, streams::SYNTHETIC))
        .with_noise(a.sigma)
        .with_skew(a.beta, a.power);
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let matrix = generate(spec.clone())?.materialize();
    let path = cli.out.join(format!("{}.ancm", a.name));
    write_matrix(&path, &matrix)?;
    let mut sidecar = spec.to_key_values();
    sidecar.push(("master_seed".into(), cli.seed.to_string()));
    write_text(
        &cli.out.join(format!("{}.spec", a.name)),
        &key_values_to_string(sidecar.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
    )?;
    let mut config = base_config(cli, "gen");
    config.extend(sidecar);
    write_config(cli, &a.name, &config)?;
    println!("{}", path.display());
    Ok(())
}

fn index(cli: &Cli, a: &IndexArgs) -> Result<()> {
    let (oracle, oracle_cfg) = load_oracle(cli, &a.oracle)?;
    let anchor_seed = derive_seed(cli.seed, streams::ANCHORS);
    let anchors = select_anchors(oracle.n_queries(), oracle.n_items(), a.anchors.k_q, a.anchors.k_i, anchor_seed)?;
    let index = build_index(&oracle, &anchors, rcond_of(a.anchors.rcond))?;
    let path = cli.out.join(format!("{}.anci", a.name));
    save_index(&index, &path)?;

    let mut config = base_config(cli, "index");
    config.extend(oracle_cfg);
    config.extend([
        ("seed.anchors".into(), anchor_seed.to_string()),
        ("k_q".into(), a.anchors.k_q.to_string()),
        ("k_i".into(), a.anchors.k_i.to_string()),
        ("rcond".into(), rcond_text(a.anchors.rcond)),
        ("rcond.resolved".into(), index.rcond().to_string()),
        ("build_cost".into(), index.build_cost().to_string()),
        ("index".into(), path.display().to_string()),
    ]);
    write_config(cli, &a.name, &config)?;
    println!("build_cost={}", index.build_cost());
    Ok(())
}

fn load_matching_index(cli: &Cli, p: &Path, oracle: &ScoreOracle) -> Result<anncur_core::CurIndex> {
    let path = resolve(cli, p)?;
    let index = data(load_index(&path))?;
    if index.n_items() != oracle.n_items() {
        return Err(CliError::Runtime(format!(
            "index {} covers {} items but the oracle is {}x{}",
            path.display(),
            index.n_items(),
            oracle.n_queries(),
            oracle.n_items()
        )));
    }
    if let Some(&q) = index.anchor_queries().iter().find(|&&q| q >= oracle.n_queries()) {
        return Err(CliError::Runtime(format!(
            "index anchor query {q} is outside the oracle's {}x{} matrix",
            oracle.n_queries(),
            oracle.n_items()
        )));
    }
    Ok(index)
}

fn non_anchor_queries(index: &anncur_core::CurIndex, n_queries: usize) -> Vec<usize> {
    let anchors: HashSet<usize> = index.anchor_queries().iter().copied().collect();
    (0..n_queries).filter(|q| !anchors.contains(q)).collect()
}

fn query(cli: &Cli, a: &QueryArgs) -> Result<()> {
    let (oracle, oracle_cfg) = load_oracle(cli, &a.oracle)?;
    let index = load_matching_index(cli, &a.index, &oracle)?;
    let queries = if a.queries.is_empty() {
        non_anchor_queries(&index, oracle.n_queries())
    } else {
        a.queries.clone()
    };
    if let Some(&q) = queries.iter().find(|&&q| q >= oracle.n_queries()) {
        return Err(CliError::Usage(format!("query {q} outside [0, {})", oracle.n_queries())));
    }
    let results = queries
        .par_iter()
        .map(|&q| {
            let e = embed_query(&oracle, &index, q, index.k_i())?;
            let r = retrieve_topk(&e, &index, a.k_r)?;
            match a.k {
                Some(k) => retrieve_and_rerank(&oracle, r, k),
                None => Ok(r),
            }
        })
        .collect::<anncur_core::Result<Vec<_>>>()?;

    let mut csv = String::from("query_id,rank,item_id,approx_score,exact_score,embed_calls,rerank_calls\n");
    for r in &results {
        for (rank, &item) in r.items.iter().enumerate() {
            let approx = r.approx_scores.as_ref().map(|s| s[rank].to_string()).unwrap_or_default();
            let exact = r.exact_scores.as_ref().map(|s| s[rank].to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{item},{approx},{exact},{},{}\n",
                r.query,
                rank + 1,
                r.embed_calls,
                r.rerank_calls
            ));
        }
    }
    let path = cli.out.join(format!("{}.csv", a.name));
    write_text(&path, &csv)?;

    let mut config = base_config(cli, "query");
    config.extend(oracle_cfg);
    config.extend([
        ("index".into(), a.index.display().to_string()),
        ("k_i".into(), index.k_i().to_string()),
        ("k_r".into(), a.k_r.to_string()),
        ("k".into(), a.k.map_or_else(|| "none".to_string(), |k| k.to_string())),
        ("n_queries".into(), queries.len().to_string()),
        ("oracle_calls".into(), oracle.call_count().to_string()),
    ]);
    write_config(cli, &a.name, &config)?;
    println!("{}", path.display());
    Ok(())
}

fn finish_report(cli: &Cli, name: &str, mut report: RecallReport, head: Config) -> Result<()> {
    let mut config = head;
    for (k, v) in report.config.drain(..) {
        if !config.iter().any(|(k2, _)| *k2 == k) {
            config.push((k, v));
        }
    }
    report.config = config;
    report.write(&cli.out, name)?;
    println!("{}", cli.out.join(format!("{name}.csv")).display());
    Ok(())
}

fn max_of(v: &[usize], flag: &str) -> Result<usize> {
    v.iter().copied().max().ok_or_else(|| CliError::Usage(format!("{flag} needs at least one value")))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (oracle, oracle_cfg) = load_oracle(cli, &a.oracle)?;
    let index = load_matching_index(cli, &a.index, &oracle)?;
    let test = non_anchor_queries(&index, oracle.n_queries());
    let truth = GroundTruth::compute(&oracle, &test, max_of(&a.k, "--k")?)?;
    let report = sweep_recall_vs_kr(Method::Index(&index), &oracle, &truth, &test, &a.k, &a.k_r, cli.seed)?;
    let mut head = base_config(cli, "eval");
    head.extend(oracle_cfg);
    head.push(("index".into(), a.index.display().to_string()));
    finish_report(cli, &a.name, report, head)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let (oracle, oracle_cfg) = load_oracle(cli, &a.oracle)?;
    let anchor_seed = derive_seed(cli.seed, streams::ANCHORS);
    let rcond = rcond_of(a.rcond);
    let mut head = base_config(cli, "sweep");
    head.extend(oracle_cfg);
    head.extend([
        ("seed.anchors".into(), anchor_seed.to_string()),
        ("rcond".into(), rcond_text(a.rcond)),
    ]);

    if let SweepModeArg::Grid = a.mode {
        let name = a.name.clone().unwrap_or_else(|| "sweep_grid".into());
        let metric = match a.metric {
            GridMetricArg::Recall => GridMetric::Recall {
                k: a.grid_k,
                k_r: a.grid_k_r,
            },
            GridMetricArg::FrobError => GridMetric::FrobError,
        };
        let hm = grid_heatmap(&oracle, &a.grid_k_q, &a.grid_k_i, metric, anchor_seed, rcond)?;
        write_text(&cli.out.join(format!("{name}.csv")), &hm.to_csv())?;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        head.extend([
            ("mode".into(), "grid".into()),
            ("metric".into(), metric.name()),
            ("grid_k_q".into(), list(&a.grid_k_q)),
            ("grid_k_i".into(), list(&a.grid_k_i)),
            ("evaluated_on".into(), "non-anchor queries of each cell".into()),
        ]);
        write_config(cli, &name, &head)?;
        println!("{}", cli.out.join(format!("{name}.csv")).display());
        return Ok(());
    }

    let anchors = select_anchors(oracle.n_queries(), oracle.n_items(), a.k_q, a.k_i, anchor_seed)?;
    let indexer = CurIndexer::build(&oracle, &anchors, rcond)?;
    let test = anchors.held_out_queries(oracle.n_queries());
    let truth = GroundTruth::compute(&oracle, &test, max_of(&a.k, "--k")?)?;
    let method = Method::Anncur {
        indexer: &indexer,
        k_i: a.k_i,
    };
    head.extend([
        ("k_q".into(), a.k_q.to_string()),
        ("k_i".into(), a.k_i.to_string()),
        ("build_cost".into(), indexer.build_cost().to_string()),
    ]);
    let (name, report) = match a.mode {
        SweepModeArg::Kr => ("sweep_kr", sweep_recall_vs_kr(method, &oracle, &truth, &test, &a.k, &a.k_r, cli.seed)?),
        SweepModeArg::Budget => {
            let sweep = sweep_recall_vs_budget(method, &oracle, &truth, &test, &a.k, &a.budgets, &a.splits, cli.seed)?;
            head.push((
                "splits".into(),
                a.splits.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";"),
            ));
            ("sweep_budget", sweep.report)
        }
        SweepModeArg::Grid => unreachable!(),
    };
    finish_report(cli, a.name.as_deref().unwrap_or(name), report, head)
}

fn compare(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let (oracle, oracle_cfg) = load_oracle(cli, &a.oracle)?;
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<MethodKind>())
        .collect::<anncur_core::Result<Vec<_>>>()?;
    let precomputed = match (&a.query_emb, &a.item_emb) {
        (Some(qp), Some(ip)) => {
            let q = data(read_matrix(&resolve(cli, qp)?))?;
            let i = data(read_matrix(&resolve(cli, ip)?))?;
            if q.cols() != oracle.n_queries() || i.cols() != oracle.n_items() || q.rows() != i.rows() {
                return Err(CliError::Runtime(format!(
                    "embeddings {} (queries) and {} (items) do not fit the {}x{} oracle; expected d x {} and d x {}",
                    shape(&q),
                    shape(&i),
                    oracle.n_queries(),
                    oracle.n_items(),
                    oracle.n_queries(),
                    oracle.n_items()
                )));
            }
            Some((q, i))
        }
        _ => None,
    };
    let cfg = CompareConfig {
        seed: cli.seed,
        methods,
        mode: match a.mode {
            CompareModeArg::Kr => SweepMode::Kr,
            CompareModeArg::Budget => SweepMode::Budget,
        },
        k_list: a.k.clone(),
        kr_list: a.k_r.clone(),
        budgets: a.budgets.clone(),
        split_fractions: a.splits.clone(),
        k_q: a.k_q,
        k_i: a.k_i,
        fixed_item_k_i: a.fixed_item_k_i,
        item_cur_k_ind: a.item_cur_k_ind,
        item_cur_k_query: a.item_cur_k_query,
        de_loss: match a.de_loss {
            LossArg::Match => DeLoss::Match,
            LossArg::Pair => DeLoss::Pair,
        },
        de_k_d: a.de_k_d,
        de_hyper: DeHyper {
            d: a.de_dim,
            lr: a.de_lr,
            epochs: a.de_epochs,
            batch: a.de_batch,
            seed: 0,
        },
        proxy_noise: a.proxy_noise,
        precomputed,
        rcond: rcond_of(a.rcond),
    };
    let report = run_compare(&oracle, &cfg)?;
    let mut head = base_config(cli, "compare");
    head.extend(oracle_cfg);
    finish_report(cli, &a.name, report, head)
}
