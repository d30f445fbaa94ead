use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn anncur(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anncur"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = anncur(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn small_noisy(dir: &Path) {
    ok(
        dir,
        &["gen", "--kind", "low-rank-noisy", "--nq", "200", "--ni", "600", "--rank", "8", "--sigma", "0.1"],
    );
}

#[test]
fn gen_writes_matrix_spec_and_config_deterministically() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    small_noisy(a.path());
    small_noisy(b.path());
    for f in ["scores.ancm", "scores.spec", "scores.config"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let spec = fs::read_to_string(a.path().join("scores.spec")).unwrap();
    assert!(spec.contains("kind=low_rank_noisy"), "{spec}");
    assert!(spec.contains("master_seed=0"), "{spec}");
}

#[test]
fn different_seeds_give_different_matrices() {
    let a = TempDir::new().unwrap();
    ok(a.path(), &["gen", "--kind", "low-rank", "--nq", "20", "--ni", "30", "--rank", "3", "--name", "s0"]);
    ok(a.path(), &["--seed", "1", "gen", "--kind", "low-rank", "--nq", "20", "--ni", "30", "--rank", "3", "--name", "s1"]);
    assert_ne!(fs::read(a.path().join("s0.ancm")).unwrap(), fs::read(a.path().join("s1.ancm")).unwrap());
}

#[test]
fn invalid_spec_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    let o = anncur(d.path(), &["gen", "--kind", "low-rank", "--nq", "5", "--ni", "5", "--rank", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = anncur(d.path(), &["gen", "--kind", "low-rank", "--nq", "5", "--ni", "5", "--rank", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_workers_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    let o = anncur(d.path(), &["--workers", "0", "gen", "--kind", "low-rank", "--nq", "5", "--ni", "5", "--rank", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn index_reports_build_cost() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    let stdout = ok(d.path(), &["index", "--oracle", "scores.spec", "--k-q", "60", "--k-i", "40"]);
    assert_eq!(stdout.trim(), format!("build_cost={}", 60 * 600));
    assert!(d.path().join("index.anci").exists());
    assert!(d.path().join("index.config").exists());
}

#[test]
fn index_from_matrix_file_matches_index_from_spec() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    ok(d.path(), &["index", "--oracle", "scores.spec", "--k-q", "30", "--k-i", "20", "--name", "a"]);
    ok(d.path(), &["index", "--oracle", "scores.ancm", "--k-q", "30", "--k-i", "20", "--name", "b"]);
    assert_eq!(fs::read(d.path().join("a.anci")).unwrap(), fs::read(d.path().join("b.anci")).unwrap());
}

#[test]
fn missing_input_is_a_runtime_error_naming_the_path() {
    let d = TempDir::new().unwrap();
    let o = anncur(d.path(), &["index", "--oracle", "nope.ancm", "--k-q", "5", "--k-i", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.ancm"));
}

#[test]
fn oracle_source_is_required() {
    let d = TempDir::new().unwrap();
    let o = anncur(d.path(), &["index", "--k-q", "5", "--k-i", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn index_dimension_mismatch_is_a_runtime_error() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    ok(d.path(), &["index", "--oracle", "scores.spec", "--k-q", "30", "--k-i", "20"]);
    ok(d.path(), &["gen", "--kind", "low-rank", "--nq", "100", "--ni", "300", "--rank", "5", "--name", "other"]);
    let o = anncur(d.path(), &["eval", "--oracle", "other.spec", "--index", "index.anci"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("600") && err.contains("100x300"), "{err}");
}

#[test]
fn query_writes_ranked_rows_with_costs() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    ok(d.path(), &["index", "--oracle", "scores.spec", "--k-q", "60", "--k-i", "40"]);
    ok(
        d.path(),
        &["query", "--oracle", "scores.spec", "--index", "index.anci", "--k-r", "20", "--k", "5", "--queries", "150,151"],
    );
    let (header, rows) = csv_rows(&d.path().join("query.csv"));
    assert_eq!(
        header,
        ["query_id", "rank", "item_id", "approx_score", "exact_score", "embed_calls", "rerank_calls"]
    );
    assert_eq!(rows.len(), 10);
    for r in &rows {
        assert_eq!(r[5], "40");
        assert_eq!(r[6], "20");
    }
    let exact: Vec<f64> = rows[..5].iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(exact.windows(2).all(|w| w[0] >= w[1]), "reranked rows not sorted: {exact:?}");
}

#[test]
fn query_without_rerank_returns_k_r_rows() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    ok(d.path(), &["index", "--oracle", "scores.spec", "--k-q", "60", "--k-i", "40"]);
    ok(d.path(), &["query", "--oracle", "scores.spec", "--index", "index.anci", "--k-r", "7", "--queries", "150"]);
    let (_, rows) = csv_rows(&d.path().join("query.csv"));
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[6] == "0"));
}

#[test]
fn eval_reports_high_recall_on_clean_low_rank() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen", "--kind", "low-rank", "--nq", "200", "--ni", "600", "--rank", "8"]);
    ok(d.path(), &["index", "--oracle", "scores.spec", "--k-q", "40", "--k-i", "20"]);
    ok(d.path(), &["eval", "--oracle", "scores.spec", "--index", "index.anci", "--k", "1,10", "--k-r", "10,50"]);
    let (header, rows) = csv_rows(&d.path().join("eval.csv"));
    assert_eq!(header[0], "method");
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let recall: f64 = r[5].parse().unwrap();
        assert!(recall > 99.9, "{r:?}");
        assert_eq!(r[7], "160");
    }
}

#[test]
fn sweep_kr_and_grid_write_tables() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    ok(
        d.path(),
        &["sweep", "--oracle", "scores.spec", "--mode", "kr", "--k-q", "60", "--k-i", "40", "--k", "1,10", "--k-r", "10,50,100"],
    );
    let (_, rows) = csv_rows(&d.path().join("sweep_kr.csv"));
    assert_eq!(rows.len(), 6);
    ok(
        d.path(),
        &["sweep", "--oracle", "scores.spec", "--mode", "grid", "--grid-k-q", "20,40", "--grid-k-i", "10,30"],
    );
    let (header, rows) = csv_rows(&d.path().join("sweep_grid.csv"));
    assert_eq!(header, ["k_q", "k_i", "metric", "value", "n_queries"]);
    assert_eq!(rows.len(), 4);
    ok(
        d.path(),
        &[
            "sweep", "--oracle", "scores.spec", "--mode", "grid", "--grid-k-q", "20,40", "--grid-k-i", "10,30",
            "--metric", "frob-error", "--name", "frob",
        ],
    );
    let (_, rows) = csv_rows(&d.path().join("frob.csv"));
    assert!(rows.iter().all(|r| r[2] == "frob_error"));
}

#[test]
fn budget_sweep_picks_an_interior_split() {
    let d = TempDir::new().unwrap();
    ok(
        d.path(),
        &[
            "sweep", "--scenario", "noisy", "--mode", "budget", "--k-q", "500", "--k-i", "450", "--k", "10",
            "--budgets", "200",
        ],
    );
    let (header, rows) = csv_rows(&d.path().join("sweep_budget.csv"));
    let ki = header.iter().position(|h| h == "split_ki").unwrap();
    let kr = header.iter().position(|h| h == "split_kr").unwrap();
    assert_eq!(rows.len(), 1);
    let k_i: usize = rows[0][ki].parse().unwrap();
    let k_r: usize = rows[0][kr].parse().unwrap();
    assert_eq!(k_i + k_r, 200);
    assert!((40..=160).contains(&k_i), "chosen k_i {k_i}");
}

fn compare_args(name: &str) -> Vec<&str> {
    vec![
        "compare", "--oracle", "feat.spec", "--k-q", "60", "--k-i", "100", "--k", "1,10", "--budgets", "100,200",
        "--de-epochs", "3", "--name", name,
    ]
}

#[test]
fn compare_has_one_row_per_method_k_and_budget() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen", "--kind", "featured", "--nq", "200", "--ni", "600", "--rank", "8", "--name", "feat"]);
    ok(d.path(), &compare_args("c"));
    let (_, rows) = csv_rows(&d.path().join("c.csv"));
    let mut methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    methods.dedup();
    assert_eq!(methods.len(), 5, "{methods:?}");
    assert_eq!(rows.len(), 5 * 2 * 2);
    let config = fs::read_to_string(d.path().join("c.config")).unwrap();
    assert!(config.contains("oracle_calls="));
}

#[test]
fn compare_skips_methods_the_oracle_cannot_serve() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    ok(
        d.path(),
        &[
            "compare", "--oracle", "scores.spec", "--k-q", "60", "--k-i", "100", "--k", "10", "--budgets", "100",
            "--methods", "anncur,fixed_item",
        ],
    );
    let (_, rows) = csv_rows(&d.path().join("compare.csv"));
    assert!(rows.iter().all(|r| r[0].starts_with("anncur")));
    let config = fs::read_to_string(d.path().join("compare.config")).unwrap();
    assert!(config.contains("skipped.fixed_item"), "{config}");
}

#[test]
fn unknown_method_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    small_noisy(d.path());
    let o = anncur(d.path(), &["compare", "--oracle", "scores.spec", "--methods", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_output_is_independent_of_worker_count() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen", "--kind", "featured", "--nq", "200", "--ni", "600", "--rank", "8", "--name", "feat"]);
    let mut one = vec!["--workers", "1"];
    one.extend(compare_args("w1"));
    let mut eight = vec!["--workers", "8"];
    eight.extend(compare_args("w8"));
    ok(d.path(), &one);
    ok(d.path(), &eight);
    assert_eq!(fs::read(d.path().join("w1.csv")).unwrap(), fs::read(d.path().join("w8.csv")).unwrap());
}
