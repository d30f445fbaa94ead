//! Benchmark fixtures shared by the criterion targets.

use anncur_core::{generate, ScoreOracle, SyntheticKind, SyntheticSpec};

/// Noisy rank-`r` oracle of the given size, fixed seed.
pub fn noisy_oracle(n_queries: usize, n_items: usize, rank: usize) -> ScoreOracle {
    generate(SyntheticSpec::new(SyntheticKind::LowRankNoisy, n_queries, n_items, rank, 17).with_noise(0.1))
        .expect("valid benchmark spec")
}
