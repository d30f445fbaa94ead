//! Seeded synthetic score matrices standing in for a cross-encoder.
//!
//! Generation order (one [`ChaCha8Rng`](crate::rng::Rng) seeded with
//! `spec.seed`, standard normals via `rand_distr::StandardNormal`):
//!
//! 1. query factors `A` (`n_queries x rank`), row-major;
//! 2. item factors `B` (`rank x n_items`), row-major;
//! 3. for `LowRankNoisy` only, the noise table (`n_queries x n_items`), row-major.
//!
//! Factor entries are scaled by `rank^(-1/4)`, so `M = A B` has unit entry
//! variance and query and item factors share one distribution.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

use super::{Capabilities, ScoreOracle, ScoreSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    LowRank,
    LowRankNoisy,
    Skewed,
    Featured,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::LowRank => "low_rank",
            SyntheticKind::LowRankNoisy => "low_rank_noisy",
            SyntheticKind::Skewed => "skewed",
            SyntheticKind::Featured => "featured",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_rank" => Ok(SyntheticKind::LowRank),
            "low_rank_noisy" => Ok(SyntheticKind::LowRankNoisy),
            "skewed" => Ok(SyntheticKind::Skewed),
            "featured" => Ok(SyntheticKind::Featured),
            other => Err(Error::spec(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

/// Entry-wise transform `g(x) = x + beta * max(0, x)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skew {
    pub beta: f64,
    pub power: f64,
}

impl Default for Skew {
    fn default() -> Self {
        Self {
            beta: 0.0,
            power: 1.0,
        }
    }
}

impl Skew {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.beta == 0.0 {
            x
        } else {
            x + self.beta * x.max(0.0).powf(self.power)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_queries: usize,
    pub n_items: usize,
    pub rank: usize,
    pub noise_sigma: f64,
    pub skew: Skew,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n_queries: usize, n_items: usize, rank: usize, seed: u64) -> Self {
        Self {
            kind,
            n_queries,
            n_items,
            rank,
            noise_sigma: 0.0,
            skew: Skew::default(),
            seed,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_skew(mut self, beta: f64, power: f64) -> Self {
        self.skew = Skew { beta, power };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_items == 0 {
            return Err(Error::spec("synthetic oracle needs at least one query and one item"));
        }
        if self.rank == 0 || self.rank > self.n_queries.min(self.n_items) {
            return Err(Error::spec(format!(
                "rank {} outside [1, {}]",
                self.rank,
                self.n_queries.min(self.n_items)
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::spec(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.skew.beta >= 0.0 && self.skew.beta.is_finite()) {
            return Err(Error::spec(format!("skew beta must be >= 0, got {}", self.skew.beta)));
        }
        if !(self.skew.power >= 1.0 && self.skew.power.is_finite()) {
            return Err(Error::spec(format!("skew power must be >= 1, got {}", self.skew.power)));
        }
        Ok(())
    }

    /// `key=value` lines describing the spec.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), self.kind.as_str().into()),
            ("n_queries".into(), self.n_queries.to_string()),
            ("n_items".into(), self.n_items.to_string()),
            ("rank".into(), self.rank.to_string()),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("skew_beta".into(), self.skew.beta.to_string()),
            ("skew_power".into(), self.skew.power.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Inverse of [`to_key_values`](Self::to_key_values); validates the result.
    pub fn from_key_values(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = kv.get(key).ok_or_else(|| Error::spec(format!("spec is missing {key:?}")))?;
            raw.parse().map_err(|_| Error::spec(format!("bad value {raw:?} for {key:?}")))
        }
        let spec = Self {
            kind: kv
                .get("kind")
                .ok_or_else(|| Error::spec("spec is missing \"kind\""))?
                .parse()?,
            n_queries: field(kv, "n_queries")?,
            n_items: field(kv, "n_items")?,
            rank: field(kv, "rank")?,
            noise_sigma: field(kv, "noise_sigma")?,
            skew: Skew {
                beta: field(kv, "skew_beta")?,
                power: field(kv, "skew_power")?,
            },
            seed: field(kv, "seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    spec: SyntheticSpec,
    /// `n_queries x rank`, row-major.
    query_factors: Vec<f64>,
    /// `n_items x rank`, row-major (the transpose of `B`).
    item_factors: Vec<f64>,
    noise: Option<Vec<f64>>,
}

impl SyntheticOracle {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let SyntheticSpec {
            n_queries: nq,
            n_items: ni,
            rank: r,
            ..
        } = spec;
        let scale = (r as f64).powf(-0.25);
        let mut rng = rng_from_seed(spec.seed);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };

        let query_factors: Vec<f64> = (0..nq * r).map(|_| normal() * scale).collect();
        let mut item_factors = vec![0.0; ni * r];
        for k in 0..r {
            for i in 0..ni {
                item_factors[i * r + k] = normal() * scale;
            }
        }
        let noise = (spec.kind == SyntheticKind::LowRankNoisy)
            .then(|| (0..nq * ni).map(|_| normal() * spec.noise_sigma).collect());

        Ok(Self {
            spec,
            query_factors,
            item_factors,
            noise,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    #[inline]
    fn x(&self, q: usize) -> &[f64] {
        let r = self.spec.rank;
        &self.query_factors[q * r..(q + 1) * r]
    }

    #[inline]
    fn y(&self, i: usize) -> &[f64] {
        let r = self.spec.rank;
        &self.item_factors[i * r..(i + 1) * r]
    }

    /// Noise-free, unskewed `A[q, :] . B[:, i]`.
    pub fn base_score(&self, q: usize, i: usize) -> f64 {
        dot(self.x(q), self.y(i))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ScoreSource for SyntheticOracle {
    fn n_queries(&self) -> usize {
        self.spec.n_queries
    }

    fn n_items(&self) -> usize {
        self.spec.n_items
    }

    fn capabilities(&self) -> Capabilities {
        let featured = self.spec.kind == SyntheticKind::Featured;
        Capabilities {
            item_item_scoring: featured,
            latent_features: featured,
        }
    }

    fn eval(&self, q: usize, i: usize) -> f64 {
        let base = self.base_score(q, i);
        match self.spec.kind {
            SyntheticKind::LowRank | SyntheticKind::Featured => base,
            SyntheticKind::Skewed => self.spec.skew.apply(base),
            SyntheticKind::LowRankNoisy => {
                let noise = self.noise.as_ref().expect("noisy oracle carries noise");
                base + noise[q * self.spec.n_items + i]
            }
        }
    }

    fn eval_items(&self, i: usize, j: usize) -> Option<f64> {
        (self.spec.kind == SyntheticKind::Featured).then(|| dot(self.y(i), self.y(j)))
    }

    fn query_features(&self, q: usize) -> Option<&[f64]> {
        (self.spec.kind == SyntheticKind::Featured).then(|| self.x(q))
    }

    fn item_features(&self, i: usize) -> Option<&[f64]> {
        (self.spec.kind == SyntheticKind::Featured).then(|| self.y(i))
    }
}

pub fn generate(spec: SyntheticSpec) -> Result<ScoreOracle> {
    Ok(ScoreOracle::new(SyntheticOracle::new(spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, Rcond};

    #[test]
    fn low_rank_entry_matches_independent_regeneration() {
        let spec = SyntheticSpec::new(SyntheticKind::LowRank, 8, 6, 5, 7);
        let o = generate(spec).unwrap();
        // Regenerate A and B from the documented order.
        let mut rng = rng_from_seed(7);
        let s = 5f64.powf(-0.25);
        let a: Vec<f64> = (0..8 * 5).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect();
        let b: Vec<f64> = (0..5 * 6).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect();
        for (q, i) in [(0, 0), (7, 5), (2, 1)] {
            let expected: f64 = (0..5).map(|k| a[q * 5 + k] * b[k * 6 + i]).sum();
            assert_eq!(o.score(q, i).unwrap(), expected);
        }
    }

    #[test]
    fn spec_key_values_round_trip() {
        let spec = SyntheticSpec::new(SyntheticKind::Skewed, 10, 20, 3, 99).with_skew(4.0, 2.0);
        let kv: BTreeMap<String, String> = spec.to_key_values().into_iter().collect();
        assert_eq!(SyntheticSpec::from_key_values(&kv).unwrap(), spec);
        let mut bad = kv.clone();
        bad.remove("rank");
        assert!(SyntheticSpec::from_key_values(&bad).is_err());
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = SyntheticSpec::new(SyntheticKind::LowRankNoisy, 20, 30, 4, 3).with_noise(0.1);
        let a = generate(spec.clone()).unwrap().materialize();
        let b = generate(spec).unwrap().materialize();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn repeated_scores_are_identical() {
        let o = generate(SyntheticSpec::new(SyntheticKind::Skewed, 10, 10, 3, 1).with_skew(4.0, 2.0)).unwrap();
        for q in 0..10 {
            assert_eq!(o.score(q, 9 - q).unwrap().to_bits(), o.score(q, 9 - q).unwrap().to_bits());
        }
        assert_eq!(o.call_count(), 20);
    }

    #[test]
    fn low_rank_has_stated_rank() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 50, 100, 3, 1)).unwrap();
        assert_eq!(numerical_rank(&o.materialize(), Rcond::Default).unwrap(), 3);
    }

    #[test]
    fn zero_skew_equals_low_rank() {
        let base = generate(SyntheticSpec::new(SyntheticKind::LowRank, 15, 25, 4, 9)).unwrap();
        let skew = generate(SyntheticSpec::new(SyntheticKind::Skewed, 15, 25, 4, 9).with_skew(0.0, 2.0)).unwrap();
        assert_eq!(base.materialize().data(), skew.materialize().data());
    }

    #[test]
    fn skew_raises_rank() {
        let o = generate(SyntheticSpec::new(SyntheticKind::Skewed, 500, 2000, 20, 4).with_skew(4.0, 2.0)).unwrap();
        assert!(numerical_rank(&o.materialize(), Rcond::Default).unwrap() > 20);
    }

    #[test]
    fn featured_exposes_factors() {
        let o = generate(SyntheticSpec::new(SyntheticKind::Featured, 5, 7, 3, 2)).unwrap();
        let caps = o.capabilities();
        assert!(caps.item_item_scoring && caps.latent_features);
        let x = o.query_features(1).unwrap().to_vec();
        let y = o.item_features(4).unwrap().to_vec();
        let expected: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert_eq!(o.score(1, 4).unwrap(), expected);
        let y2 = o.item_features(2).unwrap().to_vec();
        let expected: f64 = y2.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert_eq!(o.score_items(2, 4).unwrap(), expected);
        assert_eq!(o.call_count(), 2);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_rank = SyntheticSpec::new(SyntheticKind::LowRank, 5, 10, 6, 0);
        assert!(matches!(generate(bad_rank), Err(Error::Spec(_))));
        assert!(generate(SyntheticSpec::new(SyntheticKind::LowRank, 5, 10, 0, 0)).is_err());
        let neg = SyntheticSpec::new(SyntheticKind::LowRankNoisy, 5, 10, 2, 0).with_noise(-1.0);
        assert!(generate(neg).is_err());
        let p = SyntheticSpec::new(SyntheticKind::Skewed, 5, 10, 2, 0).with_skew(1.0, 0.5);
        assert!(generate(p).is_err());
    }

    #[test]
    fn non_featured_have_no_item_scores() {
        let o = generate(SyntheticSpec::new(SyntheticKind::LowRank, 5, 7, 3, 2)).unwrap();
        assert!(matches!(o.score_items(0, 1), Err(Error::Capability(_))));
    }
}
