//! Score normalization and aggregate statistics over runs.
//!
//! Scores are grouped per environment (`per_env[e][run]`). Mean and median
//! aggregate the per-environment means; IQM pools every run.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `(score - random_ref) / (demo_ref - random_ref)`.
pub fn normalized_score(score: f64, random_ref: f64, demo_ref: f64) -> Result<f64> {
    let denom = demo_ref - random_ref;
    if denom == 0.0 {
        return Err(Error::ZeroDenominator("normalized score"));
    }
    Ok((score - random_ref) / denom)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let v = sorted(values);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Interquartile mean with fractional trimming.
///
/// After sorting, `⌊n/4⌋` values are dropped from each end and the next
/// value on each side keeps weight `1 - frac(n/4)`. The kept weight always
/// totals `n/2`. For n = 5 the weights are `0, 0.75, 1, 0.75, 0`.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("iqm"));
    }
    let v = sorted(values);
    let n = v.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut total = 0.0;
    for (i, x) in v.iter().enumerate() {
        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        total += overlap * x;
    }
    Ok(total / (n / 2.0))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Median,
    Iqm,
}

impl Aggregate {
    pub const ALL: [Aggregate; 3] = [Aggregate::Mean, Aggregate::Median, Aggregate::Iqm];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregate::Mean => "mean",
            Aggregate::Median => "median",
            Aggregate::Iqm => "iqm",
        }
    }

    /// Applies the aggregate to scores grouped by environment.
    pub fn apply(self, per_env: &[Vec<f64>]) -> Result<f64> {
        if per_env.is_empty() || per_env.iter().any(Vec::is_empty) {
            return Err(Error::EmptyInput("environment stratum"));
        }
        match self {
            Aggregate::Mean | Aggregate::Median => {
                let env_means = per_env.iter().map(|s| mean(s)).collect::<Result<Vec<_>>>()?;
                if self == Aggregate::Mean {
                    mean(&env_means)
                } else {
                    median(&env_means)
                }
            }
            Aggregate::Iqm => iqm(&per_env.concat()),
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregate::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Percentile bootstrap interval for `aggregate`, resampling runs with
/// replacement inside each environment stratum.
pub fn stratified_bootstrap_ci(
    per_env: &[Vec<f64>],
    aggregate: Aggregate,
    n_resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfidence(confidence));
    }
    if n_resamples == 0 {
        return Err(Error::EmptyInput("bootstrap resamples"));
    }
    aggregate.apply(per_env)?;
    let mut rng = rng::stream(seed, rng::STREAM_EVAL);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut sample: Vec<Vec<f64>> = per_env.iter().map(|s| vec![0.0; s.len()]).collect();
    for _ in 0..n_resamples {
        for (dst, src) in sample.iter_mut().zip(per_env) {
            for d in dst.iter_mut() {
                *d = src[rng.gen_range(0..src.len())];
            }
        }
        stats.push(aggregate.apply(&sample)?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    Ok((quantile(&stats, alpha), quantile(&stats, 1.0 - alpha)))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let frac = pos - i as f64;
    sorted[i] + frac * (sorted[j] - sorted[i])
}
