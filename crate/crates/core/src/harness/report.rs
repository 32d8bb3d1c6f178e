//! Aggregation of experiment results into normalized-score summaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{normalized_score, stratified_bootstrap_ci, Aggregate};
use super::{read_records, read_references, EnvReference, ResultRecord, REFERENCES_FILE, RESULTS_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub algo: String,
    pub metric: Aggregate,
    pub value: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_envs: usize,
    pub n_runs: usize,
}

/// Normalized final-step scores, grouped `algo -> [env][run]`, in order of first appearance.
pub fn final_scores(records: &[ResultRecord], refs: &[EnvReference]) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let ref_of: HashMap<&str, &EnvReference> = refs.iter().map(|r| (r.env_id.as_str(), r)).collect();
    let mut last: Vec<&ResultRecord> = Vec::new();
    let mut index: HashMap<(&str, &str, u64), usize> = HashMap::new();
    for r in records {
        let key = (r.env_id.as_str(), r.algo.as_str(), r.seed);
        match index.get(&key) {
            Some(&i) if last[i].step >= r.step => {}
            Some(&i) => last[i] = r,
            None => {
                index.insert(key, last.len());
                last.push(r);
            }
        }
    }

    // algo -> [(env_id, runs)]
    type EnvRuns = Vec<(String, Vec<f64>)>;
    let mut out: Vec<(String, EnvRuns)> = Vec::new();
    for r in last {
        let reference = ref_of
            .get(r.env_id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("no reference scores for environment {}", r.env_id)))?;
        let score = normalized_score(r.eval_return, reference.random_ref, reference.demo_ref)?;
        let algo_pos = match out.iter().position(|(a, _)| *a == r.algo) {
            Some(p) => p,
            None => {
                out.push((r.algo.clone(), Vec::new()));
                out.len() - 1
            }
        };
        let envs = &mut out[algo_pos].1;
        match envs.iter_mut().find(|(e, _)| *e == r.env_id) {
            Some((_, runs)) => runs.push(score),
            None => envs.push((r.env_id.clone(), vec![score])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(algo, envs)| (algo, envs.into_iter().map(|(_, runs)| runs).collect()))
        .collect())
}

/// One row per algorithm and metric. With `n_bootstrap == 0` the CI columns are empty.
pub fn summarize(
    records: &[ResultRecord],
    refs: &[EnvReference],
    metrics: &[Aggregate],
    n_bootstrap: usize,
    confidence: f64,
    seed: u64,
) -> Result<Vec<AggregateRow>> {
    let mut rows = Vec::new();
    for (algo, per_env) in final_scores(records, refs)? {
        for &metric in metrics {
            let value = metric.apply(&per_env)?;
            let (ci_lo, ci_hi) = if n_bootstrap > 0 {
                let (lo, hi) = stratified_bootstrap_ci(&per_env, metric, n_bootstrap, confidence, seed)?;
                (Some(lo), Some(hi))
            } else {
                (None, None)
            };
            rows.push(AggregateRow {
                algo: algo.clone(),
                metric,
                value,
                ci_lo,
                ci_hi,
                n_envs: per_env.len(),
                n_runs: per_env.iter().map(Vec::len).sum(),
            });
        }
    }
    Ok(rows)
}

/// Reads `results.csv` and `references.csv` from an experiment directory.
pub fn load_dir(dir: &Path) -> Result<(Vec<ResultRecord>, Vec<EnvReference>)> {
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::open(&p).map_err(|e| Error::io(&p, e))
    };
    Ok((
        read_records(open(RESULTS_FILE)?)?,
        read_references(open(REFERENCES_FILE)?)?,
    ))
}

pub fn render_table(rows: &[AggregateRow]) -> String {
    let algo_w = rows.iter().map(|r| r.algo.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<algo_w$}  {:<6}  {:>9}  {:>21}  {:>4}  {:>4}",
        "algo", "metric", "value", "ci", "envs", "runs"
    );
    for r in rows {
        let ci = match (r.ci_lo, r.ci_hi) {
            (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<algo_w$}  {:<6}  {:>9.4}  {:>21}  {:>4}  {:>4}",
            r.algo, r.metric, r.value, ci, r.n_envs, r.n_runs
        );
    }
    out
}

/// CSV header `algo,metric,value,ci_lo,ci_hi,n_envs,n_runs`.
pub fn write_aggregates<W: std::io::Write>(rows: &[AggregateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(env: &str, algo: &str, seed: u64, step: usize, ret: f64) -> ResultRecord {
        ResultRecord {
            env_id: env.into(),
            algo: algo.into(),
            seed,
            step,
            eval_return: ret,
            wall_time: 0.0,
        }
    }

    fn refs() -> Vec<EnvReference> {
        vec![
            EnvReference {
                env_id: "a".into(),
                random_ref: 0.0,
                demo_ref: 2.0,
            },
            EnvReference {
                env_id: "b".into(),
                random_ref: -1.0,
                demo_ref: 1.0,
            },
        ]
    }

    #[test]
    fn uses_last_step_and_normalizes() {
        let records = vec![
            rec("a", "x", 0, 10, 0.0),
            rec("a", "x", 0, 20, 1.0),
            rec("a", "x", 1, 20, 2.0),
            rec("b", "x", 0, 20, 0.0),
            rec("b", "y", 0, 0, 1.0),
        ];
        let scores = final_scores(&records, &refs()).unwrap();
        assert_eq!(scores[0], ("x".to_string(), vec![vec![0.5, 1.0], vec![0.5]]));
        assert_eq!(scores[1], ("y".to_string(), vec![vec![1.0]]));

        let rows = summarize(&records, &refs(), &[Aggregate::Mean, Aggregate::Median], 0, 0.95, 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].value, 0.625);
        assert_eq!(rows[0].n_runs, 3);
        assert_eq!(rows[0].ci_lo, None);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let records = vec![rec("c", "x", 0, 1, 0.0)];
        assert!(final_scores(&records, &refs()).is_err());
    }

    #[test]
    fn aggregates_csv_and_table() {
        let records = vec![
            rec("a", "causal_tabular", 0, 5, 1.0),
            rec("a", "causal_tabular", 1, 5, 2.0),
        ];
        let rows = summarize(&records, &refs(), &[Aggregate::Iqm], 100, 0.9, 3).unwrap();
        let mut buf = Vec::new();
        write_aggregates(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("algo,metric,value,ci_lo,ci_hi,n_envs,n_runs\ncausal_tabular,iqm,0.75,"));
        let table = render_table(&rows);
        assert!(table.contains("causal_tabular") && table.contains("iqm"));
    }
}
