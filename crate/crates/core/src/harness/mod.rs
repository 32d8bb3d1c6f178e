//! Configuration-driven batch experiments.
//!
//! An experiment expands into cells `(environment, algorithm, seed)`. Each
//! cell writes its own CSV under `<dir>/cells/`; an existing cell file means
//! the cell is complete and is read back instead of rerun. After all cells
//! finish, `results.csv` and `references.csv` are written in config order.

pub mod metrics;
pub mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{exact_nominal, marginalize_interventional, Cmdp};
use crate::envs::{
    make_adversarial_confounded_bandit, make_confounded_gridworld, make_random_cmdp, FeatureMap, DEFAULT_WIND,
};
use crate::error::{Error, Result};
use crate::learners::{evaluate_returns, tabular_causal_q, tabular_naive_q, LearnerConfig, LearningCurve};
use crate::neural::{neural_causal_dqn, NetSpec};
use crate::solvers::{
    causal_bound_vi, greedy_policy, policy_value, standard_value_iteration, BoundSide, Policy, DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
};

pub use metrics::{iqm, mean, median, normalized_score, stratified_bootstrap_ci, Aggregate};
pub use report::{summarize, AggregateRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    CausalTabular,
    NaiveTabular,
    CausalNeural,
    ExactLowerVi,
    ExactVi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::CausalTabular,
        Algorithm::NaiveTabular,
        Algorithm::CausalNeural,
        Algorithm::ExactLowerVi,
        Algorithm::ExactVi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::CausalTabular => "causal_tabular",
            Algorithm::NaiveTabular => "naive_tabular",
            Algorithm::CausalNeural => "causal_neural",
            Algorithm::ExactLowerVi => "exact_lower_vi",
            Algorithm::ExactVi => "exact_vi",
        }
    }

    pub fn is_solver(self) -> bool {
        matches!(self, Algorithm::ExactLowerVi | Algorithm::ExactVi)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_strength() -> f64 {
    1.0
}

fn default_wind() -> Vec<f64> {
    DEFAULT_WIND.to_vec()
}

/// Environment family; generator families expand into one instance per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvironmentSpec {
    Random {
        n_states: usize,
        n_actions: usize,
        n_noise: usize,
        gamma: f64,
        #[serde(default = "default_strength")]
        confounding_strength: f64,
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
    },
    Gridworld {
        width: usize,
        height: usize,
        #[serde(default = "default_wind")]
        wind: Vec<f64>,
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
    },
    Bandit {
        #[serde(default = "default_seeds")]
        seeds: Vec<u64>,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub struct EnvInstance {
    pub env_id: String,
    pub cmdp: Cmdp,
    pub features: FeatureMap,
}

impl EnvironmentSpec {
    pub fn instances(&self) -> Result<Vec<EnvInstance>> {
        let one_hot = |env_id: String, cmdp: Cmdp| EnvInstance {
            env_id,
            features: FeatureMap::one_hot(cmdp.n_states),
            cmdp,
        };
        match self {
            EnvironmentSpec::Random {
                n_states,
                n_actions,
                n_noise,
                gamma,
                confounding_strength,
                seeds,
            } => seeds
                .iter()
                .map(|&seed| {
                    let cmdp = make_random_cmdp(*n_states, *n_actions, *n_noise, *gamma, seed, *confounding_strength)?;
                    Ok(one_hot(
                        format!("random_{n_states}x{n_actions}x{n_noise}_s{seed}"),
                        cmdp,
                    ))
                })
                .collect(),
            EnvironmentSpec::Gridworld {
                width,
                height,
                wind,
                seeds,
            } => seeds
                .iter()
                .map(|&seed| {
                    let inst = make_confounded_gridworld(*width, *height, wind, seed)?;
                    Ok(EnvInstance {
                        env_id: format!("gridworld_{width}x{height}_s{seed}"),
                        cmdp: inst.cmdp,
                        features: inst.features,
                    })
                })
                .collect(),
            EnvironmentSpec::Bandit { seeds } => seeds
                .iter()
                .map(|&seed| {
                    let inst = make_adversarial_confounded_bandit(seed)?;
                    Ok(EnvInstance {
                        env_id: format!("bandit_s{seed}"),
                        cmdp: inst.cmdp,
                        features: inst.features,
                    })
                })
                .collect(),
            EnvironmentSpec::File { path } => {
                let cmdp = Cmdp::load(path)?;
                let stem = path
                    .file_stem()
                    .map_or("env".into(), |s| s.to_string_lossy().into_owned());
                Ok(vec![one_hot(stem, cmdp)])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmsSection {
    pub names: Vec<String>,
    pub seeds: Vec<u64>,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    pub algorithms: AlgorithmsSection,
    /// Overrides applied on top of the per-environment learner defaults.
    #[serde(default)]
    pub learner: toml::Table,
    #[serde(default)]
    pub network: NetSpec,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parses a config; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text)?;
        if let EnvironmentSpec::File { path } = &mut config.environment {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        if config.output.dir.is_relative() {
            config.output.dir = base_dir.join(&config.output.dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.names.is_empty() {
            return Err(Error::InvalidConfig("algorithm list is empty".into()));
        }
        if self.algorithms.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.output.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        self.algorithms()?;
        if let EnvironmentSpec::File { path } = &self.environment {
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "environment file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn algorithms(&self) -> Result<Vec<Algorithm>> {
        self.algorithms.names.iter().map(|n| n.parse()).collect()
    }

    /// Learner defaults for `cmdp`, with the `[learner]` overrides and `seed` applied.
    pub fn learner_config(&self, cmdp: &Cmdp, seed: u64) -> Result<LearnerConfig> {
        let mut table = toml::Table::try_from(LearnerConfig::for_cmdp(cmdp))?;
        table.extend(self.learner.clone());
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        let config: LearnerConfig = table.try_into()?;
        config.validate_for(cmdp)?;
        Ok(config)
    }
}

/// One evaluation of one run. Steps increase within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub env_id: String,
    pub algo: String,
    pub seed: u64,
    pub step: usize,
    pub eval_return: f64,
    pub wall_time: f64,
}

pub fn write_records<W: std::io::Write>(records: &[ResultRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(["env_id", "algo", "seed", "step", "eval_return", "wall_time"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(reader: R) -> Result<Vec<ResultRecord>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Normalization anchors: a uniformly random policy and the greedy policy
/// of exact interventional value iteration, both valued exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReference {
    pub env_id: String,
    pub random_ref: f64,
    pub demo_ref: f64,
}

pub fn env_reference(inst: &EnvInstance) -> Result<EnvReference> {
    let cmdp = &inst.cmdp;
    let random_ref = policy_value(cmdp, &Policy::uniform(cmdp.n_states, cmdp.n_actions), DEFAULT_TOL)?;
    let demo_ref = policy_value(cmdp, &optimal_policy(cmdp)?, DEFAULT_TOL)?;
    Ok(EnvReference {
        env_id: inst.env_id.clone(),
        random_ref,
        demo_ref,
    })
}

fn optimal_policy(cmdp: &Cmdp) -> Result<Policy> {
    let m = marginalize_interventional(cmdp);
    let (q, _) = standard_value_iteration(&m.trans, &m.reward, cmdp.gamma, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    Ok(greedy_policy(&q))
}

pub fn write_references<W: std::io::Write>(refs: &[EnvReference], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in refs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_references<R: std::io::Read>(reader: R) -> Result<Vec<EnvReference>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub const RESULTS_FILE: &str = "results.csv";
pub const REFERENCES_FILE: &str = "references.csv";
pub const CELLS_DIR: &str = "cells";

struct Cell<'a> {
    inst: &'a EnvInstance,
    algo: Algorithm,
    seed: u64,
}

impl Cell<'_> {
    fn stem(&self) -> String {
        format!("{}__{}__seed{}", self.inst.env_id, self.algo, self.seed)
    }
}

/// Runs every cell of `config` and returns all records in config order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    config.validate()?;
    let algorithms = config.algorithms()?;
    let instances = config.environment.instances()?;
    for inst in &instances {
        config.learner_config(&inst.cmdp, 0)?;
    }

    let dir = &config.output.dir;
    let cells_dir = dir.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;

    let refs = instances.iter().map(env_reference).collect::<Result<Vec<_>>>()?;
    write_file(&dir.join(REFERENCES_FILE), |w| write_references(&refs, w))?;

    let cells: Vec<Cell> = instances
        .iter()
        .flat_map(|inst| {
            algorithms.iter().flat_map(move |&algo| {
                config
                    .algorithms
                    .seeds
                    .iter()
                    .map(move |&seed| Cell { inst, algo, seed })
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.output.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let per_cell: Vec<Vec<ResultRecord>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_or_resume(config, cell, &cells_dir))
            .collect::<Result<_>>()
    })?;

    let records: Vec<ResultRecord> = per_cell.into_iter().flatten().collect();
    write_file(&dir.join(RESULTS_FILE), |w| write_records(&records, w))?;
    Ok(records)
}

fn run_or_resume(config: &ExperimentConfig, cell: &Cell, cells_dir: &Path) -> Result<Vec<ResultRecord>> {
    let path = cells_dir.join(format!("{}.csv", cell.stem()));
    if path.is_file() {
        log::info!("skipping completed cell {}", cell.stem());
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        return read_records(file);
    }
    log::info!("running cell {}", cell.stem());
    let records = run_cell(config, cell, cells_dir)?;
    write_file(&path, |w| write_records(&records, w))?;
    Ok(records)
}

fn run_cell(config: &ExperimentConfig, cell: &Cell, cells_dir: &Path) -> Result<Vec<ResultRecord>> {
    let cmdp = &cell.inst.cmdp;
    let lc = config.learner_config(cmdp, cell.seed)?;
    let started = Instant::now();
    let record = |step: usize, eval_return: f64, wall_time: f64| ResultRecord {
        env_id: cell.inst.env_id.clone(),
        algo: cell.algo.to_string(),
        seed: cell.seed,
        step,
        eval_return,
        wall_time,
    };
    let from_curve = |curve: LearningCurve| {
        curve
            .points
            .iter()
            .map(|p| record(p.step, p.eval_return_mean, p.wall_time))
            .collect::<Vec<_>>()
    };
    let records = match cell.algo {
        Algorithm::CausalTabular => from_curve(tabular_causal_q(cmdp, &lc)?.1),
        Algorithm::NaiveTabular => from_curve(tabular_naive_q(cmdp, &lc)?.1),
        Algorithm::CausalNeural => {
            let (net, curve) = neural_causal_dqn(cmdp, &cell.inst.features, &lc, &config.network)?;
            net.save(cells_dir.join(format!("{}.net.toml", cell.stem())))?;
            from_curve(curve)
        }
        Algorithm::ExactLowerVi | Algorithm::ExactVi => {
            let policy = if cell.algo == Algorithm::ExactVi {
                optimal_policy(cmdp)?
            } else {
                let (q, _) = causal_bound_vi(&exact_nominal(cmdp), BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
                greedy_policy(&q)
            };
            let (ret, _) = evaluate_returns(cmdp, &policy, lc.eval_episodes, lc.episode_horizon, lc.seed);
            vec![record(0, ret, started.elapsed().as_secs_f64())]
        }
    };
    Ok(records)
}

/// Writes through a temporary sibling and renames, so a present file is always complete.
fn write_file(path: &Path, write: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write(&mut file)?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_text(dir: &Path, names: &str, seeds: &str) -> String {
        format!(
            r#"
[environment]
generator = "random"
n_states = 4
n_actions = 2
n_noise = 3
gamma = 0.8
seeds = [3]

[algorithms]
names = {names}
seeds = {seeds}

[learner]
total_steps = 400
eval_points = 4
eval_episodes = 3

[output]
dir = "{}"
workers = 2
"#,
            dir.display()
        )
    }

    fn strip_time(records: &[ResultRecord]) -> Vec<ResultRecord> {
        records
            .iter()
            .map(|r| ResultRecord {
                wall_time: 0.0,
                ..r.clone()
            })
            .collect()
    }

    #[test]
    fn single_solver_cell_gives_one_record() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            ExperimentConfig::from_toml_str(&config_text(dir.path(), r#"["exact_vi"]"#, "[0]"), dir.path()).unwrap();
        let records = run_experiment(&cfg).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].algo, "exact_vi");
        assert!(dir.path().join(RESULTS_FILE).is_file());
        assert!(dir.path().join(REFERENCES_FILE).is_file());
    }

    #[test]
    fn cell_count_follows_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let text = config_text(dir.path(), r#"["causal_tabular", "naive_tabular"]"#, "[0, 1, 2, 3, 4]");
        let cfg = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
        let records = run_experiment(&cfg).unwrap();
        assert_eq!(records.len(), 2 * 5 * 4);
        let cells = fs::read_dir(dir.path().join(CELLS_DIR)).unwrap().count();
        assert_eq!(cells, 10);
        for chunk in records.chunks(4) {
            let steps: Vec<usize> = chunk.iter().map(|r| r.step).collect();
            assert_eq!(steps, vec![100, 200, 300, 400]);
        }
    }

    #[test]
    fn reruns_are_identical_and_resume() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let names = r#"["causal_tabular", "exact_lower_vi"]"#;
        let ra = run_experiment(
            &ExperimentConfig::from_toml_str(&config_text(a.path(), names, "[1, 2]"), a.path()).unwrap(),
        )
        .unwrap();
        let rb = run_experiment(
            &ExperimentConfig::from_toml_str(&config_text(b.path(), names, "[1, 2]"), b.path()).unwrap(),
        )
        .unwrap();
        assert_eq!(strip_time(&ra), strip_time(&rb));

        // a completed cell file is reused verbatim
        let cfg = ExperimentConfig::from_toml_str(&config_text(a.path(), names, "[1, 2]"), a.path()).unwrap();
        let cell = a
            .path()
            .join(CELLS_DIR)
            .join("random_4x2x3_s3__causal_tabular__seed1.csv");
        let mut doctored = read_records(fs::File::open(&cell).unwrap()).unwrap();
        doctored[0].eval_return = 123.0;
        write_records(&doctored, fs::File::create(&cell).unwrap()).unwrap();
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(again[0].eval_return, 123.0);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let records = vec![
            ResultRecord {
                env_id: "bandit_s0".into(),
                algo: "naive_tabular".into(),
                seed: 4,
                step: 10,
                eval_return: -0.1234567890123,
                wall_time: 0.5,
            },
            ResultRecord {
                env_id: "bandit_s0".into(),
                algo: "naive_tabular".into(),
                seed: 4,
                step: 20,
                eval_return: 1.0 / 3.0,
                wall_time: 1.25,
            },
        ];
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        assert!(buf.starts_with(b"env_id,algo,seed,step,eval_return,wall_time\n"));
        assert_eq!(read_records(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad_algo = config_text(dir.path(), r#"["causal_magic"]"#, "[0]");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad_algo, dir.path()),
            Err(Error::UnknownAlgorithm(_))
        ));
        assert!(ExperimentConfig::from_toml_str(&config_text(dir.path(), "[]", "[0]"), dir.path()).is_err());
        assert!(
            ExperimentConfig::from_toml_str(&config_text(dir.path(), r#"["exact_vi"]"#, "[]"), dir.path()).is_err()
        );

        let missing = r#"
[environment]
generator = "file"
path = "nowhere.toml"
[algorithms]
names = ["exact_vi"]
seeds = [0]
[output]
dir = "out"
"#;
        assert!(matches!(
            ExperimentConfig::from_toml_str(missing, dir.path()),
            Err(Error::Io { .. })
        ));

        let typo = config_text(dir.path(), r#"["exact_vi"]"#, "[0]").replace("eval_episodes", "eval_episode");
        let cfg = ExperimentConfig::from_toml_str(&typo, dir.path()).unwrap();
        assert!(run_experiment(&cfg).is_err());

        let gamma = config_text(dir.path(), r#"["exact_vi"]"#, "[0]").replace("[learner]", "[learner]\ngamma = 0.5");
        let cfg = ExperimentConfig::from_toml_str(&gamma, dir.path()).unwrap();
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::ParameterMismatch { what: "gamma", .. })
        ));
    }

    #[test]
    fn file_environment_resolves_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        make_random_cmdp(3, 2, 2, 0.5, 1, 1.0)
            .unwrap()
            .save(dir.path().join("env.toml"))
            .unwrap();
        let text = r#"
[environment]
generator = "file"
path = "env.toml"
[algorithms]
names = ["exact_vi", "exact_lower_vi"]
seeds = [0]
[output]
dir = "out"
"#;
        let cfg = ExperimentConfig::from_toml_str(text, dir.path()).unwrap();
        let records = run_experiment(&cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.env_id == "env"));
        assert!(dir.path().join("out").join(RESULTS_FILE).is_file());
    }

    #[test]
    fn references_bracket_policies() {
        let inst = &EnvironmentSpec::Bandit { seeds: vec![2] }.instances().unwrap()[0];
        let r = env_reference(inst).unwrap();
        assert!(r.demo_ref > r.random_ref);
    }
}
