//! Sample-based learners driven by a demonstrator.
//!
//! All learners share [`run_demonstrator_loop`]: the demonstrator acts
//! `x = f_X(s, u)` (replaced, with probability ε, by a uniformly random
//! executed action), every transition goes into a [`ReplayBuffer`], and each
//! step trains the agent on a uniformly sampled minibatch against a target
//! copy synced every `target_sync_period` steps.

mod replay;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, Transition};
use crate::error::{Error, Result};
use crate::rng::{self, sample_categorical, STREAM_ENV, STREAM_EVAL};
use crate::solvers::{greedy_policy, Policy, QKind, QTable};

pub use replay::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub gamma: f64,
    /// Reward floor `a`; must match the environment.
    pub reward_lo: f64,
    /// `lr_t = learning_rate / (1 + t / lr_tau)`.
    pub learning_rate: f64,
    pub lr_tau: f64,
    /// ε decays linearly from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of the run.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    pub batch_size: usize,
    /// Number of buffered next states sampled per minibatch for the
    /// worst-case state estimate.
    pub worst_state_candidates: usize,
    /// Use every state as a candidate instead of sampling.
    pub exact_candidates: bool,
    pub target_sync_period: usize,
    pub total_steps: usize,
    pub buffer_capacity: usize,
    /// Demonstrator episodes and evaluation rollouts are cut at this length.
    pub episode_horizon: usize,
    pub eval_episodes: usize,
    /// Number of evaluations spread evenly over the run.
    pub eval_points: usize,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            gamma: 0.9,
            reward_lo: 0.0,
            learning_rate: 0.5,
            lr_tau: 1e4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.1,
            batch_size: 32,
            worst_state_candidates: 32,
            exact_candidates: false,
            target_sync_period: 100,
            total_steps: 100_000,
            buffer_capacity: 100_000,
            episode_horizon: 100,
            eval_episodes: 10,
            eval_points: 20,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    /// Defaults with `gamma` and `reward_lo` taken from the environment.
    pub fn for_cmdp(cmdp: &Cmdp) -> Self {
        LearnerConfig {
            gamma: cmdp.gamma,
            reward_lo: cmdp.reward_lo,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning rate {} outside (0, 1]", self.learning_rate));
        }
        if !(self.lr_tau > 0.0) {
            return bad("lr_tau must be positive".into());
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} {e} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction outside [0, 1]".into());
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("worst_state_candidates", self.worst_state_candidates),
            ("target_sync_period", self.target_sync_period),
            ("total_steps", self.total_steps),
            ("buffer_capacity", self.buffer_capacity),
            ("episode_horizon", self.episode_horizon),
            ("eval_episodes", self.eval_episodes),
            ("eval_points", self.eval_points),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Validates and checks that `gamma` and `reward_lo` agree with the environment.
    pub fn validate_for(&self, cmdp: &Cmdp) -> Result<()> {
        self.validate()?;
        if self.reward_lo != cmdp.reward_lo {
            return Err(Error::ParameterMismatch {
                what: "reward_lo",
                left: self.reward_lo,
                right: cmdp.reward_lo,
            });
        }
        if self.gamma != cmdp.gamma {
            return Err(Error::ParameterMismatch {
                what: "gamma",
                left: self.gamma,
                right: cmdp.gamma,
            });
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate / (1.0 + step as f64 / self.lr_tau)
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.total_steps as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return self.epsilon_end;
        }
        let frac = step as f64 / horizon;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }

    /// Steps (1-based counts) after which the greedy policy is evaluated.
    pub fn eval_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = (1..=self.eval_points)
            .map(|k| k * self.total_steps / self.eval_points)
            .filter(|&s| s > 0)
            .collect();
        steps.dedup();
        steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Seconds since the start of the run; not part of the curve CSV.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub algo: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// CSV with header `step,eval_return_mean,eval_return_std,algo,seed`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "eval_return_mean", "eval_return_std", "algo", "seed"])?;
        for p in &self.points {
            w.write_record([
                p.step.to_string(),
                p.eval_return_mean.to_string(),
                p.eval_return_std.to_string(),
                self.algo.clone(),
                self.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Mean and population standard deviation of the discounted return of
/// `policy` over `episodes` rollouts of at most `horizon` steps.
///
/// Rollouts use the evaluation stream of `seed`, so repeated evaluations of
/// the same policy see the same noise.
pub fn evaluate_returns(cmdp: &Cmdp, policy: &Policy, episodes: usize, horizon: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng::stream(seed, STREAM_EVAL);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            let mut s = sample_categorical(&mut rng, &cmdp.init_dist);
            let mut discount = 1.0;
            let mut ret = 0.0;
            for _ in 0..horizon {
                let u = sample_categorical(&mut rng, &cmdp.noise_dist);
                let x = policy.sample(s, &mut rng);
                let t = cmdp.step(s, x, u);
                ret += discount * t.y;
                discount *= cmdp.gamma;
                if t.done {
                    break;
                }
                s = t.s_next;
            }
            ret
        })
        .collect();
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A learner trained from replayed minibatches.
pub trait Agent {
    /// Applies one training step on `batch`; `candidates` are the states
    /// searched for the worst-case next state.
    fn train(&mut self, batch: &[Transition], candidates: &[usize], lr: f64);
    fn sync_target(&mut self);
    fn greedy_policy(&self) -> Policy;
    fn uses_candidates(&self) -> bool {
        true
    }
}

/// Drives `agent` with demonstrator data and returns its learning curve.
pub fn run_demonstrator_loop<A: Agent>(
    cmdp: &Cmdp,
    config: &LearnerConfig,
    algo: &str,
    agent: &mut A,
) -> Result<LearningCurve> {
    config.validate_for(cmdp)?;
    let mut rng = rng::stream(config.seed, STREAM_ENV);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let all_states: Vec<usize> = (0..cmdp.n_states).collect();
    let eval_steps = config.eval_steps();
    let mut next_eval = 0;
    let mut points = Vec::with_capacity(eval_steps.len());

    let started = std::time::Instant::now();
    let mut s = sample_categorical(&mut rng, &cmdp.init_dist);
    let mut episode_len = 0;
    for t in 0..config.total_steps {
        let u = sample_categorical(&mut rng, &cmdp.noise_dist);
        let explore = rng.gen::<f64>() < config.epsilon(t);
        let x = if explore {
            rng.gen_range(0..cmdp.n_actions)
        } else {
            cmdp.behavior_fn[s][u]
        };
        let tr = cmdp.step(s, x, u);
        buffer.push(tr);
        episode_len += 1;
        if tr.done || episode_len >= config.episode_horizon {
            s = sample_categorical(&mut rng, &cmdp.init_dist);
            episode_len = 0;
        } else {
            s = tr.s_next;
        }

        let batch = buffer.sample_batch(config.batch_size, &mut rng);
        let candidates = if !agent.uses_candidates() {
            Vec::new()
        } else if config.exact_candidates {
            all_states.clone()
        } else {
            buffer.sample_next_states(config.worst_state_candidates, &mut rng)
        };
        agent.train(&batch, &candidates, config.lr_at(t));

        let done_steps = t + 1;
        if done_steps % config.target_sync_period == 0 {
            agent.sync_target();
        }
        if next_eval < eval_steps.len() && eval_steps[next_eval] == done_steps {
            let (mean, std) = evaluate_returns(
                cmdp,
                &agent.greedy_policy(),
                config.eval_episodes,
                config.episode_horizon,
                config.seed,
            );
            points.push(CurvePoint {
                step: done_steps,
                eval_return_mean: mean,
                eval_return_std: std,
                wall_time: started.elapsed().as_secs_f64(),
            });
            next_eval += 1;
        }
    }
    Ok(LearningCurve {
        algo: algo.to_string(),
        seed: config.seed,
        points,
    })
}

/// State among `candidates` with the smallest `max_x q(s, x)`; ties go to
/// the lowest state index.
pub fn worst_case_state_estimate(q: &QTable, candidates: &[usize]) -> Result<usize> {
    candidates
        .iter()
        .map(|&s| (q.row_max(s), s))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, s)| s)
        .ok_or(Error::EmptyInput("candidate state list"))
}

/// Tabular agent for the causal update: every action of the sampled state
/// is moved toward its target, observed or not.
#[derive(Debug, Clone)]
pub struct TabularCausalAgent {
    pub q: QTable,
    pub target: QTable,
    pub gamma: f64,
    pub reward_lo: f64,
}

impl TabularCausalAgent {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, reward_lo: f64, reward_hi: f64) -> Self {
        let init = 0.0f64.clamp(reward_lo / (1.0 - gamma), reward_hi / (1.0 - gamma));
        let q = QTable::constant(n_states, n_actions, init, QKind::Lower);
        TabularCausalAgent {
            target: q.clone(),
            q,
            gamma,
            reward_lo,
        }
    }

    /// `w(x)` for every action, computed from the target table only.
    pub fn targets(&self, tr: &Transition, worst_value: f64) -> Vec<f64> {
        let cont = if tr.done { 0.0 } else { self.gamma };
        let observed = tr.y + cont * self.target.row_max(tr.s_next);
        let unobserved = self.reward_lo + cont * worst_value;
        (0..self.q.n_actions())
            .map(|x| if x == tr.x { observed } else { unobserved })
            .collect()
    }
}

impl Agent for TabularCausalAgent {
    fn train(&mut self, batch: &[Transition], candidates: &[usize], lr: f64) {
        let worst = worst_case_state_estimate(&self.target, candidates).expect("candidate set is never empty");
        let worst_value = self.target.row_max(worst);
        for tr in batch {
            let w = self.targets(tr, worst_value);
            for (q, w) in self.q.values[tr.s].iter_mut().zip(w) {
                *q = (1.0 - lr) * *q + lr * w;
            }
        }
    }

    fn sync_target(&mut self) {
        self.target = self.q.clone();
    }

    fn greedy_policy(&self) -> Policy {
        greedy_policy(&self.q)
    }
}

/// Standard Q-learning on the logged action only.
#[derive(Debug, Clone)]
pub struct TabularNaiveAgent {
    pub q: QTable,
    pub target: QTable,
    pub gamma: f64,
}

impl TabularNaiveAgent {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, reward_lo: f64, reward_hi: f64) -> Self {
        let init = 0.0f64.clamp(reward_lo / (1.0 - gamma), reward_hi / (1.0 - gamma));
        let q = QTable::constant(n_states, n_actions, init, QKind::Star);
        TabularNaiveAgent {
            target: q.clone(),
            q,
            gamma,
        }
    }
}

impl Agent for TabularNaiveAgent {
    fn train(&mut self, batch: &[Transition], _candidates: &[usize], lr: f64) {
        for tr in batch {
            let cont = if tr.done { 0.0 } else { self.gamma };
            let w = tr.y + cont * self.target.row_max(tr.s_next);
            let q = &mut self.q.values[tr.s][tr.x];
            *q = (1.0 - lr) * *q + lr * w;
        }
    }

    fn sync_target(&mut self) {
        self.target = self.q.clone();
    }

    fn greedy_policy(&self) -> Policy {
        greedy_policy(&self.q)
    }

    fn uses_candidates(&self) -> bool {
        false
    }
}

/// Causal Q-learning on a table.
pub fn tabular_causal_q(cmdp: &Cmdp, config: &LearnerConfig) -> Result<(QTable, LearningCurve)> {
    let mut agent = TabularCausalAgent::new(
        cmdp.n_states,
        cmdp.n_actions,
        cmdp.gamma,
        cmdp.reward_lo,
        cmdp.reward_hi,
    );
    let curve = run_demonstrator_loop(cmdp, config, "causal_tabular", &mut agent)?;
    Ok((agent.q, curve))
}

/// Baseline Q-learning that treats logged data as interventional.
pub fn tabular_naive_q(cmdp: &Cmdp, config: &LearnerConfig) -> Result<(QTable, LearningCurve)> {
    let mut agent = TabularNaiveAgent::new(
        cmdp.n_states,
        cmdp.n_actions,
        cmdp.gamma,
        cmdp.reward_lo,
        cmdp.reward_hi,
    );
    let curve = run_demonstrator_loop(cmdp, config, "naive_tabular", &mut agent)?;
    Ok((agent.q, curve))
}
