//! Confounded MDP generative model.
//!
//! A [`Cmdp`] is a finite structural model: each step draws exogenous noise
//! `u ~ P(U)`, the demonstrator acts `x = f_X(s, u)`, and the environment
//! answers with reward `y = f_Y(s, x, u)` and next state `s' = f_S(s, x, u)`.
//! Because the same `u` feeds the action and the outcome, conditionals
//! estimated from logged demonstrator data (the [`NominalModel`]) differ from
//! the interventional quantities returned by [`marginalize_interventional`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, sample_categorical, SimRng};
use crate::solvers::Policy;

const PROB_TOL: f64 = 1e-12;

/// Finite confounded MDP with tabulated mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cmdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_noise: usize,
    pub gamma: f64,
    pub reward_lo: f64,
    pub reward_hi: f64,
    pub noise_dist: Vec<f64>,
    pub init_dist: Vec<f64>,
    /// `f_S`, indexed `[s][x][u]`.
    pub trans_fn: Vec<Vec<Vec<usize>>>,
    /// `f_X`, indexed `[s][u]`.
    pub behavior_fn: Vec<Vec<usize>>,
    /// `f_Y`, indexed `[s][x][u]`.
    pub reward_fn: Vec<Vec<Vec<f64>>>,
    /// Absorbing states: every action self-loops with zero reward, and
    /// entering one ends the episode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terminal_states: Vec<usize>,
}

/// Shape and scalar parameters shared by every model derived from a CMDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelInfo {
    pub n_states: usize,
    pub n_actions: usize,
    pub reward_lo: f64,
    pub reward_hi: f64,
    pub gamma: f64,
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::InvalidCmdp(format!(
            "{name} has {} entries, expected {len}",
            p.len()
        )));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidCmdp(format!("{name} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidCmdp(format!("{name} sums to {total}")));
    }
    Ok(())
}

impl Cmdp {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidCmdp(msg));
        if self.n_states == 0 || self.n_actions == 0 || self.n_noise == 0 {
            return bad("state, action and noise spaces must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !self.reward_lo.is_finite() || !self.reward_hi.is_finite() || self.reward_lo > self.reward_hi {
            return bad(format!("reward bounds [{}, {}]", self.reward_lo, self.reward_hi));
        }
        check_distribution("noise_dist", &self.noise_dist, self.n_noise)?;
        check_distribution("init_dist", &self.init_dist, self.n_states)?;

        if self.trans_fn.len() != self.n_states
            || self.reward_fn.len() != self.n_states
            || self.behavior_fn.len() != self.n_states
        {
            return bad("mechanism tables must have one row per state".into());
        }
        for s in 0..self.n_states {
            if self.behavior_fn[s].len() != self.n_noise {
                return bad(format!("behavior_fn[{s}] has wrong length"));
            }
            if let Some(&x) = self.behavior_fn[s].iter().find(|&&x| x >= self.n_actions) {
                return bad(format!("behavior_fn[{s}] selects action {x}"));
            }
            if self.trans_fn[s].len() != self.n_actions || self.reward_fn[s].len() != self.n_actions {
                return bad(format!("trans_fn/reward_fn[{s}] has wrong action count"));
            }
            for x in 0..self.n_actions {
                let ts = &self.trans_fn[s][x];
                let ys = &self.reward_fn[s][x];
                if ts.len() != self.n_noise || ys.len() != self.n_noise {
                    return bad(format!("trans_fn/reward_fn[{s}][{x}] has wrong noise count"));
                }
                if let Some(&n) = ts.iter().find(|&&n| n >= self.n_states) {
                    return bad(format!("trans_fn[{s}][{x}] leads to state {n}"));
                }
                if let Some(&y) = ys.iter().find(|&&y| !(y >= self.reward_lo && y <= self.reward_hi)) {
                    return bad(format!("reward_fn[{s}][{x}] has {y} outside bounds"));
                }
            }
        }
        for &t in &self.terminal_states {
            if t >= self.n_states {
                return bad(format!("terminal state {t} out of range"));
            }
            let absorbing = (0..self.n_actions)
                .all(|x| self.trans_fn[t][x].iter().all(|&n| n == t) && self.reward_fn[t][x].iter().all(|&y| y == 0.0));
            if !absorbing {
                return bad(format!("terminal state {t} is not a zero-reward self-loop"));
            }
        }
        Ok(())
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            n_states: self.n_states,
            n_actions: self.n_actions,
            reward_lo: self.reward_lo,
            reward_hi: self.reward_hi,
            gamma: self.gamma,
        }
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_states.contains(&s)
    }

    /// Applies the mechanisms for one step with a fixed noise draw.
    pub fn step(&self, s: usize, x: usize, u: usize) -> Transition {
        let s_next = self.trans_fn[s][x][u];
        Transition {
            s,
            x,
            y: self.reward_fn[s][x][u],
            s_next,
            done: self.is_terminal(s_next),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cmdp: Cmdp = toml::from_str(text)?;
        cmdp.validate()?;
        Ok(cmdp)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}

/// One logged step `(s, x, y, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub x: usize,
    pub y: f64,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Observational,
    Interventional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub regime: Regime,
    pub steps: Vec<Transition>,
}

impl Trajectory {
    /// Checks that each step starts where the previous one ended, except
    /// right after an episode end.
    pub fn is_chained(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].done || w[0].s_next == w[1].s)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for t in &self.steps {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, regime: Regime) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let steps = r.deserialize().collect::<std::result::Result<Vec<Transition>, _>>()?;
        Ok(Trajectory { regime, steps })
    }
}

/// Interventional transition and expected-reward tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Interventional {
    /// `[s][x][s']`
    pub trans: Vec<Vec<Vec<f64>>>,
    /// `[s][x]`
    pub reward: Vec<Vec<f64>>,
}

/// Integrates the noise out of `f_S` and `f_Y` with the action held fixed.
pub fn marginalize_interventional(cmdp: &Cmdp) -> Interventional {
    let (ns, na) = (cmdp.n_states, cmdp.n_actions);
    let mut trans = vec![vec![vec![0.0; ns]; na]; ns];
    let mut reward = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for x in 0..na {
            for (u, &pu) in cmdp.noise_dist.iter().enumerate() {
                trans[s][x][cmdp.trans_fn[s][x][u]] += pu;
                reward[s][x] += cmdp.reward_fn[s][x][u] * pu;
            }
        }
    }
    Interventional { trans, reward }
}

/// Conditionals of the demonstrator's logged process.
///
/// Rows with no support (`P(x|s) = 0` or no visits) hold a uniform
/// placeholder transition and the reward floor, and are marked in
/// `supported`. The causal operator weights them by `P(x|s) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalModel {
    pub p_beh: Vec<Vec<f64>>,
    pub t_tilde: Vec<Vec<Vec<f64>>>,
    pub r_tilde: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub supported: Vec<Vec<bool>>,
    pub reward_lo: f64,
    pub reward_hi: f64,
    pub gamma: f64,
}

impl NominalModel {
    /// Builds a model from explicit tables; support is read off `p_beh > 0`.
    pub fn new(
        p_beh: Vec<Vec<f64>>,
        t_tilde: Vec<Vec<Vec<f64>>>,
        r_tilde: Vec<Vec<f64>>,
        reward_lo: f64,
        reward_hi: f64,
        gamma: f64,
    ) -> Result<Self> {
        let supported = p_beh.iter().map(|row| row.iter().map(|&p| p > 0.0).collect()).collect();
        let counts = p_beh.iter().map(|row| vec![0; row.len()]).collect();
        let model = NominalModel {
            p_beh,
            t_tilde,
            r_tilde,
            counts,
            supported,
            reward_lo,
            reward_hi,
            gamma,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.p_beh.len()
    }

    pub fn n_actions(&self) -> usize {
        self.p_beh.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidNominal(m));
        let (ns, na) = (self.n_states(), self.n_actions());
        if ns == 0 || na == 0 {
            return bad("empty tables".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.reward_lo > self.reward_hi {
            return bad("reward_lo > reward_hi".into());
        }
        if self.t_tilde.len() != ns || self.r_tilde.len() != ns || self.supported.len() != ns || self.counts.len() != ns
        {
            return bad("table row counts disagree".into());
        }
        for s in 0..ns {
            let row = &self.p_beh[s];
            if row.len() != na || row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
                return bad(format!("p_beh[{s}] malformed"));
            }
            let mass: f64 = row.iter().sum();
            if mass > 0.0 && (mass - 1.0).abs() > 1e-9 {
                return bad(format!("p_beh[{s}] sums to {mass}"));
            }
            if self.t_tilde[s].len() != na || self.r_tilde[s].len() != na {
                return bad(format!("t_tilde/r_tilde[{s}] has wrong action count"));
            }
            for x in 0..na {
                let t = &self.t_tilde[s][x];
                if t.len() != ns || t.iter().any(|&p| !(p >= 0.0)) {
                    return bad(format!("t_tilde[{s}][{x}] malformed"));
                }
                if self.supported[s][x] {
                    let m: f64 = t.iter().sum();
                    if (m - 1.0).abs() > 1e-9 {
                        return bad(format!("t_tilde[{s}][{x}] sums to {m}"));
                    }
                    let r = self.r_tilde[s][x];
                    if !(r >= self.reward_lo && r <= self.reward_hi) {
                        return bad(format!("r_tilde[{s}][{x}] = {r} outside bounds"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Closed-form nominal model of the demonstrator's logged process.
pub fn exact_nominal(cmdp: &Cmdp) -> NominalModel {
    let (ns, na) = (cmdp.n_states, cmdp.n_actions);
    let mut p_beh = vec![vec![0.0; na]; ns];
    let mut joint_t = vec![vec![vec![0.0; ns]; na]; ns];
    let mut joint_r = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for (u, &pu) in cmdp.noise_dist.iter().enumerate() {
            let x = cmdp.behavior_fn[s][u];
            p_beh[s][x] += pu;
            joint_t[s][x][cmdp.trans_fn[s][x][u]] += pu;
            joint_r[s][x] += cmdp.reward_fn[s][x][u] * pu;
        }
    }
    let (a, b) = (cmdp.reward_lo, cmdp.reward_hi);
    let mut supported = vec![vec![false; na]; ns];
    let mut t_tilde = vec![vec![vec![1.0 / ns as f64; ns]; na]; ns];
    let mut r_tilde = vec![vec![a; na]; ns];
    for s in 0..ns {
        for x in 0..na {
            let p = p_beh[s][x];
            if p > 0.0 {
                supported[s][x] = true;
                t_tilde[s][x] = joint_t[s][x].iter().map(|&j| j / p).collect();
                r_tilde[s][x] = (joint_r[s][x] / p).clamp(a, b);
            }
        }
    }
    NominalModel {
        p_beh,
        t_tilde,
        r_tilde,
        counts: vec![vec![0; na]; ns],
        supported,
        reward_lo: a,
        reward_hi: b,
        gamma: cmdp.gamma,
    }
}

/// Maximum-likelihood nominal model from observational trajectories.
pub fn estimate_nominal(data: &[Trajectory], info: ModelInfo) -> Result<NominalModel> {
    if data.iter().all(|t| t.steps.is_empty()) {
        return Err(Error::EmptyInput("trajectory list"));
    }
    if data.iter().any(|t| t.regime != Regime::Observational) {
        return Err(Error::RegimeMismatch);
    }
    let (ns, na) = (info.n_states, info.n_actions);
    let mut counts = vec![vec![0u64; na]; ns];
    let mut next = vec![vec![vec![0u64; ns]; na]; ns];
    let mut rsum = vec![vec![0.0; na]; ns];
    for t in data.iter().flat_map(|tr| &tr.steps) {
        if t.s >= ns || t.x >= na || t.s_next >= ns {
            return Err(Error::DimensionMismatch {
                expected: ns.max(na),
                got: t.s.max(t.x).max(t.s_next),
            });
        }
        counts[t.s][t.x] += 1;
        next[t.s][t.x][t.s_next] += 1;
        rsum[t.s][t.x] += t.y;
    }

    let (a, b) = (info.reward_lo, info.reward_hi);
    let mut p_beh = vec![vec![0.0; na]; ns];
    let mut t_tilde = vec![vec![vec![1.0 / ns as f64; ns]; na]; ns];
    let mut r_tilde = vec![vec![a; na]; ns];
    let mut supported = vec![vec![false; na]; ns];
    for s in 0..ns {
        let visits: u64 = counts[s].iter().sum();
        if visits == 0 {
            continue;
        }
        for x in 0..na {
            let n = counts[s][x];
            p_beh[s][x] = n as f64 / visits as f64;
            if n > 0 {
                supported[s][x] = true;
                t_tilde[s][x] = next[s][x].iter().map(|&c| c as f64 / n as f64).collect();
                r_tilde[s][x] = (rsum[s][x] / n as f64).clamp(a, b);
            }
        }
    }
    Ok(NominalModel {
        p_beh,
        t_tilde,
        r_tilde,
        counts,
        supported,
        reward_lo: a,
        reward_hi: b,
        gamma: info.gamma,
    })
}

fn rollout(
    cmdp: &Cmdp,
    horizon: usize,
    rng: &mut SimRng,
    mut choose: impl FnMut(usize, usize, &mut SimRng) -> usize,
) -> Vec<Transition> {
    let mut steps = Vec::with_capacity(horizon);
    let mut s = sample_categorical(rng, &cmdp.init_dist);
    for _ in 0..horizon {
        let u = sample_categorical(rng, &cmdp.noise_dist);
        let x = choose(s, u, rng);
        let t = cmdp.step(s, x, u);
        steps.push(t);
        s = if t.done {
            sample_categorical(rng, &cmdp.init_dist)
        } else {
            t.s_next
        };
    }
    steps
}

/// Logs the demonstrator for `horizon` steps; episodes restart from the
/// initial distribution after entering a terminal state.
pub fn sample_observational(cmdp: &Cmdp, horizon: usize, rng_seed: u64) -> Trajectory {
    let mut rng = rng::stream(rng_seed, rng::STREAM_ENV);
    let steps = rollout(cmdp, horizon, &mut rng, |s, u, _| cmdp.behavior_fn[s][u]);
    Trajectory {
        regime: Regime::Observational,
        steps,
    }
}

/// Runs `do(policy)`: the action is drawn from the policy independently of
/// the noise that drives reward and transition.
pub fn sample_interventional(cmdp: &Cmdp, policy: &Policy, horizon: usize, rng_seed: u64) -> Trajectory {
    let mut rng = rng::stream(rng_seed, rng::STREAM_ENV);
    let steps = rollout(cmdp, horizon, &mut rng, |s, _, rng| policy.sample(s, rng));
    Trajectory {
        regime: Regime::Interventional,
        steps,
    }
}
