//! Confounded environment generators.
//!
//! Each generator hides a per-step context `u` from the learner while the
//! demonstrator sees it, so logged action choices correlate with outcomes the
//! learner cannot explain.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::cmdp::{exact_nominal, Cmdp};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng, STREAM_GEN};
use crate::solvers::{
    argmax, causal_bound_vi, greedy_policy, policy_value, standard_value_iteration, BoundSide, DEFAULT_MAX_ITERS,
};

const CERT_TOL: f64 = 1e-10;

/// Per-state feature vectors fed to function approximators.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub features: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn one_hot(n_states: usize) -> Self {
        let features = (0..n_states)
            .map(|s| (0..n_states).map(|i| if i == s { 1.0 } else { 0.0 }).collect())
            .collect();
        FeatureMap { features }
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn get(&self, s: usize) -> &[f64] {
        &self.features[s]
    }

    pub fn n_states(&self) -> usize {
        self.features.len()
    }
}

/// True start-state values of the naive and causal greedy policies.
///
/// The naive policy is greedy for value iteration on the nominal model as if
/// it were interventional; the causal policy is greedy for the lower causal
/// bound. `gap = causal_value - naive_value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapCertificate {
    pub naive_value: f64,
    pub causal_value: f64,
    pub gap: f64,
}

pub fn naive_causal_gap(cmdp: &Cmdp) -> Result<GapCertificate> {
    let nominal = exact_nominal(cmdp);
    let (q_naive, _) = standard_value_iteration(
        &nominal.t_tilde,
        &nominal.r_tilde,
        cmdp.gamma,
        CERT_TOL,
        DEFAULT_MAX_ITERS,
    )?;
    let (q_causal, _) = causal_bound_vi(&nominal, BoundSide::Lower, CERT_TOL, DEFAULT_MAX_ITERS)?;
    let naive_value = policy_value(cmdp, &greedy_policy(&q_naive), CERT_TOL)?;
    let causal_value = policy_value(cmdp, &greedy_policy(&q_causal), CERT_TOL)?;
    Ok(GapCertificate {
        naive_value,
        causal_value,
        gap: causal_value - naive_value,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    pub start: usize,
    pub goal: usize,
    pub hazards: Vec<usize>,
}

impl GridLayout {
    pub fn cell(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    /// Moves one cell in `dir` (0 up, 1 down, 2 left, 3 right), clipped at walls.
    fn shift(&self, s: usize, dir: usize) -> usize {
        let (c, r) = self.coords(s);
        let (c, r) = match dir {
            0 => (c, r.saturating_sub(1)),
            1 => (c, (r + 1).min(self.height - 1)),
            2 => (c.saturating_sub(1), r),
            3 => ((c + 1).min(self.width - 1), r),
            _ => (c, r),
        };
        self.cell(c, r)
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let s = self.cell(c, r);
                out.push(if s == self.start {
                    'S'
                } else if s == self.goal {
                    'G'
                } else if self.hazards.contains(&s) {
                    'X'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }
}

/// A generated environment with its feature map and harm certificate.
#[derive(Debug, Clone)]
pub struct ConfoundedInstance {
    pub cmdp: Cmdp,
    pub features: FeatureMap,
    pub certificate: GapCertificate,
    pub layout: Option<GridLayout>,
}

impl ConfoundedInstance {
    fn new(cmdp: Cmdp, features: FeatureMap, layout: Option<GridLayout>) -> Result<Self> {
        cmdp.validate()?;
        let certificate = naive_causal_gap(&cmdp)?;
        Ok(ConfoundedInstance {
            cmdp,
            features,
            certificate,
            layout,
        })
    }

    pub fn describe(&self) -> String {
        let mut s = format!(
            "states={} actions={} noise={} gamma={} naive_value={:.6} causal_value={:.6} gap={:.6}\n",
            self.cmdp.n_states,
            self.cmdp.n_actions,
            self.cmdp.n_noise,
            self.cmdp.gamma,
            self.certificate.naive_value,
            self.certificate.causal_value,
            self.certificate.gap
        );
        if let Some(l) = &self.layout {
            s.push_str(&l.render());
        }
        s
    }
}

/// Random CMDP with rewards in `[0, 1]`, uniform noise and uniform start.
///
/// For each `(s, u)` a coin with bias `confounding_strength` decides whether
/// the demonstrator follows the noise (`x = (u + offset_s) mod |X|`) or a fixed
/// per-state action. Strength 0 gives an unconfounded demonstrator; strength 1
/// with `|U| = |X|` makes `u -> x` a bijection.
pub fn make_random_cmdp(
    n_states: usize,
    n_actions: usize,
    n_noise: usize,
    gamma: f64,
    seed: u64,
    confounding_strength: f64,
) -> Result<Cmdp> {
    if !(0.0..=1.0).contains(&confounding_strength) {
        return Err(Error::InvalidConfig(format!(
            "confounding strength {confounding_strength} outside [0, 1]"
        )));
    }
    if n_states == 0 || n_actions == 0 || n_noise == 0 {
        return Err(Error::InvalidConfig("sizes must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, STREAM_GEN);
    let mut trans_fn = vec![vec![vec![0; n_noise]; n_actions]; n_states];
    let mut reward_fn = vec![vec![vec![0.0; n_noise]; n_actions]; n_states];
    for s in 0..n_states {
        for x in 0..n_actions {
            for u in 0..n_noise {
                trans_fn[s][x][u] = rng.gen_range(0..n_states);
                reward_fn[s][x][u] = rng.gen::<f64>();
            }
        }
    }
    let mut behavior_fn = vec![vec![0; n_noise]; n_states];
    for row in behavior_fn.iter_mut() {
        let base = rng.gen_range(0..n_actions);
        let offset = rng.gen_range(0..n_actions);
        for (u, x) in row.iter_mut().enumerate() {
            let follows_noise = rng.gen::<f64>() < confounding_strength;
            *x = if follows_noise { (u + offset) % n_actions } else { base };
        }
    }
    let cmdp = Cmdp {
        n_states,
        n_actions,
        n_noise,
        gamma,
        reward_lo: 0.0,
        reward_hi: 1.0,
        noise_dist: vec![1.0 / n_noise as f64; n_noise],
        init_dist: vec![1.0 / n_states as f64; n_states],
        trans_fn,
        behavior_fn,
        reward_fn,
        terminal_states: vec![],
    };
    cmdp.validate()?;
    Ok(cmdp)
}

pub const GRID_GAMMA: f64 = 0.9;
pub const DEFAULT_WIND: [f64; WIND_DIRECTIONS] = [0.6, 0.1, 0.1, 0.1, 0.1];
/// Wind directions indexed by noise value: calm, north, south, west, east.
pub const WIND_DIRECTIONS: usize = 5;
const WIND_SHIFT: [usize; WIND_DIRECTIONS] = [4, 0, 1, 2, 3];

/// Bottom row between start and goal is a cliff of hazards; a seeded number
/// of extra hazards is scattered above it, keeping the goal reachable.
fn cliff_layout(width: usize, height: usize, rng: &mut SimRng) -> GridLayout {
    let n = width * height;
    let start = (height - 1) * width;
    let goal = n - 1;
    let cliff: Vec<usize> = (1..width - 1).map(|c| start + c).collect();
    let interior: Vec<usize> = (0..start).collect();
    let mut extra = rng.gen_range(0..=interior.len() / 6);
    let mut attempts = 0;
    loop {
        let mut hazards = cliff.clone();
        hazards.extend(interior.choose_multiple(rng, extra).copied());
        hazards.sort_unstable();
        let layout = GridLayout {
            width,
            height,
            start,
            goal,
            hazards,
        };
        if reachable_without_hazards(&layout) {
            return layout;
        }
        attempts += 1;
        if attempts % 50 == 0 {
            extra -= 1;
        }
    }
}

fn reachable_without_hazards(layout: &GridLayout) -> bool {
    let mut seen = vec![false; layout.width * layout.height];
    let mut stack = vec![layout.start];
    seen[layout.start] = true;
    while let Some(s) = stack.pop() {
        if s == layout.goal {
            return true;
        }
        for d in 0..4 {
            let n = layout.shift(s, d);
            if !seen[n] && !layout.hazards.contains(&n) {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    false
}

/// Windy cliff gridworld with a wind-aware demonstrator.
///
/// The agent starts in the bottom-left corner and the goal is the
/// bottom-right corner, with a cliff of hazards between them. The state is the cell index; the wind `u` is hidden from the learner. An
/// action moves one cell, then the wind shifts the agent one more cell, both
/// clipped at the walls. Entering the goal pays +1 and absorbs; entering a
/// hazard pays -1. The demonstrator plays the optimal policy of the
/// deterministic grid induced by the current wind, so it only steps next to
/// hazards when the wind makes that safe.
pub fn make_confounded_gridworld(
    width: usize,
    height: usize,
    wind_dist: &[f64],
    seed: u64,
) -> Result<ConfoundedInstance> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid {width}x{height} is smaller than 2x2"
        )));
    }
    if wind_dist.len() != WIND_DIRECTIONS {
        return Err(Error::DimensionMismatch {
            expected: WIND_DIRECTIONS,
            got: wind_dist.len(),
        });
    }
    let n = width * height;
    let mut rng = rng::stream(seed, STREAM_GEN);
    let layout = cliff_layout(width, height, &mut rng);
    let (start, goal) = (layout.start, layout.goal);

    let na = 4;
    let nu = WIND_DIRECTIONS;
    let mut trans_fn = vec![vec![vec![0; nu]; na]; n];
    let mut reward_fn = vec![vec![vec![0.0; nu]; na]; n];
    for s in 0..n {
        for x in 0..na {
            for u in 0..nu {
                if s == goal {
                    trans_fn[s][x][u] = goal;
                    continue;
                }
                let next = layout.shift(layout.shift(s, x), WIND_SHIFT[u]);
                trans_fn[s][x][u] = next;
                reward_fn[s][x][u] = if next == goal {
                    1.0
                } else if layout.hazards.contains(&next) {
                    -1.0
                } else {
                    0.0
                };
            }
        }
    }

    // demonstrator: optimal play on the deterministic grid of each wind
    let mut behavior_fn = vec![vec![0; nu]; n];
    for u in 0..nu {
        let trans: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|s| {
                (0..na)
                    .map(|x| {
                        let mut row = vec![0.0; n];
                        row[trans_fn[s][x][u]] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        let reward: Vec<Vec<f64>> = (0..n).map(|s| (0..na).map(|x| reward_fn[s][x][u]).collect()).collect();
        let (q, _) = standard_value_iteration(&trans, &reward, GRID_GAMMA, CERT_TOL, DEFAULT_MAX_ITERS)?;
        for (s, row) in behavior_fn.iter_mut().enumerate() {
            row[u] = if s == goal { 0 } else { argmax(&q.values[s]) };
        }
    }

    let mut init_dist = vec![0.0; n];
    init_dist[start] = 1.0;
    let cmdp = Cmdp {
        n_states: n,
        n_actions: na,
        n_noise: nu,
        gamma: GRID_GAMMA,
        reward_lo: -1.0,
        reward_hi: 1.0,
        noise_dist: wind_dist.to_vec(),
        init_dist,
        trans_fn,
        behavior_fn,
        reward_fn,
        terminal_states: vec![goal],
    };
    ConfoundedInstance::new(cmdp, FeatureMap::one_hot(n), Some(layout))
}

pub const BANDIT_GAMMA: f64 = 0.9;

/// One-shot decision whose logged rewards favour the wrong arm.
///
/// A latent context is "good" with probability `p`. The demonstrator pulls
/// arm 0 exactly in good contexts, where it pays 1 (and 0 otherwise); arm 1
/// pays a constant `c`. Logged data therefore show arm 0 paying 1 while its
/// interventional mean is `p < c`. Parameters are drawn so that
/// `c > p / (1 - p)`, which makes the lower causal bound prefer arm 1.
pub fn make_adversarial_confounded_bandit(seed: u64) -> Result<ConfoundedInstance> {
    let mut rng = rng::stream(seed, STREAM_GEN);
    let p: f64 = rng.gen_range(0.1..0.35);
    let c_min = p / (1.0 - p) + 0.05;
    let c: f64 = rng.gen_range(c_min..0.95);
    let cmdp = Cmdp {
        n_states: 2,
        n_actions: 2,
        n_noise: 2,
        gamma: BANDIT_GAMMA,
        reward_lo: 0.0,
        reward_hi: 1.0,
        noise_dist: vec![p, 1.0 - p],
        init_dist: vec![1.0, 0.0],
        trans_fn: vec![vec![vec![1, 1], vec![1, 1]], vec![vec![1, 1], vec![1, 1]]],
        behavior_fn: vec![vec![0, 1], vec![0, 0]],
        reward_fn: vec![vec![vec![1.0, 0.0], vec![c, c]], vec![vec![0.0, 0.0], vec![0.0, 0.0]]],
        terminal_states: vec![1],
    };
    ConfoundedInstance::new(cmdp, FeatureMap::one_hot(2), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::marginalize_interventional;
    use crate::solvers::{policy_evaluation, DEFAULT_TOL};

    #[test]
    fn random_cmdp_is_seed_deterministic() {
        let a = make_random_cmdp(5, 3, 4, 0.9, 11, 0.5).unwrap();
        let b = make_random_cmdp(5, 3, 4, 0.9, 11, 0.5).unwrap();
        assert_eq!(a.to_toml_string().unwrap(), b.to_toml_string().unwrap());
        assert_ne!(a, make_random_cmdp(5, 3, 4, 0.9, 12, 0.5).unwrap());
    }

    #[test]
    fn zero_strength_is_unconfounded() {
        let c = make_random_cmdp(6, 3, 4, 0.9, 3, 0.0).unwrap();
        let nom = exact_nominal(&c);
        let m = marginalize_interventional(&c);
        for s in 0..6 {
            for x in 0..3 {
                if nom.supported[s][x] {
                    assert_eq!(nom.p_beh[s][x], 1.0);
                    for sn in 0..6 {
                        assert!((nom.t_tilde[s][x][sn] - m.trans[s][x][sn]).abs() < 1e-12);
                    }
                    assert!((nom.r_tilde[s][x] - m.reward[s][x]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_strength_bijection_gives_uniform_behavior() {
        for seed in 0..10 {
            let c = make_random_cmdp(4, 3, 3, 0.9, seed, 1.0).unwrap();
            let nom = exact_nominal(&c);
            for row in &nom.p_beh {
                for &p in row {
                    assert!((p - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_strength_rejected() {
        assert!(make_random_cmdp(2, 2, 2, 0.9, 0, 1.5).is_err());
        assert!(make_confounded_gridworld(1, 4, &[1.0, 0.0, 0.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn calm_gridworld_lower_bound_policy_reaches_goal() {
        let inst = make_confounded_gridworld(4, 4, &[1.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap();
        let c = &inst.cmdp;
        let nom = exact_nominal(c);
        let (lo, _) = causal_bound_vi(&nom, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let pi = greedy_policy(&lo);
        let value = policy_value(c, &pi, DEFAULT_TOL).unwrap();
        assert!(value > 0.0, "value {value}");
        // follow the policy: it must hit the goal without touching a hazard
        let layout = inst.layout.unwrap();
        let mut s = layout.start;
        for _ in 0..c.n_states {
            s = c.trans_fn[s][pi.action(s)][0];
            assert!(!layout.hazards.contains(&s));
            if s == layout.goal {
                return;
            }
        }
        panic!("goal not reached");
    }

    #[test]
    fn single_wind_direction_is_deterministic_shift() {
        let inst = make_confounded_gridworld(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0], 1).unwrap();
        let m = marginalize_interventional(&inst.cmdp);
        let layout = inst.layout.unwrap();
        for row in m.trans.iter().flatten() {
            assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
        }
        // moving up from the start cell with east wind lands up and right
        let (c, r) = layout.coords(layout.start);
        let expect = layout.cell(c + 1, r - 1);
        assert_eq!(m.trans[layout.start][0][expect], 1.0);
    }

    #[test]
    fn bandit_inflates_the_wrong_arm() {
        for seed in 0..50 {
            let inst = make_adversarial_confounded_bandit(seed).unwrap();
            let c = &inst.cmdp;
            let nom = exact_nominal(c);
            let m = marginalize_interventional(c);
            assert_ne!(argmax(&nom.r_tilde[0]), argmax(&m.reward[0]));
            assert!(inst.certificate.gap > 0.0);

            let (lo, _) = causal_bound_vi(&nom, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            let (qstar, _) =
                standard_value_iteration(&m.trans, &m.reward, c.gamma, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            for x in 0..2 {
                assert!(lo.values[0][x] <= qstar.values[0][x] + 1e-8);
            }

            let mut c0 = c.clone();
            c0.gamma = 0.0;
            let nom0 = exact_nominal(&c0);
            let (lo0, _) = causal_bound_vi(&nom0, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
            for x in 0..2 {
                let p = nom0.p_beh[0][x];
                assert_eq!(lo0.values[0][x], p * nom0.r_tilde[0][x] + (1.0 - p) * c0.reward_lo);
            }
        }
    }

    #[test]
    fn gridworld_certificates_are_nonnegative() {
        let wind = DEFAULT_WIND;
        for seed in 0..20 {
            let inst = make_confounded_gridworld(5, 4, &wind, seed).unwrap();
            let cert = inst.certificate;
            assert!(cert.gap >= -1e-9, "seed {seed}: {cert:?}\n{}", inst.describe());
            // the certificate agrees with direct policy evaluation
            let (q, _) = policy_evaluation(
                &inst.cmdp,
                &Policy::uniform(inst.cmdp.n_states, 4),
                DEFAULT_TOL,
                DEFAULT_MAX_ITERS,
            )
            .unwrap();
            assert!(q.is_finite());
        }
    }

    use crate::solvers::Policy;
}
