//! Exact dynamic programming on tabular models.
//!
//! [`apply_causal_operator`] is the causal Bellman backup on a
//! [`NominalModel`]: the observed branch `P(x|s)(R~ + γ Σ T~ V)` is mixed
//! with a worst case (or best case) branch `P(¬x|s)(a + γ min_s' V)` that
//! covers whatever the action would have done had the demonstrator not
//! chosen it. Both sides are γ-contractions in the sup norm, so the fixed
//! point found by [`causal_bound_vi`] is unique.
//!
//! Every iterative solver stops once the a-posteriori error bound
//! `γ/(1-γ)·‖Q_{k+1} - Q_k‖` and the residual `‖Q_{k+1} - Q_k‖` are both at
//! most `tol`, so the returned table is within `tol` of the true fixed point.

use std::fmt;
use std::io::Write;

use rand::Rng;

use crate::cmdp::{marginalize_interventional, Cmdp, NominalModel};
use crate::error::{Error, Result};
use crate::rng::sample_categorical;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QKind {
    Star,
    Lower,
    Upper,
    Policy,
}

impl QKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QKind::Star => "q_star",
            QKind::Lower => "q_lower",
            QKind::Upper => "q_upper",
            QKind::Policy => "q_policy",
        }
    }
}

/// Dense state-action value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
    pub kind: QKind,
}

impl QTable {
    pub fn constant(n_states: usize, n_actions: usize, value: f64, kind: QKind) -> Self {
        QTable {
            values: vec![vec![value; n_actions]; n_states],
            kind,
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    pub fn n_actions(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn row_max(&self, s: usize) -> f64 {
        self.values[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_x Q(s, x)` for every state.
    pub fn state_values(&self) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.row_max(s)).collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// CSV with header `s,x,value,kind`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "x", "value", "kind"])?;
        for (s, row) in self.values.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                w.write_record([
                    s.to_string(),
                    x.to_string(),
                    v.to_string(),
                    self.kind.as_str().to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Stationary policy `π(x|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
    pub deterministic: bool,
}

impl Policy {
    pub fn from_probs(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidPolicy(format!("row {s} is not a distribution")));
            }
        }
        let deterministic = probs.iter().all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0));
        Ok(Policy { probs, deterministic })
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Policy {
            probs,
            deterministic: true,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
            deterministic: n_actions == 1,
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    /// Most probable action, lowest index on ties.
    pub fn action(&self, s: usize) -> usize {
        argmax(&self.probs[s])
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        if self.deterministic {
            self.action(s)
        } else {
            sample_categorical(rng, &self.probs[s])
        }
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Iteration count and final sup-norm residual of a solver run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

impl fmt::Display for SolveStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iterations={} residual={:e}", self.iterations, self.residual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    Lower,
    Upper,
}

fn check_solver_args(gamma: f64, tol: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} outside [0, 1)")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance {tol} must be positive")));
    }
    Ok(())
}

fn iterate_to_fixed_point(
    mut q: QTable,
    gamma: f64,
    tol: f64,
    max_iters: usize,
    mut backup: impl FnMut(&QTable) -> QTable,
) -> Result<(QTable, SolveStats)> {
    let amplification = if gamma > 0.0 {
        (gamma / (1.0 - gamma)).max(1.0)
    } else {
        1.0
    };
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let next = backup(&q);
        residual = next.sup_distance(&q);
        q = next;
        if !q.is_finite() {
            break;
        }
        if residual * amplification <= tol {
            return Ok((
                q,
                SolveStats {
                    iterations: it,
                    residual,
                },
            ));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        residual,
    })
}

fn check_rows(trans: &[Vec<Vec<f64>>], reward: &[Vec<f64>]) -> Result<()> {
    let ns = trans.len();
    if reward.len() != ns {
        return Err(Error::DimensionMismatch {
            expected: ns,
            got: reward.len(),
        });
    }
    for (s, rows) in trans.iter().enumerate() {
        if rows.len() != reward[s].len() {
            return Err(Error::DimensionMismatch {
                expected: reward[s].len(),
                got: rows.len(),
            });
        }
        for row in rows {
            if row.len() != ns {
                return Err(Error::DimensionMismatch {
                    expected: ns,
                    got: row.len(),
                });
            }
        }
    }
    Ok(())
}

fn bellman_backup(trans: &[Vec<Vec<f64>>], reward: &[Vec<f64>], gamma: f64, q: &QTable, kind: QKind) -> QTable {
    let v = q.state_values();
    let values = trans
        .iter()
        .zip(reward)
        .map(|(rows, rs)| {
            rows.iter()
                .zip(rs)
                .map(|(row, r)| r + gamma * row.iter().zip(&v).map(|(p, vn)| p * vn).sum::<f64>())
                .collect()
        })
        .collect();
    QTable { values, kind }
}

/// Optimal action values of an (unconfounded) MDP by value iteration.
pub fn standard_value_iteration(
    trans: &[Vec<Vec<f64>>],
    reward: &[Vec<f64>],
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, SolveStats)> {
    check_solver_args(gamma, tol)?;
    check_rows(trans, reward)?;
    let na = reward.first().map_or(0, Vec::len);
    let init = QTable::constant(trans.len(), na, 0.0, QKind::Star);
    iterate_to_fixed_point(init, gamma, tol, max_iters, |q| {
        bellman_backup(trans, reward, gamma, q, QKind::Star)
    })
}

/// One application of the causal Bellman operator.
///
/// For the lower side:
/// `out(s,x) = P(x|s)(R~(s,x) + γ Σ_s' T~(s,x,s') max_x' q(s',x'))
///           + (1 - P(x|s))(a + γ min_s' max_x' q(s',x'))`.
/// The upper side uses `b` and `max_s'` in the second branch.
pub fn apply_causal_operator(q: &QTable, nominal: &NominalModel, side: BoundSide) -> QTable {
    let gamma = nominal.gamma;
    let v = q.state_values();
    let (floor, extreme, kind) = match side {
        BoundSide::Lower => (
            nominal.reward_lo,
            v.iter().copied().fold(f64::INFINITY, f64::min),
            QKind::Lower,
        ),
        BoundSide::Upper => (
            nominal.reward_hi,
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            QKind::Upper,
        ),
    };
    let unobserved = floor + gamma * extreme;
    let values = (0..nominal.n_states())
        .map(|s| {
            (0..nominal.n_actions())
                .map(|x| {
                    let p = nominal.p_beh[s][x];
                    let observed = if p > 0.0 {
                        let ev: f64 = nominal.t_tilde[s][x].iter().zip(&v).map(|(t, vn)| t * vn).sum();
                        p * (nominal.r_tilde[s][x] + gamma * ev)
                    } else {
                        0.0
                    };
                    observed + (1.0 - p) * unobserved
                })
                .collect()
        })
        .collect();
    QTable { values, kind }
}

/// Fixed point of the causal operator starting from the value floor
/// (`a/(1-γ)` for the lower side, `b/(1-γ)` for the upper side).
pub fn causal_bound_vi(
    nominal: &NominalModel,
    side: BoundSide,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, SolveStats)> {
    let edge = match side {
        BoundSide::Lower => nominal.reward_lo,
        BoundSide::Upper => nominal.reward_hi,
    } / (1.0 - nominal.gamma);
    let init = QTable::constant(nominal.n_states(), nominal.n_actions(), edge, QKind::Lower);
    causal_bound_vi_from(nominal, side, init, tol, max_iters)
}

pub fn causal_bound_vi_from(
    nominal: &NominalModel,
    side: BoundSide,
    init: QTable,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, SolveStats)> {
    check_solver_args(nominal.gamma, tol)?;
    if init.n_states() != nominal.n_states() || init.n_actions() != nominal.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: nominal.n_states() * nominal.n_actions(),
            got: init.n_states() * init.n_actions(),
        });
    }
    iterate_to_fixed_point(init, nominal.gamma, tol, max_iters, |q| {
        apply_causal_operator(q, nominal, side)
    })
}

/// Deterministic argmax policy, lowest action index on ties.
pub fn greedy_policy(q: &QTable) -> Policy {
    let actions: Vec<usize> = q.values.iter().map(|row| argmax(row)).collect();
    Policy::deterministic(&actions, q.n_actions())
}

/// `Q_π` in the true interventional model of `cmdp`.
pub fn policy_evaluation(cmdp: &Cmdp, policy: &Policy, tol: f64, max_iters: usize) -> Result<(QTable, SolveStats)> {
    check_solver_args(cmdp.gamma, tol)?;
    if policy.n_states() != cmdp.n_states || policy.probs.iter().any(|r| r.len() != cmdp.n_actions) {
        return Err(Error::DimensionMismatch {
            expected: cmdp.n_states,
            got: policy.n_states(),
        });
    }
    let model = marginalize_interventional(cmdp);
    let gamma = cmdp.gamma;
    let init = QTable::constant(cmdp.n_states, cmdp.n_actions, 0.0, QKind::Policy);
    iterate_to_fixed_point(init, gamma, tol, max_iters, |q| {
        let v: Vec<f64> = q
            .values
            .iter()
            .zip(&policy.probs)
            .map(|(row, pi)| row.iter().zip(pi).map(|(a, b)| a * b).sum())
            .collect();
        let values = model
            .trans
            .iter()
            .zip(&model.reward)
            .map(|(rows, rs)| {
                rows.iter()
                    .zip(rs)
                    .map(|(row, r)| r + gamma * row.iter().zip(&v).map(|(p, vn)| p * vn).sum::<f64>())
                    .collect()
            })
            .collect();
        QTable {
            values,
            kind: QKind::Policy,
        }
    })
}

/// Expected discounted return of `policy` from the initial distribution.
pub fn policy_value(cmdp: &Cmdp, policy: &Policy, tol: f64) -> Result<f64> {
    let (q, _) = policy_evaluation(cmdp, policy, tol, DEFAULT_MAX_ITERS)?;
    Ok(cmdp
        .init_dist
        .iter()
        .enumerate()
        .map(|(s, p)| {
            p * q.values[s]
                .iter()
                .zip(&policy.probs[s])
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum())
}

/// Rejects bound computation and evaluation carried out under different
/// discount factors.
pub fn ensure_same_gamma(nominal: &NominalModel, cmdp: &Cmdp) -> Result<()> {
    if nominal.gamma != cmdp.gamma {
        return Err(Error::ParameterMismatch {
            what: "gamma",
            left: nominal.gamma,
            right: cmdp.gamma,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::exact_nominal;
    use crate::envs::make_random_cmdp;

    /// Single state, two actions, P(x0)=0.6, R~ = (1.0, 0.5), a=0, γ=0.5.
    pub(crate) fn one_state() -> NominalModel {
        NominalModel::new(
            vec![vec![0.6, 0.4]],
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![1.0, 0.5]],
            0.0,
            1.0,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn operator_hand_example() {
        let q = QTable::constant(1, 2, 0.0, QKind::Lower);
        let out = apply_causal_operator(&q, &one_state(), BoundSide::Lower);
        assert!((out.values[0][0] - 0.6).abs() < 1e-15);
        assert!((out.values[0][1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_state_fixed_point_and_policy() {
        let (q, stats) = causal_bound_vi(&one_state(), BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        // v = 0.6 + 0.5 v
        assert!((q.values[0][0] - 1.2).abs() <= DEFAULT_TOL);
        assert!((q.values[0][1] - 0.8).abs() <= DEFAULT_TOL);
        assert!(stats.residual <= DEFAULT_TOL);
        assert_eq!(greedy_policy(&q).action(0), 0);
    }

    #[test]
    fn gamma_zero_operator_ignores_q() {
        let mut nom = exact_nominal(&make_random_cmdp(4, 3, 3, 0.9, 2, 1.0).unwrap());
        nom.gamma = 0.0;
        let q = QTable::constant(4, 3, 17.0, QKind::Lower);
        let out = apply_causal_operator(&q, &nom, BoundSide::Lower);
        for s in 0..4 {
            for x in 0..3 {
                let p = nom.p_beh[s][x];
                let expect = p * nom.r_tilde[s][x] + (1.0 - p) * nom.reward_lo;
                assert!((out.values[s][x] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_hot_behavior_reduces_to_bellman() {
        let c = make_random_cmdp(5, 3, 4, 0.8, 9, 0.0).unwrap();
        let nom = exact_nominal(&c);
        let q = QTable {
            values: (0..5)
                .map(|s| (0..3).map(|x| (s * 3 + x) as f64 * 0.1).collect())
                .collect(),
            kind: QKind::Lower,
        };
        let out = apply_causal_operator(&q, &nom, BoundSide::Lower);
        let std = bellman_backup(&nom.t_tilde, &nom.r_tilde, nom.gamma, &q, QKind::Star);
        for s in 0..5 {
            let x = c.behavior_fn[s][0];
            assert_eq!(nom.p_beh[s][x], 1.0);
            assert!((out.values[s][x] - std.values[s][x]).abs() < 1e-14);
        }
    }

    #[test]
    fn value_iteration_trivial_cases() {
        // γ = 0: Q = R
        let trans = vec![
            vec![vec![0.5, 0.5], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.3, 0.7]],
        ];
        let reward = vec![vec![0.1, 0.9], vec![0.4, 0.2]];
        let (q, _) = standard_value_iteration(&trans, &reward, 0.0, DEFAULT_TOL, 10).unwrap();
        assert_eq!(q.values, reward);

        // geometric series
        let (q, _) =
            standard_value_iteration(&[vec![vec![1.0]]], &[vec![1.0]], 0.5, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!((q.values[0][0] - 2.0).abs() <= DEFAULT_TOL);
    }

    #[test]
    fn value_iteration_reports_nonconvergence() {
        let err = standard_value_iteration(&[vec![vec![1.0]]], &[vec![1.0]], 0.99, 1e-10, 5).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 5, .. }));
        assert!(standard_value_iteration(&[vec![vec![1.0]]], &[vec![1.0]], 1.0, 1e-10, 5).is_err());
    }

    #[test]
    fn value_iteration_matches_truncated_rollout_tree() {
        // Exhaustive expectation over the depth-H lookahead tree with optimal
        // choices, evaluated by backward induction over horizons. The truncation
        // error is at most γ^H · max|r| / (1-γ).
        use rand::Rng;
        let mut rng = crate::rng::stream(13, 0);
        let (ns, na, gamma) = (5, 3, 0.6);
        let mut trans = vec![vec![vec![0.0; ns]; na]; ns];
        let mut reward = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            for x in 0..na {
                let w: Vec<f64> = (0..ns).map(|_| rng.gen::<f64>()).collect();
                let z: f64 = w.iter().sum();
                trans[s][x] = w.iter().map(|v| v / z).collect();
                reward[s][x] = rng.gen();
            }
        }
        let horizon = 60;
        let mut v = vec![0.0; ns];
        let mut q = vec![vec![0.0; na]; ns];
        for _ in 0..horizon {
            for s in 0..ns {
                for x in 0..na {
                    q[s][x] = reward[s][x] + gamma * (0..ns).map(|n| trans[s][x][n] * v[n]).sum::<f64>();
                }
            }
            v = q.iter().map(|r| r.iter().copied().fold(f64::MIN, f64::max)).collect();
        }
        let bound = gamma_pow(gamma, horizon) / (1.0 - gamma);
        assert!(bound < 1e-12);
        let (vi, _) = standard_value_iteration(&trans, &reward, gamma, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        for s in 0..ns {
            for x in 0..na {
                assert!((vi.values[s][x] - q[s][x]).abs() < 1e-6);
            }
        }
    }

    fn gamma_pow(g: f64, h: usize) -> f64 {
        (0..h).fold(1.0, |acc, _| acc * g)
    }

    #[test]
    fn greedy_tie_break_and_order() {
        let q = QTable {
            values: vec![vec![0.0, 1.0, 2.0], vec![3.0, 3.0, 3.0]],
            kind: QKind::Star,
        };
        let pi = greedy_policy(&q);
        assert_eq!(pi.action(0), 2);
        assert_eq!(pi.action(1), 0);
        assert!(pi.deterministic);
    }

    #[test]
    fn single_action_lower_bound_is_standard_vi() {
        let c = make_random_cmdp(4, 1, 3, 0.9, 4, 1.0).unwrap();
        let nom = exact_nominal(&c);
        let (lo, _) = causal_bound_vi(&nom, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let (std, _) =
            standard_value_iteration(&nom.t_tilde, &nom.r_tilde, nom.gamma, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(lo.sup_distance(&std) <= 2.0 * DEFAULT_TOL);
    }

    #[test]
    fn placeholder_rows_do_not_move_fixed_point() {
        let c = make_random_cmdp(5, 3, 2, 0.9, 3, 0.0).unwrap();
        let nom = exact_nominal(&c);
        assert!(nom.supported.iter().flatten().any(|s| !s));
        let (base, _) = causal_bound_vi(&nom, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        let mut perturbed = nom.clone();
        for s in 0..5 {
            for x in 0..3 {
                if !perturbed.supported[s][x] {
                    perturbed.t_tilde[s][x] = (0..5).map(|n| if n == s { 1.0 } else { 0.0 }).collect();
                    perturbed.r_tilde[s][x] = perturbed.reward_hi;
                }
            }
        }
        let (moved, _) = causal_bound_vi(&perturbed, BoundSide::Lower, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn policy_evaluation_of_optimal_policy() {
        let c = make_random_cmdp(5, 3, 4, 0.9, 21, 1.0).unwrap();
        let m = marginalize_interventional(&c);
        let tol = 1e-10;
        let (qstar, _) = standard_value_iteration(&m.trans, &m.reward, c.gamma, tol, DEFAULT_MAX_ITERS).unwrap();
        let (qpi, _) = policy_evaluation(&c, &greedy_policy(&qstar), tol, DEFAULT_MAX_ITERS).unwrap();
        assert!(qpi.sup_distance(&qstar) <= 2.0 * tol);

        let mut c0 = c.clone();
        c0.gamma = 0.0;
        let (q0, _) = policy_evaluation(&c0, &Policy::uniform(5, 3), tol, 10).unwrap();
        assert_eq!(q0.values, m.reward);
    }

    #[test]
    fn gamma_mismatch_is_rejected() {
        let c = make_random_cmdp(3, 2, 2, 0.9, 1, 1.0).unwrap();
        let mut nom = exact_nominal(&c);
        ensure_same_gamma(&nom, &c).unwrap();
        nom.gamma = 0.8;
        assert!(ensure_same_gamma(&nom, &c).is_err());
    }

    #[test]
    fn qtable_csv_header() {
        let q = QTable::constant(2, 2, 1.5, QKind::Upper);
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("s,x,value,kind"));
        assert_eq!(lines.next(), Some("0,0,1.5,q_upper"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn stats_log_line() {
        let s = SolveStats {
            iterations: 12,
            residual: 1e-11,
        };
        assert_eq!(s.to_string(), "iterations=12 residual=1e-11");
    }
}
