//! Confounding-robust off-policy Q-learning on finite confounded MDPs.

// Negated comparisons are how argument checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmdp;
pub mod envs;
pub mod error;
pub mod harness;
pub mod learners;
pub mod neural;
pub mod rng;
pub mod solvers;

pub use cmdp::{
    estimate_nominal, exact_nominal, marginalize_interventional, sample_interventional, sample_observational, Cmdp,
    Interventional, ModelInfo, NominalModel, Regime, Trajectory, Transition,
};
pub use error::{Error, Result};
pub use harness::{run_experiment, Algorithm, ExperimentConfig, ResultRecord};
pub use learners::{
    tabular_causal_q, tabular_naive_q, worst_case_state_estimate, LearnerConfig, LearningCurve, ReplayBuffer,
};
pub use neural::{neural_causal_dqn, MlpQNet, NetSpec};
pub use solvers::{
    apply_causal_operator, causal_bound_vi, greedy_policy, policy_evaluation, standard_value_iteration, BoundSide,
    Policy, QKind, QTable, SolveStats,
};
