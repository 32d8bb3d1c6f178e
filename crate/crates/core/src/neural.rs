//! A small fully connected Q-network trained with the causal loss.
//!
//! Weights are stored `[out][in]`. Gradients have the same shape as the
//! network and are produced by plain backpropagation; the target network
//! only ever contributes constants.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, Transition};
use crate::envs::FeatureMap;
use crate::error::{Error, Result};
use crate::learners::{run_demonstrator_loop, Agent, LearnerConfig, LearningCurve};
use crate::rng::{self, STREAM_INIT};
use crate::solvers::{argmax, Policy, QKind, QTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Layer {
            input_dim,
            output_dim,
            activation,
            weights: vec![vec![0.0; input_dim]; output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpQNet {
    pub layers: Vec<Layer>,
}

/// Parameter-shaped gradient: `weights[l][o][i]`, `biases[l][o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(net: &MlpQNet) -> Self {
        Gradient {
            weights: net
                .layers
                .iter()
                .map(|l| vec![vec![0.0; l.input_dim]; l.output_dim])
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.output_dim]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .flatten()
            .chain(self.biases.iter().flatten())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MlpQNet {
    /// Relu hidden layers of the given widths and an identity output layer,
    /// initialized uniformly in `±1/sqrt(fan_in)` from the init stream of `seed`.
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, STREAM_INIT);
        let mut net = MlpQNet::zeros(input_dim, hidden, output_dim);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.input_dim as f64).sqrt();
            for w in layer.weights.iter_mut().flatten().chain(layer.bias.iter_mut()) {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        net
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                Layer::zeros(
                    d[0],
                    d[1],
                    if i == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                )
            })
            .collect();
        MlpQNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let Some(last) = self.layers.last() else {
            return bad("network has no layers".into());
        };
        if last.activation != Activation::Identity {
            return bad("final activation must be identity".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.output_dim || l.bias.len() != l.output_dim {
                return bad(format!("layer {i}: expected {} output rows", l.output_dim));
            }
            if l.weights.iter().any(|r| r.len() != l.input_dim) {
                return bad(format!("layer {i}: expected {} input columns", l.input_dim));
            }
            if i > 0 && self.layers[i - 1].output_dim != l.input_dim {
                return bad(format!("layer {i}: input dim does not chain"));
            }
            if l.weights.iter().flatten().chain(&l.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {i}: non-finite parameter"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), features.len())?;
        let mut a = features.to_vec();
        for l in &self.layers {
            a = l.affine(&a).into_iter().map(|z| l.activation.apply(z)).collect();
        }
        Ok(a)
    }

    /// Pre-activations and activations of every layer; `acts[0]` is the input.
    fn forward_cached(&self, features: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = vec![features.to_vec()];
        for l in &self.layers {
            let z = l.affine(acts.last().expect("input present"));
            acts.push(z.iter().map(|&v| l.activation.apply(v)).collect());
            pre.push(z);
        }
        (pre, acts)
    }

    /// Accumulates `d/dθ Σ_x g_out[x]·q(x)` into `grad`.
    fn backprop(&self, features: &[f64], g_out: &[f64], grad: &mut Gradient) {
        let (pre, acts) = self.forward_cached(features);
        let mut upstream = g_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&pre[l])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            for (o, d) in delta.iter().enumerate() {
                grad.biases[l][o] += d;
                for (gw, a) in grad.weights[l][o].iter_mut().zip(&acts[l]) {
                    *gw += d * a;
                }
            }
            upstream = (0..layer.input_dim)
                .map(|i| layer.weights.iter().zip(&delta).map(|(row, d)| row[i] * d).sum())
                .collect();
        }
    }

    /// Outputs for every row of `features`, as a table.
    pub fn q_table(&self, features: &FeatureMap, kind: QKind) -> Result<QTable> {
        let values = features
            .features
            .iter()
            .map(|f| self.forward(f))
            .collect::<Result<_>>()?;
        Ok(QTable { values, kind })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let net: MlpQNet = toml::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
}

impl Minibatch {
    pub fn from_transitions(batch: &[Transition], features: &FeatureMap) -> Self {
        Minibatch {
            states: batch.iter().map(|t| features.get(t.s).to_vec()).collect(),
            actions: batch.iter().map(|t| t.x).collect(),
            rewards: batch.iter().map(|t| t.y).collect(),
            next_states: batch.iter().map(|t| features.get(t.s_next).to_vec()).collect(),
            dones: batch.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks lengths, feature widths and action range.
    pub fn validate(&self, input_dim: usize, n_actions: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("minibatch"));
        }
        let n = self.len();
        for len in [
            self.states.len(),
            self.rewards.len(),
            self.next_states.len(),
            self.dones.len(),
        ] {
            check_dim(n, len)?;
        }
        for f in self.states.iter().chain(&self.next_states) {
            check_dim(input_dim, f.len())?;
        }
        if let Some(&x) = self.actions.iter().find(|&&x| x >= n_actions) {
            return Err(Error::DimensionMismatch {
                expected: n_actions,
                got: x,
            });
        }
        Ok(())
    }
}

/// `w[i][x]`: `y_i + γ·max Q̄(s_{i+1})` for the logged action, otherwise
/// `a + γ·min_c max Q̄(c)` over the candidate features. Done flags zero the
/// discounted term in both cases.
pub fn causal_targets(
    target_net: &MlpQNet,
    batch: &Minibatch,
    reward_lo: f64,
    gamma: f64,
    candidate_features: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n_actions = target_net.output_dim();
    batch.validate(target_net.input_dim(), n_actions)?;
    if candidate_features.is_empty() {
        return Err(Error::EmptyInput("candidate state list"));
    }
    let mut worst = f64::INFINITY;
    for c in candidate_features {
        let v = target_net.forward(c)?;
        worst = worst.min(v[argmax(&v)]);
    }
    (0..batch.len())
        .map(|i| {
            let cont = if batch.dones[i] { 0.0 } else { gamma };
            let next = target_net.forward(&batch.next_states[i])?;
            let observed = batch.rewards[i] + cont * next[argmax(&next)];
            let unobserved = reward_lo + cont * worst;
            Ok((0..n_actions)
                .map(|x| if x == batch.actions[i] { observed } else { unobserved })
                .collect())
        })
        .collect()
}

/// Mean over the batch of `Σ_x (w_i(x) - q(s_i, x))²` for precomputed targets.
pub fn loss_against(net: &MlpQNet, batch: &Minibatch, targets: &[Vec<f64>]) -> Result<f64> {
    check_dim(batch.len(), targets.len())?;
    let mut total = 0.0;
    for (s, w) in batch.states.iter().zip(targets) {
        let q = net.forward(s)?;
        check_dim(q.len(), w.len())?;
        total += q.iter().zip(w).map(|(q, w)| (w - q).powi(2)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`loss_against`] with respect to the parameters of `net`.
pub fn grad_against(net: &MlpQNet, batch: &Minibatch, targets: &[Vec<f64>]) -> Result<Gradient> {
    check_dim(batch.len(), targets.len())?;
    let scale = 2.0 / batch.len() as f64;
    let mut grad = Gradient::zeros_like(net);
    for (s, w) in batch.states.iter().zip(targets) {
        let q = net.forward(s)?;
        check_dim(q.len(), w.len())?;
        let g_out: Vec<f64> = q.iter().zip(w).map(|(q, w)| scale * (q - w)).collect();
        net.backprop(s, &g_out, &mut grad);
    }
    Ok(grad)
}

pub fn causal_loss(
    net: &MlpQNet,
    target_net: &MlpQNet,
    batch: &Minibatch,
    reward_lo: f64,
    gamma: f64,
    candidate_features: &[Vec<f64>],
) -> Result<f64> {
    let targets = causal_targets(target_net, batch, reward_lo, gamma, candidate_features)?;
    loss_against(net, batch, &targets)
}

pub fn causal_grad(
    net: &MlpQNet,
    target_net: &MlpQNet,
    batch: &Minibatch,
    reward_lo: f64,
    gamma: f64,
    candidate_features: &[Vec<f64>],
) -> Result<Gradient> {
    let targets = causal_targets(target_net, batch, reward_lo, gamma, candidate_features)?;
    grad_against(net, batch, &targets)
}

/// `θ ← θ - lr·g`.
pub fn sgd_step(net: &mut MlpQNet, grad: &Gradient, lr: f64) -> Result<()> {
    check_dim(net.layers.len(), grad.weights.len())?;
    check_dim(net.layers.len(), grad.biases.len())?;
    for (l, layer) in net.layers.iter().enumerate() {
        check_dim(layer.output_dim, grad.weights[l].len())?;
        check_dim(layer.output_dim, grad.biases[l].len())?;
        for row in &grad.weights[l] {
            check_dim(layer.input_dim, row.len())?;
        }
    }
    for (l, layer) in net.layers.iter_mut().enumerate() {
        for (row, g_row) in layer.weights.iter_mut().zip(&grad.weights[l]) {
            for (w, g) in row.iter_mut().zip(g_row) {
                *w -= lr * g;
            }
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.biases[l]) {
            *b -= lr * g;
        }
    }
    Ok(())
}

pub fn sync_target(net: &MlpQNet) -> MlpQNet {
    net.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpec {
    /// Widths of the relu hidden layers; empty gives a linear network.
    pub hidden: Vec<usize>,
    /// Start from all-zero parameters instead of the seeded uniform init.
    pub zero_init: bool,
    /// Skip parameter updates entirely.
    pub frozen: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            hidden: vec![64],
            zero_init: false,
            frozen: false,
        }
    }
}

impl NetSpec {
    pub fn linear() -> Self {
        NetSpec {
            hidden: Vec::new(),
            ..Default::default()
        }
    }

    pub fn build(&self, input_dim: usize, output_dim: usize, seed: u64) -> MlpQNet {
        if self.zero_init {
            MlpQNet::zeros(input_dim, &self.hidden, output_dim)
        } else {
            MlpQNet::new(input_dim, &self.hidden, output_dim, seed)
        }
    }
}

struct NeuralCausalAgent<'a> {
    net: MlpQNet,
    target: MlpQNet,
    features: &'a FeatureMap,
    reward_lo: f64,
    gamma: f64,
    frozen: bool,
}

impl Agent for NeuralCausalAgent<'_> {
    fn train(&mut self, batch: &[Transition], candidates: &[usize], lr: f64) {
        if self.frozen {
            return;
        }
        let mb = Minibatch::from_transitions(batch, self.features);
        let cands: Vec<Vec<f64>> = candidates.iter().map(|&s| self.features.get(s).to_vec()).collect();
        let grad = causal_grad(&self.net, &self.target, &mb, self.reward_lo, self.gamma, &cands)
            .expect("shapes are checked before training");
        sgd_step(&mut self.net, &grad, lr).expect("gradient matches the network");
    }

    fn sync_target(&mut self) {
        self.target = sync_target(&self.net);
    }

    fn greedy_policy(&self) -> Policy {
        let actions: Vec<usize> = self
            .features
            .features
            .iter()
            .map(|f| argmax(&self.net.forward(f).expect("feature width checked")))
            .collect();
        Policy::deterministic(&actions, self.net.output_dim())
    }
}

/// Causal deep Q-learning with the demonstrator loop shared with the tabular learners.
pub fn neural_causal_dqn(
    cmdp: &Cmdp,
    features: &FeatureMap,
    config: &LearnerConfig,
    spec: &NetSpec,
) -> Result<(MlpQNet, LearningCurve)> {
    config.validate_for(cmdp)?;
    check_dim(cmdp.n_states, features.n_states())?;
    if features.features.iter().any(|f| f.len() != features.dim()) || features.dim() == 0 {
        return Err(Error::InvalidConfig(
            "feature vectors must share a positive width".into(),
        ));
    }
    let net = spec.build(features.dim(), cmdp.n_actions, config.seed);
    let mut agent = NeuralCausalAgent {
        target: net.clone(),
        net,
        features,
        reward_lo: cmdp.reward_lo,
        gamma: cmdp.gamma,
        frozen: spec.frozen,
    };
    let curve = run_demonstrator_loop(cmdp, config, "causal_neural", &mut agent)?;
    Ok((agent.net, curve))
}
