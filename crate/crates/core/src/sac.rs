//! Compact soft actor-critic: tanh-squashed Gaussian policy, twin critics
//! with target networks, automatic entropy temperature and a replay buffer.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, softplus, AdamState, Tape, Tensor, Var};
use crate::error::{usage, Error, Result};
use crate::mdp::Environment;
use crate::posterior::ShapeSpec;
use crate::rng::{SeedStream, StreamRng};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;
const LN_2: f64 = std::f64::consts::LN_2;

/// `ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))`, stable for large |u|.
pub fn tanh_log_jacobian(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Fully connected network with ReLU hidden layers and a linear output.
/// Parameters are stored `[w0, b0, w1, b1, ...]` with `w_i: in x out` and
/// `b_i: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform initialization in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn new(sizes: &[usize], rng: &mut StreamRng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for pair in sizes.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound);
            let w = (0..pair[0] * pair[1]).map(|_| u.sample(rng)).collect();
            let b = (0..pair[1]).map(|_| u.sample(rng)).collect();
            params.push(Tensor::new(pair[0], pair[1], w)?);
            params.push(Tensor::new(1, pair[1], b)?);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let params = sizes
            .windows(2)
            .flat_map(|p| [Tensor::zeros(p[0], p[1]), Tensor::zeros(1, p[1])])
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn shape_spec(&self, prefix: &str) -> ShapeSpec {
        ShapeSpec::new(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("{prefix}{}.{}", i / 2, if i % 2 == 0 { "w" } else { "b" }), p.shape()))
                .collect(),
        )
    }

    /// Layer-major, row-major flattening.
    pub fn flat(&self) -> Vec<f64> {
        crate::posterior::flatten(&self.params)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(usage(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let layers = self.params.len() / 2;
        let mut h = x.matmul(&self.params[0])?.add_row(&self.params[1])?;
        for l in 1..layers {
            h = h.map(|v| v.max(0.0));
            h = h.matmul(&self.params[2 * l])?.add_row(&self.params[2 * l + 1])?;
        }
        if !h.all_finite() {
            return Err(Error::Numeric("network produced a non-finite output".into()));
        }
        Ok(h)
    }

    /// Records the parameters as tape leaves.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        let layers = vars.len() / 2;
        let mut h = tape.matmul(x, vars[0])?;
        h = tape.add_bias(h, vars[1])?;
        for l in 1..layers {
            h = tape.relu(h)?;
            h = tape.matmul(h, vars[2 * l])?;
            h = tape.add_bias(h, vars[2 * l + 1])?;
        }
        Ok(h)
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
}

/// Tanh-squashed diagonal Gaussian policy. The network emits
/// `[mean | log_std]` per state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    action_dim: usize,
}

/// One sampled action together with its pre-squash value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(&layer_sizes(state_dim, hidden, 2 * action_dim), rng)?,
            action_dim,
        })
    }

    pub fn from_net(net: Mlp, action_dim: usize) -> Result<Self> {
        if net.sizes().last() != Some(&(2 * action_dim)) {
            return Err(Error::Config("policy network must output mean and log-std per action".into()));
        }
        Ok(Self { net, action_dim })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.net.sizes()[0]
    }

    /// `(mean, clamped log_std)`, both `batch x action_dim`.
    pub fn heads(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.forward(states)?;
        let ad = self.action_dim;
        let mut mean = Vec::with_capacity(states.rows() * ad);
        let mut log_std = Vec::with_capacity(states.rows() * ad);
        for r in 0..out.rows() {
            let row = out.row_slice(r);
            mean.extend_from_slice(&row[..ad]);
            log_std.extend(row[ad..].iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        }
        Ok((Tensor::new(out.rows(), ad, mean)?, Tensor::new(out.rows(), ad, log_std)?))
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(usage(format!("state has {} entries, policy expects {}", state.len(), self.state_dim())));
        }
        if state.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state {state:?}")));
        }
        Ok(())
    }

    /// Stochastic draw `tanh(m + s z)` or the deterministic `tanh(m)`.
    pub fn sample(&self, state: &[f64], rng: &mut StreamRng, deterministic: bool) -> Result<PolicySample> {
        self.check_state(state)?;
        let (mean, log_std) = self.heads(&Tensor::row(state.to_vec()))?;
        let mut raw = Vec::with_capacity(self.action_dim);
        let mut log_prob = 0.0;
        for i in 0..self.action_dim {
            let (m, ls) = (mean.data()[i], log_std.data()[i]);
            let z: f64 = if deterministic { 0.0 } else { StandardNormal.sample(rng) };
            let u = m + ls.exp() * z;
            log_prob += -0.5 * z * z - HALF_LN_TWO_PI - ls - tanh_log_jacobian(u);
            raw.push(u);
        }
        Ok(PolicySample {
            action: raw.iter().map(|u| u.tanh()).collect(),
            raw,
            log_prob,
        })
    }

    pub fn act(&self, state: &[f64], rng: &mut StreamRng, deterministic: bool) -> Result<(Vec<f64>, f64)> {
        let s = self.sample(state, rng, deterministic)?;
        Ok((s.action, s.log_prob))
    }

    /// Batched reparameterized draw with the given standard-normal noise.
    pub fn sample_batch(&self, states: &Tensor, noise: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (mean, log_std) = self.heads(states)?;
        if noise.shape() != mean.shape() {
            return Err(usage("noise shape must be batch x action_dim"));
        }
        let ad = self.action_dim;
        let mut actions = Vec::with_capacity(mean.len());
        let mut log_probs = Vec::with_capacity(states.rows());
        for r in 0..states.rows() {
            let mut lp = 0.0;
            for i in 0..ad {
                let k = r * ad + i;
                let z = noise.data()[k];
                let ls = log_std.data()[k];
                let u = mean.data()[k] + ls.exp() * z;
                lp += -0.5 * z * z - HALF_LN_TWO_PI - ls - tanh_log_jacobian(u);
                actions.push(u.tanh());
            }
            log_probs.push(lp);
        }
        Ok((Tensor::new(states.rows(), ad, actions)?, log_probs))
    }

    /// Log-density of the squashed action `tanh(raw)` for each row.
    pub fn log_prob_raw(&self, states: &Tensor, raw: &Tensor) -> Result<Vec<f64>> {
        let (mean, log_std) = self.heads(states)?;
        if raw.shape() != mean.shape() {
            return Err(usage("raw action shape must be batch x action_dim"));
        }
        let ad = self.action_dim;
        Ok((0..states.rows())
            .map(|r| {
                (0..ad)
                    .map(|i| {
                        let k = r * ad + i;
                        let ls = log_std.data()[k];
                        let u = raw.data()[k];
                        let z = (u - mean.data()[k]) * (-ls).exp();
                        -0.5 * z * z - HALF_LN_TWO_PI - ls - tanh_log_jacobian(u)
                    })
                    .sum()
            })
            .collect())
    }
}

/// Two Q-networks over `[state | action]` with trailing target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinCritic {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
}

impl TwinCritic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        let sizes = layer_sizes(state_dim + action_dim, hidden, 1);
        let q1 = Mlp::new(&sizes, rng)?;
        let q2 = Mlp::new(&sizes, rng)?;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        })
    }

    pub fn from_nets(q1: Mlp, q2: Mlp) -> Self {
        Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        }
    }

    fn input(states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        if states.rows() != actions.rows() {
            return Err(usage("states and actions have different batch sizes"));
        }
        let (sd, ad) = (states.cols(), actions.cols());
        let mut data = Vec::with_capacity(states.rows() * (sd + ad));
        for r in 0..states.rows() {
            data.extend_from_slice(states.row_slice(r));
            data.extend_from_slice(actions.row_slice(r));
        }
        Ok(Tensor::new(states.rows(), sd + ad, data)?)
    }

    /// `min(Q1, Q2)` of the online networks, per row.
    pub fn min_q(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let x = Self::input(states, actions)?;
        let (a, b) = (self.q1.forward(&x)?, self.q2.forward(&x)?);
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| x.min(*y)).collect())
    }

    /// `min(Q1', Q2')` of the target networks, per row.
    pub fn min_target_q(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let x = Self::input(states, actions)?;
        let (a, b) = (self.q1_target.forward(&x)?, self.q2_target.forward(&x)?);
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn q_values(&self, states: &Tensor, actions: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = Self::input(states, actions)?;
        Ok((self.q1.forward(&x)?.into_data(), self.q2.forward(&x)?.into_data()))
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        soft_update(self.q1.params(), self.q1_target.params_mut(), tau)?;
        soft_update(self.q2.params(), self.q2_target.params_mut(), tau)
    }

    pub fn all_finite(&self) -> bool {
        [&self.q1, &self.q2, &self.q1_target, &self.q2_target]
            .iter()
            .all(|n| n.params().iter().all(Tensor::all_finite))
    }
}

/// `target <- tau * online + (1 - tau) * target`, parameterwise.
pub fn soft_update(online: &[Tensor], target: &mut [Tensor], tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(usage(format!("soft-update coefficient must lie in [0, 1], got {tau}")));
    }
    if online.len() != target.len() || online.iter().zip(target.iter()).any(|(a, b)| a.shape() != b.shape()) {
        return Err(usage("soft update between networks of different shapes"));
    }
    for (o, t) in online.iter().zip(target.iter_mut()) {
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = if tau == 1.0 {
                ov
            } else if tau == 0.0 {
                *tv
            } else {
                tau * ov + (1.0 - tau) * *tv
            };
        }
    }
    Ok(())
}

/// Batch of transitions as dense matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            len: 0,
            head: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, state: &[f64], action: &[f64], reward: f64, next_state: &[f64], done: bool) -> Result<()> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        if state.len() != sd || next_state.len() != sd || action.len() != ad {
            return Err(usage("transition dimensions do not match the replay buffer"));
        }
        if self.len < self.capacity {
            self.states.extend_from_slice(state);
            self.actions.extend_from_slice(action);
            self.rewards.push(reward);
            self.next_states.extend_from_slice(next_state);
            self.dones.push(done);
            self.len += 1;
        } else {
            let i = self.head;
            self.states[i * sd..(i + 1) * sd].copy_from_slice(state);
            self.actions[i * ad..(i + 1) * ad].copy_from_slice(action);
            self.rewards[i] = reward;
            self.next_states[i * sd..(i + 1) * sd].copy_from_slice(next_state);
            self.dones[i] = done;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    /// Uniform sample without replacement within the batch.
    pub fn sample(&self, batch_size: usize, rng: &mut StreamRng) -> Result<Batch> {
        if batch_size == 0 || batch_size > self.len {
            return Err(usage(format!("cannot draw {batch_size} transitions from {} stored", self.len)));
        }
        let idx = index::sample(rng, self.len, batch_size);
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut s = Vec::with_capacity(batch_size * sd);
        let mut a = Vec::with_capacity(batch_size * ad);
        let mut r = Vec::with_capacity(batch_size);
        let mut ns = Vec::with_capacity(batch_size * sd);
        let mut d = Vec::with_capacity(batch_size);
        for i in idx.iter() {
            s.extend_from_slice(&self.states[i * sd..(i + 1) * sd]);
            a.extend_from_slice(&self.actions[i * ad..(i + 1) * ad]);
            r.push(self.rewards[i]);
            ns.extend_from_slice(&self.next_states[i * sd..(i + 1) * sd]);
            d.push(self.dones[i]);
        }
        Ok(Batch {
            states: Tensor::new(batch_size, sd, s)?,
            actions: Tensor::new(batch_size, ad, a)?,
            rewards: r,
            next_states: Tensor::new(batch_size, sd, ns)?,
            dones: d,
        })
    }
}

/// Entropy temperature `alpha = exp(log_alpha)`.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_alpha: f64,
    pub target_entropy: f64,
    adam: AdamState,
}

impl Temperature {
    pub fn new(initial_alpha: f64, target_entropy: f64, learning_rate: f64) -> Result<Self> {
        if !(initial_alpha > 0.0) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        Ok(Self {
            log_alpha: initial_alpha.ln(),
            target_entropy,
            adam: AdamState::new(learning_rate, &[[1, 1]]),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Gradient of `-log_alpha * (mean log_prob + target_entropy)`.
    pub fn gradient(&self, log_probs: &[f64]) -> f64 {
        let mean = log_probs.iter().sum::<f64>() / log_probs.len().max(1) as f64;
        -(mean + self.target_entropy)
    }
}

/// One Adam step on `log_alpha` toward the target entropy.
pub fn temperature_update(temperature: &mut Temperature, batch_log_probs: &[f64]) -> Result<()> {
    if batch_log_probs.is_empty() {
        return Err(usage("temperature update needs log-probabilities"));
    }
    let g = temperature.gradient(batch_log_probs);
    let mut p = [Tensor::scalar(temperature.log_alpha)];
    adam_step(&mut p, &[Tensor::scalar(g)], &mut temperature.adam)?;
    temperature.log_alpha = p[0].item();
    Ok(())
}

/// `rows x cols` matrix of independent standard-normal draws.
pub fn gaussian_noise(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

/// Soft Bellman targets `r + gamma (1 - done) (min Q'(s', a') - alpha log pi(a'|s'))`
/// with `a' ~ pi(.|s')` drawn using `noise`.
pub fn critic_targets(
    policy: &GaussianPolicy,
    critics: &TwinCritic,
    batch: &Batch,
    alpha: f64,
    gamma: f64,
    noise: &Tensor,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(usage("critic update on an empty batch"));
    }
    let (next_actions, log_probs) = policy.sample_batch(&batch.next_states, noise)?;
    let q = critics.min_target_q(&batch.next_states, &next_actions)?;
    Ok((0..batch.len())
        .map(|i| {
            let boot = if batch.dones[i] { 0.0 } else { gamma * (q[i] - alpha * log_probs[i]) };
            batch.rewards[i] + boot
        })
        .collect())
}

/// One Adam step of each critic on `mean (Q_i(s, a) - y)^2`; returns the
/// sum of both mean-squared errors before the step.
pub fn critic_regress(
    critics: &mut TwinCritic,
    optimizers: &mut [AdamState; 2],
    batch: &Batch,
    targets: &[f64],
) -> Result<f64> {
    if targets.len() != batch.len() || batch.is_empty() {
        return Err(usage("one target per transition is required"));
    }
    let x = TwinCritic::input(&batch.states, &batch.actions)?;
    let y = Tensor::column(targets.to_vec());
    let mut total = 0.0;
    for (net, opt) in [&mut critics.q1, &mut critics.q2].into_iter().zip(optimizers.iter_mut()) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = net.leaves(&mut tape);
        let q = net.forward_tape(&mut tape, xv, &vars)?;
        let yv = tape.leaf(y.clone());
        let diff = tape.sub(q, yv)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        total += tape.value(loss).item();
        let grads = tape.backward(loss, None)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        adam_step(net.params_mut(), &g, opt)?;
    }
    if !critics.all_finite() {
        return Err(Error::Numeric("critic parameters became non-finite".into()));
    }
    Ok(total)
}

/// Target computation followed by regression.
pub fn critic_update(
    critics: &mut TwinCritic,
    optimizers: &mut [AdamState; 2],
    batch: &Batch,
    policy: &GaussianPolicy,
    alpha: f64,
    gamma: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let noise = gaussian_noise(batch.len(), policy.action_dim(), rng);
    let targets = critic_targets(policy, critics, batch, alpha, gamma, &noise)?;
    critic_regress(critics, optimizers, batch, &targets)
}

/// Actor objective `mean(alpha log pi(a|s) - min Q(s, a))` with
/// `a = tanh(m + s z)` for the given noise, plus its gradient with respect
/// to the policy parameters and the per-row log-probabilities.
pub fn actor_loss_and_grad(
    policy: &GaussianPolicy,
    critics: &TwinCritic,
    states: &Tensor,
    noise: &Tensor,
    alpha: f64,
) -> Result<(f64, Vec<Tensor>, Vec<f64>)> {
    let ad = policy.action_dim();
    let b = states.rows();
    if noise.shape() != [b, ad] {
        return Err(usage("noise shape must be batch x action_dim"));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(states.clone());
    let pvars = policy.net.leaves(&mut tape);
    let out = policy.net.forward_tape(&mut tape, s, &pvars)?;
    let mean = tape.slice_cols(out, 0, ad)?;
    let log_std_raw = tape.slice_cols(out, ad, 2 * ad)?;
    let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)?;
    let std = tape.exp(log_std)?;
    let z = tape.leaf(noise.clone());
    let spread = tape.mul(std, z)?;
    let u = tape.add(mean, spread)?;
    let action = tape.tanh(u)?;
    // log N(u; m, s) = sum(-z^2/2 - ln sqrt(2 pi)) - sum(log s); the first part is constant
    let const_part: Vec<f64> = (0..b)
        .map(|r| noise.row_slice(r).iter().map(|z| -0.5 * z * z - HALF_LN_TWO_PI).sum())
        .collect();
    let gauss_const = tape.leaf(Tensor::column(const_part));
    let sum_log_std = tape.sum_cols(log_std)?;
    let gauss = tape.sub(gauss_const, sum_log_std)?;
    // tanh Jacobian 2 (ln 2 - u - softplus(-2u)), summed over action dims
    let neg2u = tape.scale(u, -2.0)?;
    let sp = tape.softplus(neg2u)?;
    let neg_u = tape.scale(u, -1.0)?;
    let t = tape.sub(neg_u, sp)?;
    let t = tape.add_scalar(t, LN_2)?;
    let t = tape.scale(t, 2.0)?;
    let jac = tape.sum_cols(t)?;
    let log_prob = tape.sub(gauss, jac)?;
    let q_in = tape.concat_cols(s, action)?;
    let q1v = critics.q1.leaves(&mut tape);
    let q2v = critics.q2.leaves(&mut tape);
    let q1 = critics.q1.forward_tape(&mut tape, q_in, &q1v)?;
    let q2 = critics.q2.forward_tape(&mut tape, q_in, &q2v)?;
    let qmin = tape.minimum(q1, q2)?;
    let weighted = tape.scale(log_prob, alpha)?;
    let per_row = tape.sub(weighted, qmin)?;
    let loss = tape.mean(per_row)?;
    let value = tape.value(loss).item();
    let log_probs = tape.value(log_prob).data().to_vec();
    let grads = tape.backward(loss, None)?;
    Ok((value, pvars.iter().map(|&v| grads.wrt(v)).collect(), log_probs))
}

/// One Adam step of the actor; returns the loss and the batch log-probs
/// used by the temperature update.
pub fn actor_update(
    policy: &mut GaussianPolicy,
    optimizer: &mut AdamState,
    critics: &TwinCritic,
    batch: &Batch,
    alpha: f64,
    rng: &mut StreamRng,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(usage("actor update on an empty batch"));
    }
    let noise = gaussian_noise(batch.len(), policy.action_dim(), rng);
    let (loss, grads, log_probs) = actor_loss_and_grad(policy, critics, &batch.states, &noise, alpha)?;
    adam_step(policy.net.params_mut(), &grads, optimizer)?;
    if !policy.net.params().iter().all(Tensor::all_finite) {
        return Err(Error::Numeric("policy parameters became non-finite".into()));
    }
    Ok((loss, log_probs))
}

/// Soft actor-critic hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    /// Defaults to `-action_dim` when absent.
    pub target_entropy: Option<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
    pub learning_starts: u64,
    pub train_freq: u64,
    pub total_steps: u64,
    pub episode_horizon: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            alpha_lr: 3e-4,
            initial_alpha: 0.2,
            target_entropy: None,
            gamma: 0.99,
            tau: 0.005,
            buffer_capacity: 1_000_000,
            learning_starts: 5_000,
            train_freq: 2,
            total_steps: 50_000,
            episode_horizon: 100,
            eval_interval: 5_000,
            eval_episodes: 10,
        }
    }
}

impl SacConfig {
    /// Small networks and batches that keep a 50k-step run within seconds.
    pub fn desk_scale() -> Self {
        Self {
            hidden: vec![32, 32],
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden", "layer sizes must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("alpha_lr", self.alpha_lr), ("initial_alpha", self.initial_alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", "must lie in [0, 1]");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity", "must hold at least one batch");
        }
        if self.train_freq == 0 {
            return bad("train_freq", "must be positive");
        }
        if self.episode_horizon == 0 {
            return bad("episode_horizon", "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be positive");
        }
        Ok(())
    }
}

/// Losses and temperature after one gradient update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

/// Networks, optimizers and temperature.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: GaussianPolicy,
    pub critics: TwinCritic,
    pub temperature: Temperature,
    pub actor_opt: AdamState,
    pub critic_opts: [AdamState; 2],
}

impl SacAgent {
    pub fn new(state_dim: usize, action_dim: usize, config: &SacConfig, seeds: &SeedStream) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds.rng("init", 0);
        let policy = GaussianPolicy::new(state_dim, action_dim, &config.hidden, &mut rng)?;
        let critics = TwinCritic::new(state_dim, action_dim, &config.hidden, &mut rng)?;
        let target_entropy = config.target_entropy.unwrap_or(-(action_dim as f64));
        Ok(Self {
            actor_opt: AdamState::for_params(config.actor_lr, policy.net.params()),
            critic_opts: [
                AdamState::for_params(config.critic_lr, critics.q1.params()),
                AdamState::for_params(config.critic_lr, critics.q2.params()),
            ],
            temperature: Temperature::new(config.initial_alpha, target_entropy, config.alpha_lr)?,
            policy,
            critics,
        })
    }

    /// Uniform random actions before `learning_starts`, policy samples after.
    pub fn select_action(&self, state: &[f64], step: u64, config: &SacConfig, rng: &mut StreamRng) -> Result<Vec<f64>> {
        if step < config.learning_starts {
            Ok((0..self.policy.action_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        } else {
            Ok(self.policy.act(state, rng, false)?.0)
        }
    }

    /// Critic, actor, temperature and target updates on one sampled batch.
    pub fn update(
        &mut self,
        buffer: &ReplayBuffer,
        config: &SacConfig,
        replay_rng: &mut StreamRng,
        update_rng: &mut StreamRng,
    ) -> Result<UpdateStats> {
        let batch = buffer.sample(config.batch_size, replay_rng)?;
        let alpha = self.temperature.alpha();
        let critic_loss = critic_update(
            &mut self.critics,
            &mut self.critic_opts,
            &batch,
            &self.policy,
            alpha,
            config.gamma,
            update_rng,
        )?;
        let (actor_loss, log_probs) =
            actor_update(&mut self.policy, &mut self.actor_opt, &self.critics, &batch, alpha, update_rng)?;
        temperature_update(&mut self.temperature, &log_probs)?;
        self.critics.soft_update(config.tau)?;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha: self.temperature.alpha(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let nets = [
            ("actor", &self.policy.net),
            ("q1", &self.critics.q1),
            ("q2", &self.critics.q2),
            ("q1_target", &self.critics.q1_target),
            ("q2_target", &self.critics.q2_target),
        ];
        for (name, net) in nets {
            write_network(net, fs::File::create(dir.join(format!("{name}.txt")))?)?;
        }
        Ok(())
    }
}

/// Average undiscounted return of the deterministic policy over
/// `episodes` episodes. Episode `k` starts from stream `("eval", k)`, so
/// every evaluation sees the same initial states.
pub fn evaluate<E: Environment + Clone>(
    policy: &GaussianPolicy,
    env: &E,
    episodes: usize,
    horizon: usize,
    seeds: &SeedStream,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..episodes {
        let mut env = env.clone();
        let mut rng = seeds.rng("eval", k as u64);
        let mut state = env.reset(&mut rng);
        for _ in 0..horizon {
            let (action, _) = policy.act(&state, &mut rng, true)?;
            let out = env.step(&action, &mut rng)?;
            total += out.reward;
            state = out.next_state;
            if out.terminal {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// One row of the SAC metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacMetricsRow {
    pub step: u64,
    pub episodic_return: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

impl SacMetricsRow {
    pub const CSV_HEADER: &'static str = "step,return,critic_loss,actor_loss,alpha";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.step, self.episodic_return, self.critic_loss, self.actor_loss, self.alpha
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[SacMetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{}", SacMetricsRow::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SacRun {
    pub metrics: Vec<SacMetricsRow>,
    pub agent: SacAgent,
}

/// Standard off-policy loop: act, store, update every `train_freq` steps
/// once `learning_starts` transitions are stored, evaluate every
/// `eval_interval` steps. Episodes are truncated at `episode_horizon`
/// without marking the transition terminal.
pub fn train_sac<E: Environment + Clone>(env: &E, config: &SacConfig, seed: u64) -> Result<SacRun> {
    config.validate()?;
    let seeds = SeedStream::new(seed);
    let mut agent = SacAgent::new(env.state_dim(), env.action_dim(), config, &seeds)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, env.state_dim(), env.action_dim())?;
    let mut train_env = env.clone();
    let mut env_rng = seeds.rng("env", 0);
    let mut action_rng = seeds.rng("action", 0);
    let mut replay_rng = seeds.rng("replay", 0);
    let mut update_rng = seeds.rng("update", 0);
    let mut state = train_env.reset(&mut env_rng);
    let mut episode_len = 0;
    let mut stats = UpdateStats {
        alpha: agent.temperature.alpha(),
        ..Default::default()
    };
    let mut metrics = Vec::new();
    for t in 0..config.total_steps {
        let action = agent.select_action(&state, t, config, &mut action_rng)?;
        let out = train_env.step(&action, &mut env_rng)?;
        buffer.push(&state, &action, out.reward, &out.next_state, out.terminal)?;
        episode_len += 1;
        state = out.next_state;
        if out.terminal || episode_len == config.episode_horizon {
            state = train_env.reset(&mut env_rng);
            episode_len = 0;
        }
        let step = t + 1;
        if step >= config.learning_starts && step % config.train_freq == 0 && buffer.len() >= config.batch_size {
            stats = agent.update(&buffer, config, &mut replay_rng, &mut update_rng)?;
        }
        if step % config.eval_interval == 0 {
            metrics.push(SacMetricsRow {
                step,
                episodic_return: evaluate(&agent.policy, env, config.eval_episodes, config.episode_horizon, &seeds)?,
                critic_loss: stats.critic_loss,
                actor_loss: stats.actor_loss,
                alpha: stats.alpha,
            });
        }
    }
    Ok(SacRun { metrics, agent })
}

pub const NETWORK_MAGIC: &str = "pbcert-network v1";

/// Versioned text checkpoint: magic line, layer sizes, flat parameters.
pub fn write_network<W: Write>(net: &Mlp, mut out: W) -> Result<()> {
    writeln!(out, "{NETWORK_MAGIC}")?;
    writeln!(out, "sizes {}", net.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "))?;
    writeln!(out, "params {}", net.flat().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" "))?;
    Ok(())
}

pub fn read_network<R: BufRead>(input: R) -> Result<Mlp> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    if lines.first().map(|l| l.trim()) != Some(NETWORK_MAGIC) {
        return Err(Error::Parse("not a network checkpoint".into()));
    }
    let field = |i: usize, key: &str| -> Result<&str> {
        lines
            .get(i)
            .and_then(|l| l.trim().strip_prefix(key))
            .ok_or_else(|| Error::Parse(format!("missing {key}")))
    };
    let sizes: Vec<usize> = field(1, "sizes")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| Error::Parse(format!("sizes: {e}"))))
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = field(2, "params")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| Error::Parse(format!("params: {e}"))))
        .collect::<Result<_>>()?;
    let mut net = Mlp::zeros(&sizes)?;
    net.set_flat(&flat)?;
    Ok(net)
}
