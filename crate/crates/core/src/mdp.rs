//! Environments, trajectories and the return-based losses.
//!
//! The empirical loss of a dataset of `T` trajectories is the negated mean
//! discounted return, `-(1/T) * sum_j G(xi_j)`. Tabular environments expose
//! exact values by backward induction and serve as ground truth for the
//! certificate checks.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{usage, Error, Result};
use crate::mixing::MarkovChain;
use crate::rng::StreamRng;

/// One step `(s, a, r, s', terminal)`. Discrete states and actions are
/// stored as a single index-valued coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Ordered transitions stored as flat per-field arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
}

impl Trajectory {
    pub fn new(horizon: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            action_dim,
            states: Vec::with_capacity(horizon * state_dim),
            actions: Vec::with_capacity(horizon * action_dim),
            rewards: Vec::with_capacity(horizon),
            next_states: Vec::with_capacity(horizon * state_dim),
            terminals: Vec::with_capacity(horizon),
        }
    }

    /// Builds a trajectory from rewards alone (zero-dimensional states and
    /// actions). Handy for loss arithmetic.
    pub fn from_rewards(rewards: &[f64]) -> Self {
        let mut t = Self::new(rewards.len(), 0, 0);
        t.rewards.extend_from_slice(rewards);
        t.terminals.resize(rewards.len(), false);
        t
    }

    pub fn push(&mut self, tr: Transition) -> Result<()> {
        if self.len() >= self.horizon {
            return Err(usage(format!("trajectory already holds horizon {} steps", self.horizon)));
        }
        if tr.state.len() != self.state_dim
            || tr.next_state.len() != self.state_dim
            || tr.action.len() != self.action_dim
        {
            return Err(usage("transition dimensions do not match the trajectory"));
        }
        if let Some(prev_next) = self.next_state(self.len().wrapping_sub(1)) {
            if prev_next != tr.state.as_slice() {
                return Err(usage("transition does not continue from the previous next_state"));
            }
        }
        if self.terminals.last() == Some(&true) {
            return Err(usage("cannot extend a trajectory past a terminal transition"));
        }
        self.states.extend_from_slice(&tr.state);
        self.actions.extend_from_slice(&tr.action);
        self.rewards.push(tr.reward);
        self.next_states.extend_from_slice(&tr.next_state);
        self.terminals.push(tr.terminal);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn rewards_mut(&mut self) -> &mut [f64] {
        &mut self.rewards
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn state(&self, i: usize) -> Option<&[f64]> {
        (i < self.len()).then(|| &self.states[i * self.state_dim..(i + 1) * self.state_dim])
    }

    pub fn action(&self, i: usize) -> Option<&[f64]> {
        (i < self.len()).then(|| &self.actions[i * self.action_dim..(i + 1) * self.action_dim])
    }

    pub fn next_state(&self, i: usize) -> Option<&[f64]> {
        (i < self.len()).then(|| &self.next_states[i * self.state_dim..(i + 1) * self.state_dim])
    }

    pub fn transition(&self, i: usize) -> Option<Transition> {
        Some(Transition {
            state: self.state(i)?.to_vec(),
            action: self.action(i)?.to_vec(),
            reward: self.rewards[i],
            next_state: self.next_state(i)?.to_vec(),
            terminal: self.terminals[i],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub behavior_policy_id: String,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>, behavior_policy_id: impl Into<String>) -> Self {
        Self {
            trajectories,
            behavior_policy_id: behavior_policy_id.into(),
        }
    }

    /// Number of trajectories `T`.
    pub fn count(&self) -> usize {
        self.trajectories.len()
    }

    /// Shared horizon budget `H` (the largest among trajectories).
    pub fn horizon(&self) -> usize {
        self.trajectories.iter().map(Trajectory::horizon).max().unwrap_or(0)
    }
}

/// `sum_k gamma^k r_k`. Steps after a terminal transition contribute nothing.
pub fn discounted_return(trajectory: &Trajectory, gamma: f64) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(usage("discounted return of an empty trajectory"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(usage(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for (&r, &term) in trajectory.rewards.iter().zip(&trajectory.terminals) {
        total += discount * r;
        discount *= gamma;
        if term {
            break;
        }
    }
    Ok(total)
}

/// `-(1/T) * sum_j G(xi_j)`.
pub fn empirical_loss(dataset: &TrajectoryDataset, gamma: f64) -> Result<f64> {
    if dataset.count() == 0 {
        return Err(usage("empirical loss of an empty dataset"));
    }
    let mut sum = 0.0;
    for t in &dataset.trajectories {
        sum += discounted_return(t, gamma)?;
    }
    Ok(-sum / dataset.count() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Upper end of the reward range; rewards lie in `[0, r_max]`.
    fn r_max(&self) -> f64;
    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut StreamRng) -> Result<StepOutcome>;
}

pub trait Policy {
    fn act(&self, state: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>>;
}

/// Runs one episode of at most `horizon` steps, stopping early on terminal.
pub fn rollout<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &mut E,
    policy: &P,
    horizon: usize,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(usage("rollout horizon must be at least 1"));
    }
    let mut traj = Trajectory::new(horizon, env.state_dim(), env.action_dim());
    let mut state = env.reset(rng);
    for _ in 0..horizon {
        let action = policy.act(&state, rng)?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("policy emitted non-finite action {action:?}")));
        }
        let out = env.step(&action, rng)?;
        let terminal = out.terminal;
        traj.push(Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            terminal,
        })?;
        state = out.next_state;
        if terminal {
            break;
        }
    }
    Ok(traj)
}

/// Finite MDP with deterministic rewards `R(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P(s' | s, a)` at `(a * n + s) * n + s'`.
    transitions: Vec<f64>,
    /// `R(s, a)` at `s * n_actions + a`.
    rewards: Vec<f64>,
    initial: Vec<f64>,
    gamma: f64,
    r_max: f64,
    current: usize,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        if !(r_max > 0.0) {
            return Err(Error::Config("r_max must be positive".into()));
        }
        if let Some((i, r)) = rewards
            .iter()
            .enumerate()
            .find(|(_, &r)| !(0.0..=r_max).contains(&r))
        {
            return Err(Error::Config(format!(
                "reward {r} at (s={}, a={}) outside [0, {r_max}]",
                i / n_actions.max(1),
                i % n_actions.max(1)
            )));
        }
        Self::build(n_states, n_actions, transitions, rewards, initial, gamma, r_max)
    }

    /// Like [`TabularMdp::new`] but allows negative rewards. Such models do
    /// not satisfy the bounded-reward premise of the certificate and are
    /// only meant for exact-value arithmetic.
    pub fn new_signed(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let r_max = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(f64::MIN_POSITIVE);
        Self::build(n_states, n_actions, transitions, rewards, initial, gamma, r_max)
    }

    fn build(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config("need at least one state and one action".into()));
        }
        if transitions.len() != n_actions * n_states * n_states
            || rewards.len() != n_states * n_actions
            || initial.len() != n_states
        {
            return Err(Error::Config("tabular MDP array sizes do not match".into()));
        }
        for a in 0..n_actions {
            for s in 0..n_states {
                let row = &transitions[(a * n_states + s) * n_states..(a * n_states + s + 1) * n_states];
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("P(.|s={s}, a={a}) sums to {sum}")));
                }
            }
        }
        let isum: f64 = initial.iter().sum();
        if initial.iter().any(|&p| p < 0.0) || (isum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("initial distribution sums to {isum}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            initial,
            gamma,
            r_max,
            current: 0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        &self.transitions[(a * n + s) * n..(a * n + s + 1) * n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        let sum: f64 = initial.iter().sum();
        if initial.len() != self.n_states || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config("bad initial distribution".into()));
        }
        self.initial = initial;
        Ok(self)
    }

    /// State chain `P_pi(s' | s) = sum_a pi(a|s) P(s'|s,a)`.
    pub fn induced_chain(&self, policy: &TabularPolicy) -> Result<MarkovChain> {
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut p = vec![0.0; n * n];
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                for (dst, &v) in p[s * n..(s + 1) * n].iter_mut().zip(self.transition_row(s, a)) {
                    *dst += w * v;
                }
            }
            // absorb rounding so rows stay stochastic to 1e-12
            let sum: f64 = p[s * n..(s + 1) * n].iter().sum();
            for v in &mut p[s * n..(s + 1) * n] {
                *v /= sum;
            }
        }
        MarkovChain::new(n, p)
    }

    /// Chain on state-action pairs, index `s * n_actions + a`:
    /// `P((s', a') | (s, a)) = P(s' | s, a) pi(a' | s')`. Rewards are a
    /// function of this chain's state, so its mixing time is the one that
    /// governs the concentration of returns.
    pub fn state_action_chain(&self, policy: &TabularPolicy) -> Result<MarkovChain> {
        self.check_policy(policy)?;
        let (ns, na) = (self.n_states, self.n_actions);
        let m = ns * na;
        let mut p = vec![0.0; m * m];
        for s in 0..ns {
            for a in 0..na {
                let row = &mut p[(s * na + a) * m..(s * na + a + 1) * m];
                for (s2, &pt) in self.transition_row(s, a).iter().enumerate() {
                    for a2 in 0..na {
                        row[s2 * na + a2] = pt * policy.prob(s2, a2);
                    }
                }
                let sum: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        MarkovChain::new(m, p)
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states != self.n_states || policy.n_actions != self.n_actions {
            return Err(usage("policy and MDP dimensions disagree"));
        }
        Ok(())
    }

    /// Five states in a row, two actions (left, right). The intended move
    /// succeeds with probability 0.7, otherwise the agent stays (0.2) or
    /// slips the other way (0.1). Reward 1 at the right end, 0.3 at the left
    /// end, 0 elsewhere. Uniform start, `gamma = 0.9`.
    pub fn chain5() -> Self {
        let n = 5;
        let mut p = vec![0.0; 2 * n * n];
        for a in 0..2 {
            for s in 0..n {
                let left = s.saturating_sub(1);
                let right = (s + 1).min(n - 1);
                let (intended, slip) = if a == 0 { (left, right) } else { (right, left) };
                let row = &mut p[(a * n + s) * n..(a * n + s + 1) * n];
                row[intended] += 0.7;
                row[s] += 0.2;
                row[slip] += 0.1;
            }
        }
        let mut r = vec![0.0; n * 2];
        for a in 0..2 {
            r[a] = 0.3;
            r[(n - 1) * 2 + a] = 1.0;
        }
        Self::new(n, 2, p, r, vec![0.2; n], 0.9, 1.0).expect("chain5 is well formed")
    }
}

impl Environment for TabularMdp {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn r_max(&self) -> f64 {
        self.r_max
    }

    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64> {
        self.current = sample_categorical(&self.initial, rng);
        vec![self.current as f64]
    }

    fn step(&mut self, action: &[f64], rng: &mut StreamRng) -> Result<StepOutcome> {
        let a = action.first().copied().unwrap_or(f64::NAN);
        if !(a >= 0.0 && (a as usize) < self.n_actions && a.fract() == 0.0) {
            return Err(usage(format!("invalid discrete action {a}")));
        }
        let a = a as usize;
        let s = self.current;
        let reward = self.reward(s, a);
        let next = sample_categorical(self.transition_row(s, a), rng);
        self.current = next;
        Ok(StepOutcome {
            next_state: vec![next as f64],
            reward,
            terminal: false,
        })
    }
}

fn sample_categorical(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last supported index
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Stationary stochastic policy `pi(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Config("policy table has the wrong size".into()));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("pi(.|s={s}) sums to {sum}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Row-wise softmax of a logit table.
    pub fn softmax(n_states: usize, n_actions: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::Config("logit table has the wrong size".into()));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(n_actions) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut normalized: Vec<f64> = e.iter().map(|v| v / s).collect();
            let head: f64 = normalized[..n_actions - 1].iter().sum();
            normalized[n_actions - 1] = (1.0 - head).max(0.0);
            probs.extend(normalized);
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn deterministic(n_states: usize, n_actions: usize, choice: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in choice.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

impl Policy for TabularPolicy {
    fn act(&self, state: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
        let s = state.first().copied().unwrap_or(f64::NAN);
        if !(s >= 0.0 && (s as usize) < self.n_states) {
            return Err(usage(format!("state {s} outside the policy table")));
        }
        Ok(vec![sample_categorical(self.row(s as usize), rng) as f64])
    }
}

/// Expected discounted return over `horizon` steps from the initial
/// distribution, by backward induction on value vectors.
pub fn exact_value(mdp: &TabularMdp, policy: &TabularPolicy, horizon: usize) -> Result<f64> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for (s, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..mdp.n_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                let cont: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, vv)| p * vv).sum();
                acc += w * (mdp.reward(s, a) + mdp.gamma * cont);
            }
            *out = acc;
        }
        v = next;
    }
    Ok(mdp.initial.iter().zip(&v).map(|(p, vv)| p * vv).sum())
}

/// 2-D point mass driven toward the origin.
///
/// State `(x, y, vx, vy)`, action a force in `[-1, 1]^2`. The per-step cost
/// `|p|^2 + 0.1 |v|^2 + 0.01 |a|^2` maps to reward `r_max * exp(-cost)`, so
/// rewards live in `(0, r_max]` without clipping. Episodes never terminate;
/// the trainer truncates them at the configured horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub dt: f64,
    pub r_max: f64,
    pub horizon: usize,
    state: [f64; 4],
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new(100)
    }
}

impl PointMass {
    pub fn new(horizon: usize) -> Self {
        Self {
            dt: 0.1,
            r_max: 1.0,
            horizon,
            state: [0.0; 4],
        }
    }

    pub fn cost(state: &[f64], action: &[f64]) -> f64 {
        let p2 = state[0] * state[0] + state[1] * state[1];
        let v2 = state[2] * state[2] + state[3] * state[3];
        let a2 = action[0] * action[0] + action[1] * action[1];
        p2 + 0.1 * v2 + 0.01 * a2
    }
}

impl Environment for PointMass {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn r_max(&self) -> f64 {
        self.r_max
    }

    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64> {
        let u = Uniform::new_inclusive(-1.0, 1.0);
        self.state = [u.sample(rng), u.sample(rng), 0.0, 0.0];
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64], _rng: &mut StreamRng) -> Result<StepOutcome> {
        if action.len() != 2 || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("invalid point-mass action {action:?}")));
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let reward = (self.r_max * (-Self::cost(&self.state, &a)).exp()).clamp(0.0, self.r_max);
        let [x, y, vx, vy] = self.state;
        let (vx, vy) = (vx + self.dt * a[0], vy + self.dt * a[1]);
        self.state = [x + self.dt * vx, y + self.dt * vy, vx, vy];
        Ok(StepOutcome {
            next_state: self.state.to_vec(),
            reward,
            terminal: false,
        })
    }
}

/// Saturated proportional-derivative controller for [`PointMass`]; a
/// hand-tuned stand-in for the LQR solution used as a return reference.
#[derive(Debug, Clone, Copy)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdController {
    fn default() -> Self {
        Self { kp: 3.0, kd: 2.5 }
    }
}

impl Policy for PdController {
    fn act(&self, s: &[f64], _rng: &mut StreamRng) -> Result<Vec<f64>> {
        Ok(vec![
            (-self.kp * s[0] - self.kd * s[2]).clamp(-1.0, 1.0),
            (-self.kp * s[1] - self.kd * s[3]).clamp(-1.0, 1.0),
        ])
    }
}

/// The four-state machine `A -> C`, `B -> D` (reward 0), `C -> C` (+1),
/// `D -> D` (-1), with `gamma = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CounterexampleMdp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterState {
    A,
    B,
    C,
    D,
}

impl CounterState {
    pub const ALL: [CounterState; 4] = [CounterState::A, CounterState::B, CounterState::C, CounterState::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> char {
        ['A', 'B', 'C', 'D'][self.index()]
    }
}

/// Bellman errors at two consecutive steps from one start state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanErrorPair {
    pub start: CounterState,
    pub delta_t: f64,
    pub successor: CounterState,
    pub delta_next: f64,
}

impl CounterexampleMdp {
    pub const GAMMA: f64 = 0.0;

    pub fn successor(s: CounterState) -> CounterState {
        match s {
            CounterState::A | CounterState::C => CounterState::C,
            CounterState::B | CounterState::D => CounterState::D,
        }
    }

    pub fn reward(s: CounterState) -> f64 {
        match s {
            CounterState::A | CounterState::B => 0.0,
            CounterState::C => 1.0,
            CounterState::D => -1.0,
        }
    }

    /// `delta(s) = r(s) + gamma * V(s') - V(s)` for the single action.
    pub fn bellman_error(s: CounterState, values: &[f64; 4]) -> f64 {
        Self::reward(s) + Self::GAMMA * values[Self::successor(s).index()] - values[s.index()]
    }

    /// Pairs `(delta_t, delta_{t+1})` for starts `A` and `B`.
    pub fn bellman_error_sequence(values: &[f64; 4]) -> Vec<BellmanErrorPair> {
        [CounterState::A, CounterState::B]
            .into_iter()
            .map(|start| {
                let next = Self::successor(start);
                BellmanErrorPair {
                    start,
                    delta_t: Self::bellman_error(start, values),
                    successor: next,
                    delta_next: Self::bellman_error(next, values),
                }
            })
            .collect()
    }

    /// Signed-reward tabular form for exact-value checks.
    pub fn to_tabular(initial: Vec<f64>) -> Result<TabularMdp> {
        let n = 4;
        let mut p = vec![0.0; n * n];
        let mut r = vec![0.0; n];
        for s in CounterState::ALL {
            p[s.index() * n + Self::successor(s).index()] = 1.0;
            r[s.index()] = Self::reward(s);
        }
        TabularMdp::new_signed(n, 1, p, r, initial, Self::GAMMA)
    }
}

/// Writes `traj_id,step,reward,terminal,s0..,a0..,ns0..` rows.
pub fn write_dataset<W: Write>(dataset: &TrajectoryDataset, mut out: W) -> Result<()> {
    let (sd, ad) = dataset
        .trajectories
        .first()
        .map_or((0, 0), |t| (t.state_dim, t.action_dim));
    let mut header = String::from("traj_id,step,reward,terminal");
    for i in 0..sd {
        header.push_str(&format!(",s{i}"));
    }
    for i in 0..ad {
        header.push_str(&format!(",a{i}"));
    }
    for i in 0..sd {
        header.push_str(&format!(",ns{i}"));
    }
    writeln!(out, "{header}")?;
    for (j, t) in dataset.trajectories.iter().enumerate() {
        for i in 0..t.len() {
            let mut row = format!("{j},{i},{:?},{}", t.rewards[i], u8::from(t.terminals[i]));
            for v in t.state(i).unwrap().iter().chain(t.action(i).unwrap()).chain(t.next_state(i).unwrap()) {
                row.push_str(&format!(",{v:?}"));
            }
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

/// Reads the format produced by [`write_dataset`]. Each trajectory's horizon
/// is set to the longest trajectory in the file.
pub fn read_dataset<R: BufRead>(input: R, behavior_policy_id: &str) -> Result<TrajectoryDataset> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 4 || cols[..4] != ["traj_id", "step", "reward", "terminal"] {
        return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
    }
    let sd = cols.iter().filter(|c| c.starts_with("ns")).count();
    let ad = cols.iter().filter(|c| c.starts_with('a')).count();
    if cols.len() != 4 + 2 * sd + ad {
        return Err(Error::Parse("dataset header has inconsistent state/action columns".into()));
    }
    let mut rows: Vec<(usize, Transition)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Parse(format!("line {}: expected {} fields", lineno + 2, cols.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {s:?}: {e}", lineno + 2)))
        };
        let traj_id: usize = f[0]
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: traj_id: {e}", lineno + 2)))?;
        let vals: Vec<f64> = f[4..].iter().map(|s| num(s)).collect::<Result<_>>()?;
        rows.push((
            traj_id,
            Transition {
                state: vals[..sd].to_vec(),
                action: vals[sd..sd + ad].to_vec(),
                reward: num(f[2])?,
                next_state: vals[sd + ad..].to_vec(),
                terminal: f[3].trim() == "1" || f[3].trim() == "true",
            },
        ));
    }
    let n_traj = rows.iter().map(|(j, _)| j + 1).max().unwrap_or(0);
    let mut grouped: Vec<Vec<Transition>> = vec![Vec::new(); n_traj];
    for (j, tr) in rows {
        grouped[j].push(tr);
    }
    let horizon = grouped.iter().map(Vec::len).max().unwrap_or(0);
    let mut trajectories = Vec::with_capacity(n_traj);
    for group in grouped {
        let mut t = Trajectory::new(horizon, sd, ad);
        for tr in group {
            t.push(tr)?;
        }
        trajectories.push(t);
    }
    Ok(TrajectoryDataset::new(trajectories, behavior_policy_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    #[test]
    fn return_examples() {
        let t = Trajectory::from_rewards(&[1.0, 1.0, 1.0]);
        assert_eq!(discounted_return(&t, 0.5).unwrap(), 1.75);
        let t = Trajectory::from_rewards(&[0.3, 5.0, 2.0]);
        assert_eq!(discounted_return(&t, 0.0).unwrap(), 0.3);
        assert!(discounted_return(&Trajectory::from_rewards(&[]), 0.5).is_err());
    }

    #[test]
    fn return_matches_naive_power_sum() {
        let mut r = rng(5);
        let rewards: Vec<f64> = (0..50).map(|_| r.gen::<f64>()).collect();
        let naive: f64 = rewards
            .iter()
            .enumerate()
            .map(|(k, x)| 0.97f64.powi(k as i32) * x)
            .sum();
        let got = discounted_return(&Trajectory::from_rewards(&rewards), 0.97).unwrap();
        assert_relative_eq!(got, naive, max_relative = 1e-12);
    }

    #[test]
    fn loss_examples() {
        let one = TrajectoryDataset::new(vec![Trajectory::from_rewards(&[2.0])], "x");
        assert_eq!(empirical_loss(&one, 0.9).unwrap(), -2.0);
        let two = TrajectoryDataset::new(
            vec![Trajectory::from_rewards(&[1.0]), Trajectory::from_rewards(&[3.0])],
            "x",
        );
        assert_eq!(empirical_loss(&two, 0.9).unwrap(), -2.0);
        assert!(empirical_loss(&TrajectoryDataset::new(vec![], "x"), 0.9).is_err());

        let mut r = rng(9);
        let trajs: Vec<Trajectory> = (0..20)
            .map(|_| {
                let len = r.gen_range(1..30);
                Trajectory::from_rewards(&(0..len).map(|_| r.gen::<f64>()).collect::<Vec<_>>())
            })
            .collect();
        let ds = TrajectoryDataset::new(trajs, "x");
        let mean: f64 = ds
            .trajectories
            .iter()
            .map(|t| discounted_return(t, 0.95).unwrap())
            .sum::<f64>()
            / 20.0;
        assert_relative_eq!(empirical_loss(&ds, 0.95).unwrap(), -mean, max_relative = 1e-12);
    }

    #[test]
    fn terminal_stops_accumulation() {
        let mut t = Trajectory::new(3, 0, 0);
        t.push(Transition { state: vec![], action: vec![], reward: 1.0, next_state: vec![], terminal: true })
            .unwrap();
        assert_eq!(discounted_return(&t, 0.9).unwrap(), 1.0);
        assert!(t
            .push(Transition { state: vec![], action: vec![], reward: 1.0, next_state: vec![], terminal: false })
            .is_err());
    }

    proptest! {
        #[test]
        fn return_monotone_in_each_reward(
            rewards in proptest::collection::vec(0.0f64..1.0, 1..40),
            idx in 0usize..40,
            bump in 0.0f64..1.0,
            gamma in 0.0f64..1.0,
        ) {
            let i = idx % rewards.len();
            let base = discounted_return(&Trajectory::from_rewards(&rewards), gamma).unwrap();
            let mut bumped = rewards.clone();
            bumped[i] += bump;
            let up = discounted_return(&Trajectory::from_rewards(&bumped), gamma).unwrap();
            prop_assert!(up >= base);
        }
    }

    #[test]
    fn deterministic_chain_rollout() {
        // 3-state ring with deterministic moves
        let n = 3;
        let mut p = vec![0.0; n * n];
        for s in 0..n {
            p[s * n + (s + 1) % n] = 1.0;
        }
        let mut mdp = TabularMdp::new(n, 1, p, vec![0.5; n], vec![1.0, 0.0, 0.0], 0.9, 1.0).unwrap();
        let pol = TabularPolicy::deterministic(n, 1, &[0, 0, 0]).unwrap();
        let t = rollout(&mut mdp, &pol, 5, &mut rng(1)).unwrap();
        let states: Vec<f64> = (0..5).map(|i| t.state(i).unwrap()[0]).collect();
        assert_eq!(states, vec![0.0, 1.0, 2.0, 0.0, 1.0]);
        let t1 = rollout(&mut mdp, &pol, 1, &mut rng(1)).unwrap();
        assert_eq!(t1.len(), 1);
        assert!(rollout(&mut mdp, &pol, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let mut env = PointMass::default();
        let pd = PdController::default();
        let s = SeedStream::new(42);
        let a = rollout(&mut env, &pd, 50, &mut s.rng("rollout", 0)).unwrap();
        let b = rollout(&mut env, &pd, 50, &mut s.rng("rollout", 0)).unwrap();
        assert_eq!(a, b);
        let mut mdp = TabularMdp::chain5();
        let pol = TabularPolicy::softmax(5, 2, &[0.1, 0.5, -0.3, 0.2, 0.0, 0.0, 1.0, -1.0, 0.4, 0.4]).unwrap();
        let a = rollout(&mut mdp, &pol, 30, &mut s.rng("tab", 3)).unwrap();
        let b = rollout(&mut mdp, &pol, 30, &mut s.rng("tab", 3)).unwrap();
        assert_eq!(a, b);
    }

    struct NanPolicy;
    impl Policy for NanPolicy {
        fn act(&self, _: &[f64], _: &mut StreamRng) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN, 0.0])
        }
    }

    #[test]
    fn non_finite_action_is_numeric_error() {
        let mut env = PointMass::default();
        assert!(matches!(rollout(&mut env, &NanPolicy, 3, &mut rng(0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn constant_reward_value_is_geometric() {
        let n = 3;
        let mut p = vec![0.0; 2 * n * n];
        for a in 0..2 {
            for s in 0..n {
                for t in 0..n {
                    p[(a * n + s) * n + t] = 1.0 / 3.0;
                }
                let head: f64 = p[(a * n + s) * n..(a * n + s) * n + n - 1].iter().sum();
                p[(a * n + s) * n + n - 1] = 1.0 - head;
            }
        }
        let mdp = TabularMdp::new(n, 2, p, vec![0.4; n * 2], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0 + 1e-17], 0.8, 1.0)
            .unwrap();
        let pol = TabularPolicy::softmax(n, 2, &[0.0, 1.0, 2.0, 0.0, -1.0, 1.0]).unwrap();
        let v = exact_value(&mdp, &pol, 7).unwrap();
        assert_relative_eq!(v, 0.4 * (1.0 - 0.8f64.powi(7)) / 0.2, max_relative = 1e-12);
    }

    #[test]
    fn exact_value_matches_enumeration_at_horizon_two() {
        let mdp = TabularMdp::chain5();
        let pol = TabularPolicy::softmax(5, 2, &[0.3, -0.2, 0.0, 0.8, 1.0, 0.1, -0.5, 0.5, 0.2, 0.9]).unwrap();
        let g = mdp.gamma();
        let mut total = 0.0;
        for s0 in 0..5 {
            for a0 in 0..2 {
                for s1 in 0..5 {
                    for a1 in 0..2 {
                        let prob = mdp.initial_distribution()[s0]
                            * pol.prob(s0, a0)
                            * mdp.transition_row(s0, a0)[s1]
                            * pol.prob(s1, a1);
                        total += prob * (mdp.reward(s0, a0) + g * mdp.reward(s1, a1));
                    }
                }
            }
        }
        assert_relative_eq!(exact_value(&mdp, &pol, 2).unwrap(), total, max_relative = 1e-12);
    }

    #[test]
    fn exact_value_agrees_with_monte_carlo() {
        let mut mdp = TabularMdp::chain5();
        let pol = TabularPolicy::softmax(5, 2, &[0.0, 1.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        let h = 12;
        let exact = exact_value(&mdp, &pol, h).unwrap();
        let mut r = rng(77);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let g = discounted_return(&rollout(&mut mdp, &pol, h, &mut r).unwrap(), mdp.gamma()).unwrap();
            sum += g;
            sq += g * g;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn counterexample_rows() {
        let rows = CounterexampleMdp::bellman_error_sequence(&[0.0; 4]);
        assert_eq!(rows[0].start, CounterState::A);
        assert_eq!((rows[0].delta_t, rows[0].delta_next), (0.0, 1.0));
        assert_eq!(rows[1].start, CounterState::B);
        assert_eq!((rows[1].delta_t, rows[1].delta_next), (0.0, -1.0));
        assert_eq!(rows[0].delta_t, rows[1].delta_t);
        assert_ne!(rows[0].delta_next, rows[1].delta_next);
        let cd = CounterexampleMdp::to_tabular(vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        let pol = TabularPolicy::deterministic(4, 1, &[0, 0, 0, 0]).unwrap();
        assert_eq!(exact_value(&cd, &pol, 1).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_rewards_stay_in_range() {
        let mut env = PointMass::default();
        let mut r = rng(13);
        env.reset(&mut r);
        let u = Uniform::new_inclusive(-3.0, 3.0);
        for i in 0..1_000_000 {
            if i % 100 == 0 {
                env.reset(&mut r);
            }
            let a = [u.sample(&mut r), u.sample(&mut r)];
            let out = env.step(&a, &mut r).unwrap();
            assert!((0.0..=env.r_max).contains(&out.reward));
        }
    }

    #[test]
    fn chain5_rewards_in_range_and_ergodic() {
        let mdp = TabularMdp::chain5();
        let pol = TabularPolicy::softmax(5, 2, &[0.0; 10]).unwrap();
        let chain = mdp.induced_chain(&pol).unwrap();
        assert!(crate::mixing::mixing_time_exact(&chain, 0.01).is_ok());
    }

    #[test]
    fn dataset_text_round_trip() {
        let mut env = PointMass::new(7);
        let pd = PdController::default();
        let mut r = rng(3);
        let trajs = (0..3).map(|_| rollout(&mut env, &pd, 7, &mut r).unwrap()).collect();
        let ds = TrajectoryDataset::new(trajs, "pd");
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("traj_id,step,reward,terminal,s0,s1,s2,s3,a0,a1,ns0"));
        let back = read_dataset(&buf[..], "pd").unwrap();
        assert_eq!(back, ds);
    }
}
