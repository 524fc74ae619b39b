//! Soft actor-critic trained against a PAC-Bayes certificate: a Gaussian
//! posterior over the flattened actor parameters guides exploration, is
//! periodically optimized on fresh importance-weighted rollouts, and yields
//! a high-probability lower bound on the posterior's expected return.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tensor};
use crate::certificate::{kappa_objective, kappa_star, value_lower_bound, Certificate, CertificateInputs, Horizon};
use crate::error::{usage, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::mdp::{discounted_return, Environment, TabularPolicy, Trajectory, Transition};
use crate::mixing::{autocorrelation_tau_pooled, conservative_tau, MixingEstimate, DEFAULT_AUTOCORR_THRESHOLD};
use crate::posterior::{
    kl_diag_gaussians, kl_gradient, prior_update, reinforce_gradient, DiagGaussian, PosteriorCheckpoint, PriorSchedule,
    DEFAULT_INITIAL_STD,
};
use crate::rng::{SeedStream, StreamRng};
use crate::sac::{
    critic_regress, critic_targets, evaluate, gaussian_noise, Batch, GaussianPolicy, ReplayBuffer, SacAgent, SacConfig,
    TwinCritic,
};

/// PB-SAC hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbSacConfig {
    pub sac: SacConfig,
    /// Environment steps between PAC-Bayes cycles.
    pub pb_update_freq: u64,
    /// Posterior/kappa alternations per cycle.
    pub pb_epochs: usize,
    /// Adam step size for the posterior mean and log-std.
    pub pb_learning_rate: f64,
    /// Posterior draws in the common-random-number bank used for the
    /// REINFORCE gradient and the line search.
    pub pb_posterior_samples: usize,
    /// Halvings tried before a posterior step is rejected.
    pub pb_line_search_halvings: u32,
    /// Posterior draws averaged into the certified empirical return.
    pub certificate_samples: usize,
    pub adaptation_samples: usize,
    /// Frozen-actor critic updates after each posterior sync.
    pub adaptation_steps: u64,
    /// Probability of posterior-guided exploration once learning starts.
    pub explore_epsilon: f64,
    /// Candidates (posterior mean included) scored per exploration step.
    pub explore_samples: usize,
    pub rollout_trajectories: usize,
    pub rollout_steps: usize,
    pub delta: f64,
    pub kl_coefficient: f64,
    pub initial_posterior_std: f64,
    /// Prior resets; `update_period` is the reset frequency.
    pub prior: PriorSchedule,
    pub is_weight_clip: f64,
}

impl Default for PbSacConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            pb_update_freq: 20_000,
            pb_epochs: 20,
            pb_learning_rate: 1e-4,
            pb_posterior_samples: 32,
            pb_line_search_halvings: 4,
            certificate_samples: 64,
            adaptation_samples: 256,
            adaptation_steps: 20,
            explore_epsilon: 0.1,
            explore_samples: 16,
            rollout_trajectories: 100,
            rollout_steps: 500,
            delta: 0.1,
            kl_coefficient: 1.0,
            initial_posterior_std: DEFAULT_INITIAL_STD,
            prior: PriorSchedule::default(),
            is_weight_clip: 10.0,
        }
    }
}

impl PbSacConfig {
    /// Settings sized for a single CPU: small networks, rollouts as long as
    /// one point-mass episode, fewer posterior draws. The prior is reset
    /// to the posterior itself and the posterior is kept narrow so the
    /// importance weights of its draws stay informative.
    pub fn desk_scale() -> Self {
        Self {
            sac: SacConfig::desk_scale(),
            rollout_steps: 100,
            pb_posterior_samples: 16,
            certificate_samples: 32,
            adaptation_samples: 32,
            explore_samples: 8,
            initial_posterior_std: 0.005,
            prior: PriorSchedule {
                iota: 1.0,
                decay_slope: 0.0,
                ..PriorSchedule::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.pb_update_freq == 0 {
            return bad("pb_update_freq", "must be positive");
        }
        if !(self.pb_learning_rate > 0.0 && self.pb_learning_rate.is_finite()) {
            return bad("pb_learning_rate", "must be positive");
        }
        if self.pb_posterior_samples < 2 {
            return bad("pb_posterior_samples", "must be at least 2 (the gradient uses a leave-one-out baseline)");
        }
        if self.certificate_samples == 0 {
            return bad("certificate_samples", "must be positive");
        }
        if self.adaptation_samples == 0 {
            return bad("adaptation_samples", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.explore_epsilon) {
            return bad("explore_epsilon", "must lie in [0, 1]");
        }
        if self.explore_samples == 0 {
            return bad("explore_samples", "must be positive");
        }
        if self.rollout_trajectories < 2 {
            return bad("rollout_trajectories", "must be at least 2 to split into train and test halves");
        }
        if self.rollout_steps < 10 {
            return bad("rollout_steps", "must be at least 10 for the autocorrelation mixing estimate");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", "must lie in (0, 1)");
        }
        if !(self.kl_coefficient > 0.0 && self.kl_coefficient.is_finite()) {
            return bad("kl_coefficient", "must be positive");
        }
        if !(self.initial_posterior_std > 0.0 && self.initial_posterior_std.is_finite()) {
            return bad("initial_posterior_std", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.prior.iota) || !(0.0..=1.0).contains(&self.prior.floor) {
            return bad("prior", "iota and floor must lie in [0, 1]");
        }
        if !(self.prior.decay_slope >= 0.0) {
            return bad("prior.decay_slope", "must be nonnegative");
        }
        if self.prior.update_period == 0 {
            return bad("prior.update_period", "must be positive");
        }
        if !(self.is_weight_clip >= 1.0) {
            return bad("is_weight_clip", "must be at least 1");
        }
        Ok(())
    }
}

/// Log-likelihood of recorded actions under a policy.
pub trait ActionLogProb {
    /// Per-step `log pi(a_t | s_t)` for `n` rows of flat states and actions.
    fn action_log_probs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>>;
}

impl ActionLogProb for GaussianPolicy {
    /// Actions are the pre-squash values `u` with `a = tanh(u)`.
    fn action_log_probs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        let s = Tensor::new(n, self.state_dim(), states.to_vec())?;
        let u = Tensor::new(n, self.action_dim(), actions.to_vec())?;
        self.log_prob_raw(&s, &u)
    }
}

impl ActionLogProb for TabularPolicy {
    fn action_log_probs(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        if states.len() != n || actions.len() != n {
            return Err(usage("tabular log-probabilities need one state and one action index per row"));
        }
        Ok(states
            .iter()
            .zip(actions)
            .map(|(&s, &a)| self.prob(s as usize, a as usize).ln())
            .collect())
    }
}

/// `exp(log_weight)` clamped to `[1/clip, clip]`. The clamp is applied in
/// log space, so a finite but huge log-weight saturates instead of
/// overflowing; NaN or `+inf` log-weights are errors.
pub fn clipped_weight(log_weight: f64, clip: f64, trajectory_id: usize) -> Result<f64> {
    if !(clip >= 1.0) {
        return Err(usage(format!("importance weight clip must be at least 1, got {clip}")));
    }
    if log_weight.is_nan() || log_weight == f64::INFINITY {
        return Err(Error::Numeric(format!(
            "trajectory {trajectory_id}: non-finite importance weight (log-weight {log_weight})"
        )));
    }
    if clip == 1.0 {
        return Ok(1.0);
    }
    let bound = clip.ln();
    Ok(if log_weight >= bound {
        clip
    } else if log_weight <= -bound {
        1.0 / clip
    } else {
        log_weight.exp()
    })
}

/// `sum_t [log pi_target(a_t|s_t) - log pi_behavior(a_t|s_t)]`.
pub fn importance_log_weight<P: ActionLogProb + ?Sized>(
    trajectory: &Trajectory,
    behavior_log_probs: &[f64],
    target: &P,
) -> Result<f64> {
    if behavior_log_probs.len() != trajectory.len() {
        return Err(usage(format!(
            "{} behavior log-probabilities for a trajectory of length {}",
            behavior_log_probs.len(),
            trajectory.len()
        )));
    }
    let target_lp = target.action_log_probs(trajectory.states(), trajectory.actions(), trajectory.len())?;
    Ok(target_lp.iter().zip(behavior_log_probs).map(|(t, b)| t - b).sum())
}

/// Clipped per-trajectory importance weight times the discounted return.
pub fn importance_sampled_return<P: ActionLogProb + ?Sized>(
    trajectory: &Trajectory,
    behavior_log_probs: &[f64],
    target: &P,
    gamma: f64,
    clip: f64,
    trajectory_id: usize,
) -> Result<f64> {
    let w = clipped_weight(importance_log_weight(trajectory, behavior_log_probs, target)?, clip, trajectory_id)?;
    Ok(w * discounted_return(trajectory, gamma)?)
}

/// Fresh trajectories of a stochastic Gaussian policy. Recorded actions are
/// the pre-squash values; the environment receives their `tanh`.
#[derive(Debug, Clone)]
pub struct RolloutSet {
    pub trajectories: Vec<Trajectory>,
    pub behavior_log_probs: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
}

/// Collects `n` trajectories of `horizon` steps. Trajectory `j` draws from
/// stream `("trajectory", j)` of `seeds`, so the set is identical in
/// either execution mode.
pub fn collect_rollouts<E: Environment + Clone + Sync>(
    env: &E,
    policy: &GaussianPolicy,
    n: usize,
    horizon: usize,
    gamma: f64,
    seeds: &SeedStream,
    exec: Execution,
) -> Result<RolloutSet> {
    if horizon == 0 {
        return Err(usage("rollout horizon must be at least 1"));
    }
    let runs = map_indexed(n, exec, |j| -> Result<(Trajectory, Vec<f64>, f64)> {
        let mut env = env.clone();
        let mut rng = seeds.rng("trajectory", j as u64);
        let mut traj = Trajectory::new(horizon, env.state_dim(), env.action_dim());
        let mut state = env.reset(&mut rng);
        for _ in 0..horizon {
            let draw = policy.sample(&state, &mut rng, false)?;
            let out = env.step(&draw.action, &mut rng)?;
            let terminal = out.terminal;
            traj.push(Transition {
                state,
                action: draw.raw,
                reward: out.reward,
                next_state: out.next_state.clone(),
                terminal,
            })?;
            state = out.next_state;
            if terminal {
                break;
            }
        }
        // recomputed in batch so that an identical target policy cancels exactly
        let lp = policy.action_log_probs(traj.states(), traj.actions(), traj.len())?;
        let g = discounted_return(&traj, gamma)?;
        Ok((traj, lp, g))
    });
    let mut set = RolloutSet {
        trajectories: Vec::with_capacity(n),
        behavior_log_probs: Vec::with_capacity(n),
        returns: Vec::with_capacity(n),
    };
    for r in runs {
        let (t, lp, g) = r?;
        set.trajectories.push(t);
        set.behavior_log_probs.push(lp);
        set.returns.push(g);
    }
    Ok(set)
}

/// One half of a rollout set stacked for batched log-probability passes.
#[derive(Debug, Clone)]
pub struct RolloutSplit {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    states: Tensor,
    actions: Tensor,
    behavior: Vec<f64>,
    returns: Vec<f64>,
}

impl RolloutSplit {
    /// Trajectories whose index has the given parity (0 = train, 1 = test).
    pub fn alternating(set: &RolloutSet, parity: usize) -> Result<Self> {
        let ids: Vec<usize> = (0..set.trajectories.len()).filter(|j| j % 2 == parity).collect();
        let first = set
            .trajectories
            .first()
            .ok_or_else(|| usage("cannot split an empty rollout set"))?;
        let (sd, ad) = (first.state_dim(), first.action_dim());
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut behavior = Vec::new();
        let mut lengths = Vec::with_capacity(ids.len());
        let mut returns = Vec::with_capacity(ids.len());
        for &j in &ids {
            let t = &set.trajectories[j];
            states.extend_from_slice(t.states());
            actions.extend_from_slice(t.actions());
            behavior.extend_from_slice(&set.behavior_log_probs[j]);
            lengths.push(t.len());
            returns.push(set.returns[j]);
        }
        let rows = behavior.len();
        Ok(Self {
            ids,
            lengths,
            states: Tensor::new(rows, sd, states)?,
            actions: Tensor::new(rows, ad, actions)?,
            behavior,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Mean clipped importance-sampled return of `target` over the split.
    pub fn mean_is_return(&self, target: &GaussianPolicy, clip: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(usage("importance sampling over an empty split"));
        }
        let lp = target.log_prob_raw(&self.states, &self.actions)?;
        let mut offset = 0;
        let mut total = 0.0;
        for (k, &len) in self.lengths.iter().enumerate() {
            let log_w: f64 = (offset..offset + len).map(|r| lp[r] - self.behavior[r]).sum();
            total += clipped_weight(log_w, clip, self.ids[k])? * self.returns[k];
            offset += len;
        }
        Ok(total / self.len() as f64)
    }
}

/// `(action, candidate index, min-Q)` of a posterior-guided choice.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploreChoice {
    pub action: Vec<f64>,
    pub candidate: usize,
    pub q_value: f64,
}

/// Scores the deterministic actions `tanh(mean_theta(s))` of the posterior
/// mean (candidate 0) and `n_samples - 1` posterior draws under
/// `min(Q1, Q2)` and returns the best; ties go to the lowest index.
pub fn posterior_guided_explore(
    state: &[f64],
    posterior: &DiagGaussian,
    template: &GaussianPolicy,
    critics: &TwinCritic,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<ExploreChoice> {
    if n_samples == 0 {
        return Err(usage("posterior-guided exploration needs at least one candidate"));
    }
    let mut policy = template.clone();
    let ad = template.action_dim();
    let mut actions = Vec::with_capacity(n_samples * ad);
    for i in 0..n_samples {
        let theta = if i == 0 {
            posterior.mean().to_vec()
        } else {
            posterior.reparameterize(&posterior.draw_noise(rng))?
        };
        policy.net.set_flat(&theta)?;
        actions.extend(policy.act(state, rng, true)?.0);
    }
    let states = Tensor::new(n_samples, state.len(), state.repeat(n_samples))?;
    let actions = Tensor::new(n_samples, ad, actions)?;
    let q = critics.min_q(&states, &actions)?;
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    Ok(ExploreChoice {
        action: actions.row_slice(best).to_vec(),
        candidate: best,
        q_value: q[best],
    })
}

/// Soft targets averaged over `n_samples` posterior policies. Parameter
/// draws come from `posterior_rng`; each policy's next-action noise from
/// `target_rng`, in candidate order.
pub fn averaged_critic_targets(
    critics: &TwinCritic,
    batch: &Batch,
    posterior: &DiagGaussian,
    template: &GaussianPolicy,
    alpha: f64,
    gamma: f64,
    n_samples: usize,
    posterior_rng: &mut StreamRng,
    target_rng: &mut StreamRng,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if n_samples == 0 {
        return Err(usage("critic adaptation needs at least one posterior sample"));
    }
    let mut policy = template.clone();
    let mut per_policy = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        policy.net.set_flat(&posterior.reparameterize(&posterior.draw_noise(posterior_rng))?)?;
        let noise = gaussian_noise(batch.len(), policy.action_dim(), target_rng);
        per_policy.push(critic_targets(&policy, critics, batch, alpha, gamma, &noise)?);
    }
    let mut mean = vec![0.0; batch.len()];
    for y in &per_policy {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_samples as f64;
    }
    Ok((mean, per_policy))
}

/// One frozen-actor critic update toward posterior-averaged soft targets.
pub fn critic_adaptation_step(
    critics: &mut TwinCritic,
    optimizers: &mut [AdamState; 2],
    batch: &Batch,
    posterior: &DiagGaussian,
    template: &GaussianPolicy,
    alpha: f64,
    gamma: f64,
    n_samples: usize,
    posterior_rng: &mut StreamRng,
    target_rng: &mut StreamRng,
) -> Result<f64> {
    let (targets, _) = averaged_critic_targets(
        critics,
        batch,
        posterior,
        template,
        alpha,
        gamma,
        n_samples,
        posterior_rng,
        target_rng,
    )?;
    critic_regress(critics, optimizers, batch, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Normal,
    CriticAdaptation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Normal => "normal",
            Phase::CriticAdaptation => "critic_adaptation",
        })
    }
}

/// Everything the loop carries besides the SAC agent and replay buffer.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub phase: Phase,
    pub step: u64,
    pub posterior: DiagGaussian,
    pub prior: DiagGaussian,
    pub schedule: PriorSchedule,
    pub tau: Option<MixingEstimate>,
    pub kappa: f64,
    pub certificate: Option<Certificate>,
    pub adaptation_remaining: u64,
    pub cycles: u64,
}

impl TrainerState {
    /// Prior and posterior both centred on the actor with the configured
    /// isotropic standard deviation.
    pub fn new(actor: &GaussianPolicy, config: &PbSacConfig) -> Result<Self> {
        let posterior = DiagGaussian::isotropic(actor.net.flat(), config.initial_posterior_std)?;
        Ok(Self {
            phase: Phase::Normal,
            step: 0,
            prior: posterior.clone(),
            posterior,
            schedule: config.prior,
            tau: None,
            kappa: 1.0,
            certificate: None,
            adaptation_remaining: 0,
            cycles: 0,
        })
    }

    pub fn kl(&self) -> Result<f64> {
        kl_diag_gaussians(&self.posterior, &self.prior)
    }

    /// Sets the posterior mean to the given parameters, keeping its spread.
    pub fn sync_posterior_mean(&mut self, params: Vec<f64>) -> Result<()> {
        self.posterior = self.posterior.with_params(params, self.posterior.log_std().to_vec())?;
        Ok(())
    }
}

/// Outcome of one PAC-Bayes cycle.
#[derive(Debug, Clone)]
pub struct PbCycleReport {
    pub certificate: Option<Certificate>,
    /// Objective after the initial kappa step and after every epoch.
    pub objective_trace: Vec<f64>,
    pub accepted_steps: usize,
    pub tau: MixingEstimate,
    /// Set when the update was abandoned and the posterior restored.
    pub incident: Option<String>,
}

/// Posterior draws fixed for a whole cycle (common random numbers).
struct NoiseBank(Vec<Vec<f64>>);

impl NoiseBank {
    fn draw(dim: usize, n: usize, rng: &mut StreamRng) -> Result<Self> {
        let unit = DiagGaussian::isotropic(vec![0.0; dim], 1.0)?;
        Ok(Self((0..n).map(|_| unit.draw_noise(rng)).collect()))
    }
}

struct CycleContext<'a> {
    template: &'a GaussianPolicy,
    prior: &'a DiagGaussian,
    clip: f64,
    c_norm_sq: f64,
    tau_min: f64,
    delta: f64,
    kl_coefficient: f64,
    exec: Execution,
}

struct Evaluation {
    objective: f64,
    kl: f64,
    thetas: Vec<Vec<f64>>,
    returns: Vec<f64>,
}

impl CycleContext<'_> {
    fn sample_returns(&self, rho: &DiagGaussian, bank: &NoiseBank, split: &RolloutSplit) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let thetas = bank
            .0
            .iter()
            .map(|e| rho.reparameterize(e))
            .collect::<Result<Vec<_>>>()?;
        let returns = map_indexed(thetas.len(), self.exec, |i| -> Result<f64> {
            let mut policy = self.template.clone();
            policy.net.set_flat(&thetas[i])?;
            split.mean_is_return(&policy, self.clip)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok((thetas, returns))
    }

    fn evaluate(&self, rho: &DiagGaussian, kappa: f64, bank: &NoiseBank, split: &RolloutSplit) -> Result<Evaluation> {
        let kl = kl_diag_gaussians(rho, self.prior)?;
        if !kl.is_finite() {
            return Err(Error::Numeric(format!("posterior KL is {kl}")));
        }
        let (thetas, returns) = self.sample_returns(rho, bank, split)?;
        let loss = -returns.iter().sum::<f64>() / returns.len() as f64;
        let objective = kappa_objective(
            loss,
            self.kl_coefficient * kl,
            kappa,
            self.c_norm_sq,
            self.tau_min,
            self.delta,
            true,
        )?;
        Ok(Evaluation {
            objective,
            kl,
            thetas,
            returns,
        })
    }
}

fn certificate_inputs(env_r_max: f64, config: &PbSacConfig, test: &RolloutSplit, tau_min: f64, kl: f64) -> CertificateInputs {
    CertificateInputs {
        r_max: env_r_max,
        gamma: config.sac.gamma,
        horizon: Horizon::Finite(test.horizon() as u64),
        n_trajectories: test.len() as u64,
        tau_min,
        kl,
        delta: config.delta,
    }
}

/// Certificate of the current posterior on the test split of `set`,
/// averaging importance-sampled returns over `config.certificate_samples`
/// posterior draws from `rng`.
pub fn certify_posterior(
    posterior: &DiagGaussian,
    prior: &DiagGaussian,
    template: &GaussianPolicy,
    test: &RolloutSplit,
    r_max: f64,
    tau_min: f64,
    config: &PbSacConfig,
    rng: &mut StreamRng,
    exec: Execution,
) -> Result<Certificate> {
    let kl = kl_diag_gaussians(posterior, prior)?;
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("posterior KL is {kl}")));
    }
    let bank = NoiseBank::draw(posterior.dim(), config.certificate_samples, rng)?;
    let ctx = CycleContext {
        template,
        prior,
        clip: config.is_weight_clip,
        c_norm_sq: 0.0,
        tau_min,
        delta: config.delta,
        kl_coefficient: config.kl_coefficient,
        exec,
    };
    let (_, returns) = ctx.sample_returns(posterior, &bank, test)?;
    let empirical = returns.iter().sum::<f64>() / returns.len() as f64;
    value_lower_bound(empirical, &certificate_inputs(r_max, config, test, tau_min, kl))
}

/// Fresh rollouts of the current mean policy, the folded mixing estimate
/// and the alternating train/test split.
fn gather<E: Environment + Clone + Sync>(
    state: &TrainerState,
    mean_policy: &GaussianPolicy,
    env: &E,
    config: &PbSacConfig,
    seeds: &SeedStream,
    exec: Execution,
) -> Result<(MixingEstimate, RolloutSplit, RolloutSplit)> {
    let set = collect_rollouts(
        env,
        mean_policy,
        config.rollout_trajectories,
        config.rollout_steps,
        config.sac.gamma,
        &seeds.child("rollouts", 0),
        exec,
    )?;
    let segments: Vec<&[f64]> = set.trajectories.iter().map(Trajectory::rewards).collect();
    let latest = autocorrelation_tau_pooled(&segments, DEFAULT_AUTOCORR_THRESHOLD)?;
    let tau = match &state.tau {
        Some(prev) => conservative_tau(prev, &latest),
        None => latest,
    };
    Ok((tau, RolloutSplit::alternating(&set, 0)?, RolloutSplit::alternating(&set, 1)?))
}

/// Certificate of the untouched posterior from fresh rollouts; folds the
/// mixing estimate into the state and sets kappa to its minimizer.
pub fn initial_certificate<E: Environment + Clone + Sync>(
    state: &mut TrainerState,
    actor: &GaussianPolicy,
    env: &E,
    config: &PbSacConfig,
    seeds: &SeedStream,
    exec: Execution,
) -> Result<Certificate> {
    let (tau, _, test) = gather(state, actor, env, config, seeds, exec)?;
    let cert = certify_posterior(
        &state.posterior,
        &state.prior,
        actor,
        &test,
        env.r_max(),
        tau.tau_min,
        config,
        &mut seeds.rng("certificate", 0),
        exec,
    )?;
    state.tau = Some(tau);
    state.kappa = cert.kappa_star;
    state.certificate = Some(cert);
    Ok(cert)
}

/// One PAC-Bayes cycle: fresh mean-policy rollouts, mixing re-estimate,
/// alternating split, `pb_epochs` rounds of (posterior step, kappa step) on
/// the train half, a certificate on the test half, then the actor is loaded
/// with the posterior mean and critic adaptation begins.
///
/// Posterior steps are Adam proposals on `(upsilon, ln sigma)` from the
/// REINFORCE estimate of the empirical term plus the analytic KL gradient,
/// accepted only when they do not increase the objective on the cycle's
/// fixed posterior draws (halving up to `pb_line_search_halvings` times).
pub fn pac_bayes_update<E: Environment + Clone + Sync>(
    state: &mut TrainerState,
    agent: &mut SacAgent,
    env: &E,
    config: &PbSacConfig,
    seeds: &SeedStream,
    exec: Execution,
) -> Result<PbCycleReport> {
    if state.phase != Phase::Normal {
        return Err(usage("a PAC-Bayes cycle may only start in the normal phase"));
    }
    let before = state.posterior.clone();
    // the behavior policy is the current posterior mean
    let mut mean_policy = agent.policy.clone();
    mean_policy.net.set_flat(state.posterior.mean())?;
    let (tau, train, test) = gather(state, &mean_policy, env, config, seeds, exec)?;
    state.tau = Some(tau);
    let c_norm_sq = certificate_inputs(env.r_max(), config, &test, tau.tau_min, 0.0).c_norm_sq()?;
    let prior = state.prior.clone();
    let ctx = CycleContext {
        template: &mean_policy,
        prior: &prior,
        clip: config.is_weight_clip,
        c_norm_sq,
        tau_min: tau.tau_min,
        delta: config.delta,
        kl_coefficient: config.kl_coefficient,
        exec,
    };
    let bank = NoiseBank::draw(state.posterior.dim(), config.pb_posterior_samples, &mut seeds.rng("bank", 0))?;
    let mut report = PbCycleReport {
        certificate: None,
        objective_trace: Vec::new(),
        accepted_steps: 0,
        tau,
        incident: None,
    };
    let optimized = optimize_posterior(state, &ctx, &bank, &train, config, &mut report);
    if let Err(err) = optimized {
        match err {
            Error::Numeric(msg) => {
                state.posterior = before;
                report.incident = Some(format!("posterior update abandoned at step {}: {msg}", state.step));
                return Ok(report);
            }
            other => return Err(other),
        }
    }
    let cert = certify_posterior(
        &state.posterior,
        &state.prior,
        &mean_policy,
        &test,
        env.r_max(),
        tau.tau_min,
        config,
        &mut seeds.rng("certificate", 0),
        exec,
    )?;
    state.certificate = Some(cert);
    report.certificate = Some(cert);
    agent.policy.net.set_flat(state.posterior.mean())?;
    state.cycles += 1;
    if config.adaptation_steps > 0 {
        state.phase = Phase::CriticAdaptation;
        state.adaptation_remaining = config.adaptation_steps;
    }
    Ok(report)
}

fn optimize_posterior(
    state: &mut TrainerState,
    ctx: &CycleContext<'_>,
    bank: &NoiseBank,
    train: &RolloutSplit,
    config: &PbSacConfig,
    report: &mut PbCycleReport,
) -> Result<()> {
    let kappa_for = |kl: f64| kappa_star(kl, ctx.delta, ctx.c_norm_sq, ctx.tau_min);
    state.kappa = kappa_for(state.kl()?)?;
    let mut current = ctx.evaluate(&state.posterior, state.kappa, bank, train)?;
    report.objective_trace.push(current.objective);
    let dim = state.posterior.dim();
    let mut adam = AdamState::new(config.pb_learning_rate, &[[1, dim], [1, dim]]);
    for _ in 0..config.pb_epochs {
        let rho = &state.posterior;
        let (gr_mean, gr_std) = reinforce_gradient(rho, &current.thetas, &current.returns, true)?;
        let (gk_mean, gk_std) = kl_gradient(rho, ctx.prior)?;
        let scale = ctx.kl_coefficient / state.kappa;
        let std = rho.std();
        let g_mean: Vec<f64> = (0..dim).map(|i| -gr_mean[i] + scale * gk_mean[i]).collect();
        let g_log_std: Vec<f64> = (0..dim).map(|i| std[i] * (-gr_std[i] + scale * gk_std[i])).collect();
        let old = [Tensor::row(rho.mean().to_vec()), Tensor::row(rho.log_std().to_vec())];
        let mut proposal = old.clone();
        adam_step(&mut proposal, &[Tensor::row(g_mean), Tensor::row(g_log_std)], &mut adam)?;
        let mut factor = 1.0;
        for _ in 0..=config.pb_line_search_halvings {
            let blend = |k: usize| -> Vec<f64> {
                old[k]
                    .data()
                    .iter()
                    .zip(proposal[k].data())
                    .map(|(o, p)| o + factor * (p - o))
                    .collect()
            };
            let candidate = rho.with_params(blend(0), blend(1))?;
            let eval = ctx.evaluate(&candidate, state.kappa, bank, train)?;
            if eval.objective <= current.objective {
                state.posterior = candidate;
                current = eval;
                report.accepted_steps += 1;
                break;
            }
            factor *= 0.5;
        }
        // kappa step: closed-form minimizer at the current KL
        state.kappa = kappa_for(current.kl)?;
        current.objective = kappa_objective(
            -current.returns.iter().sum::<f64>() / current.returns.len() as f64,
            ctx.kl_coefficient * current.kl,
            state.kappa,
            ctx.c_norm_sq,
            ctx.tau_min,
            ctx.delta,
            true,
        )?;
        report.objective_trace.push(current.objective);
    }
    Ok(())
}

/// One row of the training metrics CSV; certificate columns stay empty
/// until the first PAC-Bayes cycle has produced one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbMetricsRow {
    pub step: u64,
    pub episodic_return: f64,
    pub empirical_discounted_return: Option<f64>,
    pub certified_lower_bound: Option<f64>,
    pub kl: Option<f64>,
    pub tau_min: Option<f64>,
    pub kappa: f64,
    pub phase: Phase,
}

impl PbMetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,episodic_return,empirical_discounted_return,certified_lower_bound,kl,tau_min,kappa,phase";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{:?},{},{},{},{},{:?},{}",
            self.step,
            self.episodic_return,
            opt(self.empirical_discounted_return),
            opt(self.certified_lower_bound),
            opt(self.kl),
            opt(self.tau_min),
            self.kappa,
            self.phase
        )
    }
}

/// A certificate together with the step and cycle that produced it
/// (cycle 0 is the untrained initial posterior).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateRecord {
    pub step: u64,
    pub cycle: u64,
    pub certificate: Certificate,
}

impl CertificateRecord {
    pub fn csv_header() -> String {
        format!("step,cycle,{}", Certificate::CSV_HEADER)
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.cycle, self.certificate.csv_row())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<PbMetricsRow>,
    pub certificates: Vec<CertificateRecord>,
    pub cycle_reports: Vec<PbCycleReport>,
    pub incidents: Vec<String>,
    pub state: TrainerState,
    pub agent: SacAgent,
}

impl TrainOutcome {
    pub fn initial_certificate(&self) -> Option<&Certificate> {
        self.certificates.iter().find(|r| r.cycle == 0).map(|r| &r.certificate)
    }

    pub fn final_certificate(&self) -> Option<&Certificate> {
        self.certificates.last().map(|r| &r.certificate)
    }
}

/// Writes actor, critics and posterior/prior files into `dir`.
pub fn write_checkpoint(dir: &Path, agent: &SacAgent, state: &TrainerState) -> Result<()> {
    agent.save(dir)?;
    let ck = PosteriorCheckpoint {
        shapes: agent.policy.net.shape_spec("actor"),
        posterior: state.posterior.clone(),
        prior: state.prior.clone(),
        schedule: state.schedule,
        step: state.step,
    };
    ck.write(fs::File::create(dir.join("posterior.txt"))?)
}

/// The full loop. Stream labels shared with [`crate::sac::train_sac`]
/// (`init`, `env`, `action`, `replay`, `update`, `eval`) are consumed
/// identically, so with `explore_epsilon = 0` and no cycle inside the run
/// the actor and critics follow the vanilla trajectory exactly.
///
/// When `checkpoint_dir` is given the final state is written there; if a
/// step fails, the last consistent state (as of the latest evaluation or
/// cycle) is written to `checkpoint_dir/aborted` before the error returns.
pub fn train<E: Environment + Clone + Sync>(
    env: &E,
    config: &PbSacConfig,
    seed: u64,
    exec: Execution,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let seeds = SeedStream::new(seed);
    let agent = SacAgent::new(env.state_dim(), env.action_dim(), &config.sac, &seeds)?;
    let state = TrainerState::new(&agent.policy, config)?;
    let mut run = Run {
        env,
        config,
        seeds,
        exec,
        buffer: ReplayBuffer::new(config.sac.buffer_capacity, env.state_dim(), env.action_dim())?,
        last_good: (agent.clone(), state.clone()),
        agent,
        state,
        outcome_metrics: Vec::new(),
        certificates: Vec::new(),
        reports: Vec::new(),
        incidents: Vec::new(),
    };
    match run.execute() {
        Ok(()) => {
            if let Some(dir) = checkpoint_dir {
                write_checkpoint(dir, &run.agent, &run.state)?;
            }
            Ok(TrainOutcome {
                metrics: run.outcome_metrics,
                certificates: run.certificates,
                cycle_reports: run.reports,
                incidents: run.incidents,
                state: run.state,
                agent: run.agent,
            })
        }
        Err(err) => {
            if let Some(dir) = checkpoint_dir {
                let (agent, state) = &run.last_good;
                write_checkpoint(&dir.join("aborted"), agent, state)?;
            }
            Err(err)
        }
    }
}

struct Run<'a, E> {
    env: &'a E,
    config: &'a PbSacConfig,
    seeds: SeedStream,
    exec: Execution,
    buffer: ReplayBuffer,
    agent: SacAgent,
    state: TrainerState,
    last_good: (SacAgent, TrainerState),
    outcome_metrics: Vec<PbMetricsRow>,
    certificates: Vec<CertificateRecord>,
    reports: Vec<PbCycleReport>,
    incidents: Vec<String>,
}

impl<E: Environment + Clone + Sync> Run<'_, E> {
    fn execute(&mut self) -> Result<()> {
        let config = self.config;
        let sac = &config.sac;
        let seeds = self.seeds;
        let cert = initial_certificate(
            &mut self.state,
            &self.agent.policy,
            self.env,
            config,
            &seeds.child("pb_cycle", 0),
            self.exec,
        )?;
        self.certificates.push(CertificateRecord {
            step: 0,
            cycle: 0,
            certificate: cert,
        });
        let mut train_env = self.env.clone();
        let mut env_rng = seeds.rng("env", 0);
        let mut action_rng = seeds.rng("action", 0);
        let mut replay_rng = seeds.rng("replay", 0);
        let mut update_rng = seeds.rng("update", 0);
        let mut explore_rng = seeds.rng("explore", 0);
        let mut adapt_rng = seeds.rng("adapt", 0);
        let mut obs = train_env.reset(&mut env_rng);
        let mut episode_len = 0;
        self.last_good = (self.agent.clone(), self.state.clone());
        for t in 0..sac.total_steps {
            let explore = t >= sac.learning_starts
                && config.explore_epsilon > 0.0
                && explore_rng.gen::<f64>() < config.explore_epsilon;
            let action = if explore {
                posterior_guided_explore(
                    &obs,
                    &self.state.posterior,
                    &self.agent.policy,
                    &self.agent.critics,
                    config.explore_samples,
                    &mut explore_rng,
                )?
                .action
            } else {
                self.agent.select_action(&obs, t, sac, &mut action_rng)?
            };
            let out = train_env.step(&action, &mut env_rng)?;
            self.buffer.push(&obs, &action, out.reward, &out.next_state, out.terminal)?;
            episode_len += 1;
            obs = out.next_state;
            if out.terminal || episode_len == sac.episode_horizon {
                obs = train_env.reset(&mut env_rng);
                episode_len = 0;
            }
            let step = t + 1;
            self.state.step = step;
            if step >= sac.learning_starts && step % sac.train_freq == 0 && self.buffer.len() >= sac.batch_size {
                match self.state.phase {
                    Phase::Normal => {
                        self.agent.update(&self.buffer, sac, &mut replay_rng, &mut update_rng)?;
                        self.state.sync_posterior_mean(self.agent.policy.net.flat())?;
                    }
                    Phase::CriticAdaptation => {
                        self.adaptation_update(&mut replay_rng, &mut adapt_rng)?;
                    }
                }
            }
            if step % config.prior.update_period == 0 {
                let (prior, schedule) = prior_update(&self.state.prior, &self.state.posterior, &self.state.schedule)?;
                self.state.prior = prior;
                self.state.schedule = schedule;
            }
            if step % config.pb_update_freq == 0 && self.state.phase == Phase::Normal {
                let cycle = self.state.cycles + 1;
                let report = pac_bayes_update(
                    &mut self.state,
                    &mut self.agent,
                    self.env,
                    config,
                    &seeds.child("pb_cycle", cycle),
                    self.exec,
                )?;
                if let Some(c) = report.certificate {
                    self.certificates.push(CertificateRecord {
                        step,
                        cycle,
                        certificate: c,
                    });
                }
                if let Some(msg) = &report.incident {
                    self.incidents.push(msg.clone());
                }
                self.reports.push(report);
                self.last_good = (self.agent.clone(), self.state.clone());
            }
            if step % sac.eval_interval == 0 {
                let episodic_return = evaluate(&self.agent.policy, self.env, sac.eval_episodes, sac.episode_horizon, &seeds)?;
                let cycle_cert = self.certificates.iter().rev().find(|r| r.cycle > 0).map(|r| r.certificate);
                self.outcome_metrics.push(PbMetricsRow {
                    step,
                    episodic_return,
                    empirical_discounted_return: cycle_cert.map(|c| c.empirical_return),
                    certified_lower_bound: cycle_cert.map(|c| c.certified_lower_bound),
                    kl: cycle_cert.map(|c| c.inputs.kl),
                    tau_min: self.state.tau.map(|t| t.tau_min),
                    kappa: self.state.kappa,
                    phase: self.state.phase,
                });
                self.last_good = (self.agent.clone(), self.state.clone());
            }
        }
        Ok(())
    }

    /// Frozen-actor critic step plus target tracking; returns the critic loss.
    fn adaptation_update(&mut self, replay_rng: &mut StreamRng, adapt_rng: &mut StreamRng) -> Result<f64> {
        let config = self.config;
        let batch = self.buffer.sample(config.sac.batch_size, replay_rng)?;
        let mut target_rng = self.seeds.rng("adapt_targets", self.state.step);
        let loss = critic_adaptation_step(
            &mut self.agent.critics,
            &mut self.agent.critic_opts,
            &batch,
            &self.state.posterior,
            &self.agent.policy,
            self.agent.temperature.alpha(),
            config.sac.gamma,
            config.adaptation_samples,
            adapt_rng,
            &mut target_rng,
        )?;
        self.agent.critics.soft_update(config.sac.tau)?;
        self.state.adaptation_remaining -= 1;
        if self.state.adaptation_remaining == 0 {
            self.state.phase = Phase::Normal;
        }
        Ok(loss)
    }
}
