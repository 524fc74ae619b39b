//! Closed-form certificate arithmetic and Monte Carlo checks of it.
//!
//! Changing one transition at step `h` of trajectory `j` moves the empirical
//! loss by at most `c_(h,j) = gamma^(h-1) R_max / T`. With
//! `|c|^2 = R_max^2 (1 - gamma^(2H)) / (T (1 - gamma^2))`, the deviation of
//! the posterior-averaged loss is bounded with probability `1 - delta` by
//! `sqrt(|c|^2 tau_min (KL + ln(2/delta)) / 2)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::mdp::{
    discounted_return, empirical_loss, exact_value, rollout, TabularMdp, TabularPolicy, Trajectory,
    TrajectoryDataset,
};
use crate::mixing::{default_epsilon_grid, tau_min_exact};
use crate::rng::SeedStream;

/// Trajectory length budget `H`; `Infinite` is an explicit marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(u64),
    Infinite,
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(h) => write!(f, "{h}"),
            Horizon::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" | "∞" => Ok(Horizon::Infinite),
            other => {
                let h: u64 = other
                    .parse()
                    .map_err(|_| Error::Parse(format!("horizon must be a positive integer or 'inf', got {other:?}")))?;
                if h == 0 {
                    return Err(usage("horizon must be at least 1"));
                }
                Ok(Horizon::Finite(h))
            }
        }
    }
}

/// Every scalar entering the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateInputs {
    pub r_max: f64,
    pub gamma: f64,
    pub horizon: Horizon,
    pub n_trajectories: u64,
    pub tau_min: f64,
    pub kl: f64,
    pub delta: f64,
}

impl CertificateInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(usage(format!("r_max must be positive and finite, got {}", self.r_max)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(usage(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.gamma == 1.0 && self.horizon == Horizon::Infinite {
            return Err(usage("gamma = 1 needs a finite horizon"));
        }
        if self.horizon == Horizon::Finite(0) {
            return Err(usage("horizon must be at least 1"));
        }
        if self.n_trajectories == 0 {
            return Err(usage("need at least one trajectory"));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return Err(usage(format!("tau_min must be positive and finite, got {}", self.tau_min)));
        }
        if !(self.kl >= 0.0 && self.kl.is_finite()) {
            return Err(usage(format!("KL must be finite and nonnegative, got {}", self.kl)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(usage(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    pub fn c_norm_sq(&self) -> Result<f64> {
        c_norm_sq(self.r_max, self.gamma, self.horizon, self.n_trajectories)
    }

    /// `KL + ln(2/delta)`.
    pub fn complexity(&self) -> f64 {
        self.kl + (2.0 / self.delta).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub inputs: CertificateInputs,
    pub deviation_bound: f64,
    pub empirical_return: f64,
    pub certified_lower_bound: f64,
    pub kappa_star: f64,
}

impl Certificate {
    pub const CSV_HEADER: &'static str =
        "kl,delta,tau_min,T,H,gamma,r_max,kappa_star,deviation_bound,empirical_return,certified_lower_bound";

    /// One CSV row matching [`Certificate::CSV_HEADER`]; floats use the
    /// shortest representation that round-trips.
    pub fn csv_row(&self) -> String {
        let i = &self.inputs;
        format!(
            "{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            i.kl,
            i.delta,
            i.tau_min,
            i.n_trajectories,
            i.horizon,
            i.gamma,
            i.r_max,
            self.kappa_star,
            self.deviation_bound,
            self.empirical_return,
            self.certified_lower_bound
        )
    }
}

/// `gamma^(h-1) R_max / T`.
pub fn c_entry(r_max: f64, gamma: f64, h: u64, n_trajectories: u64) -> Result<f64> {
    if h == 0 || n_trajectories == 0 {
        return Err(usage("c_entry needs h >= 1 and T >= 1"));
    }
    let power = if h == 1 { 1.0 } else { gamma.powf((h - 1) as f64) };
    Ok(power * r_max / n_trajectories as f64)
}

/// `sum_{j,h} c_(h,j)^2` in closed form.
pub fn c_norm_sq(r_max: f64, gamma: f64, horizon: Horizon, n_trajectories: u64) -> Result<f64> {
    if n_trajectories == 0 {
        return Err(usage("need at least one trajectory"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(usage(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let t = n_trajectories as f64;
    let r2 = r_max * r_max;
    let geometric = match horizon {
        Horizon::Finite(0) => return Err(usage("horizon must be at least 1")),
        Horizon::Finite(h) if gamma == 1.0 => h as f64,
        Horizon::Finite(_) | Horizon::Infinite if gamma == 0.0 => 1.0,
        Horizon::Finite(h) => {
            // (1 - g^(2H)) / (1 - g^2) via expm1 keeps full precision near g = 1
            let ln_g2 = 2.0 * gamma.ln();
            (-(h as f64 * ln_g2).exp_m1()) / (-ln_g2.exp_m1())
        }
        Horizon::Infinite if gamma == 1.0 => {
            return Err(usage("gamma = 1 with an infinite horizon has unbounded |c|^2"))
        }
        Horizon::Infinite => 1.0 / (1.0 - gamma * gamma),
    };
    Ok(r2 * geometric / t)
}

/// Outcome of comparing a dataset with a one-trajectory perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedDifferenceReport {
    /// Index of the trajectory that differs, if any.
    pub trajectory: Option<usize>,
    /// First differing step, 1-based.
    pub first_step: Option<u64>,
    pub observed: f64,
    pub bound: f64,
    /// `bound - observed`; negative means the bounded-difference property failed.
    pub slack: f64,
}

impl BoundedDifferenceReport {
    pub fn holds(&self) -> bool {
        self.slack >= -1e-12
    }
}

/// Checks `|L_D - L_D'| <= sum_{h' >= h} c_(h',j)` where the datasets differ
/// only in trajectory `j` from step `h` onward.
pub fn bounded_difference_check(
    dataset: &TrajectoryDataset,
    perturbed: &TrajectoryDataset,
    gamma: f64,
    r_max: f64,
) -> Result<BoundedDifferenceReport> {
    if dataset.count() != perturbed.count() {
        return Err(usage("datasets hold different numbers of trajectories"));
    }
    let differing: Vec<usize> = (0..dataset.count())
        .filter(|&j| dataset.trajectories[j] != perturbed.trajectories[j])
        .collect();
    if differing.len() > 1 {
        return Err(usage(format!("datasets differ in {} trajectories; expected at most one", differing.len())));
    }
    let t = dataset.count() as u64;
    let observed = (empirical_loss(dataset, gamma)? - empirical_loss(perturbed, gamma)?).abs();
    let Some(&j) = differing.first() else {
        return Ok(BoundedDifferenceReport {
            trajectory: None,
            first_step: None,
            observed,
            bound: 0.0,
            slack: -observed,
        });
    };
    let (a, b) = (&dataset.trajectories[j], &perturbed.trajectories[j]);
    let len = a.len().max(b.len());
    let first = (0..len)
        .find(|&i| a.transition(i) != b.transition(i))
        .ok_or_else(|| usage("trajectories compare unequal but no step differs"))?;
    let mut bound = 0.0;
    for h in (first + 1)..=len {
        bound += c_entry(r_max, gamma, h as u64, t)?;
    }
    Ok(BoundedDifferenceReport {
        trajectory: Some(j),
        first_step: Some(first as u64 + 1),
        observed,
        bound,
        slack: bound - observed,
    })
}

/// Dataset of `T` all-zero-reward trajectories of length `H` and a copy
/// whose trajectory `j` earns `R_max` at every step from `h` (1-based) on;
/// the pair attains the bounded-difference coefficient sum exactly.
pub fn worst_case_pair(
    r_max: f64,
    horizon: usize,
    n_trajectories: usize,
    j: usize,
    h: usize,
) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    if j >= n_trajectories || h == 0 || h > horizon {
        return Err(usage("worst-case perturbation index out of range"));
    }
    let base: Vec<Trajectory> = (0..n_trajectories)
        .map(|_| Trajectory::from_rewards(&vec![0.0; horizon]))
        .collect();
    let mut flipped = base.clone();
    for r in &mut flipped[j].rewards_mut()[h - 1..] {
        *r = r_max;
    }
    Ok((TrajectoryDataset::new(base, "worst-case"), TrajectoryDataset::new(flipped, "worst-case")))
}

/// `sqrt(|c|^2 tau_min (KL + ln(2/delta)) / 2)`.
pub fn pac_bayes_bound(inputs: &CertificateInputs) -> Result<f64> {
    inputs.validate()?;
    Ok((inputs.c_norm_sq()? * inputs.tau_min * inputs.complexity() / 2.0).sqrt())
}

/// `L + K / kappa + kappa |c|^2 tau_min / 8`, with `K = KL` or, when
/// `include_delta` is set, `K = KL + ln(2/delta)`.
pub fn kappa_objective(
    expected_empirical_loss: f64,
    kl: f64,
    kappa: f64,
    c_norm_sq: f64,
    tau_min: f64,
    delta: f64,
    include_delta: bool,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(usage(format!("kappa must be positive, got {kappa}")));
    }
    let complexity = if include_delta { kl + (2.0 / delta).ln() } else { kl };
    Ok(expected_empirical_loss + complexity / kappa + kappa * c_norm_sq * tau_min / 8.0)
}

/// Minimizer of the `include_delta` objective:
/// `sqrt(8 (KL + ln(2/delta)) / (|c|^2 tau_min))`.
pub fn kappa_star(kl: f64, delta: f64, c_norm_sq: f64, tau_min: f64) -> Result<f64> {
    let denom = c_norm_sq * tau_min;
    if !(denom > 0.0) {
        return Err(usage("kappa_star needs |c|^2 tau_min > 0"));
    }
    Ok((8.0 * (kl + (2.0 / delta).ln()) / denom).sqrt())
}

/// Certificate with `certified_lower_bound = empirical_return - deviation_bound`.
pub fn value_lower_bound(expected_empirical_return: f64, inputs: &CertificateInputs) -> Result<Certificate> {
    let deviation_bound = pac_bayes_bound(inputs)?;
    let kappa = kappa_star(inputs.kl, inputs.delta, inputs.c_norm_sq()?, inputs.tau_min)?;
    Ok(Certificate {
        inputs: *inputs,
        deviation_bound,
        empirical_return: expected_empirical_return,
        certified_lower_bound: expected_empirical_return - deviation_bound,
        kappa_star: kappa,
    })
}

/// Largest exact `tau_min` over the state-action chains of `policies`.
pub fn tabular_tau_min(mdp: &TabularMdp, policies: &[TabularPolicy]) -> Result<f64> {
    let grid = default_epsilon_grid();
    let mut worst: f64 = 0.0;
    for p in policies {
        worst = worst.max(tau_min_exact(&mdp.state_action_chain(p)?, &grid)?.tau_min);
    }
    Ok(worst)
}

/// Sampling setup shared by the Monte Carlo checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSetup {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub tau_min: f64,
    pub n_repeats: usize,
}

impl SamplingSetup {
    fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 || self.horizon == 0 || self.n_repeats == 0 {
            return Err(usage("sampling setup needs T, H and repeats all >= 1"));
        }
        Ok(())
    }

    fn c_norm_sq(&self, mdp: &TabularMdp) -> Result<f64> {
        c_norm_sq(
            crate::mdp::Environment::r_max(mdp),
            mdp.gamma(),
            Horizon::Finite(self.horizon as u64),
            self.n_trajectories as u64,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailRow {
    pub threshold: f64,
    pub observed: f64,
    pub bound: f64,
    pub std_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub rows: Vec<TailRow>,
    pub c_norm_sq: f64,
    pub tau_min: f64,
    pub expected_loss: f64,
    pub mean_deviation: f64,
    pub mean_std_error: f64,
    /// `|mean deviation| > 3` standard errors.
    pub mean_flagged: bool,
    pub n_repeats: usize,
}

impl ConcentrationReport {
    pub fn any_flagged(&self) -> bool {
        self.mean_flagged || self.rows.iter().any(|r| r.flagged)
    }
}

/// Two-sided tail bound `2 exp(-2 t^2 / (|c|^2 tau_min))`.
pub fn tail_bound(threshold: f64, c_norm_sq: f64, tau_min: f64) -> f64 {
    2.0 * (-2.0 * threshold * threshold / (c_norm_sq * tau_min)).exp()
}

/// `points` evenly spaced thresholds from 0 to where the tail bound falls
/// to `1e-3`.
pub fn threshold_grid(c_norm_sq: f64, tau_min: f64, points: usize) -> Vec<f64> {
    let t_max = (c_norm_sq * tau_min * (2.0f64 / 1e-3).ln() / 2.0).sqrt();
    let denom = points.saturating_sub(1).max(1) as f64;
    (0..points).map(|i| t_max * i as f64 / denom).collect()
}

fn sample_loss(mdp: &TabularMdp, policy: &TabularPolicy, setup: &SamplingSetup, seeds: &SeedStream, label: &str, index: u64) -> Result<f64> {
    let mut env = mdp.clone();
    let mut rng = seeds.rng(label, index);
    let mut total = 0.0;
    for _ in 0..setup.n_trajectories {
        let traj = rollout(&mut env, policy, setup.horizon, &mut rng)?;
        total += discounted_return(&traj, mdp.gamma())?;
    }
    Ok(-total / setup.n_trajectories as f64)
}

/// Draws `n_repeats` independent datasets of `T` trajectories under
/// `policy` and compares the tail frequency of `|L_hat - L|` with the
/// concentration bound at each threshold. Repeat `i` uses its own named RNG
/// stream, so the report is identical under either execution mode.
pub fn concentration_check(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    setup: &SamplingSetup,
    thresholds: &[f64],
    seeds: &SeedStream,
    exec: Execution,
) -> Result<ConcentrationReport> {
    setup.validate()?;
    let expected_loss = -exact_value(mdp, policy, setup.horizon)?;
    let deviations: Vec<f64> = map_indexed(setup.n_repeats, exec, |i| {
        sample_loss(mdp, policy, setup, seeds, "concentration", i as u64).map(|l| l - expected_loss)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = deviations.len() as f64;
    let cns = setup.c_norm_sq(mdp)?;
    let rows = thresholds
        .iter()
        .map(|&t| {
            let observed = deviations.iter().filter(|d| d.abs() >= t).count() as f64 / n;
            let bound = tail_bound(t, cns, setup.tau_min);
            let p = bound.min(1.0);
            let std_error = (p * (1.0 - p) / n).sqrt();
            TailRow {
                threshold: t,
                observed,
                bound,
                std_error,
                flagged: observed > bound + 3.0 * std_error,
            }
        })
        .collect();
    let mean = deviations.iter().sum::<f64>() / n;
    let var = deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let se = (var / n).sqrt();
    Ok(ConcentrationReport {
        rows,
        c_norm_sq: cns,
        tau_min: setup.tau_min,
        expected_loss,
        mean_deviation: mean,
        mean_std_error: se,
        mean_flagged: mean.abs() > 3.0 * se,
        n_repeats: setup.n_repeats,
    })
}

/// `KL(rho || mu)` for categorical distributions.
pub fn categorical_kl(rho: &[f64], mu: &[f64]) -> Result<f64> {
    if rho.len() != mu.len() || rho.is_empty() {
        return Err(usage("categorical KL needs equal nonempty supports"));
    }
    let mut kl = 0.0;
    for (&r, &m) in rho.iter().zip(mu) {
        if r < 0.0 || m < 0.0 {
            return Err(usage("negative probability"));
        }
        if r > 0.0 {
            if m == 0.0 {
                return Err(Error::Numeric("posterior mass outside prior support".into()));
            }
            kl += r * (r / m).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    pub kl: f64,
    pub delta: f64,
    pub bound: f64,
    pub violations: usize,
    pub n_repeats: usize,
    pub violation_rate: f64,
    /// `delta + 3 sqrt(delta (1 - delta) / n)`.
    pub allowed_rate: f64,
    pub max_gap: f64,
}

impl ValidityReport {
    pub fn passed(&self) -> bool {
        self.violation_rate <= self.allowed_rate
    }
}

/// Monte Carlo check of the high-probability statement for a fixed
/// posterior `rho` over a finite family of tabular policies, against prior
/// `mu`. Each draw samples `T` fresh trajectories per policy, forms
/// `E_rho[L - L_hat]` and counts how often it exceeds the bound.
#[allow(clippy::too_many_arguments)]
pub fn bound_validity_check(
    mdp: &TabularMdp,
    policies: &[TabularPolicy],
    rho: &[f64],
    mu: &[f64],
    delta: f64,
    setup: &SamplingSetup,
    seeds: &SeedStream,
    exec: Execution,
) -> Result<ValidityReport> {
    setup.validate()?;
    if policies.len() != rho.len() {
        return Err(usage("one posterior weight per policy is required"));
    }
    let kl = categorical_kl(rho, mu)?;
    let inputs = CertificateInputs {
        r_max: crate::mdp::Environment::r_max(mdp),
        gamma: mdp.gamma(),
        horizon: Horizon::Finite(setup.horizon as u64),
        n_trajectories: setup.n_trajectories as u64,
        tau_min: setup.tau_min,
        kl,
        delta,
    };
    let bound = pac_bayes_bound(&inputs)?;
    let losses: Vec<f64> = policies
        .iter()
        .map(|p| exact_value(mdp, p, setup.horizon).map(|v| -v))
        .collect::<Result<_>>()?;
    let gaps: Vec<f64> = map_indexed(setup.n_repeats, exec, |i| -> Result<f64> {
        let mut gap = 0.0;
        for (k, p) in policies.iter().enumerate() {
            if rho[k] == 0.0 {
                continue;
            }
            let child = seeds.child("validity", i as u64);
            gap += rho[k] * (losses[k] - sample_loss(mdp, p, setup, &child, "policy", k as u64)?);
        }
        Ok(gap)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let violations = gaps.iter().filter(|&&g| g > bound).count();
    let n = setup.n_repeats as f64;
    Ok(ValidityReport {
        kl,
        delta,
        bound,
        violations,
        n_repeats: setup.n_repeats,
        violation_rate: violations as f64 / n,
        allowed_rate: delta + 3.0 * (delta * (1.0 - delta) / n).sqrt(),
        max_gap: gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Eight softmax policies on `chain5` ranging from always-left to
/// always-right, plus the posterior weights used by the validity check.
pub fn chain5_policy_family() -> Result<(Vec<TabularPolicy>, Vec<f64>, Vec<f64>)> {
    let mut policies = Vec::with_capacity(8);
    for k in 0..8 {
        // preference for "right" sweeps from -2 to +2.9; a state-dependent
        // tilt keeps the policies from being mere relabelings
        let pref = -2.0 + 0.7 * k as f64;
        let logits: Vec<f64> = (0..5)
            .flat_map(|s| [0.0, pref + 0.25 * (s as f64 - 2.0) * ((k % 3) as f64 - 1.0)])
            .collect();
        policies.push(TabularPolicy::softmax(5, 2, &logits)?);
    }
    let rho = vec![0.02, 0.03, 0.05, 0.10, 0.15, 0.20, 0.25, 0.20];
    let mu = vec![0.125; 8];
    Ok((policies, rho, mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(kl: f64, delta: f64, tau: f64, t: u64, h: Horizon, gamma: f64) -> CertificateInputs {
        CertificateInputs {
            r_max: 1.0,
            gamma,
            horizon: h,
            n_trajectories: t,
            tau_min: tau,
            kl,
            delta,
        }
    }

    fn brute_norm_sq(r_max: f64, gamma: f64, h: u64, t: u64) -> f64 {
        let mut s = 0.0;
        for _ in 0..t {
            for hh in 1..=h {
                s += c_entry(r_max, gamma, hh, t).unwrap().powi(2);
            }
        }
        s
    }

    #[test]
    fn c_entry_examples() {
        assert_eq!(c_entry(2.0, 0.7, 1, 4).unwrap(), 0.5);
        assert_eq!(c_entry(1.0, 0.0, 2, 3).unwrap(), 0.0);
        assert_eq!(c_entry(1.0, 0.5, 3, 4).unwrap(), 0.0625);
        assert!(c_entry(1.0, 0.5, 0, 4).is_err());
    }

    #[test]
    fn c_norm_sq_examples() {
        assert_relative_eq!(c_norm_sq(1.0, 1e-9, Horizon::Finite(5), 2).unwrap(), 0.5, max_relative = 1e-12);
        assert_eq!(c_norm_sq(1.0, 0.0, Horizon::Finite(5), 2).unwrap(), 0.5);
        assert_relative_eq!(c_norm_sq(1.0, 0.5, Horizon::Finite(2), 1).unwrap(), 1.25, max_relative = 1e-14);
        assert_relative_eq!(c_norm_sq(1.0, 0.5, Horizon::Infinite, 1).unwrap(), 4.0 / 3.0, max_relative = 1e-14);
        assert_eq!(c_norm_sq(2.0, 1.0, Horizon::Finite(3), 4).unwrap(), 3.0);
        assert!(c_norm_sq(1.0, 1.0, Horizon::Infinite, 4).is_err());
    }

    #[test]
    fn c_norm_sq_matches_double_sum_on_grid() {
        for &g in &[0.1, 0.5, 0.9, 0.99] {
            for &h in &[1u64, 2, 10, 100] {
                for &t in &[1u64, 3, 10] {
                    let closed = c_norm_sq(1.0, g, Horizon::Finite(h), t).unwrap();
                    assert_relative_eq!(closed, brute_norm_sq(1.0, g, h, t), max_relative = 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn c_norm_sq_matches_double_sum_random(g in 0.0f64..0.999, h in 1u64..200, t in 1u64..20, r in 0.1f64..5.0) {
            let closed = c_norm_sq(r, g, Horizon::Finite(h), t).unwrap();
            let brute = brute_norm_sq(r, g, h, t);
            prop_assert!((closed - brute).abs() <= 1e-12 * brute);
        }

        #[test]
        fn bound_is_kappa_objective_at_kappa_star(
            kl in 0.0f64..50.0, delta in 0.001f64..0.999, tau in 0.5f64..100.0,
            t in 1u64..100, h in 1u64..200, g in 0.0f64..0.999,
        ) {
            let inp = inputs(kl, delta, tau, t, Horizon::Finite(h), g);
            let cns = inp.c_norm_sq().unwrap();
            let ks = kappa_star(kl, delta, cns, tau).unwrap();
            let obj = kappa_objective(0.0, kl, ks, cns, tau, delta, true).unwrap();
            let b = pac_bayes_bound(&inp).unwrap();
            prop_assert!((obj - b).abs() <= 1e-12 * b);
        }

        #[test]
        fn bound_monotonicity(kl in 0.0f64..20.0, delta in 0.01f64..0.9, tau in 1.0f64..20.0, t in 1u64..50, bump in 0.01f64..1.0) {
            let base = inputs(kl, delta, tau, t, Horizon::Finite(10), 0.9);
            let b = pac_bayes_bound(&base).unwrap();
            let bigger = [
                CertificateInputs { kl: kl + bump, ..base },
                CertificateInputs { tau_min: tau + bump, ..base },
                CertificateInputs { r_max: 1.0 + bump, ..base },
            ];
            let smaller = [
                CertificateInputs { n_trajectories: t + 1, ..base },
                CertificateInputs { delta: (delta + bump * 0.09).min(0.999), ..base },
            ];
            for inp in &bigger {
                let v = pac_bayes_bound(inp).unwrap();
                prop_assert!(v > b);
            }
            for inp in &smaller {
                let v = pac_bayes_bound(inp).unwrap();
                prop_assert!(v < b);
            }
        }
    }

    #[test]
    fn bound_examples() {
        let delta = 2.0 / std::f64::consts::E;
        let inp = inputs(0.0, delta, 1.0, 2, Horizon::Finite(1), 0.0);
        assert_relative_eq!(pac_bayes_bound(&inp).unwrap(), 0.5, max_relative = 1e-15);
        // (KL + ln 2/delta) scaled by four doubles the bound
        let a = inputs(1.0, delta, 3.0, 5, Horizon::Finite(7), 0.8);
        let b = CertificateInputs { kl: 4.0 * a.complexity() - (2.0 / delta).ln(), ..a };
        assert_relative_eq!(pac_bayes_bound(&b).unwrap(), 2.0 * pac_bayes_bound(&a).unwrap(), max_relative = 1e-14);
        assert!(pac_bayes_bound(&CertificateInputs { delta: 1.0, ..a }).is_err());
        assert!(pac_bayes_bound(&CertificateInputs { kl: f64::INFINITY, ..a }).is_err());
    }

    #[test]
    fn bound_equals_c_norm_form() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let inp = CertificateInputs {
                r_max: r.gen_range(0.1..10.0),
                gamma: r.gen_range(0.0..0.999),
                horizon: Horizon::Finite(r.gen_range(1..500)),
                n_trajectories: r.gen_range(1..1000),
                tau_min: r.gen_range(0.1..100.0),
                kl: r.gen_range(0.0..100.0),
                delta: r.gen_range(0.001..0.999),
            };
            let direct = (inp.c_norm_sq().unwrap() * inp.tau_min * inp.complexity() / 2.0).sqrt();
            let closed = (inp.r_max.powi(2) * inp.tau_min
                * (1.0 - inp.gamma.powf(2.0 * match inp.horizon { Horizon::Finite(h) => h as f64, _ => unreachable!() }))
                / (2.0 * inp.n_trajectories as f64 * (1.0 - inp.gamma.powi(2)))
                * inp.complexity())
            .sqrt();
            assert_relative_eq!(pac_bayes_bound(&inp).unwrap(), direct, max_relative = 1e-15);
            assert_relative_eq!(direct, closed, max_relative = 1e-10);
        }
    }

    #[test]
    fn kappa_objective_examples() {
        assert_eq!(kappa_objective(0.0, 0.0, 3.0, 2.0, 4.0, 0.1, false).unwrap(), 3.0);
        assert_eq!(kappa_objective(-1.0, 2.0, 4.0, 8.0, 1.0, 0.1, false).unwrap(), 3.5);
        assert!(kappa_objective(0.0, 1.0, 0.0, 1.0, 1.0, 0.1, false).is_err());
        assert!(kappa_objective(0.0, 1.0, -1.0, 1.0, 1.0, 0.1, false).is_err());
    }

    #[test]
    fn kappa_star_examples() {
        // ln(2/delta) = 1 with KL = 0, |c|^2 tau = 8
        let delta = 2.0 / std::f64::consts::E;
        assert_relative_eq!(kappa_star(0.0, delta, 8.0, 1.0).unwrap(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(kappa_star(7.0, delta, 4.0, 2.0).unwrap(), 8f64.sqrt(), max_relative = 1e-15);
        assert!(kappa_star(1.0, 0.1, 0.0, 1.0).is_err());
        let ks = kappa_star(2.0, 0.05, 0.3, 5.0).unwrap();
        let f = |k| kappa_objective(0.0, 2.0, k, 0.3, 5.0, 0.05, true).unwrap();
        assert!(f(ks) < f(ks / 2.0) && f(ks) < f(2.0 * ks));
    }

    #[test]
    fn kappa_star_beats_log_grid() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let grid: Vec<f64> = (0..10_000).map(|i| 10f64.powf(-6.0 + 12.0 * i as f64 / 9_999.0)).collect();
        for _ in 0..20 {
            let (kl, delta, cns, tau, l) = (
                r.gen_range(0.0..30.0),
                r.gen_range(0.01..0.5),
                r.gen_range(0.01..3.0),
                r.gen_range(1.0..50.0),
                r.gen_range(-5.0..0.0),
            );
            let ks = kappa_star(kl, delta, cns, tau).unwrap();
            let at_star = kappa_objective(l, kl, ks, cns, tau, delta, true).unwrap();
            let best = grid
                .iter()
                .map(|&k| kappa_objective(l, kl, k, cns, tau, delta, true).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(at_star <= best + 1e-9 * best.abs(), "{at_star} vs {best}");
        }
    }

    #[test]
    fn lower_bound_examples() {
        let delta = 2.0 / std::f64::consts::E;
        let inp = inputs(0.0, delta, 1.0, 2, Horizon::Finite(1), 0.0);
        let c = value_lower_bound(2.0, &inp).unwrap();
        assert_relative_eq!(c.certified_lower_bound, 1.5, max_relative = 1e-15);
        assert_eq!(c.certified_lower_bound, c.empirical_return - c.deviation_bound);

        let mut prev = f64::INFINITY;
        for e in 0..12 {
            let kl = 10f64.powi(e);
            let lb = value_lower_bound(1.0, &CertificateInputs { kl, ..inp }).unwrap().certified_lower_bound;
            assert!(lb < prev);
            prev = lb;
        }
        assert!(prev < -1e5);

        let base = inputs(3.0, 0.05, 7.0, 16, Horizon::Finite(100), 0.99);
        let one = value_lower_bound(0.0, &base).unwrap().deviation_bound;
        let two = value_lower_bound(0.0, &CertificateInputs { n_trajectories: 32, ..base }).unwrap().deviation_bound;
        assert!((two / one - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12);
    }

    #[test]
    fn csv_row_shape() {
        let inp = inputs(0.0, 0.1, 1.0, 2, Horizon::Infinite, 0.5);
        let row = value_lower_bound(1.0, &inp).unwrap().csv_row();
        assert_eq!(row.split(',').count(), Certificate::CSV_HEADER.split(',').count());
        assert!(row.contains(",inf,"));
        assert_eq!("inf".parse::<Horizon>().unwrap(), Horizon::Infinite);
        assert_eq!("12".parse::<Horizon>().unwrap(), Horizon::Finite(12));
        assert!("0".parse::<Horizon>().is_err());
    }

    #[test]
    fn bounded_differences_identical_and_single() {
        let (base, _) = worst_case_pair(1.0, 6, 3, 0, 1).unwrap();
        let rep = bounded_difference_check(&base, &base, 0.9, 1.0).unwrap();
        assert_eq!((rep.observed, rep.bound), (0.0, 0.0));
        assert!(rep.holds());

        let mut single = base.clone();
        single.trajectories[1].rewards_mut()[2] = 0.4;
        let rep = bounded_difference_check(&base, &single, 0.9, 1.0).unwrap();
        assert_eq!(rep.first_step, Some(3));
        assert_relative_eq!(rep.observed, 0.81 * 0.4 / 3.0, max_relative = 1e-14);
        assert!(rep.holds() && rep.slack > 0.0);

        let mut two = single.clone();
        two.trajectories[0].rewards_mut()[0] = 1.0;
        assert!(bounded_difference_check(&base, &two, 0.9, 1.0).is_err());
    }

    #[test]
    fn worst_case_attains_equality() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let gamma = r.gen_range(0.0..0.999);
            let h_total = r.gen_range(1..60);
            let t = r.gen_range(1..12);
            let h = r.gen_range(1..=h_total);
            let j = r.gen_range(0..t);
            let r_max = r.gen_range(0.1..3.0);
            let (a, b) = worst_case_pair(r_max, h_total, t, j, h).unwrap();
            let rep = bounded_difference_check(&a, &b, gamma, r_max).unwrap();
            assert!(rep.slack.abs() <= 1e-12, "slack {}", rep.slack);
        }
    }

    #[test]
    fn threshold_grid_shape() {
        let g = threshold_grid(0.6, 10.0, 20);
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.0);
        assert_relative_eq!(tail_bound(g[19], 0.6, 10.0), 1e-3, max_relative = 1e-9);
        assert_eq!(tail_bound(0.0, 0.6, 10.0), 2.0);
    }

    #[test]
    fn categorical_kl_cases() {
        assert_eq!(categorical_kl(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_relative_eq!(categorical_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), max_relative = 1e-15);
        assert!(categorical_kl(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn concentration_small_run_is_mode_independent() {
        let mdp = TabularMdp::chain5();
        let (pols, _, _) = chain5_policy_family().unwrap();
        let tau = tabular_tau_min(&mdp, &pols[..1]).unwrap();
        let setup = SamplingSetup { n_trajectories: 4, horizon: 8, tau_min: tau, n_repeats: 64 };
        let th = threshold_grid(setup.c_norm_sq(&mdp).unwrap(), tau, 5);
        let seeds = SeedStream::new(5);
        let a = concentration_check(&mdp, &pols[0], &setup, &th, &seeds, Execution::Sequential).unwrap();
        let b = concentration_check(&mdp, &pols[0], &setup, &th, &seeds, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[0].observed, 1.0);
        assert!(!a.rows[0].flagged);
    }

    #[test]
    fn policy_family_is_distinct_and_mixing() {
        let mdp = TabularMdp::chain5();
        let (pols, rho, mu) = chain5_policy_family().unwrap();
        assert_eq!(pols.len(), 8);
        assert_relative_eq!(rho.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        let values: Vec<f64> = pols.iter().map(|p| exact_value(&mdp, p, 16).unwrap()).collect();
        for w in values.windows(2) {
            assert!(w[0] != w[1]);
        }
        assert!(categorical_kl(&rho, &mu).unwrap() > 0.0);
        let tau = tabular_tau_min(&mdp, &pols).unwrap();
        assert!(tau.is_finite() && tau >= 4.0);
    }
}
