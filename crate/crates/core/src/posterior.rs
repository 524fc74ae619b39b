//! Diagonal Gaussian distributions over flattened policy parameters.
//!
//! The standard deviation is stored as `log sigma` so gradient steps keep it
//! positive; every public interface speaks in terms of `sigma`.

use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{usage, Error, Result};
use crate::rng::StreamRng;

/// `0.5 * ln(2 pi)`.
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Default initial standard deviation for a freshly created posterior.
pub const DEFAULT_INITIAL_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(usage(format!("mean has {} entries but std has {}", mean.len(), std.len())));
        }
        if let Some(i) = std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(usage(format!("std[{i}] = {} is not a positive finite number", std[i])));
        }
        let log_std = std.iter().map(|s| s.ln()).collect();
        Self::from_log_std(mean, log_std)
    }

    pub fn from_log_std(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(usage("mean and log_std lengths differ"));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameter".into()));
        }
        Ok(Self { mean, log_std })
    }

    /// Same standard deviation on every coordinate.
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![std; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(usage(format!("expected a vector of length {}, got {len}", self.dim())));
        }
        Ok(())
    }

    /// Draws a standard normal noise vector of the distribution's dimension.
    pub fn draw_noise(&self, rng: &mut StreamRng) -> Vec<f64> {
        (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// `upsilon + sigma * z` for a given noise vector.
    pub fn reparameterize(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, l), z)| m + l.exp() * z)
            .collect())
    }

    pub fn sample(&self, rng: &mut StreamRng, n: usize) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(usage("sample count must be at least 1"));
        }
        (0..n).map(|_| self.reparameterize(&self.draw_noise(rng))).collect()
    }

    pub fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        self.check_dim(theta.len())?;
        let mut total = 0.0;
        for ((t, m), l) in theta.iter().zip(&self.mean).zip(&self.log_std) {
            let z = (t - m) * (-l).exp();
            total += -HALF_LN_TWO_PI - l - 0.5 * z * z;
        }
        Ok(total)
    }

    /// `(d log p / d upsilon, d log p / d sigma)`.
    pub fn grad_log_prob(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(theta.len())?;
        let mut gm = Vec::with_capacity(self.dim());
        let mut gs = Vec::with_capacity(self.dim());
        for ((t, m), l) in theta.iter().zip(&self.mean).zip(&self.log_std) {
            let s = l.exp();
            let d = t - m;
            gm.push(d / (s * s));
            gs.push((d * d - s * s) / (s * s * s));
        }
        Ok((gm, gs))
    }

    /// New distribution of the same dimension with the given parameters.
    pub fn with_params(&self, mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        self.check_dim(mean.len())?;
        self.check_dim(log_std.len())?;
        Self::from_log_std(mean, log_std)
    }
}

/// `KL(rho || mu)` for diagonal Gaussians.
pub fn kl_diag_gaussians(rho: &DiagGaussian, mu: &DiagGaussian) -> Result<f64> {
    if rho.dim() != mu.dim() {
        return Err(usage("KL between distributions of different dimension"));
    }
    let mut kl = 0.0;
    for i in 0..rho.dim() {
        let (lr, lm) = (rho.log_std[i], mu.log_std[i]);
        let ratio = (2.0 * (lr - lm)).exp(); // sigma_rho^2 / sigma_mu^2
        let dm = (rho.mean[i] - mu.mean[i]) * (-lm).exp();
        // ln(s_mu/s_rho) + (s_rho^2 + dm^2)/(2 s_mu^2) - 1/2, arranged so
        // equal parameters give exactly zero
        kl += (lm - lr) + 0.5 * (ratio - 1.0) + 0.5 * dm * dm;
    }
    Ok(kl.max(0.0))
}

/// `(d KL / d upsilon_rho, d KL / d sigma_rho)`.
pub fn kl_gradient(rho: &DiagGaussian, mu: &DiagGaussian) -> Result<(Vec<f64>, Vec<f64>)> {
    if rho.dim() != mu.dim() {
        return Err(usage("KL gradient between distributions of different dimension"));
    }
    let mut gm = Vec::with_capacity(rho.dim());
    let mut gs = Vec::with_capacity(rho.dim());
    for i in 0..rho.dim() {
        let sr = rho.log_std[i].exp();
        let var_mu = (2.0 * mu.log_std[i]).exp();
        gm.push((rho.mean[i] - mu.mean[i]) / var_mu);
        gs.push(-1.0 / sr + sr / var_mu);
    }
    Ok((gm, gs))
}

/// Score-function estimate of `grad_{upsilon, sigma} E_{theta ~ rho}[return]`:
/// the sample mean of `grad log rho(theta_k) * (return_k - b_k)`. With
/// `baseline` set, `b_k` is the mean return of the *other* samples, which
/// keeps the estimate exactly unbiased at any batch size (a batch mean that
/// includes `return_k` shrinks it by `(n - 1) / n`); otherwise `b_k = 0`.
/// Callers minimizing a loss negate it.
pub fn reinforce_gradient(
    dist: &DiagGaussian,
    thetas: &[Vec<f64>],
    returns: &[f64],
    baseline: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if thetas.len() != returns.len() {
        return Err(usage("one return per sampled parameter vector is required"));
    }
    if thetas.is_empty() || (baseline && thetas.len() < 2) {
        return Err(usage("REINFORCE needs at least two samples with a baseline, one without"));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite return passed to REINFORCE".into()));
    }
    let n = thetas.len() as f64;
    let total: f64 = returns.iter().sum();
    let mut gm = vec![0.0; dist.dim()];
    let mut gs = vec![0.0; dist.dim()];
    for (theta, &r) in thetas.iter().zip(returns) {
        let w = if baseline { r - (total - r) / (n - 1.0) } else { r };
        if w == 0.0 {
            continue;
        }
        let (sm, ss) = dist.grad_log_prob(theta)?;
        for i in 0..dist.dim() {
            gm[i] += sm[i] * w;
            gs[i] += ss[i] * w;
        }
    }
    for g in gm.iter_mut().chain(gs.iter_mut()) {
        *g /= n;
    }
    Ok((gm, gs))
}

/// Moving-average prior schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSchedule {
    /// Interpolation weight toward the posterior, in `[0, 1]`.
    pub iota: f64,
    /// Linear decrement applied to `iota` after every update.
    pub decay_slope: f64,
    /// Lower clamp for `iota`.
    pub floor: f64,
    /// Environment steps between prior updates.
    pub update_period: u64,
}

impl Default for PriorSchedule {
    fn default() -> Self {
        Self {
            iota: 0.99,
            decay_slope: 0.01,
            floor: 0.0,
            update_period: 20_000,
        }
    }
}

/// `mu <- iota * rho + (1 - iota) * mu` on `(upsilon, sigma)`, then
/// `iota <- max(iota - slope, floor)`.
pub fn prior_update(
    mu: &DiagGaussian,
    rho: &DiagGaussian,
    schedule: &PriorSchedule,
) -> Result<(DiagGaussian, PriorSchedule)> {
    if mu.dim() != rho.dim() {
        return Err(usage("prior and posterior dimensions differ"));
    }
    if !(0.0..=1.0).contains(&schedule.iota) || !(0.0..=1.0).contains(&schedule.floor) {
        return Err(usage("iota and its floor must lie in [0, 1]"));
    }
    let iota = schedule.iota;
    let blend = |a: f64, b: f64| {
        if iota == 1.0 {
            a
        } else if iota == 0.0 {
            b
        } else {
            iota * a + (1.0 - iota) * b
        }
    };
    let mean = rho.mean.iter().zip(&mu.mean).map(|(&r, &m)| blend(r, m)).collect();
    let log_std = rho
        .log_std
        .iter()
        .zip(&mu.log_std)
        .map(|(&lr, &lm)| {
            if iota == 1.0 {
                lr
            } else if iota == 0.0 {
                lm
            } else {
                blend(lr.exp(), lm.exp()).ln()
            }
        })
        .collect();
    let next = PriorSchedule {
        iota: (iota - schedule.decay_slope).max(schedule.floor),
        ..*schedule
    };
    Ok((DiagGaussian::from_log_std(mean, log_std)?, next))
}

/// Ordered named tensor shapes describing a flattened parameter vector.
/// Flattening is layer-major in list order and row-major within a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub entries: Vec<(String, [usize; 2])>,
}

impl ShapeSpec {
    pub fn new(entries: Vec<(String, [usize; 2])>) -> Self {
        Self { entries }
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, [r, c])| r * c).sum()
    }

    /// `name:RxC` items joined by `;`.
    pub fn encode(&self) -> String {
        self.entries
            .iter()
            .map(|(n, [r, c])| format!("{n}:{r}x{c}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Self::new(Vec::new()));
        }
        let entries = text
            .split(';')
            .map(|item| {
                let (name, dims) = item
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Parse(format!("shape entry {item:?} lacks ':'")))?;
                let (r, c) = dims
                    .split_once('x')
                    .ok_or_else(|| Error::Parse(format!("shape {dims:?} lacks 'x'")))?;
                let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("shape {dims:?}: {e}")));
                Ok((name.to_string(), [parse(r)?, parse(c)?]))
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(entries))
    }
}

pub fn flatten(params: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.iter().map(Tensor::len).sum());
    for p in params {
        out.extend_from_slice(p.data());
    }
    out
}

pub fn unflatten(vector: &[f64], spec: &ShapeSpec) -> Result<Vec<Tensor>> {
    if vector.len() != spec.total_len() {
        return Err(usage(format!(
            "vector has {} entries but the shape spec needs {}",
            vector.len(),
            spec.total_len()
        )));
    }
    let mut offset = 0;
    spec.entries
        .iter()
        .map(|(_, [r, c])| {
            let t = Tensor::new(*r, *c, vector[offset..offset + r * c].to_vec())?;
            offset += r * c;
            Ok(t)
        })
        .collect()
}

/// Posterior, prior and schedule at a given step.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCheckpoint {
    pub shapes: ShapeSpec,
    pub posterior: DiagGaussian,
    pub prior: DiagGaussian,
    pub schedule: PriorSchedule,
    pub step: u64,
}

impl PosteriorCheckpoint {
    pub const MAGIC: &'static str = "pbcert-posterior";
    pub const VERSION: u32 = 1;

    /// Line-oriented text: a header (magic, version, dimension, shapes,
    /// schedule, step) followed by four vectors. Floats are written in their
    /// shortest round-trip form, so reading back is bit-exact.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "{} v{}", Self::MAGIC, Self::VERSION)?;
        writeln!(out, "dim {}", self.posterior.dim())?;
        writeln!(out, "shapes {}", self.shapes.encode())?;
        writeln!(
            out,
            "schedule {:?} {:?} {:?} {}",
            self.schedule.iota, self.schedule.decay_slope, self.schedule.floor, self.schedule.update_period
        )?;
        writeln!(out, "step {}", self.step)?;
        writeln!(out, "posterior_mean {}", join(self.posterior.mean()))?;
        writeln!(out, "posterior_log_std {}", join(self.posterior.log_std()))?;
        writeln!(out, "prior_mean {}", join(self.prior.mean()))?;
        writeln!(out, "prior_log_std {}", join(self.prior.log_std()))?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let mut it = lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty());
        let header = it.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let expected = format!("{} v{}", Self::MAGIC, Self::VERSION);
        if header != expected {
            return Err(Error::Parse(format!("checkpoint header {header:?}, expected {expected:?}")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = it.next().ok_or_else(|| Error::Parse(format!("checkpoint missing {key}")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| Error::Parse(format!("expected {key}, found {line:?}")))?;
            Ok(rest.trim().to_string())
        };
        let floats = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| Error::Parse(format!("{x:?}: {e}"))))
                .collect()
        };
        let dim: usize = field("dim")?
            .parse()
            .map_err(|e| Error::Parse(format!("dim: {e}")))?;
        let shapes = ShapeSpec::decode(&field("shapes")?)?;
        let sched = floats(&field("schedule")?)?;
        if sched.len() != 4 {
            return Err(Error::Parse("schedule needs four numbers".into()));
        }
        let step: u64 = field("step")?
            .parse()
            .map_err(|e| Error::Parse(format!("step: {e}")))?;
        let pm = floats(&field("posterior_mean")?)?;
        let pl = floats(&field("posterior_log_std")?)?;
        let qm = floats(&field("prior_mean")?)?;
        let ql = floats(&field("prior_log_std")?)?;
        if [pm.len(), pl.len(), qm.len(), ql.len()].iter().any(|&l| l != dim)
            || (shapes.total_len() != dim && !shapes.entries.is_empty())
        {
            return Err(Error::Parse("checkpoint vector lengths disagree with dim".into()));
        }
        Ok(Self {
            shapes,
            posterior: DiagGaussian::from_log_std(pm, pl)?,
            prior: DiagGaussian::from_log_std(qm, ql)?,
            schedule: PriorSchedule {
                iota: sched[0],
                decay_slope: sched[1],
                floor: sched[2],
                update_period: sched[3] as u64,
            },
            step,
        })
    }
}
