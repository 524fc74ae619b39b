//! Mixing times of finite Markov chains and streaming estimates from rewards.
//!
//! `tau(eps)` is the smallest `t >= 1` such that the rows of `P^t` are
//! pairwise within `eps` in total variation. The normalized constant used by
//! the certificate is `tau_min = inf_eps tau(eps) * ((2 - eps) / (1 - eps))^2`.

use std::fmt;

use crate::error::{usage, Error, Result};

/// Rows must sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
/// Chains not mixed after this many steps are reported as non-mixing.
pub const MIXING_CAP: u64 = 1_000_000;
/// Default lag-correlation threshold for [`autocorrelation_tau`].
pub const DEFAULT_AUTOCORR_THRESHOLD: f64 = 0.367_879_441_171_442_33; // 1/e

/// Row-stochastic square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    n: usize,
    p: Vec<f64>,
}

impl MarkovChain {
    pub fn new(n: usize, p: Vec<f64>) -> Result<Self> {
        if n == 0 || p.len() != n * n {
            return Err(Error::Config(format!(
                "transition matrix must be square and nonempty, got {} entries for {n} states",
                p.len()
            )));
        }
        let bad: Vec<String> = (0..n)
            .filter_map(|i| {
                let row = &p[i * n..(i + 1) * n];
                let sum: f64 = row.iter().sum();
                let negative = row.iter().any(|&v| !(v >= 0.0) || !v.is_finite());
                if negative || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    Some(format!("row {i} (sum {sum})"))
                } else {
                    None
                }
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "matrix is not row-stochastic: {}",
                bad.join(", ")
            )));
        }
        Ok(Self { n, p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("matrix rows must all have length equal to the row count".into()));
        }
        Self::new(n, rows.concat())
    }

    /// `[[1-p, p], [q, 1-q]]`.
    pub fn two_state(p: f64, q: f64) -> Result<Self> {
        Self::new(2, vec![1.0 - p, p, q, 1.0 - q])
    }

    /// Whitespace-separated rows, one per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Result<Vec<f64>> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| {
                        Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1))
                    })
                })
                .collect();
            rows.push(row?);
        }
        Self::from_rows(&rows)
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }

    /// Same chain with states relabelled so that new state `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                q[i * n + j] = self.p[perm[i] * n + perm[j]];
            }
        }
        Self::new(n, q)
    }
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Largest pairwise total-variation distance between rows.
fn max_row_tv(m: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for x in 0..n {
        for y in x + 1..n {
            let d = tv_distance_unchecked(&m[x * n..(x + 1) * n], &m[y * n..(y + 1) * n]);
            worst = worst.max(d);
        }
    }
    worst
}

fn tv_distance_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `(1/2) * sum |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(usage(format!(
            "tv_distance on vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 || v.iter().any(|&x| x < 0.0) {
            return Err(usage(format!("not a probability vector (sum {s})")));
        }
    }
    Ok(tv_distance_unchecked(p, q).min(1.0))
}

/// Relative slack on the tolerance comparison. Matrix powers carry
/// round-off of a few ulps, so a distance that equals `eps` in exact
/// arithmetic (e.g. `|1-p-q|^t = eps`) can land just above it.
const TV_ROUNDOFF: f64 = 1e-12;

/// `tv <= eps` up to round-off; `eps = 0` still demands exact agreement.
fn mixed(tv: f64, epsilon: f64) -> bool {
    tv <= epsilon * (1.0 + TV_ROUNDOFF)
}

/// Exact `tau(eps)` by doubling `P^(2^k)` until the rows agree, then
/// binary-lifting back down. Row disagreement is nonincreasing in `t`, so
/// the search is exact.
pub fn mixing_time_exact(chain: &MarkovChain, epsilon: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(usage(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    let n = chain.n;
    if n == 1 {
        return Ok(1);
    }
    // powers[k] = P^(2^k)
    let mut powers = vec![chain.p.clone()];
    loop {
        let k = powers.len() - 1;
        if mixed(max_row_tv(&powers[k], n), epsilon) {
            break;
        }
        if (1u64 << k) >= MIXING_CAP {
            return Err(Error::NonMixing {
                epsilon,
                cap: MIXING_CAP,
            });
        }
        powers.push(matmul_square(&powers[k], &powers[k], n));
    }
    let k = powers.len() - 1;
    if k == 0 {
        return Ok(1);
    }
    // largest failing t, starting from 2^(k-1) which is known to fail
    let mut failing_t: u64 = 1 << (k - 1);
    let mut current = powers[k - 1].clone();
    for j in (0..k - 1).rev() {
        let candidate = matmul_square(&current, &powers[j], n);
        if !mixed(max_row_tv(&candidate, n), epsilon) {
            current = candidate;
            failing_t += 1 << j;
        }
    }
    let tau = failing_t + 1;
    if tau > MIXING_CAP {
        return Err(Error::NonMixing {
            epsilon,
            cap: MIXING_CAP,
        });
    }
    Ok(tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingMethod {
    Exact,
    Autocorrelation,
    Conservative,
}

impl fmt::Display for MixingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixingMethod::Exact => "exact",
            MixingMethod::Autocorrelation => "autocorrelation",
            MixingMethod::Conservative => "conservative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingEstimate {
    pub tau_min: f64,
    pub method: MixingMethod,
    /// Minimizing tolerance (exact) or the correlation threshold used (autocorrelation).
    pub epsilon_star: Option<f64>,
    /// Mixing time in steps at `epsilon_star`, or the decorrelation lag.
    pub steps: Option<u64>,
    /// Set when the reward series had zero variance or never decorrelated
    /// within the admissible lag window.
    pub degenerate: bool,
}

impl MixingEstimate {
    pub fn fixed(tau_min: f64) -> Self {
        Self {
            tau_min,
            method: MixingMethod::Conservative,
            epsilon_star: None,
            steps: None,
            degenerate: false,
        }
    }
}

/// `((2 - eps) / (1 - eps))^2`, the normalization applied to `tau(eps)`.
pub fn normalization_factor(epsilon: f64) -> f64 {
    let r = (2.0 - epsilon) / (1.0 - epsilon);
    r * r
}

/// `0` followed by 511 log-spaced points up to `0.99`.
pub fn default_epsilon_grid() -> Vec<f64> {
    epsilon_grid(512)
}

pub fn epsilon_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2, "grid needs at least two points");
    let (lo, hi) = (1e-6_f64.ln(), 0.99_f64.ln());
    let m = points - 1;
    std::iter::once(0.0)
        .chain((0..m).map(|i| {
            let frac = if m == 1 { 1.0 } else { i as f64 / (m - 1) as f64 };
            (lo + (hi - lo) * frac).exp()
        }))
        .collect()
}

/// Minimizes `tau(eps) * ((2-eps)/(1-eps))^2` over the grid. Grid points at
/// which the chain never mixes (e.g. `eps = 0` for most chains) are skipped;
/// the call fails only when no grid point mixes.
pub fn tau_min_exact(chain: &MarkovChain, epsilon_grid: &[f64]) -> Result<MixingEstimate> {
    if epsilon_grid.is_empty() {
        return Err(usage("empty epsilon grid"));
    }
    let mut best: Option<(f64, f64, u64)> = None;
    let mut last_err = None;
    for &eps in epsilon_grid {
        match mixing_time_exact(chain, eps) {
            Ok(t) => {
                let value = t as f64 * normalization_factor(eps);
                if best.map_or(true, |(b, _, _)| value < b) {
                    best = Some((value, eps, t));
                }
            }
            Err(e @ Error::NonMixing { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((tau_min, eps, t)) => Ok(MixingEstimate {
            tau_min,
            method: MixingMethod::Exact,
            epsilon_star: Some(eps),
            steps: Some(t),
            degenerate: false,
        }),
        None => Err(last_err.unwrap_or(Error::NonMixing {
            epsilon: 0.0,
            cap: MIXING_CAP,
        })),
    }
}

/// Streaming mixing estimate from reward autocorrelation over one series.
pub fn autocorrelation_tau(series: &[f64], threshold: f64) -> Result<MixingEstimate> {
    autocorrelation_tau_pooled(&[series], threshold)
}

/// Pooled estimate over several independent segments (e.g. trajectories).
///
/// Autocovariances are averaged over within-segment pairs only, using the
/// pooled mean and variance. The first lag whose absolute correlation is
/// below `threshold` stands in for `tau(threshold)` and is scaled by the
/// matching factor `((2 - thr) / (1 - thr))^2`. Lags up to a tenth of the
/// longest segment are examined; if none decorrelates the window end plus
/// one is used and the estimate is flagged degenerate.
pub fn autocorrelation_tau_pooled(segments: &[&[f64]], threshold: f64) -> Result<MixingEstimate> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(usage(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let longest = segments.iter().map(|s| s.len()).max().unwrap_or(0);
    let max_lag = longest / 10;
    if max_lag < 1 {
        return Err(usage(format!(
            "series of length {longest} is too short; need at least 10 samples per lag"
        )));
    }
    let factor = normalization_factor(threshold);
    let count: usize = segments.iter().map(|s| s.len()).sum();
    let mean = segments.iter().flat_map(|s| s.iter()).sum::<f64>() / count as f64;
    let var = segments
        .iter()
        .flat_map(|s| s.iter())
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / count as f64;
    let estimate = |lag: u64, degenerate: bool| MixingEstimate {
        tau_min: lag as f64 * factor,
        method: MixingMethod::Autocorrelation,
        epsilon_star: Some(threshold),
        steps: Some(lag),
        degenerate,
    };
    if !(var > 1e-300) {
        return Ok(estimate(1, true));
    }
    for lag in 1..=max_lag {
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for s in segments {
            if s.len() <= lag {
                continue;
            }
            for i in 0..s.len() - lag {
                acc += (s[i] - mean) * (s[i + lag] - mean);
            }
            pairs += s.len() - lag;
        }
        if pairs == 0 {
            break;
        }
        let rho = acc / pairs as f64 / var;
        if rho.abs() < threshold {
            return Ok(estimate(lag as u64, false));
        }
    }
    Ok(estimate(max_lag as u64 + 1, true))
}

/// Running maximum of two estimates.
pub fn conservative_tau(previous: &MixingEstimate, latest: &MixingEstimate) -> MixingEstimate {
    let chosen = if latest.tau_min > previous.tau_min {
        latest
    } else {
        previous
    };
    MixingEstimate {
        method: MixingMethod::Conservative,
        ..*chosen
    }
}
