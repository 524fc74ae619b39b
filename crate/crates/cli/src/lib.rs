//! `pbcert` command-line harness: PB-SAC training runs, standalone
//! certificates, Monte Carlo concentration checks, mixing-time tables and
//! the Bellman-error counterexample.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pbcert::certificate::{
    bound_validity_check, c_norm_sq, chain5_policy_family, concentration_check, tabular_tau_min, threshold_grid,
    value_lower_bound, Certificate, CertificateInputs, Horizon, SamplingSetup,
};
use pbcert::error::Error;
use pbcert::exec::Execution;
use pbcert::mdp::{empirical_loss, read_dataset, CounterexampleMdp, Environment, PointMass, TabularMdp, TabularPolicy};
use pbcert::mixing::{epsilon_grid, mixing_time_exact, normalization_factor, tau_min_exact, MarkovChain};
use pbcert::pbsac::{self, CertificateRecord, PbMetricsRow, PbSacConfig};
use pbcert::posterior::{kl_diag_gaussians, PosteriorCheckpoint};
use pbcert::rng::SeedStream;

/// Environment variable that sets the output directory when `--out-dir`
/// is not given.
pub const OUT_DIR_ENV: &str = "PBCERT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "pbcert", version, about = "PAC-Bayes certificates for reinforcement learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train PB-SAC and write metrics, certificates and checkpoints.
    Train(TrainArgs),
    /// Print one certificate row from explicit inputs or a dataset file.
    Certify(CertifyArgs),
    /// Monte Carlo check of the tail bound and of certificate validity.
    VerifyConcentration(VerifyArgs),
    /// Exact mixing times of a Markov chain over a tolerance grid.
    Mixing(MixingArgs),
    /// Bellman-error table of the four-state counterexample.
    Counterexample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Sequential => Execution::Sequential,
            ExecArg::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small networks sized for one CPU.
    Desk,
    /// The full-size defaults.
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "point_mass")]
    pub env: String,
    /// Overrides the configured total environment steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML or `key = value` file using the configuration field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long, conflicts_with = "posterior")]
    pub kl: Option<f64>,
    /// Posterior checkpoint; the KL to its stored prior is used.
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub tau_min: f64,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r_max: f64,
    /// Number of trajectories `T`.
    #[arg(long, conflicts_with = "dataset")]
    pub trajectories: Option<u64>,
    /// Horizon `H`; `inf` for unbounded episodes.
    #[arg(long, conflicts_with = "dataset")]
    pub horizon: Option<Horizon>,
    #[arg(long, conflicts_with = "dataset")]
    pub empirical_return: Option<f64>,
    /// Trajectory CSV; supplies `T`, `H` and the empirical return.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "chain5")]
    pub env: String,
    #[arg(long, default_value_t = 2000)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 8)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long, default_value_t = 20)]
    pub thresholds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
}

#[derive(Debug, Args)]
pub struct MixingArgs {
    /// Built-in chain: `identical-rows`, `identity:N`, `two-state:P,Q` or
    /// `chain5` (uniform policy on the five-state chain).
    #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
    pub chain: Option<String>,
    /// Whitespace-separated matrix rows, one per line.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Number of tolerance points (0 plus log-spaced values).
    #[arg(long, default_value_t = 32)]
    pub grid_size: usize,
    /// Explicit tolerances; overrides `--grid-size`.
    #[arg(long = "epsilon", value_delimiter = ',')]
    pub epsilons: Vec<f64>,
}

/// Failure classes with distinct exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, configuration or input files (exit 2).
    Usage(String),
    /// A computation failed or a statistical check fired (exit 1).
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config(_) | Error::Parse(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failure(format!("i/o error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return e.exit_code() as u8;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Certify(a) => cmd_certify(&a, out),
        Command::VerifyConcentration(a) => cmd_verify_concentration(&a, out),
        Command::Mixing(a) => cmd_mixing(&a, out),
        Command::Counterexample => cmd_counterexample(out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Provenance record written before a run starts and completed after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    /// The effective configuration as TOML.
    pub config: String,
    pub code_version: String,
    pub environment: String,
    pub output_dir: String,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    /// The run id hashes everything that determines the outputs, so
    /// identical invocations share it and their CSVs are byte-identical.
    pub fn new(command: &str, seed: u64, config: String, environment: &str, output_dir: &Path) -> Self {
        let mut h = Sha256::new();
        for part in [command, &seed.to_string(), environment, &config, env!("CARGO_PKG_VERSION")] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        let run_id = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
        Self {
            run_id,
            command: command.into(),
            seed,
            config,
            code_version: env!("CARGO_PKG_VERSION").into(),
            environment: environment.into(),
            output_dir: output_dir.display().to_string(),
            started_at_unix: unix_now(),
            finished_at_unix: None,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Failure(e.to_string()))?;
        fs::write(dir.join(Self::FILE_NAME), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(dir.join(Self::FILE_NAME))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest: {e}")))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `--out-dir` if given, else `$PBCERT_OUT_DIR`, else `runs`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_DIR.into()),
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Preset defaults overlaid with the keys of a TOML / `key = value` file.
/// Unknown keys and out-of-range values are rejected with the field name.
pub fn load_config(preset: Preset, path: Option<&Path>) -> CliResult<PbSacConfig> {
    let base_config = match preset {
        Preset::Desk => PbSacConfig::desk_scale(),
        Preset::Full => PbSacConfig::default(),
    };
    let mut table = toml::Table::try_from(&base_config).map_err(|e| CliError::Failure(format!("config snapshot: {e}")))?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let overlay: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        merge_tables(&mut table, overlay);
    }
    let config: PbSacConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
    config.validate()?;
    Ok(config)
}

fn config_snapshot(config: &PbSacConfig) -> CliResult<String> {
    toml::to_string(config).map_err(|e| CliError::Failure(format!("config snapshot: {e}")))
}

/// Runs PB-SAC. Writes `manifest.json` first, then `metrics.csv`,
/// `certificates.csv` and `checkpoint/` into the output directory. Both
/// CSVs lead with the manifest's `run_id`.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<u8> {
    let mut config = load_config(args.preset, args.config.as_deref())?;
    if let Some(steps) = args.steps {
        config.sac.total_steps = steps;
    }
    let env = match args.env.as_str() {
        "point_mass" => PointMass::new(config.sac.episode_horizon),
        other => {
            return Err(CliError::Usage(format!(
                "environment `{other}` is not supported by train (available: point_mass)"
            )))
        }
    };
    let dir = resolve_out_dir(args.out_dir.as_deref());
    fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("train", args.seed, config_snapshot(&config)?, &args.env, &dir);
    manifest.write(&dir)?;
    let outcome = pbsac::train(&env, &config, args.seed, args.exec.into(), Some(&dir.join("checkpoint")))?;
    let id = &manifest.run_id;
    let mut metrics = format!("run_id,{}\n", PbMetricsRow::CSV_HEADER);
    for row in &outcome.metrics {
        metrics.push_str(&format!("{id},{}\n", row.csv_row()));
    }
    fs::write(dir.join("metrics.csv"), metrics)?;
    let mut certs = format!("run_id,{}\n", CertificateRecord::csv_header());
    for rec in &outcome.certificates {
        certs.push_str(&format!("{id},{}\n", rec.csv_row()));
    }
    fs::write(dir.join("certificates.csv"), certs)?;
    if !outcome.incidents.is_empty() {
        fs::write(dir.join("incidents.log"), outcome.incidents.join("\n") + "\n")?;
    }
    manifest.finished_at_unix = Some(unix_now());
    manifest.write(&dir)?;
    writeln!(out, "run_id={id}")?;
    writeln!(out, "output_dir={}", dir.display())?;
    writeln!(out, "metrics_rows={}", outcome.metrics.len())?;
    if let Some(c) = outcome.final_certificate() {
        writeln!(out, "certified_lower_bound={:?}", c.certified_lower_bound)?;
    }
    Ok(0)
}

/// Prints the certificate header and one row.
pub fn cmd_certify(args: &CertifyArgs, out: &mut dyn Write) -> CliResult<u8> {
    if !(args.delta > 0.0 && args.delta < 1.0) {
        return Err(CliError::Usage(format!("--delta must lie in (0, 1), got {}", args.delta)));
    }
    let kl = match (&args.posterior, args.kl) {
        (Some(path), _) => {
            let file = fs::File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let ck = PosteriorCheckpoint::read(BufReader::new(file))?;
            kl_diag_gaussians(&ck.posterior, &ck.prior)?
        }
        (None, Some(kl)) => kl,
        (None, None) => return Err(CliError::Usage("one of --kl or --posterior is required".into())),
    };
    let (n_trajectories, horizon, empirical) = match &args.dataset {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let ds = read_dataset(BufReader::new(file), &path.display().to_string())?;
            let ret = -empirical_loss(&ds, args.gamma)?;
            (ds.count() as u64, Horizon::Finite(ds.horizon() as u64), ret)
        }
        None => {
            let t = args
                .trajectories
                .ok_or_else(|| CliError::Usage("--trajectories is required without --dataset".into()))?;
            let h = args
                .horizon
                .ok_or_else(|| CliError::Usage("--horizon is required without --dataset".into()))?;
            (t, h, args.empirical_return.unwrap_or(0.0))
        }
    };
    let inputs = CertificateInputs {
        r_max: args.r_max,
        gamma: args.gamma,
        horizon,
        n_trajectories,
        tau_min: args.tau_min,
        kl,
        delta: args.delta,
    };
    let cert = value_lower_bound(empirical, &inputs)?;
    writeln!(out, "{}", Certificate::CSV_HEADER)?;
    writeln!(out, "{}", cert.csv_row())?;
    Ok(0)
}

fn tabular_env(name: &str) -> CliResult<TabularMdp> {
    match name {
        "chain5" => Ok(TabularMdp::chain5()),
        "point_mass" => Err(CliError::Usage(
            "environment `point_mass` is not tabular; verify-concentration needs exact values (available: chain5)".into(),
        )),
        other => Err(CliError::Usage(format!("unknown environment `{other}` (available: chain5)"))),
    }
}

/// Tail-frequency table for the posterior's modal policy and the
/// violation rate of the certificate at the fixed posterior over the
/// built-in policy family. Exits 1 when any statistical flag fires.
pub fn cmd_verify_concentration(args: &VerifyArgs, out: &mut dyn Write) -> CliResult<u8> {
    let mdp = tabular_env(&args.env)?;
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if !(args.delta > 0.0 && args.delta < 1.0) {
        return Err(CliError::Usage(format!("--delta must lie in (0, 1), got {}", args.delta)));
    }
    if args.thresholds == 0 {
        return Err(CliError::Usage("--thresholds must be at least 1".into()));
    }
    let (policies, rho, mu) = chain5_policy_family()?;
    let seeds = SeedStream::new(args.seed);
    let exec: Execution = args.exec.into();
    let modal = rho
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > rho[best] { i } else { best });
    let tail_setup = SamplingSetup {
        n_trajectories: args.trajectories,
        horizon: args.horizon,
        tau_min: tabular_tau_min(&mdp, &policies[modal..=modal])?,
        n_repeats: args.repeats,
    };
    let cns = c_norm_sq(mdp.r_max(), mdp.gamma(), Horizon::Finite(args.horizon as u64), args.trajectories as u64)?;
    let grid = threshold_grid(cns, tail_setup.tau_min, args.thresholds);
    let tail = concentration_check(&mdp, &policies[modal], &tail_setup, &grid, &seeds, exec)?;
    writeln!(
        out,
        "# tail check: policy {modal}, T={}, H={}, tau_min={:?}, c_norm_sq={:?}, repeats={}",
        args.trajectories, args.horizon, tail.tau_min, tail.c_norm_sq, tail.n_repeats
    )?;
    writeln!(out, "threshold,observed,bound,std_error,flagged")?;
    for r in &tail.rows {
        writeln!(out, "{:?},{:?},{:?},{:?},{}", r.threshold, r.observed, r.bound, r.std_error, r.flagged)?;
    }
    writeln!(out, "# mean deviation of the empirical loss from its expectation")?;
    writeln!(out, "expected_loss,mean_deviation,std_error,flagged")?;
    writeln!(
        out,
        "{:?},{:?},{:?},{}",
        tail.expected_loss, tail.mean_deviation, tail.mean_std_error, tail.mean_flagged
    )?;
    let validity_setup = SamplingSetup {
        tau_min: tabular_tau_min(&mdp, &policies)?,
        ..tail_setup
    };
    let validity = bound_validity_check(&mdp, &policies, &rho, &mu, args.delta, &validity_setup, &seeds, exec)?;
    writeln!(out, "# certificate validity at a fixed posterior over {} policies", policies.len())?;
    writeln!(out, "kl,delta,tau_min,bound,violations,repeats,violation_rate,allowed_rate,passed")?;
    writeln!(
        out,
        "{:?},{:?},{:?},{:?},{},{},{:?},{:?},{}",
        validity.kl,
        validity.delta,
        validity_setup.tau_min,
        validity.bound,
        validity.violations,
        validity.n_repeats,
        validity.violation_rate,
        validity.allowed_rate,
        validity.passed()
    )?;
    Ok(if tail.any_flagged() || !validity.passed() { 1 } else { 0 })
}

/// Resolves a built-in chain name.
pub fn builtin_chain(spec: &str) -> CliResult<MarkovChain> {
    let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let bad = |why: &str| CliError::Usage(format!("chain `{spec}`: {why}"));
    match name {
        "identical-rows" => Ok(MarkovChain::from_rows(&vec![vec![0.2, 0.3, 0.5]; 3])?),
        "identity" => {
            let n: usize = arg.parse().map_err(|_| bad("expected identity:N"))?;
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                p[i * n + i] = 1.0;
            }
            Ok(MarkovChain::new(n, p)?)
        }
        "two-state" => {
            let (p, q) = arg.split_once(',').ok_or_else(|| bad("expected two-state:P,Q"))?;
            let p: f64 = p.trim().parse().map_err(|_| bad("P is not a number"))?;
            let q: f64 = q.trim().parse().map_err(|_| bad("Q is not a number"))?;
            Ok(MarkovChain::two_state(p, q)?)
        }
        "chain5" => {
            let uniform = TabularPolicy::softmax(5, 2, &[0.0; 10])?;
            Ok(TabularMdp::chain5().induced_chain(&uniform)?)
        }
        _ => Err(bad("unknown chain (available: identical-rows, identity:N, two-state:P,Q, chain5)")),
    }
}

/// `tau(eps)` at every grid point (`inf` where the chain never gets within
/// `eps`), then the minimizing normalized value.
pub fn cmd_mixing(args: &MixingArgs, out: &mut dyn Write) -> CliResult<u8> {
    let chain = match (&args.chain, &args.matrix) {
        (Some(spec), _) => builtin_chain(spec)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            MarkovChain::parse(&text)?
        }
        (None, None) => return Err(CliError::Usage("one of --chain or --matrix is required".into())),
    };
    let grid = if args.epsilons.is_empty() {
        if args.grid_size < 2 {
            return Err(CliError::Usage("--grid-size must be at least 2".into()));
        }
        epsilon_grid(args.grid_size)
    } else {
        args.epsilons.clone()
    };
    let mut rows = Vec::with_capacity(grid.len());
    for &eps in &grid {
        match mixing_time_exact(&chain, eps) {
            Ok(t) => rows.push(format!("{eps:?},{t},{:?}", t as f64 * normalization_factor(eps))),
            Err(Error::NonMixing { .. }) => rows.push(format!("{eps:?},inf,inf")),
            Err(e) => return Err(e.into()),
        }
    }
    let best = tau_min_exact(&chain, &grid)?;
    writeln!(out, "epsilon,tau,normalized_tau")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    writeln!(out, "tau_min,epsilon_star,steps")?;
    writeln!(
        out,
        "{:?},{:?},{}",
        best.tau_min,
        best.epsilon_star.unwrap_or(f64::NAN),
        best.steps.unwrap_or(0)
    )?;
    Ok(0)
}

/// `0`, `+1`, `-1.5`, ...
pub fn signed(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:+}")
    }
}

/// Bellman errors under the zero value function for starts `A` and `B`.
pub fn cmd_counterexample(out: &mut dyn Write) -> CliResult<u8> {
    let pairs = CounterexampleMdp::bellman_error_sequence(&[0.0; 4]);
    writeln!(out, "start,delta_t,successor,delta_next")?;
    for p in &pairs {
        writeln!(
            out,
            "{},{},{},{}",
            p.start.label(),
            signed(p.delta_t),
            p.successor.label(),
            signed(p.delta_next)
        )?;
    }
    let (a, b) = (&pairs[0], &pairs[1]);
    writeln!(
        out,
        "Starts {} and {} share delta_t = {}, yet delta_(t+1) is {} after {} and {} after {}: the current Bellman error does not determine the next one's distribution.",
        a.start.label(),
        b.start.label(),
        signed(a.delta_t),
        signed(a.delta_next),
        a.start.label(),
        signed(b.delta_next),
        b.start.label()
    )?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_formatting() {
        assert_eq!(signed(0.0), "0");
        assert_eq!(signed(-0.0), "0");
        assert_eq!(signed(1.0), "+1");
        assert_eq!(signed(-1.0), "-1");
        assert_eq!(signed(0.25), "+0.25");
    }

    #[test]
    fn run_id_is_deterministic_and_input_sensitive() {
        let a = RunManifest::new("train", 1, "x".into(), "point_mass", Path::new("a"));
        let b = RunManifest::new("train", 1, "x".into(), "point_mass", Path::new("b"));
        let c = RunManifest::new("train", 2, "x".into(), "point_mass", Path::new("a"));
        assert_eq!(a.run_id, b.run_id);
        assert_ne!(a.run_id, c.run_id);
        assert_eq!(a.run_id.len(), 16);
    }

    #[test]
    fn config_overlay_and_field_errors() {
        let dir = std::env::temp_dir().join(format!("pbcert-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let good = dir.join("good.toml");
        fs::write(&good, "pb_epochs = 3\nsac.batch_size = 16\n[prior]\niota = 0.5\n").unwrap();
        let c = load_config(Preset::Desk, Some(&good)).unwrap();
        assert_eq!(c.pb_epochs, 3);
        assert_eq!(c.sac.batch_size, 16);
        assert_eq!(c.sac.hidden, vec![32, 32]);
        assert_eq!(c.prior.iota, 0.5);
        assert_eq!(c.prior.update_period, 20_000);
        let unknown = dir.join("unknown.toml");
        fs::write(&unknown, "pb_epoch = 3\n").unwrap();
        match load_config(Preset::Desk, Some(&unknown)) {
            Err(CliError::Usage(m)) => assert!(m.contains("pb_epoch"), "{m}"),
            other => panic!("{other:?}"),
        }
        let range = dir.join("range.toml");
        fs::write(&range, "delta = 1.5\n").unwrap();
        match load_config(Preset::Desk, Some(&range)) {
            Err(CliError::Usage(m)) => assert!(m.contains("delta"), "{m}"),
            other => panic!("{other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn out_dir_precedence() {
        assert_eq!(resolve_out_dir(Some(Path::new("x"))), PathBuf::from("x"));
    }
}
