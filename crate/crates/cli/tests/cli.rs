//! End-to-end checks of the `pbcert` command line: golden outputs, exit
//! codes, output files and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pbcert::mdp::{write_dataset, Trajectory, TrajectoryDataset};
use pbcert_cli::{run, RunManifest};

struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

fn pbcert(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("pbcert").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn golden(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pbcert-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn counterexample_matches_golden() {
    let o = pbcert(&["counterexample"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.stdout, golden("counterexample.txt"));
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[1], "A,0,C,+1");
    assert_eq!(lines[2], "B,0,D,-1");
}

#[test]
fn mixing_two_state_matches_golden() {
    let o = pbcert(&["mixing", "--chain", "two-state:0.3,0.2", "--grid-size", "6"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.stdout, golden("mixing_two_state.txt"));
}

#[test]
fn mixing_identical_rows_mixes_in_one_step() {
    let o = pbcert(&["mixing", "--chain", "identical-rows", "--epsilon", "0,0.5"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[1], "0.0,1,4.0");
    assert_eq!(lines[2], "0.5,1,9.0");
    assert_eq!(lines[4], "4.0,0.0,1");
}

#[test]
fn mixing_identity_reports_non_mixing() {
    let o = pbcert(&["mixing", "--chain", "identity:3", "--grid-size", "4"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("does not mix"), "{}", o.stderr);
}

#[test]
fn mixing_matrix_file_validation() {
    let dir = scratch("matrix");
    let bad = dir.join("bad.txt");
    fs::write(&bad, "0.5 0.6\n0.5 0.5\n").unwrap();
    let o = pbcert(&["mixing", "--matrix", bad.to_str().unwrap()]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("row 0"), "{}", o.stderr);
    let good = dir.join("good.txt");
    fs::write(&good, "0.7 0.3\n0.2 0.8\n").unwrap();
    let from_file = pbcert(&["mixing", "--matrix", good.to_str().unwrap(), "--grid-size", "6"]);
    assert_eq!(from_file.code, 0, "{}", from_file.stderr);
    assert_eq!(from_file.stdout, golden("mixing_two_state.txt"));
}

#[test]
fn certify_matches_golden_and_closed_form() {
    let o = pbcert(&[
        "certify",
        "--kl",
        "2",
        "--delta",
        "0.05",
        "--tau-min",
        "4",
        "--trajectories",
        "100",
        "--horizon",
        "inf",
        "--gamma",
        "0.9",
        "--empirical-return",
        "5",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.stdout, golden("certify.txt"));
    let row: Vec<&str> = o.stdout.lines().nth(1).unwrap().split(',').collect();
    let c_norm_sq = 1.0 / (1.0 - 0.81) / 100.0;
    let bound = (c_norm_sq * 4.0 * (2.0 + (2.0f64 / 0.05).ln()) / 2.0).sqrt();
    let printed: f64 = row[8].parse().unwrap();
    assert!((printed - bound).abs() < 1e-12, "{printed} vs {bound}");
    let lower: f64 = row[10].parse().unwrap();
    assert!((lower - (5.0 - bound)).abs() < 1e-12);
}

#[test]
fn certify_rejects_bad_delta_and_missing_inputs() {
    for delta in ["0", "1", "1.5", "-0.1"] {
        let o = pbcert(&[
            "certify", "--kl", "1", "--delta", delta, "--tau-min", "1", "--trajectories", "5", "--horizon", "10",
            "--gamma", "0.9",
        ]);
        assert_eq!(o.code, 2, "delta {delta}");
        assert!(o.stderr.contains("delta"), "{}", o.stderr);
    }
    let no_kl = pbcert(&["certify", "--delta", "0.1", "--tau-min", "1", "--trajectories", "5", "--horizon", "10", "--gamma", "0.9"]);
    assert_eq!(no_kl.code, 2);
    let bad_gamma = pbcert(&[
        "certify", "--kl", "1", "--delta", "0.1", "--tau-min", "1", "--trajectories", "5", "--horizon", "10", "--gamma",
        "1.5",
    ]);
    assert_eq!(bad_gamma.code, 2, "{}", bad_gamma.stderr);
}

#[test]
fn certify_from_dataset_uses_its_size_and_return() {
    let dir = scratch("dataset");
    let path = dir.join("data.csv");
    let trajectories: Vec<Trajectory> = (0..4)
        .map(|i| Trajectory::from_rewards(if i % 2 == 0 { &[1.0; 3] } else { &[0.0; 3] }))
        .collect();
    let ds = TrajectoryDataset::new(trajectories, "test");
    write_dataset(&ds, fs::File::create(&path).unwrap()).unwrap();
    let o = pbcert(&[
        "certify", "--kl", "0", "--delta", "0.1", "--tau-min", "1", "--gamma", "0.5", "--dataset", path.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let row: Vec<&str> = o.stdout.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], "4");
    assert_eq!(row[4], "3");
    // Half the trajectories earn 1 + 0.5 + 0.25.
    let empirical: f64 = row[9].parse().unwrap();
    assert!((empirical - 0.875).abs() < 1e-12, "{empirical}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pbcert(&["frobnicate"]).code, 2);
    assert_eq!(pbcert(&["mixing"]).code, 2);
    assert_eq!(pbcert(&["mixing", "--chain", "nonsense"]).code, 2);
    assert_eq!(pbcert(&["verify-concentration", "--repeats", "0"]).code, 2);
    let o = pbcert(&["verify-concentration", "--env", "point_mass"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("not tabular"), "{}", o.stderr);
    let dir = scratch("usage");
    let o = pbcert(&["train", "--env", "chain5", "--steps", "0", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(o.code, 2);
    let cfg = dir.join("bad.toml");
    fs::write(&cfg, "sac.batch_sise = 3\n").unwrap();
    let o = pbcert(&["train", "--steps", "0", "--config", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("batch_sise"), "{}", o.stderr);
    fs::write(&cfg, "pb_learning_rate = -1.0\n").unwrap();
    let o = pbcert(&["train", "--steps", "0", "--config", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("pb_learning_rate"), "{}", o.stderr);
}

#[test]
fn verify_concentration_small_run_passes() {
    let o = pbcert(&["verify-concentration", "--repeats", "400", "--thresholds", "6", "--exec", "sequential"]);
    assert_eq!(o.code, 0, "{}\n{}", o.stdout, o.stderr);
    assert!(o.stdout.contains("threshold,observed,bound,std_error,flagged"));
    let tail_rows: Vec<&str> = o
        .stdout
        .lines()
        .skip_while(|l| !l.starts_with("threshold,"))
        .skip(1)
        .take_while(|l| !l.starts_with('#'))
        .collect();
    assert_eq!(tail_rows.len(), 6);
    assert!(tail_rows.iter().all(|r| r.ends_with(",false")), "{tail_rows:?}");
    assert!(o.stdout.trim_end().ends_with(",true"), "validity line should pass");
    let par = pbcert(&["verify-concentration", "--repeats", "400", "--thresholds", "6", "--exec", "parallel"]);
    assert_eq!(o.stdout, par.stdout);
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "pb_update_freq = 1000\npb_epochs = 2\nadaptation_steps = 2\nrollout_trajectories = 10\n\
         rollout_steps = 20\n[sac]\nlearning_starts = 500\neval_interval = 500\neval_episodes = 2\n\
         episode_horizon = 20\n[prior]\nupdate_period = 1000\n",
    )
    .unwrap();
    path
}

#[test]
fn train_with_zero_steps_writes_header_only_metrics() {
    let dir = scratch("train0");
    let o = pbcert(&["train", "--steps", "0", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics,
        "run_id,step,episodic_return,empirical_discounted_return,certified_lower_bound,kl,tau_min,kappa,phase\n"
    );
    let manifest = RunManifest::read(&dir).unwrap();
    assert!(manifest.finished_at_unix.is_some());
    assert!(manifest.config.contains("total_steps = 0"));
    assert!(dir.join("checkpoint/posterior.txt").exists());
}

#[test]
fn train_is_reproducible_across_runs_and_execution_modes() {
    let dir = scratch("repro");
    let cfg = small_config(&dir);
    let mut outputs = Vec::new();
    for (name, exec) in [("a", "sequential"), ("b", "sequential"), ("c", "parallel")] {
        let out = dir.join(name);
        let o = pbcert(&[
            "train", "--steps", "2000", "--seed", "7", "--exec", exec, "--config", cfg.to_str().unwrap(), "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        outputs.push((
            fs::read(out.join("metrics.csv")).unwrap(),
            fs::read(out.join("certificates.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let metrics = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let certs = String::from_utf8(outputs[0].1.clone()).unwrap();
    // The initial certificate plus cycles at steps 1000 and 2000.
    assert_eq!(certs.lines().count(), 4);
    let id = RunManifest::read(&dir.join("a")).unwrap().run_id;
    assert!(metrics.lines().skip(1).all(|l| l.starts_with(&format!("{id},"))));

    // A posterior checkpoint feeds `certify --posterior`.
    let posterior = dir.join("a/checkpoint/posterior.txt");
    let o = pbcert(&[
        "certify", "--posterior", posterior.to_str().unwrap(), "--delta", "0.1", "--tau-min", "5", "--trajectories", "10",
        "--horizon", "20", "--gamma", "0.99",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let kl: f64 = o.stdout.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(kl.is_finite() && kl >= 0.0);
}

#[test]
fn binary_honours_out_dir_environment_variable() {
    let dir = scratch("envvar");
    let status = Command::new(env!("CARGO_BIN_EXE_pbcert"))
        .args(["train", "--steps", "0"])
        .env(pbcert_cli::OUT_DIR_ENV, &dir)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(dir.join("manifest.json").exists());
    let bad = Command::new(env!("CARGO_BIN_EXE_pbcert")).arg("nope").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
