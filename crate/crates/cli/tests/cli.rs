use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tracedyn(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tracedyn"));
    cmd.args(args).env_remove("TRACEDYN_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    tracedyn(&args, &[])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const HARMONIC: &str = r#"
experiment = "conservation"
seed = 5

[system]
dim = 2
bosonic = ["1"]
hamiltonian = "tr(p1 p1) + tr(q1 q1)"

[dynamics]
t_final = 1.0
dt = 1e-3
record_every = 50
"#;

#[test]
fn harmonic_conservation_passes_and_writes_drift_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "h.toml", HARMONIC);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS conservation"));
    let drift = fs::read_to_string(out.join("drift.csv")).unwrap();
    assert!(drift.starts_with("hamiltonian,h_drift,n_drift,ctilde_norm_drift,"));
    assert!(drift.lines().nth(1).unwrap().ends_with(",true"));
    let m = manifest(&out);
    assert_eq!(m["experiment"], "conservation");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["passed"], true);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["config"]["dynamics"]["t_final"], 1.0);
    assert_eq!(m["config"]["system"]["hamiltonian"], "tr(p1 p1) + tr(q1 q1)");
    let names: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["charges.csv", "drift.csv", "summary.json"]);
    let text = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(!text.contains("time\""), "manifest carries no timestamps");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        "born.toml",
        "experiment = \"collapse_born\"\nseed = 3\n[collapse]\nn_traj = 200\nt_final = 1.0\ngamma = 10.0\n",
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run(&cfg, &a, &[]).status.code();
    assert!(matches!(first, Some(0 | 1)));
    assert_eq!(run(&cfg, &b, &["--force"]).status.code(), first);
    for name in ["trajectories.csv", "born.csv", "martingale.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(manifest(&a)["config_sha256"], manifest(&b)["config_sha256"]);
    assert_eq!(manifest(&a)["artifacts"], manifest(&b)["artifacts"]);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "h.toml", HARMONIC);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&cfg, &a, &[]).status.code(), Some(0));
    assert_eq!(run(&cfg, &b, &["--seed", "6"]).status.code(), Some(0));
    assert_eq!(manifest(&b)["seed"], 6);
    assert_ne!(manifest(&a)["config_sha256"], manifest(&b)["config_sha256"]);
    assert_ne!(fs::read(a.join("charges.csv")).unwrap(), fs::read(b.join("charges.csv")).unwrap());
}

#[test]
fn rerun_needs_force() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "h.toml", HARMONIC);
    let out = tmp.path().join("out");
    assert_eq!(run(&cfg, &out, &[]).status.code(), Some(0));
    let before = fs::read(out.join("manifest.json")).unwrap();
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(run(&cfg, &out, &["--force"]).status.code(), Some(0));
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), before);
}

#[test]
fn collapse_without_noise_fails_with_exit_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        "g0.toml",
        "experiment = \"collapse_born\"\n[collapse]\ngamma = 0.0\nn_traj = 50\nt_final = 0.5\n",
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL collapse_born"));
    assert_eq!(manifest(&out)["passed"], false);
    let traj = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 51);
    assert!(traj.lines().skip(1).all(|l| l.split(',').nth(1) == Some("")));
}

#[test]
fn misspelled_key_is_named_with_its_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "bad.toml", "experiment = \"conservation\"\n[dynamics]\nt_finall = 2.0\n");
    let o = run(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("t_finall") && e.contains("line 3"), "{e}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn odd_dimension_with_lambda_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        "odd.toml",
        "experiment = \"ward\"\n[system]\ndim = 3\n[ensemble]\nlambda_hat = 1.0\n",
    );
    let o = tracedyn(&["validate", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("must be even") && e.contains("line 5"), "{e}");
}

#[test]
fn unknown_experiment_and_bad_polynomial_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "a.toml", "experiment = \"warp\"\n");
    let o = tracedyn(&["validate", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown experiment `warp`"));
    let cfg = write_config(&tmp, "b.toml", "experiment = \"liouville\"\n[system]\nhamiltonian = \"tr(q1 q1\"\n");
    let o = tracedyn(&["validate", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("malformed polynomial") && e.contains("line 3"), "{e}");
}

#[test]
fn missing_output_directory_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "h.toml", HARMONIC);
    let o = tracedyn(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn validate_and_list() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "h.toml", HARMONIC);
    let o = tracedyn(&["validate", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("valid conservation config, sha256 "));
    let o = tracedyn(&["list"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 9);
    assert!(stdout(&o).contains("degenerate_contrast"));
}

#[test]
fn thread_cap_is_validated() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "h.toml", HARMONIC);
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out"];
    let a = tmp.path().join("a");
    let o = tracedyn(&[&args[..], &[a.to_str().unwrap()]].concat(), &[("TRACEDYN_THREADS", "0")]);
    assert_eq!(o.status.code(), Some(2));
    let o = tracedyn(&[&args[..], &[a.to_str().unwrap()]].concat(), &[("TRACEDYN_THREADS", "1")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn smoke(text: &str, artifacts: &[&str]) {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "c.toml", text);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), stderr(&o));
    for name in artifacts {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn liouville_small() {
    smoke(
        "experiment = \"liouville\"\n[system]\nbosonic = [\"a\", \"b\"]\n[dynamics]\nrandom_hamiltonians = 2\npoints = 5\nalgebra_cases = 10\n",
        &["divergence.csv", "jacobi.csv", "derivative.csv", "summary.json"],
    );
}

#[test]
fn conservation_with_fermions() {
    smoke(
        "experiment = \"conservation\"\nseed = 2\n[system]\nbosonic = [\"a\"]\nfermionic = [\"f\"]\n[dynamics]\nt_final = 0.5\nrandom_hamiltonians = 2\n",
        &["charges.csv", "drift.csv"],
    );
}

#[test]
fn ensemble_experiments_small() {
    smoke(
        "experiment = \"ensemble_gaussian\"\nseed = 1\n[ensemble]\nn_samples = 20000\nburn_in = 2000\n",
        &["averages.csv", "chains.json", "summary.json"],
    );
    smoke(
        "experiment = \"ward\"\nseed = 1\n[ensemble]\nlambda_hat = 0.3\nn_samples = 20000\nburn_in = 2000\nwrite_samples = true\n",
        &["ward_terms.csv", "ward_summary.csv", "samples.jsonl"],
    );
    smoke(
        "experiment = \"hbar\"\nseed = 1\n[system]\nbosonic = [\"1\", \"2\"]\n[ensemble]\nlambda_hat = 0.3\nn_samples = 10000\nburn_in = 2000\n[ensemble.commutator]\nw = \"tr(p1)\"\nx = \"q1\"\n",
        &["gauge.csv", "mean_ctilde.csv", "commutator.csv"],
    );
    smoke(
        "experiment = \"noise_bridge\"\nseed = 1\n[ensemble]\nlambda_hat = 0.3\nn_samples = 5000\nburn_in = 1000\n",
        &["noise.csv", "summary.json"],
    );
}

#[test]
fn noise_bridge_from_dynamics() {
    smoke(
        "experiment = \"noise_bridge\"\n[system]\nbosonic = [\"1\", \"2\"]\nhamiltonian = \"tr(p1 p1) + tr(q1 q1) + tr(p2 p2) + tr(q2 q2) + 0.2 * tr(q1 q1 q2 q2)\"\n[dynamics]\nt_final = 2.0\nrecord_every = 20\n[noise]\nsource = \"dynamics\"\nlags = 5\n",
        &["noise.csv"],
    );
}

#[test]
fn collapse_experiments_small() {
    smoke(
        "experiment = \"collapse_lindblad\"\n[collapse]\ninitial = [0.6, 0.8]\ngamma = 1.0\nn_traj = 300\nt_final = 1.0\ncheckpoints = 4\n",
        &["density.csv", "norm_rate.csv"],
    );
    smoke(
        "experiment = \"degenerate_contrast\"\n[collapse]\nn_traj = 100\nt_final = 1.0\n",
        &["branches.csv", "csl_trajectories.csv"],
    );
    smoke(
        "experiment = \"collapse_born\"\n[collapse]\nmode = \"csl\"\nenergies = [0.0, 0.0, 1.0]\ninitial = [1.0, 1.0, 1.0]\nn_traj = 300\n",
        &["born.csv"],
    );
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let o = tracedyn(&["validate", "--config", p.to_str().unwrap()], &[]);
            assert_eq!(o.status.code(), Some(0), "{}: {}", p.display(), stderr(&o));
            n += 1;
        }
    }
    assert!(n >= 9);
}
