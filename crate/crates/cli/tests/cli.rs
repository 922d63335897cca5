use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const GAMMA_POISSON: &str = r#"
seed = 3
n_train = 1000

[prior]
kind = "gamma"
shape = [2.0]
scale = [0.5]

[likelihood]
kind = "poisson_count"
counts = [1]

[basis]
degree = 5
"#;

fn bayesmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayesmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the Gamma-Poisson config and fits it into `dir/fit`.
fn fitted(dir: &TempDir) -> std::path::PathBuf {
    std::fs::write(dir.path().join("gp.toml"), GAMMA_POISSON).unwrap();
    let o = bayesmap(
        dir.path(),
        &["--quiet", "--config", "gp.toml", "--out-dir", "fit", "fit"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    dir.path().join("fit/map.json")
}

#[test]
fn fit_writes_map_report_and_resolved_config() {
    let dir = TempDir::new().unwrap();
    let map = fitted(&dir);
    assert!(map.exists());
    let out = dir.path().join("fit");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("solve_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["termination"], "converged");
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("grad_tol"));
}

#[test]
fn misspelt_solver_key_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        format!("{GAMMA_POISSON}\n[solver]\ngraad_tol = 1e-6\n"),
    )
    .unwrap();
    let o = bayesmap(dir.path(), &["--config", "bad.toml", "fit"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("graad_tol"), "{}", stderr(&o));
    assert!(!dir.path().join("map.json").exists());
}

#[test]
fn unreadable_data_file_names_the_path() {
    let dir = TempDir::new().unwrap();
    let cfg = GAMMA_POISSON.replace(
        "[likelihood]\nkind = \"poisson_count\"\ncounts = [1]\n",
        "[data]\nkind = \"poisson_count\"\npath = \"missing_counts.csv\"\n",
    );
    assert_ne!(cfg, GAMMA_POISSON);
    std::fs::write(dir.path().join("gp.toml"), cfg).unwrap();
    let o = bayesmap(dir.path(), &["--config", "gp.toml", "fit"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing_counts.csv"), "{}", stderr(&o));
}

#[test]
fn samples_are_nonnegative_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let map = fitted(&dir);
    let map = map.to_str().unwrap();
    for name in ["a.csv", "b.csv"] {
        let o = bayesmap(
            dir.path(),
            &[
                "--quiet", "--seed", "9", "sample", "--map", map, "--n", "2000", "--out", name,
            ],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(
        a,
        std::fs::read_to_string(dir.path().join("b.csv")).unwrap()
    );
    let mut rdr = csv::Reader::from_reader(a.as_bytes());
    let values: Vec<f64> = rdr
        .records()
        .map(|r| r.unwrap()[0].parse().unwrap())
        .collect();
    assert_eq!(values.len(), 2000);
    assert!(values.iter().all(|v| *v >= 0.0));
}

#[test]
fn zero_samples_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let map = fitted(&dir);
    let o = bayesmap(
        dir.path(),
        &["sample", "--map", map.to_str().unwrap(), "--n", "0"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diagnose_reports_small_kl() {
    let dir = TempDir::new().unwrap();
    let map = fitted(&dir);
    let o = bayesmap(
        dir.path(),
        &[
            "--quiet",
            "--config",
            "gp.toml",
            "--out-dir",
            "diag",
            "diagnose",
            "--map",
            map.to_str().unwrap(),
            "--n",
            "5000",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("diag/diagnostics.json")).unwrap(),
    )
    .unwrap();
    assert!(d["kl_estimate"].as_f64().unwrap() < 0.05, "{d}");
    assert!(dir.path().join("diag/intervals.csv").exists());
}

#[test]
fn experiment_report_has_the_expected_keys() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "n_train = [100]\nreplicates = 1\nn_eval = 1000\nks_samples = 200\n",
    )
    .unwrap();
    let o = bayesmap(
        dir.path(),
        &[
            "--quiet",
            "--config",
            "exp.toml",
            "--out-dir",
            "exp",
            "experiment",
            "gamma_poisson",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("exp/report.json")).unwrap())
            .unwrap();
    assert_eq!(rep["scenario"], "gamma_poisson");
    for key in [
        "var_T",
        "kl",
        "ks",
        "log_beta_map",
        "log_beta_mc",
        "log_beta_true",
    ] {
        assert!(rep["metrics"].get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("exp/trials.csv").exists());
    assert!(dir.path().join("exp/resolved_config.toml").exists());

    let o = bayesmap(dir.path(), &["experiment", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn roc_of_the_hand_example() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("s.csv"),
        "score,label\n0.9,1\n0.8,0\n0.3,true\n0.1,false\n",
    )
    .unwrap();
    let o = bayesmap(
        dir.path(),
        &["--out-dir", "roc", "roc", "--scores", "s.csv"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("AUC 0.75"));
    assert!(dir.path().join("roc/roc.csv").exists());
}

#[test]
fn decide_picks_the_posterior_mean_action() {
    let dir = TempDir::new().unwrap();
    let map = fitted(&dir);
    std::fs::write(
        dir.path().join("d.toml"),
        "seed = 3\nloss = \"squared\"\nactions = [[0.5], [1.0], [1.5]]\n",
    )
    .unwrap();
    let o = bayesmap(
        dir.path(),
        &[
            "--quiet",
            "--config",
            "d.toml",
            "--out-dir",
            "dec",
            "decide",
            "--map",
            map.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("dec/decision.json")).unwrap(),
    )
    .unwrap();
    // posterior Gamma(3, 1/3) has mean 1
    assert_eq!(d["action_index"], 1);
}

#[test]
fn decide_without_actions_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let map = fitted(&dir);
    std::fs::write(
        dir.path().join("d.toml"),
        "loss = \"squared\"\nactions = []\n",
    )
    .unwrap();
    let o = bayesmap(
        dir.path(),
        &[
            "--config",
            "d.toml",
            "decide",
            "--map",
            map.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_bad_threads_exit_with_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bayesmap(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        bayesmap(dir.path(), &["--threads", "0", "roc", "--scores", "x.csv"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(bayesmap(dir.path(), &["--help"]).status.code(), Some(0));
}
