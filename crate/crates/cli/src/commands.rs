use std::path::{Path, PathBuf};

use bayesmap::experiments::{threshold_loss, ExperimentConfig};
use bayesmap::polybasis::gram_schmidt_empirical;
use bayesmap::rng::stream;
use bayesmap::transportmap::FittedFor;
use bayesmap::{
    bayes_action, diagnose, fit, marginal_credible_intervals, roc_curve, run_experiment,
    DecisionProblem, FitError, LikelihoodConfig, LikelihoodModel, PosteriorTarget, PriorConfig,
    PriorModel, Provenance, SampleSet, Target, TransportMap,
};
use serde::Serialize;

use crate::config::{
    parse_toml, read_toml, to_toml, BasisFamily, DataKind, DataSource, DecisionConfig, LossKind,
    RunConfig,
};
use crate::error::CliError;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub quiet: bool,
}

impl Globals {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn require_config(&self) -> Result<&Path, CliError> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::input("this command needs --config"))
    }

    fn out_dir(&self, from_config: Option<&Path>) -> Result<PathBuf, CliError> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| from_config.map(Path::to_owned))
            .unwrap_or_else(|| ".".into());
        std::fs::create_dir_all(&dir).map_err(|e| {
            CliError::input(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        Ok(dir)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    write_text(path, &text)
}

fn load_map(path: &Path) -> Result<TransportMap, CliError> {
    TransportMap::load(path).map_err(|e| CliError::input(e.to_string()))
}

fn map_source(map: &TransportMap, path: &Path) -> Result<PriorModel, CliError> {
    map.fitted_for
        .as_ref()
        .and_then(|f| f.source.clone())
        .ok_or_else(|| {
            CliError::input(format!(
                "map {} does not record its source distribution",
                path.display()
            ))
        })
}

fn draw(prior: &PriorModel, seed: u64, name: &str, n: usize) -> SampleSet {
    let data = prior.sample_with(&mut stream(seed, name), n);
    SampleSet::new(
        prior.dim(),
        data,
        Provenance {
            seed: Some(seed),
            source: format!("prior:{}:{name}", prior.kind_name()),
            map_hash: None,
        },
    )
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

/// Numeric CSV with a header row, returned as (header, rows).
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let row: Result<Vec<f64>, _> = rec.iter().map(parse_cell).collect();
        let row = row.map_err(|v| {
            CliError::input(format!(
                "{}: row {}: bad value `{v}`",
                path.display(),
                i + 2
            ))
        })?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn parse_cell(s: &str) -> Result<f64, String> {
    match s {
        "true" => Ok(1.0),
        "false" => Ok(0.0),
        _ => s.parse().map_err(|_| s.to_owned()),
    }
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::input(format!("{}: missing column `{name}`", path.display())))
}

fn as_label(v: f64, path: &Path) -> Result<u8, CliError> {
    match v {
        0.0 => Ok(0),
        1.0 => Ok(1),
        _ => Err(CliError::input(format!(
            "{}: labels must be 0 or 1, got {v}",
            path.display()
        ))),
    }
}

fn likelihood_from_data(src: &DataSource) -> Result<LikelihoodConfig, CliError> {
    let (header, rows) = read_table(&src.path)?;
    match src.kind {
        DataKind::LogisticRegression => {
            let lc = column(&header, "label", &src.path)?;
            let mut features = Vec::with_capacity(rows.len());
            let mut labels = Vec::with_capacity(rows.len());
            for r in &rows {
                labels.push(as_label(r[lc], &src.path)?);
                features.push(
                    r.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != lc)
                        .map(|(_, v)| *v)
                        .collect(),
                );
            }
            Ok(LikelihoodConfig::LogisticRegression { features, labels })
        }
        DataKind::PoissonCount => {
            let c = column(&header, "count", &src.path)?;
            let counts: Result<Vec<u64>, _> = rows
                .iter()
                .map(|r| {
                    let v = r[c];
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as u64)
                    } else {
                        Err(CliError::input(format!(
                            "{}: counts must be non-negative integers",
                            src.path.display()
                        )))
                    }
                })
                .collect();
            Ok(LikelihoodConfig::PoissonCount { counts: counts? })
        }
    }
}

struct Problem {
    prior: PriorModel,
    likelihood_cfg: LikelihoodConfig,
    target: PosteriorTarget,
}

fn build_problem(cfg: &RunConfig) -> Result<Problem, CliError> {
    let prior = PriorModel::from_config(cfg.prior.clone())?;
    let likelihood_cfg = match (&cfg.likelihood, &cfg.data) {
        (Some(l), None) => l.clone(),
        (None, Some(src)) => likelihood_from_data(src)?,
        _ => {
            return Err(CliError::input(
                "config needs exactly one of [likelihood] and [data]",
            ))
        }
    };
    let likelihood = LikelihoodModel::from_config(likelihood_cfg.clone())?;
    let target = PosteriorTarget::new(prior.clone(), likelihood)?;
    Ok(Problem {
        prior,
        likelihood_cfg,
        target,
    })
}

/// Closed-form posterior for independent Gamma priors with Poisson counts.
fn conjugate_posterior(prior: &PriorModel, likelihood: &LikelihoodConfig) -> Option<PriorModel> {
    match (prior.config(), likelihood) {
        (PriorConfig::Gamma { shape, scale }, LikelihoodConfig::PoissonCount { counts })
            if counts.len() == shape.len() =>
        {
            let shape = shape
                .iter()
                .zip(counts)
                .map(|(a, y)| a + *y as f64)
                .collect();
            let scale = scale.iter().map(|b| b / (1.0 + b)).collect();
            PriorModel::gamma(shape, scale).ok()
        }
        _ => None,
    }
}

fn load_run_config(g: &Globals) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = read_toml(g.require_config()?)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn finish_run_config(g: &Globals, mut cfg: RunConfig) -> Result<(RunConfig, PathBuf), CliError> {
    let dir = g.out_dir(cfg.out_dir.as_deref())?;
    cfg.out_dir = Some(dir.clone());
    write_text(&dir.join("resolved_config.toml"), &to_toml(&cfg)?)?;
    Ok((cfg, dir))
}

pub fn cmd_fit(g: &Globals) -> Result<(), CliError> {
    let cfg = load_run_config(g)?;
    let problem = build_problem(&cfg)?;
    let (cfg, dir) = finish_run_config(g, cfg)?;
    if cfg.n_train == 0 {
        return Err(CliError::input("n_train must be positive"));
    }
    let train = draw(&problem.prior, cfg.seed, "fit", cfg.n_train);
    let spec = match cfg.basis.family {
        BasisFamily::Prior => problem.prior.basis_for_samples(cfg.basis.degree, &train)?,
        BasisFamily::EmpiricalGram => {
            gram_schmidt_empirical(train.data(), train.dim(), cfg.basis.degree)?
        }
    };
    let fitted_for = FittedFor {
        source: Some(problem.prior.clone()),
        target: serde_json::to_string(&problem.likelihood_cfg).expect("likelihood serialises"),
    };
    let (outcome, failure) = match fit(&problem.target, &train, &spec, &cfg.solver) {
        Ok(o) => (o, None),
        Err(e @ (FitError::MaxIters(_) | FitError::LineSearchStall(_))) => {
            let o = e
                .outcome()
                .expect("non-converged fit keeps its outcome")
                .clone();
            let msg = e.to_string();
            (o, Some(CliError::numerical(msg)))
        }
        Err(e) => return Err(e.into()),
    };
    let mut map = outcome.map;
    map.fitted_for = Some(fitted_for);
    map.save(&dir.join("map.json"))
        .map_err(|e| CliError::input(e.to_string()))?;
    write_json(&dir.join("solve_report.json"), &outcome.report)?;
    g.say(format!(
        "fit: {:?} after {} iterations, objective {:.6}, map {}",
        outcome.report.termination,
        outcome.report.iterations,
        outcome.report.final_objective,
        dir.join("map.json").display()
    ));
    failure.map_or(Ok(()), Err)
}

pub fn cmd_sample(
    g: &Globals,
    map_path: &Path,
    n: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::input("--n must be positive"));
    }
    let map = load_map(map_path)?;
    let prior = map_source(&map, map_path)?;
    let seed = g.seed.unwrap_or(0);
    let pushed = map.push_samples(&draw(&prior, seed, "sample", n))?;
    let path = match out {
        Some(p) => p.to_owned(),
        None => g.out_dir(None)?.join("samples.csv"),
    };
    pushed.write_csv(&path)?;
    g.say(format!("sample: {n} rows written to {}", path.display()));
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseOutput<'a> {
    map_hash: String,
    #[serde(flatten)]
    report: &'a bayesmap::DiagnosticsReport,
}

pub fn cmd_diagnose(g: &Globals, map_path: &Path, n: Option<usize>) -> Result<(), CliError> {
    let map = load_map(map_path)?;
    let cfg = load_run_config(g)?;
    let problem = build_problem(&cfg)?;
    let (cfg, dir) = finish_run_config(g, cfg)?;
    let n = n.unwrap_or(cfg.n_eval);
    if n == 0 {
        return Err(CliError::input("--n must be positive"));
    }
    let eval = draw(&problem.prior, cfg.seed, "eval", n);
    let normalized = conjugate_posterior(&problem.prior, &problem.likelihood_cfg);
    let report = diagnose(
        &map,
        &problem.target,
        &problem.prior,
        &eval,
        normalized.as_ref().map(|p| p as &dyn Target),
    )?;
    write_json(
        &dir.join("diagnostics.json"),
        &DiagnoseOutput {
            map_hash: map.hash(),
            report: &report,
        },
    )?;
    if n >= 100 {
        let pushed = match map.push_samples(&eval) {
            Ok(s) => s,
            Err(bayesmap::MapError::InfeasibleRegion { pushed, .. }) => *pushed,
            Err(e) => return Err(e.into()),
        };
        let region = marginal_credible_intervals(&pushed, 0.05)?;
        write_text(&dir.join("intervals.csv"), &region.to_csv_string())?;
    }
    let kl = report
        .kl_estimate
        .map_or("n/a".to_owned(), |v| format!("{v:.6}"));
    g.say(format!(
        "diagnose: var_T {:.6}, log_beta_map {:.6}, log_beta_mc {:.6}, kl {kl}, excluded {}",
        report.var_t, report.log_beta_map, report.log_beta_mc, report.n_excluded
    ));
    Ok(())
}

#[derive(Serialize)]
struct DecideOutput {
    action_index: usize,
    action: Vec<f64>,
    expected_losses: Vec<f64>,
    n_samples: usize,
}

pub fn cmd_decide(g: &Globals, map_path: &Path) -> Result<(), CliError> {
    let cfg_path = g.require_config()?;
    let mut cfg: DecisionConfig = read_toml(cfg_path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let map = load_map(map_path)?;
    let d = map.dim();
    if let Some(a) = cfg.actions.iter().find(|a| a.len() != d) {
        return Err(CliError::input(format!(
            "action {a:?} has length {}, map dimension is {d}",
            a.len()
        )));
    }
    if cfg.n == 0 {
        return Err(CliError::input("n must be positive"));
    }
    let prior = map_source(&map, map_path)?;
    let dir = g.out_dir(None)?;
    write_text(&dir.join("resolved_config.toml"), &to_toml(&cfg)?)?;
    let tau = cfg.tau;
    let problem = match cfg.loss {
        LossKind::Squared => {
            DecisionProblem::new(cfg.actions.clone(), |a: &Vec<f64>, x: &[f64]| {
                a.iter().zip(x).map(|(u, v)| (u - v) * (u - v)).sum()
            })
        }
        LossKind::Absolute => {
            DecisionProblem::new(cfg.actions.clone(), |a: &Vec<f64>, x: &[f64]| {
                a.iter().zip(x).map(|(u, v)| (u - v).abs()).sum()
            })
        }
        LossKind::Threshold => {
            DecisionProblem::new(cfg.actions.clone(), move |a: &Vec<f64>, x: &[f64]| {
                let claims: Vec<bool> = a.iter().map(|v| *v != 0.0).collect();
                threshold_loss(&claims, x, tau)
            })
        }
    }?;
    let posterior = map.push_samples(&draw(&prior, cfg.seed, "decide", cfg.n))?;
    let decision = bayes_action(&problem, &posterior)?;
    let out = DecideOutput {
        action_index: decision.action,
        action: cfg.actions[decision.action].clone(),
        expected_losses: decision.expected_losses,
        n_samples: cfg.n,
    };
    write_json(&dir.join("decision.json"), &out)?;
    g.say(format!(
        "decide: action {} {:?}",
        out.action_index, out.action
    ));
    Ok(())
}

pub fn cmd_roc(g: &Globals, scores_path: &Path) -> Result<(), CliError> {
    let (header, rows) = read_table(scores_path)?;
    let sc = column(&header, "score", scores_path)?;
    let lc = column(&header, "label", scores_path)?;
    let scores: Vec<f64> = rows.iter().map(|r| r[sc]).collect();
    let labels: Result<Vec<bool>, _> = rows
        .iter()
        .map(|r| as_label(r[lc], scores_path).map(|l| l == 1))
        .collect();
    let roc = roc_curve(&scores, &labels?)?;
    let dir = g.out_dir(None)?;
    write_text(&dir.join("roc.csv"), &roc.to_csv_string())?;
    g.say(format!("AUC {}", roc.auc));
    Ok(())
}

fn experiment_config(g: &Globals, scenario: &str) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &g.config {
        None => ExperimentConfig::default_for(scenario)?,
        Some(path) => {
            let mut table: toml::Table = read_toml(path)?;
            match table.get("scenario").and_then(|v| v.as_str()) {
                Some(s) if s != scenario => {
                    return Err(CliError::input(format!(
                        "config {} is for scenario `{s}`, not `{scenario}`",
                        path.display()
                    )))
                }
                _ => {}
            }
            ExperimentConfig::default_for(scenario)?;
            table.insert("scenario".into(), scenario.into());
            parse_toml(&toml::to_string(&table).expect("table serialises"), path)?
        }
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

pub fn cmd_experiment(g: &Globals, scenario: &str) -> Result<(), CliError> {
    let cfg = experiment_config(g, scenario)?;
    let dir = g.out_dir(None)?;
    write_text(&dir.join("resolved_config.toml"), &to_toml(&cfg)?)?;
    let report = run_experiment(&cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("trials.csv"), &report.trials_csv())?;
    let summary: Vec<String> = report
        .metrics
        .0
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect();
    g.say(format!(
        "experiment {}: {}",
        report.scenario,
        summary.join(" ")
    ));
    Ok(())
}
