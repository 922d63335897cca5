//! Preset end-to-end scenarios on synthetic data. Each run returns an
//! [`ExperimentReport`] holding named metrics and one row per trial.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::diagnostics::{self, DiagError, DiagnosticsReport};
use crate::inference::{self, DecisionProblem, InferenceError};
use crate::linalg;
use crate::models::{map_estimate, LikelihoodModel, ModelError, PosteriorTarget, PriorModel};
use crate::polybasis::BasisSpec;
use crate::rng::{stream, trial_seed, StreamRng};
use crate::samples::{Provenance, SampleSet};
use crate::solver::{fit, fit_second_stage, ChainError, FitError, FitOptions, StageBasis};
use crate::stats;
use crate::transportmap::{MapError, TransportMap};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Diagnostics(#[from] DiagError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::InvalidConfig(msg.into())
}

/// Named real values. Serialised as a JSON object whose non-finite entries
/// are the strings `"inf"`, `"-inf"` and `"nan"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics(pub BTreeMap<String, f64>);

impl Metrics {
    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.0.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MetricRepr {
    Num(f64),
    Text(String),
}

impl Serialize for Metrics {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr: BTreeMap<&String, MetricRepr> = self
            .0
            .iter()
            .map(|(k, v)| {
                let r = match *v {
                    v if v.is_finite() => MetricRepr::Num(v),
                    v if v.is_nan() => MetricRepr::Text("nan".into()),
                    v if v > 0.0 => MetricRepr::Text("inf".into()),
                    _ => MetricRepr::Text("-inf".into()),
                };
                (k, r)
            })
            .collect();
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Metrics {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = BTreeMap::<String, MetricRepr>::deserialize(d)?;
        let mut out = BTreeMap::new();
        for (k, r) in repr {
            let v = match r {
                MetricRepr::Num(v) => v,
                MetricRepr::Text(t) => match t.as_str() {
                    "inf" => f64::INFINITY,
                    "-inf" => f64::NEG_INFINITY,
                    "nan" => f64::NAN,
                    other => {
                        return Err(serde::de::Error::custom(format!(
                            "bad metric value `{other}`"
                        )))
                    }
                },
            };
            out.insert(k, v);
        }
        Ok(Metrics(out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed: u64,
    pub metrics: Metrics,
    /// One row per trial (or per test point, for the logistic scenario).
    pub trials: Vec<Metrics>,
    pub n_trials: usize,
    pub n_failed: usize,
    /// Error message of every failed trial, prefixed by its index.
    pub failures: Vec<String>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub wall_time_s: f64,
}

impl ExperimentReport {
    /// Trial rows as CSV, one column per key seen in any row.
    pub fn trials_csv(&self) -> String {
        let mut keys: Vec<&String> = self.trials.iter().flat_map(|r| r.0.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut out = keys
            .iter()
            .map(|k| k.as_str())
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in &self.trials {
            let cells: Vec<String> = keys
                .iter()
                .map(|k| row.0.get(*k).map_or(String::new(), |v| format!("{v:?}")))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum ExperimentConfig {
    GammaPoisson(GammaPoissonConfig),
    UniformExample(UniformConfig),
    SparseThreshold(SparseThresholdConfig),
    LogisticSim(LogisticConfig),
    SpectralStaging(SpectralConfig),
}

pub const SCENARIOS: [&str; 5] = [
    "gamma_poisson",
    "uniform_example",
    "sparse_threshold",
    "logistic_sim",
    "spectral_staging",
];

impl ExperimentConfig {
    pub fn default_for(scenario: &str) -> Result<Self, ExperimentError> {
        Ok(match scenario {
            "gamma_poisson" => Self::GammaPoisson(Default::default()),
            "uniform_example" => Self::UniformExample(Default::default()),
            "sparse_threshold" => Self::SparseThreshold(Default::default()),
            "logistic_sim" => Self::LogisticSim(Default::default()),
            "spectral_staging" => Self::SpectralStaging(Default::default()),
            other => return Err(ExperimentError::UnknownScenario(other.into())),
        })
    }

    pub fn scenario(&self) -> &'static str {
        match self {
            Self::GammaPoisson(_) => SCENARIOS[0],
            Self::UniformExample(_) => SCENARIOS[1],
            Self::SparseThreshold(_) => SCENARIOS[2],
            Self::LogisticSim(_) => SCENARIOS[3],
            Self::SpectralStaging(_) => SCENARIOS[4],
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::GammaPoisson(c) => c.seed,
            Self::UniformExample(c) => c.seed,
            Self::SparseThreshold(c) => c.seed,
            Self::LogisticSim(c) => c.seed,
            Self::SpectralStaging(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::GammaPoisson(c) => c.seed = seed,
            Self::UniformExample(c) => c.seed = seed,
            Self::SparseThreshold(c) => c.seed = seed,
            Self::LogisticSim(c) => c.seed = seed,
            Self::SpectralStaging(c) => c.seed = seed,
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    match cfg {
        ExperimentConfig::GammaPoisson(c) => run_gamma_poisson(c),
        ExperimentConfig::UniformExample(c) => run_uniform_example(c),
        ExperimentConfig::SparseThreshold(c) => run_sparse_threshold(c),
        ExperimentConfig::LogisticSim(c) => run_logistic_sim(c),
        ExperimentConfig::SpectralStaging(c) => run_spectral_staging(c),
    }
}

fn check_counts(pairs: &[(&str, usize)]) -> Result<(), ExperimentError> {
    for (name, v) in pairs {
        if *v == 0 {
            return Err(invalid(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

fn prior_samples(
    prior: &PriorModel,
    rng: &mut StreamRng,
    n: usize,
    seed: u64,
    name: &str,
) -> SampleSet {
    let data = prior.sample_with(rng, n);
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

/// Push samples, keeping the result even when some rows are infeasible.
fn push_lenient(map: &TransportMap, samples: &SampleSet) -> Result<SampleSet, MapError> {
    push_counted(map, samples).map(|(s, _)| s)
}

/// Like [`push_lenient`], also returning the number of infeasible rows when
/// it exceeds the strict limit (zero otherwise).
fn push_counted(map: &TransportMap, samples: &SampleSet) -> Result<(SampleSet, usize), MapError> {
    match map.push_samples(samples) {
        Ok(s) => Ok((s, 0)),
        Err(MapError::InfeasibleRegion {
            pushed, violations, ..
        }) => Ok((*pushed, violations)),
        Err(e) => Err(e),
    }
}

fn mean_of(rows: &[&Metrics], key: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.get(key)).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

type TrialResult = Result<(Metrics, Option<DiagnosticsReport>), ExperimentError>;

struct Collected {
    rows: Vec<Metrics>,
    diags: Vec<Option<DiagnosticsReport>>,
    failures: Vec<String>,
}

fn collect(results: Vec<TrialResult>) -> Collected {
    let mut c = Collected {
        rows: Vec::new(),
        diags: Vec::new(),
        failures: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((m, d)) => {
                c.rows.push(m);
                c.diags.push(d);
            }
            Err(e) => c.failures.push(format!("trial {i}: {e}")),
        }
    }
    c
}

// ---------------------------------------------------------------------------
// gamma prior, Poisson count

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaPoissonConfig {
    pub seed: u64,
    pub shape: f64,
    pub scale: f64,
    pub y: u64,
    pub degree: usize,
    /// Training sample sizes swept over.
    pub n_train: Vec<usize>,
    /// Independent replicates per training size.
    pub replicates: usize,
    /// Fresh prior samples for `var_T`, KL and the Monte Carlo `log beta`.
    pub n_eval: usize,
    /// Pushed samples used for the KS statistic.
    pub ks_samples: usize,
    pub fit: FitOptions,
}

impl Default for GammaPoissonConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: 2.0,
            scale: 0.5,
            y: 1,
            degree: 5,
            n_train: vec![50, 100, 500, 1000],
            replicates: 5,
            n_eval: 10_000,
            ks_samples: 2000,
            fit: FitOptions::default(),
        }
    }
}

/// `log` of the marginal likelihood of one Poisson count under a Gamma prior.
pub fn gamma_poisson_log_evidence(shape: f64, scale: f64, y: u64) -> f64 {
    let y = y as f64;
    statrs::function::gamma::ln_gamma(shape + y)
        - statrs::function::gamma::ln_gamma(shape)
        - statrs::function::gamma::ln_gamma(y + 1.0)
        + y * scale.ln()
        - (shape + y) * (1.0 + scale).ln()
}

pub fn run_gamma_poisson(cfg: &GammaPoissonConfig) -> Result<ExperimentReport, ExperimentError> {
    let start = Instant::now();
    if cfg.n_train.is_empty() {
        return Err(invalid("n_train must list at least one size"));
    }
    for n in &cfg.n_train {
        check_counts(&[("n_train", *n)])?;
    }
    check_counts(&[
        ("degree", cfg.degree),
        ("replicates", cfg.replicates),
        ("n_eval", cfg.n_eval),
        ("ks_samples", cfg.ks_samples),
    ])?;
    cfg.fit.validate()?;
    let prior = PriorModel::gamma(vec![cfg.shape], vec![cfg.scale])?;
    let target = PosteriorTarget::new(prior.clone(), LikelihoodModel::poisson_count(vec![cfg.y])?)?;
    let post_shape = cfg.shape + cfg.y as f64;
    let post_scale = cfg.scale / (cfg.scale + 1.0);
    let posterior = PriorModel::gamma(vec![post_shape], vec![post_scale])?;
    let spec = prior.default_basis(cfg.degree)?;

    let jobs: Vec<(usize, usize)> = cfg
        .n_train
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let results: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(n, rep)| {
            // replicate r shares its draws across training sizes
            let ts = trial_seed(cfg.seed, rep);
            let train = prior_samples(&prior, &mut stream(ts, "train"), n, ts, "train");
            let out = fit(&target, &train, &spec, &cfg.fit)?;
            let eval = prior_samples(&prior, &mut stream(ts, "eval"), cfg.n_eval, ts, "eval");
            let diag = diagnostics::diagnose(&out.map, &target, &prior, &eval, Some(&posterior))?;
            let ks_src = prior_samples(&prior, &mut stream(ts, "ks"), cfg.ks_samples, ts, "ks");
            let pushed = push_lenient(&out.map, &ks_src)?;
            let ks = stats::ks_statistic(&pushed.column(0), |v| {
                stats::gamma_cdf(post_shape, post_scale, v)
            });
            let mut m = Metrics::default();
            m.set("n", n as f64);
            m.set("replicate", rep as f64);
            m.set("var_T", diag.var_t);
            m.set("kl", diag.kl_estimate.unwrap_or(f64::NAN));
            m.set("ks", ks);
            m.set("log_beta_map", diag.log_beta_map);
            m.set("log_beta_mc", diag.log_beta_mc);
            m.set("n_excluded", diag.n_excluded as f64);
            m.set("iterations", out.report.iterations as f64);
            Ok((m, Some(diag)))
        })
        .collect();
    let c = collect(results);

    let mut metrics = Metrics::default();
    metrics.set(
        "log_beta_true",
        gamma_poisson_log_evidence(cfg.shape, cfg.scale, cfg.y),
    );
    let largest = *cfg.n_train.iter().max().unwrap_or(&0);
    for &n in &cfg.n_train {
        let rows: Vec<&Metrics> = c
            .rows
            .iter()
            .filter(|r| r.get("n") == Some(n as f64))
            .collect();
        for key in ["var_T", "kl", "ks", "log_beta_map", "log_beta_mc"] {
            let v = mean_of(&rows, key);
            metrics.set(format!("{key}@n={n}"), v);
            if n == largest {
                metrics.set(key, v);
            }
        }
    }
    let diagnostics = c
        .rows
        .iter()
        .zip(&c.diags)
        .find(|(r, _)| r.get("n") == Some(largest as f64))
        .and_then(|(_, d)| d.clone());
    metrics.set("n_failed", c.failures.len() as f64);
    Ok(ExperimentReport {
        scenario: "gamma_poisson".into(),
        seed: cfg.seed,
        metrics,
        n_trials: jobs.len(),
        n_failed: c.failures.len(),
        trials: c.rows,
        failures: c.failures,
        diagnostics,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// uniform to uniform

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniformConfig {
    pub seed: u64,
    pub source: (f64, f64),
    pub target: (f64, f64),
    pub degree: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Points of the central 99% grid for the sup-norm check.
    pub grid: usize,
    pub fit: FitOptions,
}

impl Default for UniformConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: (0.0, 2.0),
            target: (0.0, 1.0),
            degree: 5,
            n_train: 2000,
            n_eval: 10_000,
            grid: 1000,
            fit: FitOptions::default(),
        }
    }
}

pub fn run_uniform_example(cfg: &UniformConfig) -> Result<ExperimentReport, ExperimentError> {
    let start = Instant::now();
    check_counts(&[
        ("degree", cfg.degree),
        ("n_train", cfg.n_train),
        ("n_eval", cfg.n_eval),
        ("grid", cfg.grid),
    ])?;
    let (a, b) = cfg.source;
    let (c, d) = cfg.target;
    let source = PriorModel::uniform_box(vec![a], vec![b])?;
    let target = PriorModel::uniform_box(vec![c], vec![d])?;
    let spec = source.default_basis(cfg.degree)?;
    let train = prior_samples(
        &source,
        &mut stream(cfg.seed, "train"),
        cfg.n_train,
        cfg.seed,
        "train",
    );
    let out = fit(&target, &train, &spec, &cfg.fit)?;
    let affine = |x: f64| c + (d - c) * (x - a) / (b - a);
    let mut sup = 0.0f64;
    for i in 0..cfg.grid {
        let u = 0.005 + 0.99 * i as f64 / (cfg.grid - 1).max(1) as f64;
        let x = a + (b - a) * u;
        sup = sup.max((out.map.apply(&[x])?[0] - affine(x)).abs());
    }
    let eval = prior_samples(
        &source,
        &mut stream(cfg.seed, "eval"),
        cfg.n_eval,
        cfg.seed,
        "eval",
    );
    let mut metrics = Metrics::default();
    metrics.set("sup_deviation", sup);
    metrics.set(
        "var_T",
        diagnostics::variance_of_t(&out.map, &target, &source, &eval)?,
    );
    metrics.set(
        "kl",
        diagnostics::kl_source_to_induced(&out.map, &source, &target, &eval)?,
    );
    metrics.set("iterations", out.report.iterations as f64);
    metrics.set("final_objective", out.report.final_objective);
    Ok(ExperimentReport {
        scenario: "uniform_example".into(),
        seed: cfg.seed,
        metrics,
        trials: Vec::new(),
        n_trials: 1,
        n_failed: 0,
        failures: Vec::new(),
        diagnostics: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// sparse thresholding with a Laplace prior

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseThresholdConfig {
    pub seed: u64,
    pub dim: usize,
    pub laplace_scale: f64,
    pub noise_var: f64,
    pub trials: usize,
    /// Per-component prior mass inside `[-tau, tau]`.
    pub mass: f64,
    /// Gaussian base samples training the Gaussian-to-Laplace stage.
    pub n_train_base: usize,
    /// Leading base samples (pushed through the first stage) training the
    /// prior-to-posterior stage.
    pub n_train: usize,
    /// Base samples pushed through both stages for the Bayes action.
    pub n_eval: usize,
    /// Degree of the Gaussian-to-Laplace stage (Hermite basis).
    pub base_degree: usize,
    /// Degree of the prior-to-posterior stage (empirical Gram basis).
    pub degree: usize,
    /// Pseudo-Huber width replacing `|x|` in the Laplace log-density.
    pub smoothing: f64,
    pub fit: FitOptions,
}

impl Default for SparseThresholdConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 3,
            laplace_scale: std::f64::consts::FRAC_1_SQRT_2,
            noise_var: 0.1,
            trials: 200,
            mass: 0.95,
            n_train_base: 3000,
            n_train: 1000,
            n_eval: 2000,
            base_degree: 3,
            degree: 1,
            smoothing: 1e-2,
            fit: FitOptions::default(),
        }
    }
}

/// Half-width of the symmetric interval holding `mass` of a Laplace(0, b) law.
pub fn laplace_threshold(scale: f64, mass: f64) -> f64 {
    -scale * (1.0 - mass).ln()
}

/// All `2^d` binary action vectors, in counting order (bit `j` is component `j`).
pub fn binary_actions(d: usize) -> Vec<Vec<bool>> {
    (0..1usize << d)
        .map(|k| (0..d).map(|j| k >> j & 1 == 1).collect())
        .collect()
}

/// Number of components where `a_j` disagrees with `|x_j| > tau`.
pub fn threshold_loss(a: &[bool], x: &[f64], tau: f64) -> f64 {
    a.iter()
        .zip(x)
        .filter(|(aj, xj)| **aj != (xj.abs() > tau))
        .count() as f64
}

pub fn run_sparse_threshold(
    cfg: &SparseThresholdConfig,
) -> Result<ExperimentReport, ExperimentError> {
    let start = Instant::now();
    check_counts(&[
        ("dim", cfg.dim),
        ("trials", cfg.trials),
        ("n_train_base", cfg.n_train_base),
        ("n_train", cfg.n_train),
        ("n_eval", cfg.n_eval),
        ("base_degree", cfg.base_degree),
        ("degree", cfg.degree),
    ])?;
    if cfg.n_train > cfg.n_train_base {
        return Err(invalid("n_train cannot exceed n_train_base"));
    }
    if cfg.dim > 10 {
        return Err(invalid("dim above 10 makes the action set too large"));
    }
    if !(cfg.mass > 0.0 && cfg.mass < 1.0) {
        return Err(invalid("mass must lie in (0, 1)"));
    }
    if !(cfg.noise_var > 0.0) {
        return Err(invalid("noise_var must be positive"));
    }
    if !(cfg.smoothing >= 0.0) {
        return Err(invalid("smoothing must be non-negative"));
    }
    cfg.fit.validate()?;
    let d = cfg.dim;
    let tau = laplace_threshold(cfg.laplace_scale, cfg.mass);
    let prior = PriorModel::laplace(vec![cfg.laplace_scale; d])?;
    let base = PriorModel::isotropic_gaussian(d, 1.0)?;

    // the Gaussian-to-Laplace stage does not depend on the data; fit it once
    let prior_target = PosteriorTarget::new(prior.clone(), LikelihoodModel::constant(0.0)?)?
        .with_smoothing(cfg.smoothing);
    let base_train = prior_samples(
        &base,
        &mut stream(cfg.seed, "base-train"),
        cfg.n_train_base,
        cfg.seed,
        "base-train",
    );
    let stage1 = fit(
        &prior_target,
        &base_train,
        &base.default_basis(cfg.base_degree)?,
        &cfg.fit,
    )
    .map_err(|source| ChainError { stage: 1, source })?;
    let base_eval = prior_samples(
        &base,
        &mut stream(cfg.seed, "base-eval"),
        cfg.n_eval,
        cfg.seed,
        "base-eval",
    );
    let prior_eval = push_lenient(&stage1.map, &base_eval)?;
    let stage2_train = base_train.head(cfg.n_train);

    let tau_c = tau;
    let problem = DecisionProblem::new(binary_actions(d), move |a: &Vec<bool>, x: &[f64]| {
        threshold_loss(a, x, tau_c)
    })?;
    let results: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let ts = trial_seed(cfg.seed, i);
            let mut rng = stream(ts, "problem");
            let m: Vec<f64> = (0..d * d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let x_true = prior.sample_with(&mut rng, 1);
            let sd = cfg.noise_var.sqrt();
            let y: Vec<f64> = (0..d)
                .map(|r| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (0..d).map(|c| m[r * d + c] * x_true[c]).sum::<f64>() + sd * e
                })
                .collect();
            let mut noise = vec![0.0; d * d];
            for r in 0..d {
                noise[r * d + r] = cfg.noise_var;
            }
            let lik = LikelihoodModel::gaussian_linear(m, d, noise, y)?;
            let target = PosteriorTarget::new(prior.clone(), lik)?.with_smoothing(cfg.smoothing);
            let stage2 = fit_second_stage(
                &stage1.map,
                &target,
                &stage2_train,
                &StageBasis::EmpiricalGram(cfg.degree),
                &cfg.fit,
            )?;
            let post = push_lenient(&stage2.map, &prior_eval)?;
            let bayes = inference::bayes_action(&problem, &post)?;
            let x_map = map_estimate(&target, &vec![0.0; d])?;
            let map_a = inference::map_action(&problem, &x_map);
            let (ab, am) = (&problem.actions[bayes.action], &problem.actions[map_a]);
            let mut row = Metrics::default();
            row.set("trial", i as f64);
            row.set("bayes_loss", threshold_loss(ab, &x_true, tau));
            row.set("map_loss", threshold_loss(am, &x_true, tau));
            row.set(
                "agreement",
                ab.iter().zip(am).filter(|(p, q)| p == q).count() as f64 / d as f64,
            );
            row.set("stage2_iterations", stage2.report.iterations as f64);
            Ok((row, None))
        })
        .collect();
    let c = collect(results);
    let rows: Vec<&Metrics> = c.rows.iter().collect();
    let mut metrics = Metrics::default();
    metrics.set("tau", tau);
    metrics.set("mean_bayes_loss", mean_of(&rows, "bayes_loss"));
    metrics.set("mean_map_loss", mean_of(&rows, "map_loss"));
    metrics.set("agreement", mean_of(&rows, "agreement"));
    for k in 0..=d {
        let count = |key: &str| rows.iter().filter(|r| r.get(key) == Some(k as f64)).count() as f64;
        metrics.set(format!("bayes_loss_count_{k}"), count("bayes_loss"));
        metrics.set(format!("map_loss_count_{k}"), count("map_loss"));
    }
    metrics.set("stage1_iterations", stage1.report.iterations as f64);
    metrics.set("n_failed", c.failures.len() as f64);
    metrics.set("failure_rate", c.failures.len() as f64 / cfg.trials as f64);
    Ok(ExperimentReport {
        scenario: "sparse_threshold".into(),
        seed: cfg.seed,
        metrics,
        n_trials: cfg.trials,
        n_failed: c.failures.len(),
        trials: c.rows,
        failures: c.failures,
        diagnostics: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Bayesian logistic regression on two Gaussian clouds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub seed: u64,
    pub mean_pos: Vec<f64>,
    pub mean_neg: Vec<f64>,
    /// Shared class covariance, one row per feature.
    pub cov: Vec<Vec<f64>>,
    pub n_train_pos: usize,
    pub n_train_neg: usize,
    pub n_test_pos: usize,
    pub n_test_neg: usize,
    pub prior_var: f64,
    pub degree: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub fit: FitOptions,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mean_pos: vec![1.0, 1.0],
            mean_neg: vec![-1.0, -1.0],
            cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            n_train_pos: 5,
            n_train_neg: 5,
            n_test_pos: 50,
            n_test_neg: 50,
            prior_var: 1.0,
            degree: 3,
            n_train: 1000,
            n_eval: 2000,
            fit: FitOptions::default(),
        }
    }
}

fn gaussian_cloud(rng: &mut StreamRng, mean: &[f64], chol: &[f64], n: usize) -> Vec<f64> {
    let d = mean.len();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for r in 0..d {
            out.push(mean[r] + (0..=r).map(|c| chol[r * d + c] * z[c]).sum::<f64>());
        }
    }
    out
}

pub fn run_logistic_sim(cfg: &LogisticConfig) -> Result<ExperimentReport, ExperimentError> {
    let start = Instant::now();
    let d = cfg.mean_pos.len();
    check_counts(&[
        ("dim", d),
        ("degree", cfg.degree),
        ("n_train", cfg.n_train),
        ("n_eval", cfg.n_eval),
    ])?;
    if cfg.n_train_pos + cfg.n_train_neg == 0 {
        return Err(invalid("need at least one training point"));
    }
    if cfg.mean_neg.len() != d || cfg.cov.len() != d || cfg.cov.iter().any(|r| r.len() != d) {
        return Err(invalid(
            "class means and covariance must share one dimension",
        ));
    }
    let chol = linalg::cholesky(&cfg.cov.concat(), d)
        .ok_or_else(|| invalid("covariance must be positive definite"))?;
    let mut rng = stream(cfg.seed, "data");
    let mut train = gaussian_cloud(&mut rng, &cfg.mean_pos, &chol, cfg.n_train_pos);
    train.extend(gaussian_cloud(
        &mut rng,
        &cfg.mean_neg,
        &chol,
        cfg.n_train_neg,
    ));
    let train_labels: Vec<u8> = (0..cfg.n_train_pos)
        .map(|_| 1)
        .chain((0..cfg.n_train_neg).map(|_| 0))
        .collect();
    let mut test = gaussian_cloud(&mut rng, &cfg.mean_pos, &chol, cfg.n_test_pos);
    test.extend(gaussian_cloud(
        &mut rng,
        &cfg.mean_neg,
        &chol,
        cfg.n_test_neg,
    ));
    let test_labels: Vec<bool> = (0..cfg.n_test_pos)
        .map(|_| true)
        .chain((0..cfg.n_test_neg).map(|_| false))
        .collect();

    let prior = PriorModel::isotropic_gaussian(d, cfg.prior_var)?;
    let target = PosteriorTarget::new(
        prior.clone(),
        LikelihoodModel::logistic_regression(train, d, train_labels)?,
    )?;
    let samples = prior_samples(
        &prior,
        &mut stream(cfg.seed, "train"),
        cfg.n_train,
        cfg.seed,
        "train",
    );
    let out = fit(
        &target,
        &samples,
        &prior.default_basis(cfg.degree)?,
        &cfg.fit,
    )?;
    let eval = prior_samples(
        &prior,
        &mut stream(cfg.seed, "eval"),
        cfg.n_eval,
        cfg.seed,
        "eval",
    );
    let (post, infeasible) = push_counted(&out.map, &eval)?;
    let w_map = map_estimate(&target, &vec![0.0; d])?;

    let dot = |w: &[f64], f: &[f64]| w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    let mut bayes_scores = Vec::with_capacity(test_labels.len());
    let mut map_scores = Vec::with_capacity(test_labels.len());
    let mut trials = Vec::with_capacity(test_labels.len());
    for (f, label) in test.chunks_exact(d).zip(&test_labels) {
        let b = inference::class_posterior_from_samples(&post, |w| stats::sigmoid(dot(w, f)));
        let m = stats::sigmoid(dot(&w_map, f));
        bayes_scores.push(b);
        map_scores.push(m);
        let mut row = Metrics::default();
        row.set("label", if *label { 1.0 } else { 0.0 });
        row.set("bayes_score", b);
        row.set("map_score", m);
        trials.push(row);
    }
    let bayes_roc = inference::roc_curve(&bayes_scores, &test_labels)?;
    let map_roc = inference::roc_curve(&map_scores, &test_labels)?;
    let diag = diagnostics::diagnose(&out.map, &target, &prior, &eval, None)?;
    let mut metrics = Metrics::default();
    metrics.set("bayes_auc", bayes_roc.auc);
    metrics.set("map_auc", map_roc.auc);
    metrics.set("auc_difference", bayes_roc.auc - map_roc.auc);
    metrics.set("var_T", diag.var_t);
    metrics.set("log_beta_map", diag.log_beta_map);
    metrics.set("log_beta_mc", diag.log_beta_mc);
    metrics.set("iterations", out.report.iterations as f64);
    metrics.set("infeasible_rows", infeasible as f64);
    Ok(ExperimentReport {
        scenario: "logistic_sim".into(),
        seed: cfg.seed,
        metrics,
        n_trials: 1,
        n_failed: 0,
        trials,
        failures: Vec::new(),
        diagnostics: Some(diag),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// spectral stage decisions

/// Stage order used throughout: awake, light, deep, REM.
pub const STAGES: [&str; 4] = ["W", "L", "D", "R"];

/// Loss between stages: 3 for W/D, 2 for W/L and W/R, 1 for other pairs.
pub fn stage_loss_matrix() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 2.0, 3.0, 2.0],
        vec![2.0, 0.0, 1.0, 1.0],
        vec![3.0, 1.0, 0.0, 1.0],
        vec![2.0, 1.0, 1.0, 0.0],
    ]
}

/// Ordered stage rule over sub-band magnitudes; the first matching row wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageRule {
    pub delta_band: usize,
    pub high_bands: Vec<usize>,
    pub high_fraction: f64,
    pub total_threshold: f64,
    pub delta_fraction: f64,
    /// Rows of `p(c | x)` for: high bands dominant, low total,
    /// delta below its fraction, delta at or above it.
    pub rows: [[f64; 4]; 4],
}

impl Default for StageRule {
    fn default() -> Self {
        Self {
            delta_band: 0,
            high_bands: vec![5, 6, 7],
            high_fraction: 0.05,
            total_threshold: 1000.0,
            delta_fraction: 0.6,
            rows: [
                [0.8, 0.1, 0.05, 0.05],
                [0.1, 0.2, 0.05, 0.65],
                [0.1, 0.6, 0.2, 0.1],
                [0.05, 0.3, 0.6, 0.05],
            ],
        }
    }
}

impl StageRule {
    /// `p(c | x)` over [`STAGES`]. Negative magnitudes count as zero.
    pub fn probabilities(&self, x: &[f64]) -> [f64; 4] {
        let v = |i: usize| x[i].max(0.0);
        let total: f64 = (0..x.len()).map(v).sum();
        let high: f64 = self.high_bands.iter().map(|&i| v(i)).sum();
        if high > self.high_fraction * total {
            self.rows[0]
        } else if total < self.total_threshold {
            self.rows[1]
        } else if v(self.delta_band) < self.delta_fraction * total {
            self.rows[2]
        } else {
            self.rows[3]
        }
    }

    fn validate(&self, d: usize) -> Result<(), ExperimentError> {
        if self.delta_band >= d || self.high_bands.iter().any(|&i| i >= d) {
            return Err(invalid("stage rule band index out of range"));
        }
        for row in &self.rows {
            if row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid("stage rule rows must be probability vectors"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub seed: u64,
    pub windows: usize,
    /// Noise variance of the magnitude likelihood.
    pub sigma2: f64,
    /// Standard deviation of the noise added when generating magnitudes.
    pub generation_noise_std: f64,
    /// Exponential prior rate per sub-band.
    pub gamma: f64,
    /// Fourier bins per sub-band.
    pub bins: Vec<usize>,
    /// Mean sub-band magnitudes per stage, in [`STAGES`] order.
    pub templates: Vec<Vec<f64>>,
    /// Log-normal spread of the true magnitudes around their template.
    pub variability: f64,
    pub rule: StageRule,
    pub degree: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub fit: FitOptions,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            windows: 200,
            sigma2: 1e4,
            generation_noise_std: 100.0,
            gamma: 0.01,
            // 0.2 Hz bins: delta, theta, alpha, two beta halves, three 5 Hz high bands
            bins: vec![17, 20, 20, 57, 58, 25, 25, 25],
            templates: vec![
                vec![150.0, 120.0, 150.0, 120.0, 100.0, 40.0, 35.0, 30.0],
                vec![500.0, 300.0, 150.0, 100.0, 80.0, 10.0, 8.0, 6.0],
                vec![1200.0, 250.0, 100.0, 60.0, 40.0, 8.0, 6.0, 5.0],
                vec![300.0, 200.0, 100.0, 80.0, 60.0, 8.0, 6.0, 5.0],
            ],
            variability: 0.3,
            rule: StageRule::default(),
            degree: 1,
            n_train: 500,
            n_eval: 1000,
            fit: FitOptions::default(),
        }
    }
}

fn sample_index(rng: &mut StreamRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn run_spectral_staging(cfg: &SpectralConfig) -> Result<ExperimentReport, ExperimentError> {
    let start = Instant::now();
    let d = cfg.bins.len();
    check_counts(&[
        ("windows", cfg.windows),
        ("degree", cfg.degree),
        ("n_train", cfg.n_train),
        ("n_eval", cfg.n_eval),
        ("bands", d),
    ])?;
    if cfg.bins.contains(&0) {
        return Err(invalid("every sub-band needs at least one bin"));
    }
    if cfg.templates.len() != STAGES.len()
        || cfg
            .templates
            .iter()
            .any(|t| t.len() != d || t.iter().any(|v| *v < 0.0))
    {
        return Err(invalid(
            "need four non-negative templates, one value per sub-band",
        ));
    }
    if !(cfg.generation_noise_std >= 0.0 && cfg.variability >= 0.0) {
        return Err(invalid("noise and variability must be non-negative"));
    }
    cfg.rule.validate(d)?;
    cfg.fit.validate()?;
    let prior = PriorModel::exponential(vec![cfg.gamma; d])?;
    let spec: BasisSpec<f64> = prior.default_basis(cfg.degree)?;
    let loss = stage_loss_matrix();
    let rule = cfg.rule.clone();
    let problem =
        DecisionProblem::from_label_model(loss.clone(), move |x| rule.probabilities(x).to_vec())?;

    let results: Vec<TrialResult> = (0..cfg.windows)
        .into_par_iter()
        .map(|i| {
            let ts = trial_seed(cfg.seed, i);
            let mut rng = stream(ts, "window");
            let stage = rng.random_range(0..STAGES.len());
            let x_true: Vec<f64> = cfg.templates[stage]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m * (cfg.variability * z).exp()
                })
                .collect();
            let groups: Vec<Vec<f64>> = cfg
                .bins
                .iter()
                .zip(&x_true)
                .map(|(&k, &x)| {
                    (0..k)
                        .map(|_| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            x + cfg.generation_noise_std * e
                        })
                        .collect()
                })
                .collect();
            let p_true = cfg.rule.probabilities(&x_true);
            let label = sample_index(&mut rng, &p_true);
            let x0: Vec<f64> = groups
                .iter()
                .map(|g| (g.iter().sum::<f64>() / g.len() as f64).max(1.0))
                .collect();
            let target = PosteriorTarget::new(
                prior.clone(),
                LikelihoodModel::spectral_magnitude(groups, cfg.sigma2)?,
            )?;
            let train = prior_samples(&prior, &mut stream(ts, "train"), cfg.n_train, ts, "train");
            let out = fit(&target, &train, &spec, &cfg.fit)?;
            let eval = prior_samples(&prior, &mut stream(ts, "eval"), cfg.n_eval, ts, "eval");
            let post = out.map.push_samples(&eval)?;
            let bayes = inference::bayes_action(&problem, &post)?.action;
            let x_map = map_estimate(&target, &x0)?;
            let map_a = inference::map_action(&problem, &x_map);
            let expected = |a: usize| p_true.iter().zip(&loss[a]).map(|(p, l)| p * l).sum::<f64>();
            let mut row = Metrics::default();
            row.set("window", i as f64);
            row.set("template_stage", stage as f64);
            row.set("label", label as f64);
            row.set("bayes_action", bayes as f64);
            row.set("map_action", map_a as f64);
            row.set("bayes_loss", loss[bayes][label]);
            row.set("map_loss", loss[map_a][label]);
            row.set("bayes_expected_loss", expected(bayes));
            row.set("map_expected_loss", expected(map_a));
            row.set("iterations", out.report.iterations as f64);
            Ok((row, None))
        })
        .collect();
    let c = collect(results);
    let rows: Vec<&Metrics> = c.rows.iter().collect();
    let mut metrics = Metrics::default();
    for key in [
        "bayes_loss",
        "map_loss",
        "bayes_expected_loss",
        "map_expected_loss",
    ] {
        metrics.set(format!("mean_{key}"), mean_of(&rows, key));
    }
    for k in 0..=3 {
        let count = |key: &str| rows.iter().filter(|r| r.get(key) == Some(k as f64)).count() as f64;
        metrics.set(format!("bayes_loss_count_{k}"), count("bayes_loss"));
        metrics.set(format!("map_loss_count_{k}"), count("map_loss"));
    }
    metrics.set(
        "agreement",
        rows.iter()
            .filter(|r| r.get("bayes_action") == r.get("map_action"))
            .count() as f64
            / rows.len().max(1) as f64,
    );
    metrics.set("n_failed", c.failures.len() as f64);
    Ok(ExperimentReport {
        scenario: "spectral_staging".into(),
        seed: cfg.seed,
        metrics,
        n_trials: cfg.windows,
        n_failed: c.failures.len(),
        trials: c.rows,
        failures: c.failures,
        diagnostics: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
