//! Bayesian inference by transport maps.
//!
//! A map `S(x) = W Phi(x)` over a polynomial basis `Phi` orthonormal under
//! the prior is fitted so that it pushes prior samples to the posterior.
//! The fit maximises a concave sample objective, so it has a unique optimum
//! and needs no MCMC. Posterior expectations, credible regions and Bayes
//! decisions are then computed from the pushed samples.
//!
//! ```no_run
//! use bayesmap::{fit, sample_prior, FitOptions, LikelihoodModel, PosteriorTarget, PriorModel};
//!
//! let prior = PriorModel::gamma(vec![2.0], vec![0.5])?;
//! let target = PosteriorTarget::new(prior.clone(), LikelihoodModel::poisson_count(vec![1])?)?;
//! let train = sample_prior(&prior, 1000, 1);
//! let out = fit(&target, &train, &prior.default_basis(5)?, &FitOptions::default())?;
//! let posterior = out.map.push_samples(&sample_prior(&prior, 10_000, 2))?;
//! # Ok::<(), bayesmap::Error>(())
//! ```
//!
//! Basis and map evaluation are generic over [`Scalar`] (`f32` or `f64`).
//! Fitting and diagnostics run in `f64`; a fitted map can be evaluated in
//! `f32` through [`TransportMap::cast`].

pub mod diagnostics;
pub mod experiments;
pub mod inference;
pub mod linalg;
pub mod models;
pub mod polybasis;
pub mod rng;
pub mod samples;
pub mod scalar;
pub mod solver;
pub mod stats;
pub mod transportmap;

pub use diagnostics::{diagnose, DiagError, DiagnosticsReport};
pub use experiments::{
    run_experiment, ExperimentConfig, ExperimentError, ExperimentReport, Metrics,
};
pub use inference::{
    bayes_action, class_posterior, conditional_expectation, credible_region_pushforward,
    map_action, marginal_credible_intervals, prior_confidence_radius, roc_curve, CredibleRegion,
    Decision, DecisionProblem, InferenceError, RocCurve,
};
pub use models::{
    map_estimate, sample_prior, LikelihoodConfig, LikelihoodModel, ModelError, PosteriorTarget,
    PriorConfig, PriorModel, Target,
};
pub use polybasis::{BasisError, BasisSpec, Family, MultiIndex};
pub use samples::{Provenance, SampleIoError, SampleSet};
pub use scalar::Scalar;
pub use solver::{
    fit, fit_chain, ChainError, FitError, FitOptions, FitOutcome, SolveReport, StageBasis,
    Termination,
};
pub use transportmap::{MapError, TransportMap};

pub type Map32 = TransportMap<f32>;
pub type Map64 = TransportMap<f64>;
pub type Basis32 = BasisSpec<f32>;
pub type Basis64 = BasisSpec<f64>;
pub type Family32 = Family<f32>;
pub type Family64 = Family<f64>;

/// Any error raised by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Diagnostics(#[from] DiagError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Io(#[from] SampleIoError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
