//! Fit diagnostics built on the operator
//! `T(x) = log q(S(x)) + log det J_S(x) - log p(x)`,
//! which is constant (equal to the log normalising constant) exactly when
//! `S` pushes the source `p` to the normalised target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{PosteriorTarget, Target};
use crate::samples::SampleSet;
use crate::stats;
use crate::transportmap::{jacobian_feasible, MapError, TransportMap};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("map is infeasible at the given point")]
    InfeasiblePoint,
    #[error("only {usable} of {total} rows are usable")]
    TooFewFeasible { usable: usize, total: usize },
    #[error("the KL estimate needs a normalised target density")]
    RequiresNormalizedTarget,
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Summary of a fitted map against its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    #[serde(rename = "var_T")]
    pub var_t: f64,
    /// Mean of `T` over usable rows.
    pub log_beta_map: f64,
    pub log_beta_map_se: f64,
    /// Direct Monte Carlo estimate `log mean p(y | X_i)`.
    pub log_beta_mc: f64,
    pub log_beta_mc_se: f64,
    /// KL from the source to the map-induced density; only for normalised targets.
    pub kl_estimate: Option<f64>,
    pub info_gain: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

/// `T` at one point of the source support.
pub fn t_operator<Q: Target + ?Sized, P: Target + ?Sized>(
    map: &TransportMap,
    target: &Q,
    source: &P,
    x: &[f64],
) -> Result<f64, DiagError> {
    let (y, j) = map.apply_with_jacobian(x)?;
    let d = map.dim();
    if !jacobian_feasible(&j, d) {
        return Err(DiagError::InfeasiblePoint);
    }
    let t = target.log_density(&y) + crate::linalg::det(&j, d).ln() - source.log_density(x);
    if t.is_finite() {
        Ok(t)
    } else {
        Err(DiagError::InfeasiblePoint)
    }
}

/// `T` at every usable row, with the number of rows excluded as infeasible.
pub fn t_values<Q: Target + ?Sized, P: Target + ?Sized>(
    map: &TransportMap,
    target: &Q,
    source: &P,
    samples: &SampleSet,
) -> (Vec<f64>, usize) {
    let d = samples.dim();
    let all: Vec<Option<f64>> = samples
        .data()
        .par_chunks_exact(d)
        .map(|x| t_operator(map, target, source, x).ok())
        .collect();
    let excluded = all.iter().filter(|v| v.is_none()).count();
    (all.into_iter().flatten().collect(), excluded)
}

fn usable_t<Q: Target + ?Sized, P: Target + ?Sized>(
    map: &TransportMap,
    target: &Q,
    source: &P,
    samples: &SampleSet,
) -> Result<Vec<f64>, DiagError> {
    let (t, excluded) = t_values(map, target, source, samples);
    let total = t.len() + excluded;
    if 2 * t.len() < total || t.is_empty() {
        return Err(DiagError::TooFewFeasible {
            usable: t.len(),
            total,
        });
    }
    Ok(t)
}

/// Sample variance of `T` over usable rows.
pub fn variance_of_t<Q: Target + ?Sized, P: Target + ?Sized>(
    map: &TransportMap,
    target: &Q,
    source: &P,
    samples: &SampleSet,
) -> Result<f64, DiagError> {
    Ok(stats::variance(&usable_t(map, target, source, samples)?))
}

/// Mean of `T`: the map-based estimate of `log beta`.
pub fn log_beta<Q: Target + ?Sized, P: Target + ?Sized>(
    map: &TransportMap,
    target: &Q,
    source: &P,
    samples: &SampleSet,
) -> Result<f64, DiagError> {
    Ok(stats::mean(&usable_t(map, target, source, samples)?))
}

/// `log((1/n) sum_i p(y | X_i))` over prior samples, with a delta-method
/// standard error.
pub fn log_beta_mc(target: &PosteriorTarget, samples: &SampleSet) -> (f64, f64) {
    let ll: Vec<f64> = samples.rows().map(|x| target.log_likelihood(x)).collect();
    let est = stats::log_mean_exp(&ll);
    if !est.is_finite() {
        return (est, f64::NAN);
    }
    let w: Vec<f64> = ll.iter().map(|v| (v - est).exp()).collect();
    let se = (stats::variance(&w) / w.len() as f64).sqrt();
    (est, se)
}

/// Plug-in estimate of `D(P || P_S)`, where `P_S` has density
/// `q(S(x)) |det J_S(x)|`, as the sample mean of
/// `log p(X_i) - log q(S(X_i)) - log det J_S(X_i)`. Infinite when a sample
/// is mapped outside the target support or the map is infeasible there.
pub fn kl_source_to_induced<Q: Target + ?Sized, P: Target + ?Sized>(
    map: &TransportMap,
    source: &P,
    target: &Q,
    samples: &SampleSet,
) -> Result<f64, DiagError> {
    if !target.is_normalized() {
        return Err(DiagError::RequiresNormalizedTarget);
    }
    let (t, excluded) = t_values(map, target, source, samples);
    if excluded > 0 {
        return Ok(f64::INFINITY);
    }
    Ok(-stats::mean(&t))
}

/// The same divergence written as `-h(P) - mean[log q(S(X_i)) + log det J_S(X_i)]`
/// with the exact source entropy `h(P)`. Unbiased but noisier than
/// [`kl_source_to_induced`], because it does not pair `log p(X_i)` with the
/// other terms.
pub fn kl_with_exact_entropy<Q: Target + ?Sized>(
    map: &TransportMap,
    source: &crate::models::PriorModel,
    target: &Q,
    samples: &SampleSet,
) -> Result<f64, DiagError> {
    if !target.is_normalized() {
        return Err(DiagError::RequiresNormalizedTarget);
    }
    let d = map.dim();
    let mut acc = 0.0;
    for x in samples.rows() {
        let (y, j) = map.apply_with_jacobian(x)?;
        let lq = target.log_density(&y);
        if !jacobian_feasible(&j, d) || !lq.is_finite() {
            return Ok(f64::INFINITY);
        }
        acc += lq + crate::linalg::det(&j, d).ln();
    }
    Ok(-source.entropy() - acc / samples.len() as f64)
}

/// `-log beta + E[log p(y | X) | y]`, the KL divergence from prior to
/// posterior, with both terms estimated through the map.
pub fn info_gain<P: Target + ?Sized>(
    map: &TransportMap,
    target: &PosteriorTarget,
    source: &P,
    prior_samples: &SampleSet,
) -> Result<f64, DiagError> {
    let lb = log_beta(map, target, source, prior_samples)?;
    let pushed = match map.push_samples(prior_samples) {
        Ok(s) => s,
        Err(MapError::InfeasibleRegion { pushed, .. }) => *pushed,
        Err(e) => return Err(e.into()),
    };
    let ll: Vec<f64> = pushed
        .rows()
        .map(|z| target.log_likelihood(z))
        .filter(|v| v.is_finite())
        .collect();
    Ok(-lb + stats::mean(&ll))
}

/// All diagnostics for a posterior map. `normalized` is the closed-form
/// posterior when one is known, used for the KL estimate.
pub fn diagnose<P: Target + ?Sized>(
    map: &TransportMap,
    target: &PosteriorTarget,
    source: &P,
    samples: &SampleSet,
    normalized: Option<&dyn Target>,
) -> Result<DiagnosticsReport, DiagError> {
    let (t, excluded) = t_values(map, target, source, samples);
    let total = t.len() + excluded;
    if 2 * t.len() < total || t.is_empty() {
        return Err(DiagError::TooFewFeasible {
            usable: t.len(),
            total,
        });
    }
    let mean_t = stats::mean(&t);
    let var_t = stats::variance(&t);
    let (mc, mc_se) = log_beta_mc(target, samples);
    let kl_estimate = match normalized {
        Some(q) => Some(kl_source_to_induced(map, source, q, samples)?),
        None => None,
    };
    Ok(DiagnosticsReport {
        var_t,
        log_beta_map: mean_t,
        log_beta_map_se: (var_t / t.len() as f64).sqrt(),
        log_beta_mc: mc,
        log_beta_mc_se: mc_se,
        kl_estimate,
        info_gain: info_gain(map, target, source, samples)?,
        n_used: t.len(),
        n_excluded: excluded,
    })
}
