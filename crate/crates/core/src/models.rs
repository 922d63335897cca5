//! Priors, likelihoods and the posterior targets built from them.
//!
//! Every density here is log-concave. Log-densities return `-inf` outside
//! the support; gradients and Hessians are only meaningful where the
//! log-density is finite.

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::linalg;
use crate::polybasis::{gram_schmidt_empirical, BasisError, BasisSpec, Family};
use crate::rng::StreamRng;
use crate::samples::{Provenance, SampleSet};
use crate::stats;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("starting point is outside the support")]
    OutsideSupport,
    #[error("MAP iteration did not converge in {0} iterations")]
    DidNotConverge(usize),
    #[error("Hessian at the MAP point is not negative definite")]
    NotStrictlyConcave,
    #[error(transparent)]
    Basis(#[from] BasisError),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter(msg.into())
}

/// A log-concave density over `R^d` that a transport map can be fitted to.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;
    /// Log-density, possibly unnormalised; `-inf` outside the support.
    fn log_density(&self, x: &[f64]) -> f64;
    /// Overwrites `out` with the gradient of the log-density.
    fn grad_log_density(&self, x: &[f64], out: &mut [f64]);
    /// Overwrites `out` (d x d, row-major) with the Hessian of the log-density.
    fn hess_log_density(&self, x: &[f64], out: &mut [f64]);
    /// Closed coordinate box containing the support.
    fn support(&self) -> Vec<(f64, f64)>;
    /// Finite edges of the support at which the density stays bounded away
    /// from zero. The log-density gives no barrier there, so the solver adds one.
    fn barrier_bounds(&self) -> Option<Vec<(f64, f64)>>;
    fn is_normalized(&self) -> bool;
}

// ---------------------------------------------------------------------------
// priors

/// Serialised form of a prior; also the configuration file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    Exponential { rate: Vec<f64> },
    Laplace { scale: Vec<f64> },
    Gamma { shape: Vec<f64>, scale: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
enum PriorKind {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<f64>,
        chol: Vec<f64>,
        precision: Vec<f64>,
        log_norm: f64,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Exponential {
        rate: Vec<f64>,
    },
    Laplace {
        scale: Vec<f64>,
    },
    Gamma {
        shape: Vec<f64>,
        scale: Vec<f64>,
    },
}

/// A validated prior distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorConfig", into = "PriorConfig")]
pub struct PriorModel {
    kind: PriorKind,
}

fn all_positive(v: &[f64], what: &str) -> Result<(), ModelError> {
    if v.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    match v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        Some(x) => Err(invalid(format!(
            "{what} must be positive and finite, got {x}"
        ))),
        None => Ok(()),
    }
}

impl PriorModel {
    pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self, ModelError> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(invalid("gaussian covariance must be d x d with d >= 1"));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(invalid("gaussian parameters must be finite"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(invalid("gaussian covariance is not symmetric"));
                }
            }
        }
        let chol = linalg::cholesky(&cov, d)
            .ok_or_else(|| invalid("gaussian covariance is not positive definite"))?;
        let linv = linalg::lower_triangular_inverse(&chol, d);
        // precision = L^{-T} L^{-1}
        let mut precision = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                precision[i * d + j] = (0..d).map(|k| linv[k * d + i] * linv[k * d + j]).sum();
            }
        }
        let log_det_half: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
        let log_norm = -0.5 * d as f64 * LN_2PI - log_det_half;
        Ok(Self {
            kind: PriorKind::Gaussian {
                mean,
                cov,
                chol,
                precision,
                log_norm,
            },
        })
    }

    /// `N(0, variance * I_d)`.
    pub fn isotropic_gaussian(d: usize, variance: f64) -> Result<Self, ModelError> {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = variance;
        }
        Self::gaussian(vec![0.0; d], cov)
    }

    pub fn uniform_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ModelError> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(invalid(
                "uniform box bounds must have equal non-zero length",
            ));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(invalid(
                "uniform box needs finite lo < hi in every coordinate",
            ));
        }
        Ok(Self {
            kind: PriorKind::UniformBox { lo, hi },
        })
    }

    pub fn exponential(rate: Vec<f64>) -> Result<Self, ModelError> {
        all_positive(&rate, "exponential rate")?;
        Ok(Self {
            kind: PriorKind::Exponential { rate },
        })
    }

    pub fn laplace(scale: Vec<f64>) -> Result<Self, ModelError> {
        all_positive(&scale, "laplace scale")?;
        Ok(Self {
            kind: PriorKind::Laplace { scale },
        })
    }

    /// Product of Gamma(shape, scale) marginals. Shapes below one are
    /// rejected because the density is then not log-concave.
    pub fn gamma(shape: Vec<f64>, scale: Vec<f64>) -> Result<Self, ModelError> {
        all_positive(&shape, "gamma shape")?;
        all_positive(&scale, "gamma scale")?;
        if shape.len() != scale.len() {
            return Err(invalid("gamma shape and scale lengths differ"));
        }
        if let Some(a) = shape.iter().find(|a| **a < 1.0) {
            return Err(invalid(format!("gamma shape {a} < 1 is not log-concave")));
        }
        Ok(Self {
            kind: PriorKind::Gamma { shape, scale },
        })
    }

    pub fn from_config(cfg: PriorConfig) -> Result<Self, ModelError> {
        match cfg {
            PriorConfig::Gaussian { mean, cov } => {
                let d = mean.len();
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(invalid("gaussian cov must be a d x d array"));
                }
                Self::gaussian(mean, cov.concat())
            }
            PriorConfig::UniformBox { lo, hi } => Self::uniform_box(lo, hi),
            PriorConfig::Exponential { rate } => Self::exponential(rate),
            PriorConfig::Laplace { scale } => Self::laplace(scale),
            PriorConfig::Gamma { shape, scale } => Self::gamma(shape, scale),
        }
    }

    pub fn config(&self) -> PriorConfig {
        match &self.kind {
            PriorKind::Gaussian { mean, cov, .. } => {
                let d = mean.len();
                PriorConfig::Gaussian {
                    mean: mean.clone(),
                    cov: cov.chunks(d).map(<[f64]>::to_vec).collect(),
                }
            }
            PriorKind::UniformBox { lo, hi } => PriorConfig::UniformBox {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            PriorKind::Exponential { rate } => PriorConfig::Exponential { rate: rate.clone() },
            PriorKind::Laplace { scale } => PriorConfig::Laplace {
                scale: scale.clone(),
            },
            PriorKind::Gamma { shape, scale } => PriorConfig::Gamma {
                shape: shape.clone(),
                scale: scale.clone(),
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            PriorKind::Gaussian { .. } => "gaussian",
            PriorKind::UniformBox { .. } => "uniform_box",
            PriorKind::Exponential { .. } => "exponential",
            PriorKind::Laplace { .. } => "laplace",
            PriorKind::Gamma { .. } => "gamma",
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            PriorKind::Gaussian { mean, .. } => mean.len(),
            PriorKind::UniformBox { lo, .. } => lo.len(),
            PriorKind::Exponential { rate } => rate.len(),
            PriorKind::Laplace { scale } => scale.len(),
            PriorKind::Gamma { shape, .. } => shape.len(),
        }
    }

    /// `(mean, variance)` when the prior is `N(mean, variance * I)`.
    pub fn isotropic(&self) -> Option<(&[f64], f64)> {
        let PriorKind::Gaussian { mean, cov, .. } = &self.kind else {
            return None;
        };
        let d = mean.len();
        let v = cov[0];
        let iso = (0..d).all(|i| (0..d).all(|j| cov[i * d + j] == if i == j { v } else { 0.0 }));
        iso.then_some((mean.as_slice(), v))
    }

    /// Exact normalised log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_smoothed(x, 0.0)
    }

    /// Log-density with the Laplace absolute value replaced by
    /// `sqrt(x^2 + delta^2) - delta` (other kinds ignore `delta`).
    pub fn log_density_smoothed(&self, x: &[f64], delta: f64) -> f64 {
        match &self.kind {
            PriorKind::Gaussian {
                mean,
                precision,
                log_norm,
                ..
            } => {
                let d = mean.len();
                let mut q = 0.0;
                for i in 0..d {
                    let ri = x[i] - mean[i];
                    for j in 0..d {
                        q += ri * precision[i * d + j] * (x[j] - mean[j]);
                    }
                }
                log_norm - 0.5 * q
            }
            PriorKind::UniformBox { lo, hi } => {
                let mut s = 0.0;
                for a in 0..lo.len() {
                    if !(x[a] >= lo[a] && x[a] <= hi[a]) {
                        return f64::NEG_INFINITY;
                    }
                    s -= (hi[a] - lo[a]).ln();
                }
                s
            }
            PriorKind::Exponential { rate } => {
                let mut s = 0.0;
                for (a, r) in rate.iter().enumerate() {
                    if !(x[a] >= 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    s += r.ln() - r * x[a];
                }
                s
            }
            PriorKind::Laplace { scale } => scale
                .iter()
                .enumerate()
                .map(|(a, b)| -pseudo_abs(x[a], delta) / b - (2.0 * b).ln())
                .sum(),
            PriorKind::Gamma { shape, scale } => {
                let mut s = 0.0;
                for a in 0..shape.len() {
                    let v = stats::gamma_ln_pdf(shape[a], scale[a], x[a]);
                    if v == f64::NEG_INFINITY || v.is_nan() {
                        return f64::NEG_INFINITY;
                    }
                    s += v;
                }
                s
            }
        }
    }

    /// Adds the gradient of the (smoothed) log-density to `g`.
    pub fn add_grad(&self, x: &[f64], delta: f64, g: &mut [f64]) {
        match &self.kind {
            PriorKind::Gaussian {
                mean, precision, ..
            } => {
                let d = mean.len();
                for i in 0..d {
                    g[i] -= (0..d)
                        .map(|j| precision[i * d + j] * (x[j] - mean[j]))
                        .sum::<f64>();
                }
            }
            PriorKind::UniformBox { .. } => {}
            PriorKind::Exponential { rate } => {
                for (gi, r) in g.iter_mut().zip(rate) {
                    *gi -= r;
                }
            }
            PriorKind::Laplace { scale } => {
                for (a, b) in scale.iter().enumerate() {
                    g[a] -= pseudo_abs_d1(x[a], delta) / b;
                }
            }
            PriorKind::Gamma { shape, scale } => {
                for a in 0..shape.len() {
                    g[a] += (shape[a] - 1.0) / x[a] - 1.0 / scale[a];
                }
            }
        }
    }

    /// Adds the Hessian of the (smoothed) log-density to `h` (d x d).
    pub fn add_hess(&self, x: &[f64], delta: f64, h: &mut [f64]) {
        let d = self.dim();
        match &self.kind {
            PriorKind::Gaussian { precision, .. } => {
                for (hi, p) in h.iter_mut().zip(precision) {
                    *hi -= p;
                }
            }
            PriorKind::UniformBox { .. } | PriorKind::Exponential { .. } => {}
            PriorKind::Laplace { scale } => {
                for (a, b) in scale.iter().enumerate() {
                    h[a * d + a] -= pseudo_abs_d2(x[a], delta) / b;
                }
            }
            PriorKind::Gamma { shape, .. } => {
                for a in 0..d {
                    h[a * d + a] -= (shape[a] - 1.0) / (x[a] * x[a]);
                }
            }
        }
    }

    pub fn support(&self) -> Vec<(f64, f64)> {
        let inf = f64::INFINITY;
        match &self.kind {
            PriorKind::UniformBox { lo, hi } => lo.iter().zip(hi).map(|(l, h)| (*l, *h)).collect(),
            PriorKind::Exponential { rate } => vec![(0.0, inf); rate.len()],
            PriorKind::Gamma { shape, .. } => vec![(0.0, inf); shape.len()],
            _ => vec![(-inf, inf); self.dim()],
        }
    }

    /// Per coordinate, the finite support edges where the density does not vanish.
    fn flat_edges(&self) -> Vec<(f64, f64)> {
        let inf = f64::INFINITY;
        match &self.kind {
            PriorKind::UniformBox { lo, hi } => lo.iter().zip(hi).map(|(l, h)| (*l, *h)).collect(),
            PriorKind::Exponential { rate } => vec![(0.0, inf); rate.len()],
            PriorKind::Gamma { shape, .. } => shape
                .iter()
                .map(|a| if *a == 1.0 { (0.0, inf) } else { (-inf, inf) })
                .collect(),
            _ => vec![(-inf, inf); self.dim()],
        }
    }

    /// Exact differential entropy.
    pub fn entropy(&self) -> f64 {
        match &self.kind {
            PriorKind::Gaussian { mean, chol, .. } => {
                let d = mean.len();
                0.5 * d as f64 * (1.0 + LN_2PI) + (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>()
            }
            PriorKind::UniformBox { lo, hi } => lo.iter().zip(hi).map(|(l, h)| (h - l).ln()).sum(),
            PriorKind::Exponential { rate } => rate.iter().map(|r| 1.0 - r.ln()).sum(),
            PriorKind::Laplace { scale } => scale.iter().map(|b| 1.0 + (2.0 * b).ln()).sum(),
            PriorKind::Gamma { shape, scale } => shape
                .iter()
                .zip(scale)
                .map(|(&a, &b)| a + b.ln() + ln_gamma(a) + (1.0 - a) * digamma(a))
                .sum(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.kind {
            PriorKind::Gaussian { mean, .. } => mean.clone(),
            PriorKind::UniformBox { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()
            }
            PriorKind::Exponential { rate } => rate.iter().map(|r| 1.0 / r).collect(),
            PriorKind::Laplace { scale } => vec![0.0; scale.len()],
            PriorKind::Gamma { shape, scale } => {
                shape.iter().zip(scale).map(|(a, b)| a * b).collect()
            }
        }
    }

    /// CDF of the marginal of coordinate `a`.
    pub fn marginal_cdf(&self, a: usize, x: f64) -> f64 {
        match &self.kind {
            PriorKind::Gaussian { mean, cov, .. } => {
                let d = mean.len();
                stats::normal_cdf((x - mean[a]) / cov[a * d + a].sqrt())
            }
            PriorKind::UniformBox { lo, hi } => ((x - lo[a]) / (hi[a] - lo[a])).clamp(0.0, 1.0),
            PriorKind::Exponential { rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-rate[a] * x).exp_m1()
                }
            }
            PriorKind::Laplace { scale } => {
                let e = 0.5 * (-x.abs() / scale[a]).exp();
                if x < 0.0 {
                    e
                } else {
                    1.0 - e
                }
            }
            PriorKind::Gamma { shape, scale } => stats::gamma_cdf(shape[a], scale[a], x),
        }
    }

    /// Quantile of the marginal of coordinate `a`.
    pub fn marginal_quantile(&self, a: usize, p: f64) -> f64 {
        match &self.kind {
            PriorKind::Gaussian { mean, cov, .. } => {
                let d = mean.len();
                mean[a] + cov[a * d + a].sqrt() * stats::normal_quantile(p)
            }
            PriorKind::UniformBox { lo, hi } => lo[a] + p * (hi[a] - lo[a]),
            PriorKind::Exponential { rate } => -(-p).ln_1p() / rate[a],
            PriorKind::Laplace { scale } => {
                let b = scale[a];
                if p < 0.5 {
                    b * (2.0 * p).ln()
                } else {
                    -b * (2.0 - 2.0 * p).ln()
                }
            }
            PriorKind::Gamma { shape, scale } => stats::gamma_quantile(shape[a], scale[a], p),
        }
    }

    /// Draw `n` i.i.d. samples from a generator.
    pub fn sample_with(&self, rng: &mut StreamRng, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        match &self.kind {
            PriorKind::Gaussian { mean, chol, .. } => {
                let mut z = vec![0.0; d];
                for _ in 0..n {
                    for zi in z.iter_mut() {
                        *zi = rng.sample(StandardNormal);
                    }
                    for i in 0..d {
                        out.push(mean[i] + (0..=i).map(|j| chol[i * d + j] * z[j]).sum::<f64>());
                    }
                }
            }
            _ => {
                for _ in 0..n {
                    for a in 0..d {
                        let u: f64 = rng.sample(Open01);
                        out.push(self.marginal_quantile(a, u));
                    }
                }
            }
        }
        out
    }

    /// Basis orthonormal under this prior (tensor product of its marginals'
    /// families). Laplace priors have no classical family; use
    /// [`PriorModel::basis_for_samples`] instead.
    pub fn default_basis(&self, p: usize) -> Result<BasisSpec<f64>, ModelError> {
        let families = match &self.kind {
            PriorKind::Gaussian { mean, cov, .. } => {
                let d = mean.len();
                (0..d)
                    .map(|a| Family::hermite(mean[a], cov[a * d + a].sqrt()))
                    .collect()
            }
            PriorKind::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| Family::legendre(*l, *h))
                .collect(),
            PriorKind::Exponential { rate } => rate
                .iter()
                .map(|r| Family::laguerre_for_gamma(1.0, 1.0 / r))
                .collect(),
            PriorKind::Gamma { shape, scale } => shape
                .iter()
                .zip(scale)
                .map(|(a, b)| Family::laguerre_for_gamma(*a, *b))
                .collect(),
            PriorKind::Laplace { .. } => {
                return Err(invalid("laplace prior has no classical orthogonal family"));
            }
        };
        Ok(BasisSpec::total_degree(families, p)?)
    }

    /// Classical basis when one exists, otherwise an empirical Gram basis
    /// built from `samples`.
    pub fn basis_for_samples(
        &self,
        p: usize,
        samples: &SampleSet,
    ) -> Result<BasisSpec<f64>, ModelError> {
        match self.kind {
            PriorKind::Laplace { .. } => {
                Ok(gram_schmidt_empirical(samples.data(), samples.dim(), p)?)
            }
            _ => self.default_basis(p),
        }
    }
}

impl TryFrom<PriorConfig> for PriorModel {
    type Error = ModelError;
    fn try_from(cfg: PriorConfig) -> Result<Self, ModelError> {
        Self::from_config(cfg)
    }
}

impl From<PriorModel> for PriorConfig {
    fn from(p: PriorModel) -> Self {
        p.config()
    }
}

impl Target for PriorModel {
    fn dim(&self) -> usize {
        PriorModel::dim(self)
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        PriorModel::log_density(self, x)
    }
    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.add_grad(x, 0.0, out);
    }
    fn hess_log_density(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.add_hess(x, 0.0, out);
    }
    fn support(&self) -> Vec<(f64, f64)> {
        PriorModel::support(self)
    }
    fn barrier_bounds(&self) -> Option<Vec<(f64, f64)>> {
        let e = self.flat_edges();
        e.iter()
            .any(|(l, h)| l.is_finite() || h.is_finite())
            .then_some(e)
    }
    fn is_normalized(&self) -> bool {
        true
    }
}

/// Sample `n` points from the prior with a generator seeded by `seed`.
pub fn sample_prior(prior: &PriorModel, n: usize, seed: u64) -> SampleSet {
    let mut rng = StreamRng::seed_from_u64(seed);
    let data = prior.sample_with(&mut rng, n);
    SampleSet::new(
        prior.dim(),
        data,
        Provenance {
            seed: Some(seed),
            source: format!("prior:{}", prior.kind_name()),
            map_hash: None,
        },
    )
}

fn pseudo_abs(x: f64, delta: f64) -> f64 {
    if delta > 0.0 {
        (x * x + delta * delta).sqrt() - delta
    } else {
        x.abs()
    }
}

fn pseudo_abs_d1(x: f64, delta: f64) -> f64 {
    if delta > 0.0 {
        x / (x * x + delta * delta).sqrt()
    } else if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pseudo_abs_d2(x: f64, delta: f64) -> f64 {
    if delta > 0.0 {
        let r = x * x + delta * delta;
        delta * delta / (r * r.sqrt())
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// likelihoods

/// Serialised form of a likelihood with its observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LikelihoodConfig {
    /// `y = M x + e`, `e ~ N(0, noise_cov)`.
    GaussianLinear {
        m: Vec<Vec<f64>>,
        noise_cov: Vec<Vec<f64>>,
        y: Vec<f64>,
    },
    /// Independent Poisson counts with rate `x_a`, one per coordinate.
    PoissonCount { counts: Vec<u64> },
    /// Bernoulli labels with success probability `sigmoid(x . features_i)`.
    LogisticRegression {
        features: Vec<Vec<f64>>,
        labels: Vec<u8>,
    },
    /// Magnitudes `|y_k|` for `k` in group `i` are `N(x_i, sigma2)`.
    SpectralMagnitude { groups: Vec<Vec<f64>>, sigma2: f64 },
    /// Likelihood not depending on `x`.
    Constant { log_value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum LikelihoodKind {
    GaussianLinear {
        m: Vec<f64>,
        rows: usize,
        y: Vec<f64>,
        noise_cov: Vec<f64>,
        precision: Vec<f64>,
        mtp: Vec<f64>,
        hess: Vec<f64>,
        log_norm: f64,
    },
    PoissonCount {
        counts: Vec<u64>,
        log_fact: f64,
    },
    LogisticRegression {
        features: Vec<f64>,
        labels: Vec<f64>,
    },
    SpectralMagnitude {
        groups: Vec<Vec<f64>>,
        count: Vec<f64>,
        mean: Vec<f64>,
        /// Centred sums of squares, kept apart so no cancellation occurs
        /// when `x` is close to the group mean.
        centred: Vec<f64>,
        sigma2: f64,
    },
    Constant {
        log_value: f64,
    },
}

/// A validated likelihood together with its observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LikelihoodConfig", into = "LikelihoodConfig")]
pub struct LikelihoodModel {
    dim: Option<usize>,
    kind: LikelihoodKind,
}

impl LikelihoodModel {
    /// `m` is `rows x d` row-major, `noise_cov` is `rows x rows`.
    pub fn gaussian_linear(
        m: Vec<f64>,
        d: usize,
        noise_cov: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let rows = y.len();
        if rows == 0 || d == 0 || m.len() != rows * d || noise_cov.len() != rows * rows {
            return Err(invalid(
                "gaussian_linear shapes: m is rows x d, noise_cov rows x rows, y has rows entries",
            ));
        }
        let chol = linalg::cholesky(&noise_cov, rows)
            .ok_or_else(|| invalid("noise covariance is not positive definite"))?;
        let linv = linalg::lower_triangular_inverse(&chol, rows);
        let mut precision = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                precision[i * rows + j] = (0..rows)
                    .map(|k| linv[k * rows + i] * linv[k * rows + j])
                    .sum();
            }
        }
        // M^T P (d x rows) and -M^T P M (d x d)
        let mut mt = vec![0.0; d * rows];
        for r in 0..rows {
            for c in 0..d {
                mt[c * rows + r] = m[r * d + c];
            }
        }
        let mtp = linalg::matmul(&mt, &precision, d, rows, rows);
        let hess: Vec<f64> = linalg::matmul(&mtp, &m, d, rows, d)
            .into_iter()
            .map(|v| -v)
            .collect();
        let log_norm =
            -0.5 * rows as f64 * LN_2PI - (0..rows).map(|i| chol[i * rows + i].ln()).sum::<f64>();
        Ok(Self {
            dim: Some(d),
            kind: LikelihoodKind::GaussianLinear {
                m,
                rows,
                y,
                noise_cov,
                precision,
                mtp,
                hess,
                log_norm,
            },
        })
    }

    pub fn poisson_count(counts: Vec<u64>) -> Result<Self, ModelError> {
        if counts.is_empty() {
            return Err(invalid("poisson_count needs at least one count"));
        }
        let log_fact = counts.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum();
        Ok(Self {
            dim: Some(counts.len()),
            kind: LikelihoodKind::PoissonCount { counts, log_fact },
        })
    }

    /// `features` is `n x d` row-major; labels are 0 or 1.
    pub fn logistic_regression(
        features: Vec<f64>,
        d: usize,
        labels: Vec<u8>,
    ) -> Result<Self, ModelError> {
        if d == 0 || labels.is_empty() || features.len() != labels.len() * d {
            return Err(invalid(
                "logistic_regression needs n x d features and n labels",
            ));
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(invalid(format!("label {l} is not 0 or 1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        let labels = labels.into_iter().map(f64::from).collect();
        Ok(Self {
            dim: Some(d),
            kind: LikelihoodKind::LogisticRegression { features, labels },
        })
    }

    pub fn spectral_magnitude(groups: Vec<Vec<f64>>, sigma2: f64) -> Result<Self, ModelError> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(invalid("spectral_magnitude needs non-empty groups"));
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(invalid("spectral sigma2 must be positive"));
        }
        let count: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
        let mean: Vec<f64> = groups
            .iter()
            .zip(&count)
            .map(|(g, n)| g.iter().sum::<f64>() / n)
            .collect();
        let centred = groups
            .iter()
            .zip(&mean)
            .map(|(g, m)| g.iter().map(|v| (v - m) * (v - m)).sum())
            .collect();
        Ok(Self {
            dim: Some(groups.len()),
            kind: LikelihoodKind::SpectralMagnitude {
                groups,
                count,
                mean,
                centred,
                sigma2,
            },
        })
    }

    pub fn constant(log_value: f64) -> Result<Self, ModelError> {
        if !log_value.is_finite() {
            return Err(invalid("constant likelihood must be finite"));
        }
        Ok(Self {
            dim: None,
            kind: LikelihoodKind::Constant { log_value },
        })
    }

    pub fn from_config(cfg: LikelihoodConfig) -> Result<Self, ModelError> {
        match cfg {
            LikelihoodConfig::GaussianLinear { m, noise_cov, y } => {
                let d = m.first().map_or(0, Vec::len);
                if m.iter().any(|r| r.len() != d)
                    || noise_cov.iter().any(|r| r.len() != noise_cov.len())
                {
                    return Err(invalid("gaussian_linear matrices must be rectangular"));
                }
                Self::gaussian_linear(m.concat(), d, noise_cov.concat(), y)
            }
            LikelihoodConfig::PoissonCount { counts } => Self::poisson_count(counts),
            LikelihoodConfig::LogisticRegression { features, labels } => {
                let d = features.first().map_or(0, Vec::len);
                if features.iter().any(|r| r.len() != d) {
                    return Err(invalid("logistic features must be rectangular"));
                }
                Self::logistic_regression(features.concat(), d, labels)
            }
            LikelihoodConfig::SpectralMagnitude { groups, sigma2 } => {
                Self::spectral_magnitude(groups, sigma2)
            }
            LikelihoodConfig::Constant { log_value } => Self::constant(log_value),
        }
    }

    pub fn config(&self) -> LikelihoodConfig {
        match &self.kind {
            LikelihoodKind::GaussianLinear {
                m,
                rows,
                y,
                noise_cov,
                ..
            } => {
                let d = m.len() / rows;
                LikelihoodConfig::GaussianLinear {
                    m: m.chunks(d).map(<[f64]>::to_vec).collect(),
                    noise_cov: noise_cov.chunks(*rows).map(<[f64]>::to_vec).collect(),
                    y: y.clone(),
                }
            }
            LikelihoodKind::PoissonCount { counts, .. } => LikelihoodConfig::PoissonCount {
                counts: counts.clone(),
            },
            LikelihoodKind::LogisticRegression { features, labels } => {
                let d = self.dim.unwrap_or(1);
                LikelihoodConfig::LogisticRegression {
                    features: features.chunks(d).map(<[f64]>::to_vec).collect(),
                    labels: labels.iter().map(|&l| l as u8).collect(),
                }
            }
            LikelihoodKind::SpectralMagnitude { groups, sigma2, .. } => {
                LikelihoodConfig::SpectralMagnitude {
                    groups: groups.clone(),
                    sigma2: *sigma2,
                }
            }
            LikelihoodKind::Constant { log_value } => LikelihoodConfig::Constant {
                log_value: *log_value,
            },
        }
    }

    /// Parameter dimension this likelihood expects; `None` if it does not depend on `x`.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        match &self.kind {
            LikelihoodKind::GaussianLinear {
                m,
                rows,
                y,
                precision,
                log_norm,
                ..
            } => {
                let d = x.len();
                let r: Vec<f64> = (0..*rows)
                    .map(|i| y[i] - (0..d).map(|j| m[i * d + j] * x[j]).sum::<f64>())
                    .collect();
                let mut q = 0.0;
                for i in 0..*rows {
                    for j in 0..*rows {
                        q += r[i] * precision[i * rows + j] * r[j];
                    }
                }
                log_norm - 0.5 * q
            }
            LikelihoodKind::PoissonCount { counts, log_fact } => {
                let mut s = -log_fact;
                for (a, &c) in counts.iter().enumerate() {
                    let xa = x[a];
                    if xa < 0.0 || (xa == 0.0 && c > 0) || xa.is_nan() {
                        return f64::NEG_INFINITY;
                    }
                    if c > 0 {
                        s += c as f64 * xa.ln();
                    }
                    s -= xa;
                }
                s
            }
            LikelihoodKind::LogisticRegression { features, labels } => {
                let d = x.len();
                features
                    .chunks_exact(d)
                    .zip(labels)
                    .map(|(f, c)| {
                        let s: f64 = f.iter().zip(x).map(|(a, b)| a * b).sum();
                        c * s - stats::log1p_exp(s)
                    })
                    .sum()
            }
            LikelihoodKind::SpectralMagnitude {
                count,
                mean,
                centred,
                sigma2,
                ..
            } => {
                let mut s = 0.0;
                for i in 0..count.len() {
                    let sq = centred[i] + count[i] * (x[i] - mean[i]) * (x[i] - mean[i]);
                    s -= sq / (2.0 * sigma2)
                        + 0.5 * count[i] * (std::f64::consts::TAU * sigma2).ln();
                }
                s
            }
            LikelihoodKind::Constant { log_value } => *log_value,
        }
    }

    /// Adds the gradient of the log-likelihood to `g`.
    pub fn add_grad(&self, x: &[f64], g: &mut [f64]) {
        match &self.kind {
            LikelihoodKind::GaussianLinear {
                m, rows, y, mtp, ..
            } => {
                let d = x.len();
                let r: Vec<f64> = (0..*rows)
                    .map(|i| y[i] - (0..d).map(|j| m[i * d + j] * x[j]).sum::<f64>())
                    .collect();
                for c in 0..d {
                    g[c] += (0..*rows).map(|i| mtp[c * rows + i] * r[i]).sum::<f64>();
                }
            }
            LikelihoodKind::PoissonCount { counts, .. } => {
                for (a, &c) in counts.iter().enumerate() {
                    g[a] += c as f64 / x[a] - 1.0;
                }
            }
            LikelihoodKind::LogisticRegression { features, labels } => {
                let d = x.len();
                for (f, c) in features.chunks_exact(d).zip(labels) {
                    let s: f64 = f.iter().zip(x).map(|(a, b)| a * b).sum();
                    let w = c - stats::sigmoid(s);
                    for (gi, fi) in g.iter_mut().zip(f) {
                        *gi += w * fi;
                    }
                }
            }
            LikelihoodKind::SpectralMagnitude {
                count,
                mean,
                sigma2,
                ..
            } => {
                for i in 0..count.len() {
                    g[i] += count[i] * (mean[i] - x[i]) / sigma2;
                }
            }
            LikelihoodKind::Constant { .. } => {}
        }
    }

    /// Adds the Hessian of the log-likelihood to `h` (d x d).
    pub fn add_hess(&self, x: &[f64], h: &mut [f64]) {
        let d = x.len();
        match &self.kind {
            LikelihoodKind::GaussianLinear { hess, .. } => {
                for (hi, v) in h.iter_mut().zip(hess) {
                    *hi += v;
                }
            }
            LikelihoodKind::PoissonCount { counts, .. } => {
                for (a, &c) in counts.iter().enumerate() {
                    h[a * d + a] -= c as f64 / (x[a] * x[a]);
                }
            }
            LikelihoodKind::LogisticRegression { features, .. } => {
                for f in features.chunks_exact(d) {
                    let s: f64 = f.iter().zip(x).map(|(a, b)| a * b).sum();
                    let p = stats::sigmoid(s);
                    let w = p * (1.0 - p);
                    for i in 0..d {
                        for j in 0..d {
                            h[i * d + j] -= w * f[i] * f[j];
                        }
                    }
                }
            }
            LikelihoodKind::SpectralMagnitude { count, sigma2, .. } => {
                for i in 0..count.len() {
                    h[i * d + i] -= count[i] / sigma2;
                }
            }
            LikelihoodKind::Constant { .. } => {}
        }
    }

    /// Whether the likelihood tends to zero at the lower edge `x_a -> 0+`.
    fn vanishes_at_zero(&self, a: usize) -> bool {
        matches!(&self.kind, LikelihoodKind::PoissonCount { counts, .. } if counts[a] > 0)
    }

    fn domain(&self, d: usize) -> Vec<(f64, f64)> {
        let inf = f64::INFINITY;
        match &self.kind {
            LikelihoodKind::PoissonCount { .. } => vec![(0.0, inf); d],
            _ => vec![(-inf, inf); d],
        }
    }
}

impl TryFrom<LikelihoodConfig> for LikelihoodModel {
    type Error = ModelError;
    fn try_from(cfg: LikelihoodConfig) -> Result<Self, ModelError> {
        Self::from_config(cfg)
    }
}

impl From<LikelihoodModel> for LikelihoodConfig {
    fn from(l: LikelihoodModel) -> Self {
        l.config()
    }
}

// ---------------------------------------------------------------------------
// posterior

/// Unnormalised posterior `log p(x) + log p(y | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTarget {
    pub prior: PriorModel,
    pub likelihood: LikelihoodModel,
    /// Smoothing width for Laplace priors (0 keeps the exact `|x|`).
    #[serde(default)]
    pub smoothing: f64,
}

impl PosteriorTarget {
    pub fn new(prior: PriorModel, likelihood: LikelihoodModel) -> Result<Self, ModelError> {
        if let Some(d) = likelihood.dim() {
            if d != prior.dim() {
                return Err(ModelError::DimensionMismatch {
                    expected: prior.dim(),
                    got: d,
                });
            }
        }
        Ok(Self {
            prior,
            likelihood,
            smoothing: 0.0,
        })
    }

    pub fn with_smoothing(mut self, delta: f64) -> Self {
        self.smoothing = delta;
        self
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        self.prior.log_density_smoothed(x, self.smoothing)
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.likelihood.log_likelihood(x)
    }
}

impl Target for PosteriorTarget {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let lp = self.log_prior(x);
        if lp == f64::NEG_INFINITY || lp.is_nan() {
            return f64::NEG_INFINITY;
        }
        let ll = self.likelihood.log_likelihood(x);
        if ll.is_nan() {
            return f64::NEG_INFINITY;
        }
        lp + ll
    }

    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.prior.add_grad(x, self.smoothing, out);
        self.likelihood.add_grad(x, out);
    }

    fn hess_log_density(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.prior.add_hess(x, self.smoothing, out);
        self.likelihood.add_hess(x, out);
    }

    fn support(&self) -> Vec<(f64, f64)> {
        let d = self.dim();
        self.prior
            .support()
            .into_iter()
            .zip(self.likelihood.domain(d))
            .map(|((l1, h1), (l2, h2))| (l1.max(l2), h1.min(h2)))
            .collect()
    }

    fn barrier_bounds(&self) -> Option<Vec<(f64, f64)>> {
        let mut edges = self.prior.flat_edges();
        for (a, e) in edges.iter_mut().enumerate() {
            if e.0 == 0.0 && self.likelihood.vanishes_at_zero(a) {
                e.0 = f64::NEG_INFINITY;
            }
        }
        edges
            .iter()
            .any(|(l, h)| l.is_finite() || h.is_finite())
            .then_some(edges)
    }

    fn is_normalized(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// MAP estimation

pub const MAP_MAX_ITERS: usize = 500;
pub const MAP_GRAD_TOL: f64 = 1e-8;

/// Maximiser of the target's log-density by projected Newton ascent with
/// backtracking. Coordinates resting on a support edge with the gradient
/// pointing outward are held fixed; the gradient test and the concavity
/// check apply to the remaining coordinates.
pub fn map_estimate<T: Target + ?Sized>(target: &T, x0: &[f64]) -> Result<Vec<f64>, ModelError> {
    let d = target.dim();
    if x0.len() != d {
        return Err(ModelError::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    let bounds = target.support();
    let project = |x: &mut [f64]| {
        for (v, (l, h)) in x.iter_mut().zip(&bounds) {
            *v = v.clamp(*l, *h);
        }
    };
    let mut x = x0.to_vec();
    let mut f = target.log_density(&x);
    if !f.is_finite() {
        return Err(ModelError::OutsideSupport);
    }
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    for _ in 0..MAP_MAX_ITERS {
        target.grad_log_density(&x, &mut g);
        let free: Vec<usize> = (0..d)
            .filter(|&a| {
                !((x[a] <= bounds[a].0 && g[a] < 0.0) || (x[a] >= bounds[a].1 && g[a] > 0.0))
            })
            .collect();
        let gnorm = free.iter().map(|&a| g[a] * g[a]).sum::<f64>().sqrt();
        target.hess_log_density(&x, &mut h);
        let m = free.len();
        let mut neg_h = vec![0.0; m * m];
        for (i, &a) in free.iter().enumerate() {
            for (j, &b) in free.iter().enumerate() {
                neg_h[i * m + j] = -h[a * d + b];
            }
        }
        if gnorm < MAP_GRAD_TOL {
            return if m == 0 || linalg::cholesky(&neg_h, m).is_some() {
                Ok(x)
            } else {
                Err(ModelError::NotStrictlyConcave)
            };
        }
        let gf: Vec<f64> = free.iter().map(|&a| g[a]).collect();
        let mut lambda = 0.0;
        let step = loop {
            let mut reg = neg_h.clone();
            for i in 0..m {
                reg[i * m + i] += lambda;
            }
            if let Some(l) = linalg::cholesky(&reg, m) {
                break linalg::cholesky_solve(&l, m, &gf);
            }
            lambda = if lambda == 0.0 {
                1e-8 * (1.0 + gnorm)
            } else {
                lambda * 10.0
            };
        };
        let concave = || m == 0 || linalg::cholesky(&neg_h, m).is_some();
        // predicted gain below the resolution of f: stationary to working precision
        let decrement: f64 = step.iter().zip(&gf).map(|(s, g)| s * g).sum();
        if decrement < 2e-13 * (1.0 + f.abs()) {
            return if concave() {
                Ok(x)
            } else {
                Err(ModelError::NotStrictlyConcave)
            };
        }
        let mut t = 1.0;
        loop {
            let mut xn = x.clone();
            for (i, &a) in free.iter().enumerate() {
                xn[a] += t * step[i];
            }
            project(&mut xn);
            let fn_ = target.log_density(&xn);
            let ascent: f64 = (0..d).map(|a| g[a] * (xn[a] - x[a])).sum();
            if fn_.is_finite() && fn_ >= f + 1e-4 * ascent {
                x = xn;
                f = fn_;
                break;
            }
            t *= 0.5;
            if t < 1e-16 {
                return Err(ModelError::DidNotConverge(MAP_MAX_ITERS));
            }
        }
    }
    Err(ModelError::DidNotConverge(MAP_MAX_ITERS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gamma_prior_density_at_one() {
        let p = PriorModel::gamma(vec![2.0], vec![0.5]).unwrap();
        // independent evaluation: x^{a-1} e^{-x/b} / (Gamma(a) b^a) with Gamma(2) = 1
        let direct = (1.0f64 * (-2.0f64).exp() / 0.25).ln();
        assert!(close(p.log_density(&[1.0]), direct, 1e-14));
        assert!(close(direct, 4f64.ln() - 2.0, 1e-14));
    }

    #[test]
    fn trivial_prior_values() {
        let u = PriorModel::uniform_box(vec![0.0], vec![2.0]).unwrap();
        assert_eq!(u.log_density(&[3.0]), f64::NEG_INFINITY);
        let g = PriorModel::isotropic_gaussian(3, 1.0).unwrap();
        assert!(close(g.log_density(&[0.0; 3]), -1.5 * LN_2PI, 1e-14));
    }

    #[test]
    fn likelihood_examples() {
        let p = LikelihoodModel::poisson_count(vec![1]).unwrap();
        let direct = (2.0 * (-2.0f64).exp()).ln();
        assert!(close(p.log_likelihood(&[2.0]), direct, 1e-14));

        let lr = LikelihoodModel::logistic_regression(
            vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0],
            2,
            vec![1, 0, 1],
        )
        .unwrap();
        assert!(close(
            lr.log_likelihood(&[0.0, 0.0]),
            -3.0 * 2f64.ln(),
            1e-14
        ));

        let d = 3;
        let mut eye = vec![0.0; 9];
        let mut noise = vec![0.0; 9];
        for i in 0..d {
            eye[i * d + i] = 1.0;
            noise[i * d + i] = 0.1;
        }
        let x = vec![0.3, -1.0, 2.0];
        let gl = LikelihoodModel::gaussian_linear(eye, d, noise, x.clone()).unwrap();
        assert!(close(
            gl.log_likelihood(&x),
            -1.5 * (std::f64::consts::TAU * 0.1).ln(),
            1e-12
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_in_support() {
        let e = PriorModel::exponential(vec![1.0]).unwrap();
        let s1 = sample_prior(&e, 1000, 7);
        let s2 = sample_prior(&e, 1000, 7);
        assert_eq!(s1, s2);
        assert!(s1.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gamma_poisson_map_is_posterior_mode() {
        let t = PosteriorTarget::new(
            PriorModel::gamma(vec![2.0], vec![0.5]).unwrap(),
            LikelihoodModel::poisson_count(vec![1]).unwrap(),
        )
        .unwrap();
        let x = map_estimate(&t, &[1.0]).unwrap();
        assert!(close(x[0], 2.0 / 3.0, 1e-9));
    }

    #[test]
    fn gaussian_map_at_origin() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let t = PosteriorTarget::new(
            PriorModel::isotropic_gaussian(2, 1.0).unwrap(),
            LikelihoodModel::gaussian_linear(eye.clone(), 2, eye, vec![0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let x = map_estimate(&t, &[0.7, -0.4]).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn map_on_support_edge() {
        // exponential prior, data pulling towards negative values: mode at 0
        let t = PosteriorTarget::new(
            PriorModel::exponential(vec![1.0]).unwrap(),
            LikelihoodModel::spectral_magnitude(vec![vec![-1.0, -2.0]], 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(map_estimate(&t, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn config_round_trip() {
        let p = PriorModel::gaussian(vec![0.0, 1.0], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let js = serde_json::to_string(&p).unwrap();
        let back: PriorModel = serde_json::from_str(&js).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<PriorModel>(
            r#"{"kind":"exponential","rate":[1.0],"rat":[2]}"#
        )
        .is_err());
        assert!(
            serde_json::from_str::<PriorModel>(r#"{"kind":"exponential","rate":[-1.0]}"#).is_err()
        );
    }
}
