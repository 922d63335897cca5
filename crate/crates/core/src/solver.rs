//! Fitting `W` by maximising the sample objective
//! `(1/N) sum_i [log q(W Phi_i) + log det(W J_i)]`
//! over coefficient matrices that keep every `W J_i` positive definite.
//!
//! The objective is concave in `W`, and `log det` tends to `-inf` where a
//! determinant vanishes. It does not guard the symmetric part of the
//! Jacobian, which can lose definiteness while the determinant stays
//! positive, so for `d > 1` a `log det Sym(W J_i)` barrier is added. Targets
//! with a finite support edge where the density does not vanish (uniform,
//! exponential) get a logarithmic barrier as well. Barrier weights are driven
//! to zero over a few phases of damped Newton with backtracking.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::models::Target;
use crate::polybasis::{gram_schmidt_empirical, BasisError, BasisSpec};
use crate::samples::SampleSet;
use crate::transportmap::{MapError, TransportMap};

/// Samples per reduction chunk. Chunks are summed in index order, so results
/// do not depend on the number of threads.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Step shrink factor of the backtracking line search.
    pub shrink: f64,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
    /// Smallest admissible per-sample Jacobian determinant.
    pub eps_det: f64,
    pub seed: u64,
    /// Full Newton steps are used while `d * K` does not exceed this;
    /// above it the Hessian is reduced to its per-coordinate diagonal blocks.
    pub newton_max_dim: usize,
    pub barrier_start: f64,
    pub barrier_final: f64,
    pub barrier_factor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-7,
            shrink: 0.5,
            armijo: 1e-4,
            eps_det: 1e-12,
            seed: 0,
            newton_max_dim: 200,
            barrier_start: 1e-2,
            barrier_final: 1e-4,
            barrier_factor: 10.0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidOptions(m.to_owned()));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("armijo", self.armijo),
            ("eps_det", self.eps_det),
            ("barrier_start", self.barrier_start),
            ("barrier_final", self.barrier_final),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if !(self.barrier_factor > 1.0) {
            return bad("barrier_factor must exceed 1");
        }
        if self.barrier_final > self.barrier_start {
            return bad("barrier_final must not exceed barrier_start");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    LineSearchStall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Objective after each accepted step (entry 0 is the start). When a
    /// barrier is active the values include the barrier term of the phase.
    pub objective_trajectory: Vec<f64>,
    /// Trajectory index at which each barrier phase begins.
    pub phase_starts: Vec<usize>,
    /// Barrier weight of each phase (empty when no barrier is used).
    pub barrier_weights: Vec<f64>,
    /// Objective without barrier at the returned map.
    pub final_objective: f64,
    pub final_grad_norm: f64,
    pub wall_time_s: f64,
    pub termination: Termination,
    pub method: String,
}

/// Fitted map with its report.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub map: TransportMap,
    pub report: SolveReport,
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("no feasible starting map found")]
    InfeasibleStart,
    #[error("Jacobian of sample {index} is numerically singular (condition {condition:.3e})")]
    SingularJacobian { index: usize, condition: f64 },
    #[error("solver stopped after {} iterations without converging", .0.report.iterations)]
    MaxIters(Box<FitOutcome>),
    #[error("line search stalled after {} iterations", .0.report.iterations)]
    LineSearchStall(Box<FitOutcome>),
}

impl FitError {
    /// The partially fitted map, when the solver ran but did not converge.
    pub fn outcome(&self) -> Option<&FitOutcome> {
        match self {
            FitError::MaxIters(o) | FitError::LineSearchStall(o) => Some(o),
            _ => None,
        }
    }
}

/// Basis values, Jacobians and source log-densities at the training samples.
#[derive(Debug, Clone)]
pub struct FitCache {
    n: usize,
    d: usize,
    k: usize,
    phi: Vec<f64>,
    jac: Vec<f64>,
    log_source: Option<Vec<f64>>,
}

impl FitCache {
    pub fn new(spec: &BasisSpec<f64>, samples: &SampleSet) -> Result<Self, FitError> {
        let (d, k, n) = (spec.dim, spec.len(), samples.len());
        if samples.dim() != d {
            return Err(BasisError::DimensionMismatch {
                expected: d,
                got: samples.dim(),
            }
            .into());
        }
        if n == 0 {
            return Err(BasisError::EmptySampleSet.into());
        }
        let mut phi = vec![0.0; n * k];
        let mut jac = vec![0.0; n * k * d];
        phi.par_chunks_mut(k)
            .zip(jac.par_chunks_mut(k * d))
            .zip(samples.data().par_chunks_exact(d))
            .try_for_each(|((p, j), x)| spec.eval_into(x, p, j))?;
        Ok(Self {
            n,
            d,
            k,
            phi,
            jac,
            log_source: None,
        })
    }

    /// Record `log p(X_i)` of the source density at every sample.
    pub fn with_source<S: Target + ?Sized>(self, samples: &SampleSet, source: &S) -> Self {
        let values = samples.rows().map(|x| source.log_density(x)).collect();
        self.with_source_values(values)
    }

    /// Record `log p(X_i)` from already-evaluated values.
    pub fn with_source_values(mut self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.n, "one source log-density per sample");
        self.log_source = Some(values);
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_basis(&self) -> usize {
        self.k
    }

    pub fn phi(&self, i: usize) -> &[f64] {
        &self.phi[i * self.k..(i + 1) * self.k]
    }

    pub fn jac(&self, i: usize) -> &[f64] {
        let s = self.k * self.d;
        &self.jac[i * s..(i + 1) * s]
    }

    /// Mean of `log p(X_i)` if the source density was recorded.
    pub fn mean_log_source(&self) -> Option<f64> {
        self.log_source
            .as_ref()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Order {
    Value,
    Gradient,
    FullHessian,
    BlockHessian,
}

struct Problem<'a, T: Target + ?Sized> {
    cache: &'a FitCache,
    target: &'a T,
    eps_det: f64,
    barrier: Option<(&'a [(f64, f64)], f64)>,
    /// Weight of `log det sym(A)`, keeping the symmetric part of each
    /// Jacobian away from singularity (0 disables it).
    sym_weight: f64,
}

#[derive(Clone)]
struct Acc {
    f: f64,
    g: Vec<f64>,
    h: Vec<f64>,
    worst_cond: (usize, f64),
}

impl Acc {
    fn zeros(len_g: usize, len_h: usize) -> Self {
        Self {
            f: 0.0,
            g: vec![0.0; len_g],
            h: vec![0.0; len_h],
            worst_cond: (0, 0.0),
        }
    }

    fn add(&mut self, o: &Acc) {
        self.f += o.f;
        for (a, b) in self.g.iter_mut().zip(&o.g) {
            *a += b;
        }
        for (a, b) in self.h.iter_mut().zip(&o.h) {
            *a += b;
        }
        if o.worst_cond.1 > self.worst_cond.1 {
            self.worst_cond = o.worst_cond;
        }
    }
}

impl<T: Target + ?Sized> Problem<'_, T> {
    fn hess_len(&self, order: Order) -> usize {
        let (d, k) = (self.cache.d, self.cache.k);
        match order {
            Order::FullHessian => (d * k) * (d * k),
            Order::BlockHessian => d * k * k,
            _ => 0,
        }
    }

    /// Accumulate the terms of sample `i`; `false` if the sample is infeasible.
    fn add_sample(
        &self,
        i: usize,
        w: &[f64],
        order: Order,
        acc: &mut Acc,
        scratch: &mut Scratch,
    ) -> bool {
        let (d, k) = (self.cache.d, self.cache.k);
        let phi = self.cache.phi(i);
        let jac = self.cache.jac(i);
        let z = &mut scratch.z;
        let a = &mut scratch.a;
        for r in 0..d {
            let wr = &w[r * k..(r + 1) * k];
            z[r] = wr.iter().zip(phi).map(|(x, y)| x * y).sum();
            for c in 0..d {
                a[r * d + c] = (0..k).map(|m| wr[m] * jac[m * d + c]).sum();
            }
        }
        let det = linalg::det(a, d);
        if !(det > self.eps_det) || !(linalg::min_sym_part_eigenvalue(a, d) > 0.0) {
            return false;
        }
        let lq = self.target.log_density(z);
        if !lq.is_finite() {
            return false;
        }
        let mut f = lq + det.ln();
        let nu = self.sym_weight;
        if nu > 0.0 {
            let sym = &mut scratch.sym;
            for r in 0..d {
                for c in 0..d {
                    sym[r * d + c] = 0.5 * (a[r * d + c] + a[c * d + r]);
                }
            }
            let Some(l) = linalg::cholesky(sym, d) else {
                return false;
            };
            f += nu * 2.0 * (0..d).map(|r| l[r * d + r].ln()).sum::<f64>();
        }
        if let Some((bounds, mu)) = self.barrier {
            for (r, (lo, hi)) in bounds.iter().enumerate() {
                if lo.is_finite() {
                    let s = z[r] - lo;
                    if !(s > 0.0) {
                        return false;
                    }
                    f += mu * s.ln();
                }
                if hi.is_finite() {
                    let s = hi - z[r];
                    if !(s > 0.0) {
                        return false;
                    }
                    f += mu * s.ln();
                }
            }
        }
        acc.f += f;
        if order == Order::Value {
            return true;
        }
        let gz = &mut scratch.gz;
        self.target.grad_log_density(z, gz);
        let hz = &mut scratch.hz;
        let want_h = matches!(order, Order::FullHessian | Order::BlockHessian);
        if want_h {
            self.target.hess_log_density(z, hz);
        }
        if let Some((bounds, mu)) = self.barrier {
            for (r, (lo, hi)) in bounds.iter().enumerate() {
                if lo.is_finite() {
                    let s = z[r] - lo;
                    gz[r] += mu / s;
                    if want_h {
                        hz[r * d + r] -= mu / (s * s);
                    }
                }
                if hi.is_finite() {
                    let s = hi - z[r];
                    gz[r] -= mu / s;
                    if want_h {
                        hz[r * d + r] -= mu / (s * s);
                    }
                }
            }
        }
        let Some(ainv) = linalg::inverse(a, d) else {
            return false;
        };
        let norm = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cond = norm(a) * norm(&ainv);
        if cond > acc.worst_cond.1 {
            acc.worst_cond = (i, cond);
        }
        // B = J A^{-1}, K x d
        let b = &mut scratch.b;
        for m in 0..k {
            for c in 0..d {
                b[m * d + c] = (0..d).map(|r| jac[m * d + r] * ainv[r * d + c]).sum();
            }
        }
        for r in 0..d {
            for m in 0..k {
                acc.g[r * k + m] += gz[r] * phi[m] + b[m * d + r];
            }
        }
        if nu > 0.0 {
            // C = J P and D = J P J^T with P = sym(A)^{-1}
            let Some(p) = linalg::inverse(&scratch.sym, d) else {
                return false;
            };
            let cm = &mut scratch.c;
            for m in 0..k {
                for c in 0..d {
                    cm[m * d + c] = (0..d).map(|r| jac[m * d + r] * p[r * d + c]).sum();
                }
            }
            for r in 0..d {
                for m in 0..k {
                    acc.g[r * k + m] += nu * cm[m * d + r];
                }
            }
            if want_h {
                let dm = &mut scratch.dm;
                for m in 0..k {
                    for l in 0..k {
                        dm[m * k + l] = (0..d).map(|c| cm[m * d + c] * jac[l * d + c]).sum();
                    }
                }
                let half = 0.5 * nu;
                if order == Order::FullHessian {
                    let n = d * k;
                    for r in 0..d {
                        for m in 0..k {
                            let row = (r * k + m) * n;
                            for c in 0..d {
                                let prc = p[r * d + c];
                                let cmc = cm[m * d + c];
                                for l in 0..k {
                                    acc.h[row + c * k + l] -=
                                        half * (cmc * cm[l * d + r] + prc * dm[m * k + l]);
                                }
                            }
                        }
                    }
                } else {
                    for r in 0..d {
                        let prr = p[r * d + r];
                        let blk = &mut acc.h[r * k * k..(r + 1) * k * k];
                        for m in 0..k {
                            for l in 0..k {
                                blk[m * k + l] -=
                                    half * (cm[m * d + r] * cm[l * d + r] + prr * dm[m * k + l]);
                            }
                        }
                    }
                }
            }
        }
        match order {
            Order::FullHessian => {
                let n = d * k;
                for r in 0..d {
                    for m in 0..k {
                        let row = (r * k + m) * n;
                        for c in 0..d {
                            let hrc = hz[r * d + c];
                            let bmc = b[m * d + c];
                            for l in 0..k {
                                acc.h[row + c * k + l] +=
                                    hrc * phi[m] * phi[l] - bmc * b[l * d + r];
                            }
                        }
                    }
                }
            }
            Order::BlockHessian => {
                for r in 0..d {
                    let hrr = hz[r * d + r];
                    let blk = &mut acc.h[r * k * k..(r + 1) * k * k];
                    for m in 0..k {
                        for l in 0..k {
                            blk[m * k + l] += hrr * phi[m] * phi[l] - b[m * d + r] * b[l * d + r];
                        }
                    }
                }
            }
            _ => {}
        }
        true
    }

    /// Sample average of the requested derivatives; `None` if infeasible.
    fn evaluate(&self, w: &[f64], order: Order) -> Option<Acc> {
        let (n, d, k) = (self.cache.n, self.cache.d, self.cache.k);
        let lg = if order == Order::Value { 0 } else { d * k };
        let lh = self.hess_len(order);
        let idx: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
        let parts: Vec<Option<Acc>> = idx
            .par_iter()
            .map(|&c| {
                let mut acc = Acc::zeros(lg, lh);
                let mut scratch = Scratch::new(d, k);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    if !self.add_sample(i, w, order, &mut acc, &mut scratch) {
                        return None;
                    }
                }
                Some(acc)
            })
            .collect();
        let mut total = Acc::zeros(lg, lh);
        for p in parts {
            total.add(&p?);
        }
        let nf = n as f64;
        total.f /= nf;
        total.g.iter_mut().for_each(|v| *v /= nf);
        total.h.iter_mut().for_each(|v| *v /= nf);
        Some(total)
    }
}

struct Scratch {
    z: Vec<f64>,
    a: Vec<f64>,
    gz: Vec<f64>,
    hz: Vec<f64>,
    b: Vec<f64>,
    sym: Vec<f64>,
    c: Vec<f64>,
    dm: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, k: usize) -> Self {
        Self {
            z: vec![0.0; d],
            a: vec![0.0; d * d],
            gz: vec![0.0; d],
            hz: vec![0.0; d * d],
            b: vec![0.0; k * d],
            sym: vec![0.0; d * d],
            c: vec![0.0; k * d],
            dm: vec![0.0; k * k],
        }
    }
}

/// Sample objective at `w` (d x K row-major); `-inf` when any sample is infeasible.
pub fn objective<T: Target + ?Sized>(w: &[f64], cache: &FitCache, target: &T, eps_det: f64) -> f64 {
    let prob = Problem {
        cache,
        target,
        eps_det,
        barrier: None,
        sym_weight: 0.0,
    };
    prob.evaluate(w, Order::Value)
        .map_or(f64::NEG_INFINITY, |a| a.f)
}

/// Gradient of [`objective`] with respect to `w`.
pub fn gradient<T: Target + ?Sized>(
    w: &[f64],
    cache: &FitCache,
    target: &T,
    eps_det: f64,
) -> Result<Vec<f64>, FitError> {
    let prob = Problem {
        cache,
        target,
        eps_det,
        barrier: None,
        sym_weight: 0.0,
    };
    let acc = prob
        .evaluate(w, Order::Gradient)
        .ok_or(FitError::InfeasibleStart)?;
    if acc.worst_cond.1 > 1e12 {
        return Err(FitError::SingularJacobian {
            index: acc.worst_cond.0,
            condition: acc.worst_cond.1,
        });
    }
    Ok(acc.g)
}

/// Full Hessian of [`objective`] ((d K) x (d K), row-major), for checks.
pub fn hessian<T: Target + ?Sized>(
    w: &[f64],
    cache: &FitCache,
    target: &T,
    eps_det: f64,
) -> Option<Vec<f64>> {
    let prob = Problem {
        cache,
        target,
        eps_det,
        barrier: None,
        sym_weight: 0.0,
    };
    prob.evaluate(w, Order::FullHessian).map(|a| a.h)
}

/// Starting coefficients: the identity map, or if that is infeasible for the
/// target's support, a coordinatewise affine map placing the samples inside it.
pub fn initial_coefficients<T: Target + ?Sized>(
    spec: &BasisSpec<f64>,
    cache: &FitCache,
    samples: &SampleSet,
    target: &T,
    eps_det: f64,
) -> Result<Vec<f64>, FitError> {
    let ident = spec.coordinate_expansion()?;
    let support = target.support();
    let feasible = |w: &[f64]| {
        let prob = Problem {
            cache,
            target,
            eps_det,
            barrier: None,
            sym_weight: 0.0,
        };
        let Some(_) = prob.evaluate(w, Order::Value) else {
            return false;
        };
        // strict interior of finite edges, needed for the barrier
        (0..cache.n).all(|i| {
            let phi = cache.phi(i);
            support.iter().enumerate().all(|(a, (lo, hi))| {
                let z: f64 = w[a * cache.k..(a + 1) * cache.k]
                    .iter()
                    .zip(phi)
                    .map(|(x, y)| x * y)
                    .sum();
                z > *lo && z < *hi
            })
        })
    };
    if feasible(&ident) {
        return Ok(ident);
    }
    let (d, k) = (spec.dim, spec.len());
    // value of the constant basis function
    let c0 = cache.phi(0)[0];
    let mut w = ident.clone();
    for a in 0..d {
        let col = samples.column(a);
        let mn = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let spread = (mx - mn).max(1e-12);
        let (lo, hi) = support[a];
        let (scale, shift) = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => {
                let (tlo, thi) = (lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo));
                let s = (thi - tlo) / spread;
                (s, tlo - s * mn)
            }
            (true, false) if mn <= lo => (1.0, lo + 0.1 * (spread + 1.0) - mn),
            (false, true) if mx >= hi => (1.0, hi - 0.1 * (spread + 1.0) - mx),
            _ => (1.0, 0.0),
        };
        for m in 0..k {
            w[a * k + m] = scale * ident[a * k + m];
        }
        w[a * k] += shift / c0;
    }
    if feasible(&w) {
        Ok(w)
    } else {
        Err(FitError::InfeasibleStart)
    }
}

/// Fit a map pushing the sample distribution to `target`, starting from
/// [`initial_coefficients`].
pub fn fit<T: Target + ?Sized>(
    target: &T,
    samples: &SampleSet,
    spec: &BasisSpec<f64>,
    opts: &FitOptions,
) -> Result<FitOutcome, FitError> {
    opts.validate()?;
    let cache = FitCache::new(spec, samples)?;
    let w0 = initial_coefficients(spec, &cache, samples, target, opts.eps_det)?;
    fit_cached(target, &cache, spec, w0, opts)
}

/// Fit from given starting coefficients (must be feasible).
pub fn fit_from<T: Target + ?Sized>(
    target: &T,
    samples: &SampleSet,
    spec: &BasisSpec<f64>,
    w0: Vec<f64>,
    opts: &FitOptions,
) -> Result<FitOutcome, FitError> {
    opts.validate()?;
    let cache = FitCache::new(spec, samples)?;
    fit_cached(target, &cache, spec, w0, opts)
}

/// Core iteration over a prepared cache.
pub fn fit_cached<T: Target + ?Sized>(
    target: &T,
    cache: &FitCache,
    spec: &BasisSpec<f64>,
    w0: Vec<f64>,
    opts: &FitOptions,
) -> Result<FitOutcome, FitError> {
    let start = Instant::now();
    let (d, k) = (cache.d, cache.k);
    if target.dim() != d || spec.dim != d || spec.len() != k || w0.len() != d * k {
        return Err(FitError::InvalidInput(
            "target, basis, samples and start disagree in shape".into(),
        ));
    }
    let full = d * k <= opts.newton_max_dim;
    let order = if full {
        Order::FullHessian
    } else {
        Order::BlockHessian
    };
    let bounds = target.barrier_bounds();
    let sym_barrier = d > 1;
    let mut mus = Vec::new();
    if bounds.is_some() || sym_barrier {
        let mut mu = opts.barrier_start;
        loop {
            mus.push(mu);
            if mu <= opts.barrier_final * (1.0 + 1e-9) {
                break;
            }
            mu = (mu / opts.barrier_factor).max(opts.barrier_final);
        }
    } else {
        mus.push(0.0);
    }

    let mut w = w0;
    let mut traj = Vec::new();
    let mut phase_starts = Vec::new();
    let mut iters = 0;
    let mut termination = Termination::Converged;
    let mut grad_norm = f64::NAN;
    'phases: for (pi, &mu) in mus.iter().enumerate() {
        let last = pi + 1 == mus.len();
        let tol = if last {
            opts.grad_tol
        } else {
            opts.grad_tol.max(1e-5)
        };
        let prob = Problem {
            cache,
            target,
            eps_det: opts.eps_det,
            barrier: bounds.as_deref().map(|b| (b, mu)),
            sym_weight: if sym_barrier { mu } else { 0.0 },
        };
        phase_starts.push(traj.len());
        let Some(mut cur) = prob.evaluate(&w, order) else {
            return Err(FitError::InfeasibleStart);
        };
        traj.push(cur.f);
        loop {
            grad_norm = cur.g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if grad_norm < tol {
                break;
            }
            if iters >= opts.max_iters {
                termination = Termination::MaxIters;
                break 'phases;
            }
            // below this the objective cannot resolve the predicted gain
            let noise = 1e-13 * (1.0 + cur.f.abs());
            let mut step = newton_direction(&cur, d, k, full);
            let mut slope: f64 = step.iter().zip(&cur.g).map(|(s, g)| s * g).sum();
            if slope > 0.0 && slope < 2.0 * noise {
                // Newton decrement at objective resolution: nothing left to gain
                break;
            }
            if !(slope > 0.0) {
                // rounding made the Newton step useless; take the gradient
                step = cur.g.clone();
                slope = grad_norm * grad_norm;
            }
            let mut t = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = w.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                if let Some(v) = prob.evaluate(&trial, Order::Value) {
                    if v.f >= cur.f + opts.armijo * t * slope && v.f > cur.f - noise {
                        break Some((trial, None));
                    }
                    if t * slope < noise && v.f >= cur.f - noise {
                        // accept on a decrease of the gradient instead
                        if let Some(full_eval) = prob.evaluate(&trial, order) {
                            let gn = full_eval.g.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if gn < grad_norm {
                                break Some((trial, Some(full_eval)));
                            }
                        }
                    }
                }
                t *= opts.shrink;
                if t < 1e-16 {
                    break None;
                }
            };
            let Some((next, eval)) = accepted else {
                termination = Termination::LineSearchStall;
                break 'phases;
            };
            iters += 1;
            w = next;
            cur = match eval {
                Some(e) => e,
                None => prob.evaluate(&w, order).expect("accepted step is feasible"),
            };
            traj.push(cur.f);
        }
    }
    let final_objective = objective(&w, cache, target, opts.eps_det);
    let report = SolveReport {
        iterations: iters,
        objective_trajectory: traj,
        phase_starts,
        barrier_weights: if bounds.is_some() || sym_barrier {
            mus
        } else {
            Vec::new()
        },
        final_objective,
        final_grad_norm: grad_norm,
        wall_time_s: start.elapsed().as_secs_f64(),
        termination,
        method: if full { "newton" } else { "block_newton" }.to_owned(),
    };
    let map = TransportMap::new(spec.clone(), w)?;
    let outcome = FitOutcome { map, report };
    match termination {
        Termination::Converged => Ok(outcome),
        Termination::MaxIters => Err(FitError::MaxIters(Box::new(outcome))),
        Termination::LineSearchStall => Err(FitError::LineSearchStall(Box::new(outcome))),
    }
}

/// Solve `(-H + lambda I) s = g`, raising `lambda` until the system is positive definite.
fn newton_direction(acc: &Acc, d: usize, k: usize, full: bool) -> Vec<f64> {
    let solve = |h: &[f64], g: &[f64], n: usize| -> Vec<f64> {
        let scale = (0..n)
            .map(|i| h[i * n + i].abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        let mut lambda = 0.0;
        loop {
            let mut m: Vec<f64> = h.iter().map(|v| -v).collect();
            for i in 0..n {
                m[i * n + i] += lambda;
            }
            if let Some(l) = linalg::cholesky(&m, n) {
                let s = linalg::cholesky_solve(&l, n, g);
                if s.iter().all(|v| v.is_finite()) {
                    return s;
                }
            }
            lambda = if lambda == 0.0 {
                1e-10 * scale
            } else {
                lambda * 10.0
            };
            if lambda > 1e10 * scale {
                // fall back to plain gradient ascent
                return g.iter().map(|v| v / scale).collect();
            }
        }
    };
    if full {
        solve(&acc.h, &acc.g, d * k)
    } else {
        let mut out = Vec::with_capacity(d * k);
        for r in 0..d {
            out.extend(solve(
                &acc.h[r * k * k..(r + 1) * k * k],
                &acc.g[r * k..(r + 1) * k],
                k,
            ));
        }
        out
    }
}

/// How the second stage of a chained fit chooses its basis.
#[derive(Debug, Clone)]
pub enum StageBasis {
    Fixed(BasisSpec<f64>),
    /// Empirical Gram basis of the given degree, built from the pushed samples.
    EmpiricalGram(usize),
}

#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct ChainError {
    pub stage: u8,
    #[source]
    pub source: FitError,
}

/// Two maps fitted in sequence: the first pushes the base samples to
/// `intermediate`; its pushed samples train the second, towards `target`.
pub fn fit_chain<I: Target + ?Sized, F: Target + ?Sized>(
    intermediate: &I,
    target: &F,
    base_samples: &SampleSet,
    stage1: &BasisSpec<f64>,
    stage2: &StageBasis,
    opts: &FitOptions,
) -> Result<(FitOutcome, FitOutcome), ChainError> {
    let first = fit(intermediate, base_samples, stage1, opts)
        .map_err(|source| ChainError { stage: 1, source })?;
    let second = fit_second_stage(&first.map, target, base_samples, stage2, opts)?;
    Ok((first, second))
}

/// Second stage of [`fit_chain`] for an already fitted first map.
pub fn fit_second_stage<F: Target + ?Sized>(
    first: &TransportMap,
    target: &F,
    base_samples: &SampleSet,
    stage2: &StageBasis,
    opts: &FitOptions,
) -> Result<FitOutcome, ChainError> {
    let tag = |source: FitError| ChainError { stage: 2, source };
    let pushed = match first.push_samples(base_samples) {
        Ok(s) => s,
        Err(MapError::InfeasibleRegion { pushed, .. }) => *pushed,
        Err(e) => {
            return Err(ChainError {
                stage: 1,
                source: e.into(),
            })
        }
    };
    let spec = match stage2 {
        StageBasis::Fixed(s) => s.clone(),
        StageBasis::EmpiricalGram(p) => {
            gram_schmidt_empirical(pushed.data(), pushed.dim(), *p).map_err(|e| tag(e.into()))?
        }
    };
    fit(target, &pushed, &spec, opts).map_err(tag)
}
