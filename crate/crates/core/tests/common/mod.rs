#![allow(dead_code)]

use bayesmap::{LikelihoodModel, PosteriorTarget, PriorModel, Provenance, SampleSet};

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gamma(shape, scale) density computed from scratch, normalised by
/// quadrature rather than by the Gamma function.
pub fn gamma_pdf_quadrature(shape: f64, scale: f64) -> impl Fn(f64) -> f64 {
    let kernel = move |x: f64| {
        if x > 0.0 {
            x.powf(shape - 1.0) * (-x / scale).exp()
        } else {
            0.0
        }
    };
    let z = simpson(kernel, 0.0, 60.0 * scale * shape.max(1.0), 200_000);
    move |x| kernel(x) / z
}

/// Cumulative distribution of an unnormalised 1-d density on a grid,
/// tabulated by Simpson panels and interpolated linearly.
pub struct GridCdf {
    xs: Vec<f64>,
    cs: Vec<f64>,
}

impl GridCdf {
    pub fn new(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / n as f64;
        let mut xs = vec![lo];
        let mut cs = vec![0.0];
        for i in 0..n {
            let a = lo + i as f64 * h;
            let piece = (f(a) + 4.0 * f(a + 0.5 * h) + f(a + h)) * h / 6.0;
            xs.push(a + h);
            cs.push(cs[i] + piece);
        }
        let z = *cs.last().unwrap();
        cs.iter_mut().for_each(|c| *c /= z);
        Self { xs, cs }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return 0.0;
        }
        let i = self.xs.partition_point(|v| *v < x);
        if i >= self.xs.len() {
            return 1.0;
        }
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        self.cs[i - 1] + (self.cs[i] - self.cs[i - 1]) * (x - x0) / (x1 - x0)
    }
}

/// Two-sided KS statistic computed by brute force over the sorted sample.
pub fn ks(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn gamma_poisson() -> (PriorModel, PosteriorTarget) {
    let prior = PriorModel::gamma(vec![2.0], vec![0.5]).unwrap();
    let target = PosteriorTarget::new(
        prior.clone(),
        LikelihoodModel::poisson_count(vec![1]).unwrap(),
    )
    .unwrap();
    (prior, target)
}

/// `log(8/27)`: evidence of one Poisson count under a Gamma(2, 1/2) rate.
pub fn log_beta_gamma_poisson() -> f64 {
    (8.0f64 / 27.0).ln()
}

pub fn samples(dim: usize, data: Vec<f64>) -> SampleSet {
    SampleSet::new(dim, data, Provenance::default())
}

/// Max over entries of `|a - b| / max(1, |b|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

use bayesmap::rng::{stream, StreamRng};
use bayesmap::solver::{self, FitCache};
use bayesmap::{BasisSpec, Target, TransportMap};
use rand_distr::{Distribution, StandardNormal};

/// Identity coefficients plus Gaussian noise of size `scale`, redrawn until
/// the objective is finite on the cache.
pub fn random_feasible_w<T: Target + ?Sized>(
    spec: &BasisSpec<f64>,
    cache: &FitCache,
    target: &T,
    scale: f64,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let id = TransportMap::identity(spec.clone()).unwrap();
    for _ in 0..1000 {
        let w: Vec<f64> = id
            .w()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + scale * z
            })
            .collect();
        if solver::objective(&w, cache, target, 1e-12).is_finite() {
            return w;
        }
    }
    panic!("no feasible perturbation found");
}

/// Central-difference gradient of the sample objective.
pub fn fd_gradient<T: Target + ?Sized>(
    w: &[f64],
    cache: &FitCache,
    target: &T,
    h: f64,
) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let mut wp = w.to_vec();
            let mut wm = w.to_vec();
            wp[i] += h;
            wm[i] -= h;
            (solver::objective(&wp, cache, target, 1e-12)
                - solver::objective(&wm, cache, target, 1e-12))
                / (2.0 * h)
        })
        .collect()
}

/// `|g - fd| / max(|fd|, 1)` in the Euclidean norm.
pub fn rel_norm_err(g: &[f64], fd: &[f64]) -> f64 {
    let diff = g
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}

/// Largest `|S1(x) - S2(x)|` over the rows of `points`.
pub fn sup_distance(a: &TransportMap, b: &TransportMap, points: &[f64]) -> f64 {
    let d = a.dim();
    points
        .chunks_exact(d)
        .flat_map(|x| {
            let (ya, yb) = (a.apply(x).unwrap(), b.apply(x).unwrap());
            ya.into_iter()
                .zip(yb)
                .map(|(u, v)| (u - v).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Two points per class around (-1, 1) and (1, -1) under a N(0, 100 I) prior.
pub fn small_logistic(seed: u64) -> (PriorModel, PosteriorTarget) {
    let prior = PriorModel::isotropic_gaussian(2, 100.0).unwrap();
    let mut rng = stream(seed, "data");
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..4 {
        let c = if i % 2 == 0 { 1.0 } else { -1.0 };
        let z: [f64; 2] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        feats.extend([-c + 0.5 * z[0], c + 0.5 * z[1]]);
        labels.push(u8::from(c > 0.0));
    }
    let lik = LikelihoodModel::logistic_regression(feats, 2, labels).unwrap();
    (prior.clone(), PosteriorTarget::new(prior, lik).unwrap())
}
