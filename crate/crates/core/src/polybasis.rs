//! Orthonormal tensor-product polynomial bases and their Jacobians.
//!
//! A [`BasisSpec`] pairs one univariate family per coordinate with a
//! total-degree truncated, graded-lex ordered set of multi-indices. Every
//! classical family is normalised to unit norm under its own probability
//! measure, so the population Gram matrix of `Phi(X)` is the identity when
//! `X` follows the declared source distribution. Distributions without a
//! classical family use [`gram_schmidt_empirical`], which whitens standardised
//! monomials against a sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("non-finite input coordinate {index}")]
    NonFiniteInput { index: usize },
    #[error("point has dimension {got}, basis expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("need at least {needed} samples for an empirical basis, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("empirical monomial Gram is numerically singular (condition {condition:e})")]
    RankDeficient { condition: f64 },
    #[error("basis of total degree {0} cannot represent the coordinate functions")]
    DegreeTooLow(usize),
    #[error("degree {0} exceeds the supported maximum of 10")]
    DegreeTooHigh(usize),
}

/// Highest supported total degree.
pub const MAX_DEGREE: usize = 10;

/// Exponents `(j_1, ..., j_d)` of one tensor-product basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn degrees(&self) -> &[usize] {
        &self.0
    }

    pub fn total_degree(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&j| j == 0)
    }
}

/// All multi-indices in `d` variables with total degree at most `p`, graded
/// by total degree and lexicographically ascending within a grade.
pub fn enumerate_multi_indices(d: usize, p: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for t in 0..=p {
        let mut grade = Vec::new();
        let mut cur = vec![0usize; d];
        compositions(t, 0, &mut cur, &mut grade);
        grade.sort();
        out.extend(grade.into_iter().map(MultiIndex));
    }
    out
}

fn compositions(remaining: usize, pos: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let d = cur.len();
    if pos + 1 == d {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for j in 0..=remaining {
        cur[pos] = j;
        compositions(remaining - j, pos + 1, cur, out);
    }
}

/// Binomial coefficient `C(n, k)`.
pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Univariate polynomial family, tagged by the source marginal it is
/// orthonormal under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family<T> {
    /// Probabilists' Hermite polynomials for N(mean, std^2).
    Hermite { mean: T, std: T },
    /// Legendre polynomials for the uniform distribution on [lo, hi].
    Legendre { lo: T, hi: T },
    /// Generalised Laguerre polynomials L^(alpha) for Gamma(alpha + 1, scale).
    Laguerre { alpha: T, scale: T },
    /// Standardised monomials `((x - center)/scale)^n`; orthonormalised at the
    /// basis level by the whitening matrix.
    EmpiricalGram { center: T, scale: T },
}

impl<T: Scalar> Family<T> {
    pub fn hermite(mean: T, std: T) -> Self {
        Family::Hermite { mean, std }
    }

    pub fn legendre(lo: T, hi: T) -> Self {
        Family::Legendre { lo, hi }
    }

    /// Laguerre family orthonormal under Gamma(shape, scale).
    pub fn laguerre_for_gamma(shape: T, scale: T) -> Self {
        Family::Laguerre {
            alpha: shape - T::one(),
            scale,
        }
    }

    /// Values `psi_0..=psi_p` at `x` and their derivatives in `x`.
    pub fn eval(&self, x: T, p: usize, vals: &mut [T], ders: &mut [T]) {
        match *self {
            Family::Hermite { mean, std } => {
                let u = (x - mean) / std;
                vals[0] = T::one();
                ders[0] = T::zero();
                if p >= 1 {
                    vals[1] = u;
                    ders[1] = T::one() / std;
                }
                for n in 1..p {
                    let nf = T::of_usize(n);
                    vals[n + 1] = (u * vals[n] - nf.sqrt() * vals[n - 1]) / (nf + T::one()).sqrt();
                }
                for n in 2..=p {
                    ders[n] = T::of_usize(n).sqrt() * vals[n - 1] / std;
                }
            }
            Family::Legendre { lo, hi } => {
                let two = T::of(2.0);
                let du = two / (hi - lo);
                let u = (two * x - lo - hi) / (hi - lo);
                // classical P_n and P'_n(u) first, normalise afterwards
                vals[0] = T::one();
                ders[0] = T::zero();
                if p >= 1 {
                    vals[1] = u;
                    ders[1] = T::one();
                }
                for n in 1..p {
                    let nf = T::of_usize(n);
                    let two_n1 = T::of_usize(2 * n + 1);
                    vals[n + 1] = (two_n1 * u * vals[n] - nf * vals[n - 1]) / (nf + T::one());
                    ders[n + 1] = ders[n - 1] + two_n1 * vals[n];
                }
                for n in 0..=p {
                    let c = T::of_usize(2 * n + 1).sqrt();
                    vals[n] *= c;
                    ders[n] *= c * du;
                }
            }
            Family::Laguerre { alpha, scale } => {
                let u = x / scale;
                vals[0] = T::one();
                ders[0] = T::zero();
                if p >= 1 {
                    vals[1] = T::one() + alpha - u;
                    ders[1] = -T::one();
                }
                for n in 1..p {
                    let nf = T::of_usize(n);
                    let a = T::of_usize(2 * n + 1) + alpha - u;
                    let b = nf + alpha;
                    let np1 = nf + T::one();
                    vals[n + 1] = (a * vals[n] - b * vals[n - 1]) / np1;
                    ders[n + 1] = (a * ders[n] - vals[n] - b * ders[n - 1]) / np1;
                }
                // squared norm under Gamma(alpha+1): prod_{k<=n} (k + alpha)/k;
                // the (-1)^n flip gives every psi_n a positive leading coefficient
                let mut norm2 = T::one();
                for n in 0..=p {
                    if n > 0 {
                        norm2 *= (T::of_usize(n) + alpha) / T::of_usize(n);
                    }
                    let mut c = T::one() / norm2.sqrt();
                    if n % 2 == 1 {
                        c = -c;
                    }
                    vals[n] *= c;
                    ders[n] *= c / scale;
                }
            }
            Family::EmpiricalGram { center, scale } => {
                let u = (x - center) / scale;
                vals[0] = T::one();
                ders[0] = T::zero();
                for n in 1..=p {
                    vals[n] = vals[n - 1] * u;
                    ders[n] = T::of_usize(n) * vals[n - 1] / scale;
                }
            }
        }
    }

    /// The same family in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Family<U> {
        let c = |v: T| U::of(v.as_f64());
        match *self {
            Family::Hermite { mean, std } => Family::Hermite {
                mean: c(mean),
                std: c(std),
            },
            Family::Legendre { lo, hi } => Family::Legendre {
                lo: c(lo),
                hi: c(hi),
            },
            Family::Laguerre { alpha, scale } => Family::Laguerre {
                alpha: c(alpha),
                scale: c(scale),
            },
            Family::EmpiricalGram { center, scale } => Family::EmpiricalGram {
                center: c(center),
                scale: c(scale),
            },
        }
    }

    /// Coefficients `(c0, c1)` with `x = c0 psi_0(x) + c1 psi_1(x)`.
    pub fn coordinate_coefficients(&self) -> (T, T) {
        match *self {
            Family::Hermite { mean, std } => (mean, std),
            Family::Legendre { lo, hi } => {
                let half = T::of(0.5);
                ((lo + hi) * half, (hi - lo) * half / T::of(3.0).sqrt())
            }
            Family::Laguerre { alpha, scale } => {
                let a1 = T::one() + alpha;
                (scale * a1, scale * a1.sqrt())
            }
            Family::EmpiricalGram { center, scale } => (center, scale),
        }
    }
}

/// Values `Phi(x)` (length K) and Jacobian `J_Phi(x)` (K x d, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval<T> {
    pub phi: Vec<T>,
    pub jac: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec<T> {
    pub dim: usize,
    pub families: Vec<Family<T>>,
    pub max_total_degree: usize,
    pub indices: Vec<MultiIndex>,
    /// Lower-triangular K x K matrix applied to the raw tensor products
    /// (present for empirical-Gram bases).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitening: Option<Vec<T>>,
}

impl<T: Scalar> BasisSpec<T> {
    /// Total-degree truncated tensor basis over the given per-coordinate families.
    pub fn total_degree(families: Vec<Family<T>>, p: usize) -> Result<Self, BasisError> {
        if p > MAX_DEGREE {
            return Err(BasisError::DegreeTooHigh(p));
        }
        let dim = families.len();
        Ok(Self {
            dim,
            indices: enumerate_multi_indices(dim, p),
            families,
            max_total_degree: p,
            whitening: None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BasisSpec<U> {
        BasisSpec {
            dim: self.dim,
            families: self.families.iter().map(Family::cast).collect(),
            max_total_degree: self.max_total_degree,
            indices: self.indices.clone(),
            whitening: self
                .whitening
                .as_ref()
                .map(|w| w.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Evaluate `Phi(x)` and `J_Phi(x)` into caller-provided buffers.
    pub fn eval_into(&self, x: &[T], phi: &mut [T], jac: &mut [T]) -> Result<(), BasisError> {
        let d = self.dim;
        if x.len() != d {
            return Err(BasisError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(BasisError::NonFiniteInput { index });
        }
        let p = self.max_total_degree;
        let mut vals = vec![T::zero(); d * (p + 1)];
        let mut ders = vec![T::zero(); d * (p + 1)];
        for (a, fam) in self.families.iter().enumerate() {
            let r = a * (p + 1)..(a + 1) * (p + 1);
            fam.eval(x[a], p, &mut vals[r.clone()], &mut ders[r]);
        }
        let k = self.len();
        let (raw_phi, raw_jac): (&mut [T], &mut [T]) = (phi, jac);
        for (i, idx) in self.indices.iter().enumerate() {
            let j = idx.degrees();
            let mut prod = T::one();
            for a in 0..d {
                prod *= vals[a * (p + 1) + j[a]];
            }
            raw_phi[i] = prod;
            for b in 0..d {
                let mut g = ders[b * (p + 1) + j[b]];
                if g != T::zero() {
                    for a in 0..d {
                        if a != b {
                            g *= vals[a * (p + 1) + j[a]];
                        }
                    }
                }
                raw_jac[i * d + b] = g;
            }
        }
        if let Some(wh) = &self.whitening {
            let phi0 = raw_phi.to_vec();
            let jac0 = raw_jac.to_vec();
            for i in 0..k {
                let mut s = T::zero();
                for l in 0..=i {
                    s += wh[i * k + l] * phi0[l];
                }
                raw_phi[i] = s;
                for b in 0..d {
                    let mut g = T::zero();
                    for l in 0..=i {
                        g += wh[i * k + l] * jac0[l * d + b];
                    }
                    raw_jac[i * d + b] = g;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[T]) -> Result<BasisEval<T>, BasisError> {
        let k = self.len();
        let mut phi = vec![T::zero(); k];
        let mut jac = vec![T::zero(); k * self.dim];
        self.eval_into(x, &mut phi, &mut jac)?;
        Ok(BasisEval { phi, jac })
    }

    /// Expansion of the coordinate functions in this basis: a d x K matrix
    /// `C` with `C Phi(x) = x` exactly.
    pub fn coordinate_expansion(&self) -> Result<Vec<T>, BasisError> {
        if self.max_total_degree == 0 {
            return Err(BasisError::DegreeTooLow(0));
        }
        let d = self.dim;
        let k = self.len();
        let unit = |a: usize| {
            self.unit_index(a)
                .expect("graded enumeration contains every unit index")
        };
        // coefficients against the raw tensor functions
        let mut raw = vec![T::zero(); d * k];
        for (a, fam) in self.families.iter().enumerate() {
            let (c0, c1) = fam.coordinate_coefficients();
            raw[a * k] = c0;
            raw[a * k + unit(a)] = c1;
        }
        match &self.whitening {
            None => Ok(raw),
            // raw = L Phi  (L = whitening^{-1}), so x = raw_coeffs * L * Phi
            Some(wh) => {
                let l = linalg::lower_triangular_inverse(wh, k);
                Ok(linalg::matmul(&raw, &l, d, k, k))
            }
        }
    }

    fn unit_index(&self, a: usize) -> Option<usize> {
        self.indices
            .iter()
            .position(|m| m.total_degree() == 1 && m.degrees()[a] == 1)
    }
}

/// Empirical Gram `(1/n) sum Phi(X_i) Phi(X_i)^T` over `n` points stored
/// row-major in `points`.
pub fn gram_from_points<T: Scalar>(
    spec: &BasisSpec<T>,
    points: &[T],
) -> Result<Vec<T>, BasisError> {
    let d = spec.dim;
    let n = points.len() / d.max(1);
    if n == 0 {
        return Err(BasisError::EmptySampleSet);
    }
    let k = spec.len();
    let mut gram = vec![T::zero(); k * k];
    let mut phi = vec![T::zero(); k];
    let mut jac = vec![T::zero(); k * d];
    for row in points.chunks_exact(d) {
        spec.eval_into(row, &mut phi, &mut jac)?;
        for i in 0..k {
            for j in 0..=i {
                gram[i * k + j] += phi[i] * phi[j];
            }
        }
    }
    let nf = T::of_usize(n);
    for i in 0..k {
        for j in 0..=i {
            let v = gram[i * k + j] / nf;
            gram[i * k + j] = v;
            gram[j * k + i] = v;
        }
    }
    Ok(gram)
}

/// Orthonormalise standardised monomials of total degree at most `p`
/// against the empirical measure of `points` (n x d, row-major).
pub fn gram_schmidt_empirical<T: Scalar>(
    points: &[T],
    d: usize,
    p: usize,
) -> Result<BasisSpec<T>, BasisError> {
    if p > MAX_DEGREE {
        return Err(BasisError::DegreeTooHigh(p));
    }
    let n = points.len() / d;
    let k = binomial(p + d, d);
    if n == 0 {
        return Err(BasisError::EmptySampleSet);
    }
    if n < 3 * k {
        return Err(BasisError::InsufficientSamples {
            needed: 3 * k,
            got: n,
        });
    }
    let nf = T::of_usize(n);
    let mut families = Vec::with_capacity(d);
    for a in 0..d {
        let m = points.iter().skip(a).step_by(d).copied().sum::<T>() / nf;
        let v = points
            .iter()
            .skip(a)
            .step_by(d)
            .map(|&x| (x - m) * (x - m))
            .sum::<T>()
            / nf;
        let s = v.sqrt();
        if !(s > T::epsilon() * (T::one() + m.abs())) {
            return Err(BasisError::RankDeficient {
                condition: f64::INFINITY,
            });
        }
        families.push(Family::EmpiricalGram {
            center: m,
            scale: s,
        });
    }
    let mut spec = BasisSpec::total_degree(families, p)?;
    let gram = gram_from_points(&spec, points)?;
    let ev = linalg::sym_eigenvalues(&gram, k);
    let (lo, hi) = (ev[0], ev[k - 1]);
    let limit = T::of(1e12).min(T::one() / (T::of(100.0) * T::epsilon()));
    if !(lo > T::zero()) || hi / lo > limit {
        let condition = if lo > T::zero() {
            (hi / lo).as_f64()
        } else {
            f64::INFINITY
        };
        return Err(BasisError::RankDeficient { condition });
    }
    let l = linalg::cholesky(&gram, k).ok_or(BasisError::RankDeficient {
        condition: (hi / lo).as_f64(),
    })?;
    spec.whitening = Some(linalg::lower_triangular_inverse(&l, k));
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d2_p2_listing() {
        let idx = enumerate_multi_indices(2, 2);
        let got: Vec<Vec<usize>> = idx.iter().map(|m| m.0.clone()).collect();
        assert_eq!(
            got,
            vec![
                vec![0, 0],
                vec![0, 1],
                vec![1, 0],
                vec![0, 2],
                vec![1, 1],
                vec![2, 0]
            ]
        );
    }

    #[test]
    fn d1_p5_has_six() {
        let idx = enumerate_multi_indices(1, 5);
        assert_eq!(idx.len(), 6);
        for (i, m) in idx.iter().enumerate() {
            assert_eq!(m.0, vec![i]);
        }
    }

    #[test]
    fn constant_only_basis() {
        assert_eq!(
            enumerate_multi_indices(3, 0),
            vec![MultiIndex(vec![0, 0, 0])]
        );
    }

    #[test]
    fn counts_match_binomial() {
        for d in 1..=4 {
            for p in 0..=6 {
                let idx = enumerate_multi_indices(d, p);
                assert_eq!(idx.len(), binomial(p + d, d));
                assert!(idx
                    .windows(2)
                    .all(|w| w[0].total_degree() <= w[1].total_degree()));
            }
        }
    }

    #[test]
    fn hermite_low_orders() {
        let spec = BasisSpec::total_degree(vec![Family::hermite(0.0, 1.0)], 2).unwrap();
        for &x in &[-1.3f64, 0.0, 0.7, 2.5] {
            let e = spec.eval(&[x]).unwrap();
            assert_eq!(e.phi[0], 1.0);
            assert!((e.phi[1] - x).abs() < 1e-15);
            assert!((e.phi[2] - (x * x - 1.0) / 2f64.sqrt()).abs() < 1e-14);
            assert_eq!(e.jac[0], 0.0);
        }
    }

    #[test]
    fn legendre_first_order() {
        let spec = BasisSpec::total_degree(vec![Family::legendre(-1.0, 1.0)], 3).unwrap();
        let e = spec.eval(&[0.4]).unwrap();
        assert!((e.phi[1] - 3f64.sqrt() * 0.4).abs() < 1e-15);
        assert!((e.jac[1] - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_rejected() {
        let spec = BasisSpec::total_degree(vec![Family::hermite(0.0, 1.0); 2], 2).unwrap();
        assert_eq!(
            spec.eval(&[0.0, f64::NAN]),
            Err(BasisError::NonFiniteInput { index: 1 })
        );
    }

    #[test]
    fn coordinate_expansion_reproduces_x() {
        let fams = vec![
            Family::hermite(0.5, 2.0),
            Family::legendre(0.0, 2.0),
            Family::laguerre_for_gamma(2.0, 0.5),
        ];
        let spec = BasisSpec::total_degree(fams, 2).unwrap();
        let c = spec.coordinate_expansion().unwrap();
        let k = spec.len();
        let x = [0.3, 1.7, 0.9];
        let e = spec.eval(&x).unwrap();
        for a in 0..3 {
            let v: f64 = (0..k).map(|i| c[a * k + i] * e.phi[i]).sum();
            assert!((v - x[a]).abs() < 1e-13);
        }
        let flat = BasisSpec::total_degree(vec![Family::hermite(0.0, 1.0)], 0).unwrap();
        assert_eq!(
            flat.coordinate_expansion(),
            Err(BasisError::DegreeTooLow(0))
        );
    }

    #[test]
    fn single_point_gram_is_rank_one() {
        let spec = BasisSpec::total_degree(vec![Family::hermite(0.0f64, 1.0); 2], 2).unwrap();
        let g = gram_from_points(&spec, &[0.3, -0.8]).unwrap();
        let ev = linalg::sym_eigenvalues(&g, spec.len());
        let nonzero = ev.iter().filter(|v| v.abs() > 1e-12).count();
        assert_eq!(nonzero, 1);
        assert_eq!(
            gram_from_points(&spec, &[]),
            Err(BasisError::EmptySampleSet)
        );
    }

    #[test]
    fn constant_samples_are_rank_deficient() {
        let pts = vec![1.5f64; 100];
        assert!(matches!(
            gram_schmidt_empirical(&pts, 1, 2),
            Err(BasisError::RankDeficient { .. })
        ));
    }

    #[test]
    fn json_layout() {
        let spec = BasisSpec::total_degree(vec![Family::hermite(0.0, 1.0); 2], 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["dim"], 2);
        assert_eq!(v["max_total_degree"], 1);
        assert_eq!(v["indices"], serde_json::json!([[0, 0], [0, 1], [1, 0]]));
        assert_eq!(v["families"][0]["family"], "hermite");
        let back: BasisSpec<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
    }
}
