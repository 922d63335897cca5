//! Scalar distribution functions, quantiles and small sample statistics.

use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, ln_gamma};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// CDF of Gamma(shape, scale).
pub fn gamma_cdf(shape: f64, scale: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(shape, x / scale)
    }
}

pub fn gamma_ln_pdf(shape: f64, scale: f64, x: f64) -> f64 {
    if x < 0.0 || (x == 0.0 && shape > 1.0) {
        return f64::NEG_INFINITY;
    }
    (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
}

/// Quantile of Gamma(shape, scale) by safeguarded Newton iteration on the
/// regularized lower incomplete gamma function.
pub fn gamma_quantile(shape: f64, scale: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (0.0f64, shape.max(1.0));
    while gamma_lr(shape, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let lg = ln_gamma(shape);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = gamma_lr(shape, x) - p;
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = ((shape - 1.0) * x.ln() - x - lg).exp();
        let mut next = if dens > 0.0 && dens.is_finite() {
            x - f / dens
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1e-300) {
            x = next;
            break;
        }
        x = next;
    }
    x * scale
}

/// Quantile of the chi-square distribution with `k` degrees of freedom.
pub fn chi_square_quantile(k: f64, p: f64) -> f64 {
    2.0 * gamma_quantile(0.5 * k, 1.0, p)
}

pub fn chi_square_cdf(k: f64, x: f64) -> f64 {
    gamma_cdf(0.5 * k, 2.0, x)
}

/// One-sample Kolmogorov-Smirnov statistic sup |F_n - F|.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let above = (i as f64 + 1.0) / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Empirical quantile of sorted data, midpoint convention: the average of the
/// order statistics at `floor((n-1)p)` and `ceil((n-1)p)`.
pub fn quantile_midpoint(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    0.5 * (sorted[lo.min(n - 1)] + sorted[hi.min(n - 1)])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// `log(mean(exp(v)))` with max-shift stabilisation.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + (s / v.len() as f64).ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_two_dof_has_closed_form_quantile() {
        // chi2_2 CDF is 1 - exp(-x/2)
        let q = chi_square_quantile(2.0, 0.95);
        assert!((q - (-2.0 * 0.05f64.ln())).abs() < 1e-10);
        assert!((chi_square_cdf(2.0, q) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn gamma_quantile_inverts_cdf() {
        for &(a, b) in &[(3.0, 1.0 / 3.0), (0.7, 2.0), (2.0, 0.5), (40.0, 0.1)] {
            for &p in &[1e-6, 0.025, 0.5, 0.975, 0.999999] {
                let x = gamma_quantile(a, b, p);
                assert!((gamma_cdf(a, b, x) - p).abs() < 1e-11, "a={a} p={p}");
            }
        }
    }

    #[test]
    fn normal_quantile_round_trip() {
        for &p in &[1e-8, 0.01, 0.3, 0.5, 0.9, 0.999] {
            let back = normal_cdf(normal_quantile(p));
            assert!((back - p).abs() < 1e-10 * p.max(1e-3), "p={p} back={back}");
        }
    }

    #[test]
    fn midpoint_quantile_counts() {
        let xs: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        let lo = quantile_midpoint(&xs, 0.025);
        let hi = quantile_midpoint(&xs, 0.975);
        assert_eq!(xs.iter().filter(|&&x| x < lo).count(), 50);
        assert_eq!(xs.iter().filter(|&&x| x > hi).count(), 50);
    }

    #[test]
    fn stable_helpers() {
        assert!((log1p_exp(800.0) - 800.0).abs() < 1e-12);
        assert!((log1p_exp(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
