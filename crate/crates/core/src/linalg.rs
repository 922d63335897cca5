//! Dense linear algebra on the small square matrices that show up per sample
//! (d x d map Jacobians, K x K Gram matrices). Storage is row-major `&[T]`.

use crate::scalar::Scalar;

/// Determinant by LU with partial pivoting.
pub fn det<T: Scalar>(a: &[T], n: usize) -> T {
    debug_assert_eq!(a.len(), n * n);
    match n {
        0 => T::one(),
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        _ => {
            let mut m = a.to_vec();
            let mut det = T::one();
            for col in 0..n {
                let mut piv = col;
                let mut best = m[col * n + col].abs();
                for r in col + 1..n {
                    let v = m[r * n + col].abs();
                    if v > best {
                        best = v;
                        piv = r;
                    }
                }
                if best == T::zero() {
                    return T::zero();
                }
                if piv != col {
                    for c in 0..n {
                        m.swap(col * n + c, piv * n + c);
                    }
                    det = -det;
                }
                let p = m[col * n + col];
                det *= p;
                for r in col + 1..n {
                    let f = m[r * n + col] / p;
                    if f != T::zero() {
                        for c in col + 1..n {
                            let v = m[col * n + c];
                            m[r * n + c] -= f * v;
                        }
                    }
                }
            }
            det
        }
    }
}

/// Matrix inverse by Gauss-Jordan elimination; `None` when a pivot vanishes.
pub fn inverse<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    if n == 1 {
        return if a[0] == T::zero() {
            None
        } else {
            Some(vec![T::one() / a[0]])
        };
    }
    if n == 2 {
        let d = det(a, 2);
        if d == T::zero() {
            return None;
        }
        return Some(vec![a[3] / d, -a[1] / d, -a[2] / d, a[0] / d]);
    }
    let mut m = a.to_vec();
    let mut inv = identity::<T>(n);
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == T::zero() {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
                inv.swap(col * n + c, piv * n + c);
            }
        }
        let p = m[col * n + col];
        for c in 0..n {
            m[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f != T::zero() {
                for c in 0..n {
                    let mv = m[col * n + c];
                    let iv = inv[col * n + c];
                    m[r * n + c] -= f * mv;
                    inv[r * n + c] -= f * iv;
                }
            }
        }
    }
    Some(inv)
}

pub fn identity<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = T::one();
    }
    m
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve<T: Scalar>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Inverse of a lower-triangular matrix.
pub fn lower_triangular_inverse<T: Scalar>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); n * n];
    for j in 0..n {
        inv[j * n + j] = T::one() / l[j * n + j];
        for i in j + 1..n {
            let mut s = T::zero();
            for k in j..i {
                s += l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = -s / l[i * n + i];
        }
    }
    inv
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues<T: Scalar>(a: &[T], n: usize) -> Vec<T> {
    let mut m = a.to_vec();
    let tol = T::epsilon() * T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += m[i * n + i] * m[i * n + i];
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off <= tol * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Smallest eigenvalue of the symmetric part `(A + A^T)/2`.
pub fn min_sym_part_eigenvalue<T: Scalar>(a: &[T], n: usize) -> T {
    match n {
        1 => a[0],
        2 => {
            let p = a[0];
            let q = a[3];
            let r = (a[1] + a[2]) * T::of(0.5);
            let mean = (p + q) * T::of(0.5);
            let half = (p - q) * T::of(0.5);
            mean - (half * half + r * r).sqrt()
        }
        _ => {
            let mut s = vec![T::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    s[i * n + j] = (a[i * n + j] + a[j * n + i]) * T::of(0.5);
                }
            }
            sym_eigenvalues(&s, n)[0]
        }
    }
}

/// `C = A (m x k) * B (k x n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_matches_cofactor_expansion() {
        let a: [f64; 9] = [2.0, -1.0, 0.5, 1.0, 3.0, -2.0, 0.0, 4.0, 1.0];
        let cof: f64 = 2.0 * (3.0 * 1.0 - (-2.0) * 4.0) - (-1.0) * (1.0 * 1.0 - (-2.0) * 0.0)
            + 0.5 * (1.0 * 4.0 - 3.0 * 0.0);
        assert!((det(&a, 3) - cof).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let a: [f64; 9] = [4.0, 1.0, 0.3, 1.0, 3.0, -0.2, 0.3, -0.2, 2.0];
        let inv = inverse(&a, 3).unwrap();
        let prod = matmul(&a, &inv, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 3 + j] - e).abs() < 1e-12);
            }
        }
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a: [f64; 9] = [4.0, 1.0, 0.3, 1.0, 3.0, -0.2, 0.3, -0.2, 2.0];
        let l = cholesky(&a, 3).unwrap();
        let x = cholesky_solve(&l, 3, &[1.0, 2.0, 3.0]);
        let b = matmul(&a, &x, 3, 3, 1);
        for (bi, ei) in b.iter().zip([1.0, 2.0, 3.0]) {
            assert!((bi - ei).abs() < 1e-12);
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        let linv = lower_triangular_inverse(&l, 3);
        let p = matmul(&l, &linv, 3, 3, 3);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[3].abs() < 1e-12 && (p[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // eigenvalues of [[2,1,0],[1,2,1],[0,1,2]] are 2-sqrt2, 2, 2+sqrt2
        let a: [f64; 9] = [2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0];
        let ev = sym_eigenvalues(&a, 3);
        let s = 2f64.sqrt();
        for (v, e) in ev.iter().zip([2.0 - s, 2.0, 2.0 + s]) {
            assert!((v - e).abs() < 1e-12);
        }
        let ns: [f64; 4] = [1.0, 3.0, -1.0, 1.0];
        let closed = min_sym_part_eigenvalue(&ns, 2);
        assert!((closed - sym_eigenvalues(&[1.0f64, 1.0, 1.0, 1.0], 2)[0]).abs() < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let a: [f32; 4] = [2.0, 0.5, 0.5, 1.0];
        assert!((det(&a, 2) - 1.75).abs() < 1e-6);
        assert!(min_sym_part_eigenvalue(&a, 2) > 0.0);
    }
}
