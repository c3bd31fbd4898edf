//! Small dense linear algebra on row-major slices.

use crate::Scalar;

/// Orthonormalizes the `k` columns of a row-major `n×k` matrix in place
/// (modified Gram–Schmidt). Columns that collapse are replaced by a unit
/// vector orthogonal to the previous ones where possible.
pub fn orthonormalize_columns<T: Scalar>(a: &mut [T], n: usize, k: usize) {
    for j in 0..k {
        for p in 0..j {
            let dot: T = (0..n).map(|i| a[i * k + j] * a[i * k + p]).sum();
            for i in 0..n {
                let v = a[i * k + p];
                a[i * k + j] -= dot * v;
            }
        }
        let norm = (0..n).map(|i| a[i * k + j] * a[i * k + j]).sum::<T>().sqrt();
        if norm > T::of(1e-300) {
            for i in 0..n {
                a[i * k + j] = a[i * k + j] / norm;
            }
        } else {
            for i in 0..n {
                a[i * k + j] = if i == j % n { T::one() } else { T::zero() };
            }
        }
    }
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<T: Scalar>(m: &[T], n: usize) -> Vec<T> {
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: T = a.iter().map(|&v| v * v).sum();
        if off <= scale * T::of(1e-30) || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
/// Returns `None` if `A` is not positive definite.
pub fn cholesky_solve<T: Scalar>(a: &[T], b: &[T], n: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= T::zero() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}
