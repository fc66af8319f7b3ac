//! Dense complex matrix helpers shared by the channel, metric and network code.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::autodiff::Tensor;

pub type CMatrix = DMatrix<Complex64>;

pub fn fro_sq(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn trace(a: &CMatrix) -> Complex64 {
    a.diagonal().iter().sum()
}

/// Ratio of the largest to the smallest singular value (infinite when singular).
pub fn condition_number(a: &CMatrix) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a square matrix. Above `cond_limit` (or when singular) the
/// Tikhonov form `(AᴴA + r I)⁻¹ Aᴴ` with `r = 1e-9 tr(AᴴA) / n` is used
/// instead and the flag is set.
pub fn regularized_inverse(a: &CMatrix, cond_limit: f64) -> (CMatrix, bool) {
    let n = a.nrows();
    if condition_number(a) <= cond_limit {
        if let Some(inv) = a.clone().try_inverse() {
            return (inv, false);
        }
    }
    let aha = a.adjoint() * a;
    let ridge = 1e-9 * trace(&aha).re / n as f64;
    let reg = aha + CMatrix::identity(n, n) * Complex64::new(ridge.max(f64::MIN_POSITIVE), 0.0);
    let inv = reg
        .try_inverse()
        .expect("ridge-regularized Gram matrix is positive definite");
    (inv * a.adjoint(), true)
}

/// Real and imaginary parts as row-major rank-2 tensors.
pub fn to_pair(a: &CMatrix) -> (Tensor, Tensor) {
    let (r, c) = a.shape();
    let mut re = Vec::with_capacity(r * c);
    let mut im = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            re.push(a[(i, j)].re);
            im.push(a[(i, j)].im);
        }
    }
    (
        Tensor::matrix(r, c, re).expect("shape"),
        Tensor::matrix(r, c, im).expect("shape"),
    )
}

/// Inverse of [`to_pair`].
pub fn from_pair(re: &Tensor, im: &Tensor) -> CMatrix {
    let (r, c) = re.dims2().expect("rank-2 tensor");
    CMatrix::from_fn(r, c, |i, j| Complex64::new(re.at(i, j), im.at(i, j)))
}

/// Condition number of a real symmetric matrix via its eigenvalues.
pub fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_round_trip() {
        let a = CMatrix::from_fn(2, 3, |i, j| Complex64::new(i as f64, j as f64 - 1.0));
        let (re, im) = to_pair(&a);
        assert_eq!(re.at(1, 2), 1.0);
        assert_eq!(im.at(1, 2), 1.0);
        assert_eq!(from_pair(&re, &im), a);
    }

    #[test]
    fn well_conditioned_inverse_is_exact() {
        let a = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(0.0, 4.0),
        ]));
        let (inv, reg) = regularized_inverse(&a, 1e10);
        assert!(!reg);
        assert!((inv[(1, 1)] - Complex64::new(0.0, -0.25)).norm() < 1e-15);
        assert_eq!(condition_number(&a), 2.0);
    }

    #[test]
    fn singular_matrix_is_regularized() {
        let a = CMatrix::from_element(2, 2, Complex64::new(1.0, 0.0));
        let (inv, reg) = regularized_inverse(&a, 1e10);
        assert!(reg);
        assert!(inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }

    #[test]
    fn symmetric_condition_of_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0, 0.5]));
        assert!((symmetric_condition(&a) - 8.0).abs() < 1e-12);
    }
}
