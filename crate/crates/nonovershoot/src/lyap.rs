//! Lyapunov certificate for the constant-gain error system.
//!
//! `A0` is upper bidiagonal with diagonal `-c_i` and unit superdiagonal.
//! The unique symmetric solution of `A0^T P + P A0 = -I` satisfies the
//! scalar recursion
//!
//! ```text
//! P[i][j] = (delta_ij + P[i-1][j] + P[i][j-1]) / (c_i + c_j)
//! ```
//!
//! (1-based, out-of-range entries zero), which fills the matrix along
//! anti-diagonals in O(n^2) without forming a Kronecker system. Positive
//! gains make `A0` Hurwitz, so `P` is symmetric positive definite.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LyapError {
    #[error("gain c[{index}] = {value} is not positive; A0 would not be Hurwitz")]
    NonPositiveGain { index: usize, value: f64 },
    #[error("computed P failed the positive-definiteness check")]
    NotPositiveDefinite,
}

/// Builds the nominal error-system matrix: diagonal `-c_i`, unit
/// superdiagonal.
pub fn a0_matrix(c: &[f64]) -> DMatrix<f64> {
    let n = c.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -c[i];
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
    }
    a
}

/// Solves `A0^T P + P A0 = -I` by the anti-diagonal recursion.
pub fn solve(c: &[f64]) -> Result<DMatrix<f64>, LyapError> {
    for (i, &v) in c.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(LyapError::NonPositiveGain {
                index: i + 1,
                value: v,
            });
        }
    }
    let n = c.len();
    let mut p = DMatrix::zeros(n, n);
    // Anti-diagonal order: every P[i-1][j] and P[i][j-1] referenced below has
    // a strictly smaller index sum, so it is already final.
    for s in 0..(2 * n - 1) {
        for i in 0..n {
            if s < i {
                break;
            }
            let j = s - i;
            if j >= n || j < i {
                continue;
            }
            let delta = if i == j { 1.0 } else { 0.0 };
            let up = if i > 0 { p[(i - 1, j)] } else { 0.0 };
            let left = if j > 0 && j - 1 >= i {
                p[(i, j - 1)]
            } else if j > 0 {
                p[(j - 1, i)]
            } else {
                0.0
            };
            let v = (delta + up + left) / (c[i] + c[j]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    if DMatrix::clone(&p).cholesky().is_none() {
        return Err(LyapError::NotPositiveDefinite);
    }
    Ok(p)
}

/// Max-abs entry of `A0^T P + P A0 + I`; zero for an exact solution.
pub fn residual(c: &[f64], p: &DMatrix<f64>) -> f64 {
    let a0 = a0_matrix(c);
    let n = c.len();
    let res = a0.transpose() * p + p * a0 + DMatrix::<f64>::identity(n, n);
    res.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `A0` together with its Lyapunov certificate.
#[derive(Clone, Debug)]
pub struct LyapunovPair {
    pub a0: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

pub fn lyapunov_pair(c: &[f64]) -> Result<LyapunovPair, LyapError> {
    Ok(LyapunovPair {
        a0: a0_matrix(c),
        p: solve(c)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_case_is_one_over_two_c() {
        let p = solve(&[4.0]).unwrap();
        assert!((p[(0, 0)] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_gain_is_rejected() {
        assert!(matches!(
            solve(&[1.0, 0.0]),
            Err(LyapError::NonPositiveGain { index: 2, .. })
        ));
    }
}
