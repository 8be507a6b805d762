//! Least-squares polynomial regression used for conditional expectations.
//!
//! The basis is `1, s, s^2, ...` in the standardized variable
//! `s = (x - center) / scale`, which keeps the Gram matrix well conditioned
//! for the low degrees used here.

use crate::scalar::Scalar;

/// A fitted polynomial in a standardized variable.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit<S> {
    center: S,
    scale: S,
    coeffs: Vec<S>,
}

/// Outcome of a single regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitInfo {
    pub requested_degree: usize,
    pub degree: usize,
}

impl FitInfo {
    pub fn fell_back(&self) -> bool {
        self.degree < self.requested_degree
    }
}

impl<S: Scalar> PolyFit<S> {
    pub fn constant(value: S) -> Self {
        Self {
            center: S::zero(),
            scale: S::one(),
            coeffs: vec![value],
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    #[inline]
    pub fn eval(&self, x: S) -> S {
        let s = (x - self.center) / self.scale;
        self.coeffs.iter().rev().fold(S::zero(), |acc, &c| acc * s + c)
    }

    /// First derivative with respect to `x`.
    pub fn derivative(&self, x: S) -> S {
        let s = (x - self.center) / self.scale;
        let mut acc = S::zero();
        for (j, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * s + c * S::from_usize_lossy(j);
        }
        acc / self.scale
    }

    pub fn second_derivative(&self, x: S) -> S {
        let s = (x - self.center) / self.scale;
        let mut acc = S::zero();
        for (j, &c) in self.coeffs.iter().enumerate().skip(2).rev() {
            acc = acc * s + c * S::from_usize_lossy(j * (j - 1));
        }
        acc / (self.scale * self.scale)
    }

    /// Least-squares fit of `ys` on polynomials of `xs` up to `degree`.
    ///
    /// Degenerate designs (e.g. all nodes at one point) fall back to the
    /// highest degree whose normal equations are numerically non-singular.
    pub fn fit(xs: &[S], ys: &[S], degree: usize) -> (Self, FitInfo) {
        assert_eq!(xs.len(), ys.len(), "regression inputs differ in length");
        assert!(!xs.is_empty(), "regression on an empty sample");
        let n = S::from_usize_lossy(xs.len());
        let center = xs.iter().copied().sum::<S>() / n;
        let var = xs.iter().map(|&x| (x - center) * (x - center)).sum::<S>() / n;
        let scale = var.sqrt();
        let tiny = S::epsilon().sqrt() * (S::one() + center.abs());
        let max_degree = if scale <= tiny {
            0
        } else {
            degree.min(xs.len().saturating_sub(1))
        };
        let scale = if max_degree == 0 { S::one() } else { scale };

        let p = max_degree + 1;
        // Gram matrix and right-hand side in the standardized basis.
        let mut gram = vec![S::zero(); p * p];
        let mut rhs = vec![S::zero(); p];
        let mut powers = vec![S::zero(); 2 * p - 1];
        for (&x, &y) in xs.iter().zip(ys) {
            let s = (x - center) / scale;
            let mut pw = S::one();
            for slot in powers.iter_mut() {
                *slot = pw;
                pw *= s;
            }
            for i in 0..p {
                rhs[i] += powers[i] * y;
                for j in 0..p {
                    gram[i * p + j] += powers[i + j];
                }
            }
        }

        for d in (0..p).rev() {
            if let Some(coeffs) = cholesky_solve(&gram, &rhs, p, d + 1) {
                return (
                    Self {
                        center,
                        scale,
                        coeffs,
                    },
                    FitInfo {
                        requested_degree: degree,
                        degree: d,
                    },
                );
            }
        }
        unreachable!("degree-0 normal equation is always solvable for a non-empty sample")
    }
}

/// Solves the leading `m x m` block of the `p x p` system by Cholesky.
fn cholesky_solve<S: Scalar>(gram: &[S], rhs: &[S], p: usize, m: usize) -> Option<Vec<S>> {
    let mut l = vec![S::zero(); m * m];
    let rel = S::epsilon().sqrt() * S::lit(16.0);
    for i in 0..m {
        for j in 0..=i {
            let mut sum = gram[i * p + j];
            for k in 0..j {
                sum -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if sum <= rel * gram[i * p + i].abs() || sum <= S::zero() {
                    return None;
                }
                l[i * m + i] = sum.sqrt();
            } else {
                l[i * m + j] = sum / l[j * m + j];
            }
        }
    }
    let mut y = vec![S::zero(); m];
    for i in 0..m {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[i * m + k] * y[k];
        }
        y[i] = sum / l[i * m + i];
    }
    let mut x = vec![S::zero(); m];
    for i in (0..m).rev() {
        let mut sum = y[i];
        for k in (i + 1)..m {
            sum -= l[k * m + i] * x[k];
        }
        x[i] = sum / l[i * m + i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_cubic() {
        let xs: Vec<f64> = (0..50).map(|i| -1.0 + 0.05 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - x + 0.5 * x * x - 0.25 * x * x * x).collect();
        let (fit, info) = PolyFit::fit(&xs, &ys, 3);
        assert_eq!(info.degree, 3);
        for (&x, &y) in xs.iter().zip(&ys) {
            assert!((fit.eval(x) - y).abs() < 1e-10);
            let dy = -1.0 + x - 0.75 * x * x;
            assert!((fit.derivative(x) - dy).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_design_falls_back_to_mean() {
        let xs = vec![1.0_f64; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (fit, info) = PolyFit::fit(&xs, &ys, 3);
        assert_eq!(info.degree, 0);
        assert!(info.fell_back());
        assert!((fit.eval(1.0) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn two_point_design_limits_degree() {
        let xs = vec![0.0_f64, 1.0, 0.0, 1.0];
        let ys = vec![1.0_f64, 3.0, 1.0, 3.0];
        let (fit, info) = PolyFit::fit(&xs, &ys, 3);
        assert!(info.degree <= 1);
        assert!((fit.eval(0.5) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn works_in_single_precision() {
        let xs: Vec<f32> = (0..200).map(|i| 0.5 + 0.005 * i as f32).collect();
        let ys: Vec<f32> = xs.iter().map(|x| x * x).collect();
        let (fit, _) = PolyFit::fit(&xs, &ys, 2);
        assert!((fit.eval(1.0) - 1.0).abs() < 1e-4);
    }
}
