//! Gauss-Hermite quadrature nodes and weights.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Nodes and weights for n-point Gauss-Hermite quadrature, computed from
/// the eigen-decomposition of the Jacobi matrix (Golub-Welsch). Satisfies
/// `integral f(x) exp(-x^2) dx ~= sum_k w_k f(x_k)`; nodes ascend.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Config("quadrature needs at least one node".into()));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = jacobi.symmetric_eigen();
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let first = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], sqrt_pi * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(pairs.into_iter().unzip())
}

/// Expectation of `f(X)` for `X ~ N(mean, std^2)` using precomputed
/// Gauss-Hermite nodes/weights.
pub fn normal_expectation(
    nodes: &[f64],
    weights: &[f64],
    mean: f64,
    std: f64,
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let scale = std::f64::consts::SQRT_2 * std;
    nodes
        .iter()
        .zip(weights)
        .map(|(&x, &w)| w * f(mean + scale * x))
        .sum::<f64>()
        * inv_sqrt_pi
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for n in [1, 2, 5, 21, 40] {
            let (_, w) = gauss_hermite(n).unwrap();
            assert_relative_eq!(
                w.iter().sum::<f64>(),
                std::f64::consts::PI.sqrt(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn gaussian_moments_exact() {
        let (x, w) = gauss_hermite(21).unwrap();
        let sigma = 1.7;
        let m2 = normal_expectation(&x, &w, 0.0, sigma, |v| v * v);
        assert_relative_eq!(m2, sigma * sigma, epsilon = 1e-10);
        let m4 = normal_expectation(&x, &w, 0.0, sigma, |v| v.powi(4));
        assert_relative_eq!(m4, 3.0 * sigma.powi(4), epsilon = 1e-8);
        let shifted = normal_expectation(&x, &w, 2.5, sigma, |v| v);
        assert_relative_eq!(shifted, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_sigma_collapses_to_mean() {
        let (x, w) = gauss_hermite(21).unwrap();
        let v = normal_expectation(&x, &w, 3.0, 0.0, |v| v * v);
        assert_relative_eq!(v, 9.0, epsilon = 1e-12);
    }
}
