//! Gauss–Hermite quadrature for Gaussian expectations.

use nalgebra::DMatrix;

/// Nodes and weights for `E[g(Z)]`, `Z ~ N(0, σ²)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// `n`-point rule by the Golub–Welsch eigenvalue method on the
    /// probabilists' Hermite recurrence, so the weights sum to one.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut jacobi = DMatrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| (eig.eigenvalues[j], eig.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect_normal(&self, sigma: f64, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * g(sigma * z))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        let gh = GaussHermite::new(50);
        assert!((gh.expect_normal(2.0, |_| 1.0) - 1.0).abs() < 1e-12);
        assert!(gh.expect_normal(2.0, |x| x).abs() < 1e-12);
        assert!((gh.expect_normal(2.0, |x| x * x) - 4.0).abs() < 1e-10);
        assert!((gh.expect_normal(1.0, |x| x.powi(4)) - 3.0).abs() < 1e-9);
        // E[cos Z] = exp(-1/2).
        assert!((gh.expect_normal(1.0, f64::cos) - (-0.5f64).exp()).abs() < 1e-12);
    }
}
