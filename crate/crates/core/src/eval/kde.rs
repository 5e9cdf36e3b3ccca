use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Bandwidth rule recorded in report headers.
pub const BANDWIDTH_RULE: &str = "scott: n^(-1/(d+4)) * std_j, normalized feature space";

/// Gaussian product-kernel density estimate over training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    points: Tensor,
    bandwidth: Vec<f64>,
}

impl KdeModel {
    /// Scott's rule per dimension. A constant column gets the bandwidth of a
    /// unit-variance one.
    pub fn fit(points: &Tensor) -> Result<Self> {
        let (n, d) = (points.rows(), points.shape().get(1).copied().unwrap_or(0));
        if n == 0 || d == 0 {
            return Err(Error::Eval("cannot fit a density to no points".into()));
        }
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let bandwidth = (0..d)
            .map(|j| {
                let col: Vec<f64> = (0..n).map(|i| points.row(i)[j]).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let std = var.sqrt();
                factor * if std > 0.0 { std } else { 1.0 }
            })
            .collect();
        Self::with_bandwidth(points.clone(), bandwidth)
    }

    pub fn with_bandwidth(points: Tensor, bandwidth: Vec<f64>) -> Result<Self> {
        if points.ndim() != 2 || points.shape()[1] != bandwidth.len() {
            return Err(Error::Eval(format!(
                "{} bandwidths for points of shape {:?}",
                bandwidth.len(),
                points.shape()
            )));
        }
        if bandwidth.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::Eval("bandwidths must be positive".into()));
        }
        Ok(Self { points, bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.bandwidth.len()
    }

    /// `log((1/n) Σ_i Π_j N(x_j; p_ij, h_j²))` via log-sum-exp.
    pub fn loglik(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "query dimension");
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| -h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        let exponents: Vec<f64> = (0..self.len())
            .map(|i| {
                let row = self.points.row(i);
                -0.5 * row
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth)
                    .map(|((p, q), h)| ((q - p) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = exponents.iter().map(|e| (e - max).exp()).sum();
        max + sum.ln() - (self.len() as f64).ln() + norm
    }

    pub fn loglik_rows(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|i| self.loglik(x.row(i))).collect()
    }
}
