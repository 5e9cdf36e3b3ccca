use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::models::{label_of, CfVae};
use crate::stats;
use crate::{Error, Result};

const RIDGE: f64 = 1e-3;
const NEWTON_STEPS: usize = 50;

/// Logistic regression on standardized inputs fitted by damped Newton
/// iterations with a small ridge penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Intercept first.
    coef: Vec<f64>,
}

fn design(x: &Tensor, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    let (n, d) = (x.rows(), mean.len());
    DMatrix::from_fn(n, d + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (x.row(i)[j - 1] - mean[j - 1]) / scale[j - 1]
        }
    })
}

impl LogisticProbe {
    pub fn fit(x: &Tensor, y: &[u8]) -> Result<Self> {
        if x.ndim() != 2 || x.rows() != y.len() || y.is_empty() {
            return Err(Error::Eval("probe inputs and labels disagree".into()));
        }
        let (n, d) = (x.rows(), x.shape()[1]);
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = (0..n).map(|i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let a = design(x, &mean, &scale);
        let t = DVector::from_iterator(n, y.iter().map(|&l| f64::from(l)));
        let mut w = DVector::zeros(d + 1);
        let penalty = |w: &DVector<f64>| {
            let mut r = w.clone() * RIDGE;
            r[0] = 0.0;
            r
        };
        for _ in 0..NEWTON_STEPS {
            let p = (&a * &w).map(crate::autodiff::sigmoid);
            let grad = a.transpose() * (&p - &t) / n as f64 + penalty(&w);
            let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
            let mut h = a.transpose() * DMatrix::from_diagonal(&s) * &a / n as f64;
            for k in 1..=d {
                h[(k, k)] += RIDGE;
            }
            h[(0, 0)] += 1e-12;
            let step = h
                .lu()
                .solve(&grad)
                .ok_or_else(|| Error::Eval("singular probe Hessian".into()))?;
            w -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        Ok(Self {
            mean,
            scale,
            coef: w.iter().copied().collect(),
        })
    }

    pub fn predict_proba(&self, x: &Tensor) -> Vec<f64> {
        let a = design(x, &self.mean, &self.scale);
        let w = DVector::from_column_slice(&self.coef);
        (a * w)
            .iter()
            .map(|&z| crate::autodiff::sigmoid(z))
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor, y: &[u8]) -> f64 {
        let labels: Vec<u8> = self.predict_proba(x).into_iter().map(label_of).collect();
        stats::accuracy(&labels, y)
    }
}

/// Projection onto the top two principal components. Each component's
/// sign is fixed so its largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit-length rows of length `d`; a missing second component is
    /// all zeros.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

impl Pca2 {
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 || x.rows() == 0 {
            return Err(Error::Eval("PCA needs a non-empty matrix".into()));
        }
        let (n, d) = (x.rows(), x.shape()[1]);
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean: Vec<f64> = (0..d).map(|j| m.column(j).mean()).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let component = |k: usize| -> (Vec<f64>, f64) {
            match order.get(k) {
                None => (vec![0.0; d], 0.0),
                Some(&c) => {
                    let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                    let lead =
                        v.iter()
                            .copied()
                            .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
                    if lead < 0.0 {
                        v.iter_mut().for_each(|e| *e = -*e);
                    }
                    (v, eig.eigenvalues[c].max(0.0))
                }
            }
        };
        let (c0, v0) = component(0);
        let (c1, v1) = component(1);
        Ok(Self {
            mean,
            components: [c0, c1],
            explained_variance: [v0, v1],
        })
    }

    /// `[n, 2]` coordinates.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::Eval(format!(
                "PCA fitted on {d} columns, got {:?}",
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(2 * x.rows());
        for i in 0..x.rows() {
            for c in &self.components {
                out.push(
                    x.row(i)
                        .iter()
                        .zip(&self.mean)
                        .zip(c)
                        .map(|((v, m), w)| (v - m) * w)
                        .sum(),
                );
            }
        }
        Ok(Tensor::new(vec![x.rows(), 2], out)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy of the probe.
    pub accuracy: f64,
    /// Test latent means projected onto their top two principal components.
    pub projection: Tensor,
    pub pca: Pca2,
}

/// Fits a logistic probe on the posterior means of `train_x` and scores it
/// on those of `test_x`. Labels are whatever class assignment the caller
/// wants separated; the pipeline uses the predictor's labels.
pub fn latent_probe(
    model: &CfVae,
    train_x: &Tensor,
    train_y: &[u8],
    test_x: &Tensor,
    test_y: &[u8],
) -> Result<ProbeResult> {
    let train_z = model.latent_means(train_x)?;
    let test_z = model.latent_means(test_x)?;
    let probe = LogisticProbe::fit(&train_z, train_y)?;
    let pca = Pca2::fit(&test_z)?;
    Ok(ProbeResult {
        accuracy: probe.accuracy(&test_z, test_y),
        projection: pca.project(&test_z)?,
        pca,
    })
}
