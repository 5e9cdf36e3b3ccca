use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Layout};
use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Train and validation sizes are rounded; test takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f))
            || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {fr:?} must lie in [0, 1] and sum to 1"
            )));
        }
        let train = (n as f64 * self.train).round() as usize;
        let val = ((n as f64 * self.val).round() as usize).min(n - train.min(n));
        let sizes = [train.min(n), val, n - train.min(n) - val];
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Data(format!(
                "{} split of {n} samples would be empty",
                ["train", "validation", "test"][i]
            )));
        }
        Ok(sizes)
    }
}

/// Per-column affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of `data`: per column for tabular layouts, per channel
    /// (pooled over time, repeated across the channel's columns) for time
    /// series. Zero spreads are replaced by 1.
    pub fn fit(data: &Dataset) -> Self {
        let x = data.features();
        let (n, f) = (x.rows(), data.dim());
        let groups: Vec<Vec<usize>> = match data.layout() {
            Layout::TimeSeries { channels, steps } => (0..channels.len())
                .map(|c| (c * steps..(c + 1) * steps).collect())
                .collect(),
            _ => (0..f).map(|j| vec![j]).collect(),
        };
        let mut mean = vec![0.0; f];
        let mut std = vec![1.0; f];
        for cols in groups {
            let count = (n * cols.len()) as f64;
            let m = (0..n)
                .flat_map(|i| cols.iter().map(move |&j| (i, j)))
                .map(|(i, j)| x.data()[i * f + j])
                .sum::<f64>()
                / count;
            let v = (0..n)
                .flat_map(|i| cols.iter().map(move |&j| (i, j)))
                .map(|(i, j)| (x.data()[i * f + j] - m).powi(2))
                .sum::<f64>()
                / count;
            let s = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
            for &j in &cols {
                mean[j] = m;
                std[j] = s;
            }
        }
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().last() != Some(&self.dim()) {
            return Err(Error::Data(format!(
                "normalization has {} columns, data shape {:?}",
                self.dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.dim();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[k % f]) / self.std[k % f];
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.dim();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[k % f] + self.mean[k % f];
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, data: &Dataset) -> Result<Dataset> {
        data.with_features(self.apply(data.features())?)
    }
}

/// Train, validation and test partitions with their source indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Source row indices; empty when read back from disk.
    pub indices: [Vec<usize>; 3],
    /// Fitted on the training rows.
    pub normalization: Normalization,
}

impl Splits {
    /// The three partitions mapped through the training normalization.
    pub fn normalized(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let n = &self.normalization;
        Ok((
            n.apply_dataset(&self.train)?,
            n.apply_dataset(&self.val)?,
            n.apply_dataset(&self.test)?,
        ))
    }
}

/// Seeded shuffle, then contiguous train/validation/test blocks.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    if data.len() < 2 {
        return Err(Error::Data(format!("cannot split {} samples", data.len())));
    }
    let sizes = spec.sizes(data.len())?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    let train = idx;
    let train_set = data.select(&train);
    Ok(Splits {
        normalization: Normalization::fit(&train_set),
        train: train_set,
        val: data.select(&val),
        test: data.select(&test),
        indices: [train, val, test],
    })
}
