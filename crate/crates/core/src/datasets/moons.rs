use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Layout};
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Two interleaving half circles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoonsConfig {
    pub n: usize,
    pub noise_std: f64,
    pub label_noise: f64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            noise_std: 0.1,
            label_noise: 0.02,
        }
    }
}

/// Class 0 is the upper arc `(cos t, sin t)`, class 1 the lower arc
/// `(1 - cos t, 0.5 - sin t)`, `t ~ U[0, π]`. Each class gets half the
/// points (class 0 takes the odd one), then `label_noise` of all labels are
/// flipped.
pub fn gen_moons2d(config: &MoonsConfig, seed: u64) -> Result<Dataset> {
    if config.n < 2 {
        return Err(Error::Data(format!("moons needs n >= 2, got {}", config.n)));
    }
    if !(0.0..=1.0).contains(&config.label_noise) || config.noise_std < 0.0 {
        return Err(Error::Config(format!("invalid moons config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_std).expect("std checked");
    let n0 = config.n.div_ceil(2);
    let mut data = Vec::with_capacity(config.n * 2);
    let mut labels = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y, label) = if i < n0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        data.push(x + noise.sample(&mut rng));
        data.push(y + noise.sample(&mut rng));
        labels.push(label);
    }
    for l in labels.iter_mut() {
        if rng.random::<f64>() < config.label_noise {
            *l = 1 - *l;
        }
    }
    Dataset::new(
        Tensor::new(vec![config.n, 2], data)?,
        labels,
        vec!["x1".into(), "x2".into()],
        Layout::Tabular,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let d = gen_moons2d(&MoonsConfig::default(), 11).unwrap();
        let ones = d.labels().iter().filter(|&&l| l == 1).count() as f64 / 4000.0;
        assert!((ones - 0.5).abs() <= 0.02, "{ones}");
        assert_eq!(d, gen_moons2d(&MoonsConfig::default(), 11).unwrap());
        assert_ne!(d, gen_moons2d(&MoonsConfig::default(), 12).unwrap());
    }

    #[test]
    fn rejects_tiny_n() {
        let cfg = MoonsConfig {
            n: 1,
            ..Default::default()
        };
        assert!(gen_moons2d(&cfg, 0).is_err());
    }

    #[test]
    fn noiseless_points_lie_on_arcs() {
        let cfg = MoonsConfig {
            n: 100,
            noise_std: 0.0,
            label_noise: 0.0,
        };
        let d = gen_moons2d(&cfg, 1).unwrap();
        for (i, &l) in d.labels().iter().enumerate() {
            let r = d.features().row(i);
            let (cx, cy) = if l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let radius = ((r[0] - cx).powi(2) + (r[1] - cy).powi(2)).sqrt();
            assert!((radius - 1.0).abs() < 1e-12);
        }
    }
}
