use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::models::{label_of, BinaryPredictor, CfResult, CfVae};
use crate::nn::{loss, AdamState, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSearchConfig {
    /// Weight of `||z - mu(x)||²`.
    pub latent_weight: f64,
    /// Adam learning rate on `z`.
    pub step_size: f64,
    pub max_iterations: usize,
}

impl Default for LatentSearchConfig {
    fn default() -> Self {
        Self {
            latent_weight: 0.01,
            step_size: 0.05,
            max_iterations: 200,
        }
    }
}

impl LatentSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.max_iterations == 0 || !(self.latent_weight >= 0.0) {
            return Err(Error::Config(format!(
                "invalid latent search settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Gradient search over the latent code of a vanilla VAE, starting at the
/// posterior mean of `x`, for a decoded point the predictor assigns to
/// `1 - y`. The whole iteration budget is spent and the final decoded point
/// is returned; it is valid only if that point is on the target side.
pub fn cf_latent_search(
    vae: &CfVae,
    predictor: &BinaryPredictor,
    x: &[f64],
    cfg: &LatentSearchConfig,
) -> Result<CfResult> {
    cfg.validate()?;
    let start = Instant::now();
    let p = predictor.proba_row(x)?;
    let y = label_of(p);
    let target = 1 - y;
    let z0 = vae.latent_means(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
    let mut store = ParamStore::new();
    let id = store.add("z", z0.clone());
    let mut adam = AdamState::new(&store, cfg.step_size);
    let mut iterations = 0;
    let (x_cf, p_cf) = loop {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let zv = bound.var(id);
        let vae_params = vae.bind(&mut tape, false);
        let decoded = vae.decode(&mut tape, &vae_params, zv)?;
        let logit = predictor.logits_frozen(&mut tape, decoded)?;
        let p_cf = crate::autodiff::sigmoid(tape.value(logit).data()[0]);
        if iterations == cfg.max_iterations {
            break (tape.value(decoded).data().to_vec(), p_cf);
        }
        let t = loss::target_column(&mut tape, &[f64::from(target)]);
        let ce = loss::bce_with_logits(&mut tape, logit, t)?;
        let anchor = tape.constant(z0.clone());
        let pull = loss::squared_error(&mut tape, zv, anchor)?;
        let pull = tape.scale(pull, cfg.latent_weight);
        let objective = tape.add(ce, pull)?;
        tape.backward(objective)?;
        let grads = store.grads(&tape, &bound);
        adam.step(&mut store, &grads)?;
        iterations += 1;
    };
    Ok(CfResult::new(
        x.to_vec(),
        x_cf,
        y,
        p,
        p_cf,
        start.elapsed().as_secs_f64(),
        iterations,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Normalization;
    use crate::models::{EncoderArch, OutputHead, VaeSpec};

    fn vae() -> CfVae {
        CfVae::new(
            VaeSpec {
                input_dim: 2,
                latent_dim: 2,
                encoder: EncoderArch::Mlp { hidden: vec![8] },
                decoder_hidden: vec![8],
                head: OutputHead::Linear,
                init_seed: 1,
            },
            Normalization::identity(2),
        )
        .unwrap()
    }

    #[test]
    fn constant_predictor_never_flips() {
        let m = vae();
        let p = BinaryPredictor::linear(&[0.0, 0.0], -2.0).unwrap();
        let cfg = LatentSearchConfig {
            max_iterations: 30,
            ..Default::default()
        };
        let r = cf_latent_search(&m, &p, &[0.3, -0.2], &cfg).unwrap();
        assert!(!r.valid);
        assert_eq!(r.iterations, 30);
        let recon = m.decode_tensor(
            &m.latent_means(&Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap())
                .unwrap(),
        );
        assert_eq!(r.x_cf, recon.unwrap().data());
    }

    #[test]
    fn heavy_latent_weight_stays_at_reconstruction() {
        let m = vae();
        let x = [0.3, -0.2];
        let recon = m
            .decode_tensor(
                &m.latent_means(&Tensor::new(vec![1, 2], x.to_vec()).unwrap())
                    .unwrap(),
            )
            .unwrap();
        // boundary far from the reconstruction
        let p = BinaryPredictor::linear(&[1.0, 0.0], -5.0).unwrap();
        let mut gaps = Vec::new();
        for w in [1.0, 1e2, 1e4] {
            let cfg = LatentSearchConfig {
                latent_weight: w,
                step_size: 0.01,
                max_iterations: 2000,
            };
            let r = cf_latent_search(&m, &p, &x, &cfg).unwrap();
            let gap: f64 = r
                .x_cf
                .iter()
                .zip(recon.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            gaps.push(gap.sqrt());
        }
        assert!(gaps[2] < gaps[0], "{gaps:?}");
        assert!(gaps[2] < 1e-2, "{gaps:?}");
    }
}
