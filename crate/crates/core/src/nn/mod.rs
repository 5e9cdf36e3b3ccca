//! Layers, losses and optimizers.

mod layers;
pub mod loss;
mod optim;
mod params;

use serde::{Deserialize, Serialize};

pub use layers::{
    positional_encoding, EncoderBlock, Init, LinearLayer, Mlp, MultiHeadSelfAttention,
};
pub use optim::{AdamState, Optimizer, OptimizerKind, Sgd};
pub use params::{Bound, ParamId, ParamStore};

use crate::{Error, Result};

/// Coefficients of the four counterfactual-VAE loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_recon: f64,
    pub w_kl: f64,
    pub lambda_cf: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_recon: 1.0,
            w_kl: 1.0,
            lambda_cf: 1.0,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_recon", self.w_recon),
            ("w_kl", self.w_kl),
            ("lambda_cf", self.lambda_cf),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}
