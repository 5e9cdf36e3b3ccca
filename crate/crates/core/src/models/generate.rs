use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::predictor::{label_of, BinaryPredictor};
use super::vae::CfVae;
use crate::autodiff::{Tape, Tensor};
use crate::{Error, Result};

/// One counterfactual query and its outcome. Values are in the model's
/// (normalized) feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResult {
    pub x: Vec<f64>,
    pub x_cf: Vec<f64>,
    /// Predictor label on `x`.
    pub y: u8,
    /// Predictor probability on `x`.
    pub p: f64,
    /// Predictor probability on `x_cf`.
    pub p_cf: f64,
    /// The predictor assigns `x_cf` to class `1 - y`.
    pub valid: bool,
    /// `x_cf - x`.
    pub deltas: Vec<f64>,
    pub seconds: f64,
    /// Optimisation steps spent; 0 for single-pass methods.
    pub iterations: usize,
}

impl CfResult {
    /// `y` is the class being explained away from, normally `label_of(p)`.
    pub fn new(
        x: Vec<f64>,
        x_cf: Vec<f64>,
        y: u8,
        p: f64,
        p_cf: f64,
        seconds: f64,
        iterations: usize,
    ) -> Self {
        let deltas = x_cf.iter().zip(&x).map(|(a, b)| a - b).collect();
        Self {
            x,
            x_cf,
            y,
            p,
            p_cf,
            valid: label_of(p_cf) == 1 - y,
            deltas,
            seconds,
            iterations,
        }
    }
}

/// Counterfactual from a single deterministic encode/decode pass (`z = mu`).
/// The reported time covers both predictor calls and the model pass.
pub fn generate_cf(model: &CfVae, predictor: &BinaryPredictor, x: &[f64]) -> Result<CfResult> {
    if x.len() != model.spec().input_dim {
        return Err(Error::Data(format!(
            "query has {} features, model expects {}",
            x.len(),
            model.spec().input_dim
        )));
    }
    let start = Instant::now();
    let p = predictor.proba_row(x)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let out = model.forward(&mut tape, &bound, xv, None)?;
    let x_cf = tape.value(out.x_recon).data().to_vec();
    let p_cf = predictor.proba_row(&x_cf)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(CfResult::new(
        x.to_vec(),
        x_cf,
        label_of(p),
        p,
        p_cf,
        seconds,
        0,
    ))
}
