use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one vector per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds a saved state; moment sizes must match `store`.
    pub fn from_parts(
        store: &ParamStore,
        hyper: [f64; 4],
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let fits = |mm: &[Vec<f64>]| {
            mm.len() == store.len()
                && mm
                    .iter()
                    .zip(store.tensors())
                    .all(|(a, t)| a.len() == t.len())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Config(
                "optimizer moments do not match the parameters".into(),
            ));
        }
        let [lr, beta1, beta2, eps] = hyper;
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_grads(store, grads)?;
        if self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (param, grad)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_grads(store, grads)?;
        for (param, grad) in store.tensors_mut().iter_mut().zip(grads) {
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(store, lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(store, grads),
            Optimizer::Sgd(s) => s.step(store, grads),
        }
    }
}

fn check_grads(store: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for ((name, p), g) in store.names().iter().zip(store.tensors()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                detail: format!("{name}[{k}] = {}; step skipped", g.data()[k]),
            });
        }
    }
    Ok(())
}
