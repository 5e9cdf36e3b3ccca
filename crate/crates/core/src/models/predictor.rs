use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{SeqSpec, SeqTrunk};
use super::train::{epoch_rng, shuffled_batches, TrainConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::datasets::Dataset;
use crate::nn::{loss, Bound, Mlp, Optimizer, ParamStore};
use crate::stats;
use crate::{Error, Result};

/// Class decision at probability 0.5; ties go to class 1.
pub fn label_of(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorArch {
    /// ReLU MLP with a single logit output.
    Mlp { hidden: Vec<usize> },
    /// Self-attention trunk followed by a ReLU MLP head.
    Attention { seq: SeqSpec, fc: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub input_dim: usize,
    pub arch: PredictorArch,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Mlp(Mlp),
    Attention { trunk: SeqTrunk, head: Mlp },
}

/// Binary classifier returning one logit per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPredictor {
    spec: PredictorSpec,
    store: ParamStore,
    body: Body,
    frozen: bool,
}

/// Held-out quality of a trained predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

const EVAL_CHUNK: usize = 256;

impl BinaryPredictor {
    pub fn new(spec: PredictorSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut store = ParamStore::new();
        let body = match &spec.arch {
            PredictorArch::Mlp { hidden } => {
                let dims: Vec<usize> = std::iter::once(spec.input_dim)
                    .chain(hidden.iter().copied())
                    .chain([1])
                    .collect();
                Body::Mlp(Mlp::new(&mut store, "predictor", &dims, &mut rng))
            }
            PredictorArch::Attention { seq, fc } => {
                let trunk = SeqTrunk::new(&mut store, "predictor.seq", seq, &mut rng)?;
                if trunk.input_dim() != spec.input_dim {
                    return Err(Error::Config(format!(
                        "attention predictor expects {} inputs, data has {}",
                        trunk.input_dim(),
                        spec.input_dim
                    )));
                }
                let dims: Vec<usize> = std::iter::once(trunk.output_dim())
                    .chain(fc.iter().copied())
                    .chain([1])
                    .collect();
                let head = Mlp::new(&mut store, "predictor.head", &dims, &mut rng);
                Body::Attention { trunk, head }
            }
        };
        Ok(Self {
            spec,
            store,
            body,
            frozen: false,
        })
    }

    /// Builds the architecture of `spec` and replaces its parameters, in
    /// declaration order. The result is frozen.
    pub fn from_parameters(spec: PredictorSpec, params: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::new(spec)?;
        if params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                model.store.len(),
                params.len()
            )));
        }
        for (slot, p) in model.store.tensors_mut().iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        model.freeze();
        Ok(model)
    }

    /// Frozen logistic model `sigmoid(w·x + b)`.
    pub fn linear(w: &[f64], b: f64) -> Result<Self> {
        let spec = PredictorSpec {
            input_dim: w.len(),
            arch: PredictorArch::Mlp { hidden: vec![] },
            init_seed: 0,
        };
        Self::from_parameters(
            spec,
            vec![
                Tensor::new(vec![1, w.len()], w.to_vec())?,
                Tensor::vector(vec![b]),
            ],
        )
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Logits `[B, 1]` for `x[B, input_dim]` using already bound
    /// parameters.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        match &self.body {
            Body::Mlp(m) => m.forward(tape, bound, x),
            Body::Attention { trunk, head } => {
                let h = trunk.forward(tape, bound, x)?;
                let h = tape.relu(h);
                head.forward(tape, bound, h)
            }
        }
    }

    /// Logits with parameters recorded as constants: gradients reach `x`
    /// but never the predictor.
    pub fn logits_frozen(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.store.bind(tape, false);
        self.forward(tape, &bound, x)
    }

    pub fn predict_logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows);
        let mut start = 0;
        while start < rows {
            let end = (start + EVAL_CHUNK).min(rows);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x.select_rows(&idx));
            let z = self.logits_frozen(&mut tape, xv)?;
            out.extend_from_slice(tape.value(z).data());
            start = end;
        }
        Ok(out)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .predict_logits(x)?
            .into_iter()
            .map(crate::autodiff::sigmoid)
            .collect())
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self.predict_proba(x)?.into_iter().map(label_of).collect())
    }

    /// Probability for a single row.
    pub fn proba_row(&self, x: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let z = self.logits_frozen(&mut tape, xv)?;
        Ok(crate::autodiff::sigmoid(tape.value(z).data()[0]))
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let p = self.predict_proba(data.features())?;
        let labels: Vec<u8> = p.iter().map(|&v| label_of(v)).collect();
        Ok((
            stats::accuracy(&labels, data.labels()),
            stats::auc(&p, data.labels()),
        ))
    }
}

/// Minibatch cross-entropy training. On a non-finite loss or gradient the
/// parameters are restored to the end of the last completed epoch and the
/// error is returned. The predictor is frozen on success.
pub fn train_predictor(
    model: &mut BinaryPredictor,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<PredictorMetrics> {
    cfg.validate()?;
    if model.frozen {
        return Err(Error::Config("predictor is frozen".into()));
    }
    if train.dim() != model.input_dim() {
        return Err(Error::Data(format!(
            "predictor expects {} features, data has {}",
            model.input_dim(),
            train.dim()
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer, &model.store, cfg.lr);
    let targets: Vec<f64> = train.labels().iter().map(|&l| f64::from(l)).collect();
    let mut last_good = model.store.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut weighted = 0.0;
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, true);
            let x = tape.constant(train.features().select_rows(&batch));
            let t: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let tv = loss::target_column(&mut tape, &t);
            let z = model.forward(&mut tape, &bound, x)?;
            let l = loss::bce_with_logits(&mut tape, z, tv)?;
            let value = tape.value(l).data()[0];
            let step = if value.is_finite() {
                tape.backward(l)?;
                let grads = model.store.grads(&tape, &bound);
                opt.step(&mut model.store, &grads)
            } else {
                Err(Error::NonFinite {
                    what: "predictor loss",
                    detail: format!("epoch {epoch}: {value}"),
                })
            };
            if let Err(e) = step {
                model.store = last_good;
                return Err(e);
            }
            weighted += value * batch.len() as f64;
        }
        epoch_losses.push(weighted / train.len() as f64);
        last_good = model.store.clone();
    }
    model.freeze();
    let (accuracy, auc) = model.evaluate(eval)?;
    let (train_accuracy, _) = model.evaluate(train)?;
    Ok(PredictorMetrics {
        accuracy,
        auc,
        train_accuracy,
        epoch_losses,
    })
}
