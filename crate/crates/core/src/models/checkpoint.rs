//! Binary checkpoint files.
//!
//! Layout: 8 magic bytes, `u32` format version (LE), `u64` header length
//! (LE), a JSON header, then every block listed in the header as
//! little-endian `f64` values in declared order. Model parameters come
//! first, followed by the optimizer moments when a training state is saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::predictor::{BinaryPredictor, PredictorSpec};
use super::vae::{CfVae, EpochTrace, TrainState, VaeSpec};
use crate::autodiff::Tensor;
use crate::datasets::Normalization;
use crate::nn::{AdamState, LossWeights, ParamStore};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFVAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Predictor,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedTrainState {
    epoch: usize,
    weights: LossWeights,
    trace: Vec<EpochTrace>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// Decoded checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub spec: serde_json::Value,
    pub normalization: Option<Normalization>,
    /// Fingerprint of the saved model parameters.
    pub fingerprint: String,
    /// Predictor the VAE was trained against.
    pub predictor_fingerprint: Option<String>,
    pub frozen: bool,
    train_state: Option<SavedTrainState>,
    pub metrics: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
}

/// A VAE checkpoint with its optional resumable training state.
#[derive(Debug, Clone)]
pub struct LoadedVae {
    pub model: CfVae,
    pub state: Option<TrainState>,
    pub metrics: serde_json::Value,
}

fn param_blocks(store: &ParamStore) -> (Vec<BlockInfo>, Vec<f64>) {
    let mut info = Vec::with_capacity(store.len());
    let mut data = Vec::with_capacity(store.num_scalars());
    for (name, t) in store.names().iter().zip(store.tensors()) {
        info.push(BlockInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        data.extend_from_slice(t.data());
    }
    (info, data)
}

fn write_file(path: &Path, header: &CheckpointHeader, values: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + 8 * values.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a checkpoint, returning the header and one tensor
/// per declared block.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body_start = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(20))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| bad(format!("bad header: {e}")))?;
    let body = &bytes[body_start..];
    let scalars: usize = header
        .blocks
        .iter()
        .map(|b| b.shape.iter().product::<usize>())
        .sum();
    if body.len() != scalars * 8 {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            scalars * 8,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = header
        .blocks
        .iter()
        .map(|b| {
            let n = b.shape.iter().product();
            Tensor::new(b.shape.clone(), values.by_ref().take(n).collect())
                .map_err(|e| bad(format!("block {}: {e}", b.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, tensors))
}

/// Copies saved blocks into a freshly built store after checking names and
/// shapes, then confirms the saved fingerprint.
fn restore(store: &mut ParamStore, header: &CheckpointHeader, tensors: &[Tensor]) -> Result<()> {
    if tensors.len() < store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} blocks, model needs {}",
            tensors.len(),
            store.len()
        )));
    }
    let names = store.names().to_vec();
    for ((slot, name), (info, saved)) in store
        .tensors_mut()
        .iter_mut()
        .zip(&names)
        .zip(header.blocks.iter().zip(tensors))
    {
        if info.name != *name || slot.shape() != saved.shape() {
            return Err(Error::Checkpoint(format!(
                "block {} {:?} does not match parameter {name} {:?}",
                info.name,
                saved.shape(),
                slot.shape()
            )));
        }
        *slot = saved.clone();
    }
    let fp = store.fingerprint();
    if fp != header.fingerprint {
        return Err(Error::Checkpoint(format!(
            "parameter fingerprint {fp} differs from recorded {}",
            header.fingerprint
        )));
    }
    Ok(())
}

pub fn save_predictor(
    path: &Path,
    model: &BinaryPredictor,
    metrics: &serde_json::Value,
) -> Result<()> {
    let (blocks, values) = param_blocks(model.store());
    let header = CheckpointHeader {
        kind: CheckpointKind::Predictor,
        spec: serde_json::to_value(model.spec())?,
        normalization: None,
        fingerprint: model.fingerprint(),
        predictor_fingerprint: None,
        frozen: model.is_frozen(),
        train_state: None,
        metrics: metrics.clone(),
        blocks,
    };
    write_file(path, &header, &values)
}

pub fn load_predictor(path: &Path) -> Result<(BinaryPredictor, serde_json::Value)> {
    let (header, tensors) = read_checkpoint(path)?;
    if header.kind != CheckpointKind::Predictor {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} model",
            path.display(),
            header.kind
        )));
    }
    if tensors.len() != header.blocks.len() || header.train_state.is_some() {
        return Err(Error::Checkpoint(
            "predictor checkpoint carries optimizer state".into(),
        ));
    }
    let spec: PredictorSpec = serde_json::from_value(header.spec.clone())?;
    let mut model = BinaryPredictor::new(spec)?;
    if tensors.len() != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} blocks, predictor needs {}",
            tensors.len(),
            model.store().len()
        )));
    }
    restore(model.store_mut(), &header, &tensors)?;
    if header.frozen {
        model.freeze();
    }
    Ok((model, header.metrics))
}

/// Saves a VAE, with its optimizer and loss-weight state when given so
/// training can resume.
pub fn save_vae(
    path: &Path,
    model: &CfVae,
    state: Option<&TrainState>,
    metrics: &serde_json::Value,
) -> Result<()> {
    let (mut blocks, mut values) = param_blocks(model.store());
    let train_state = state.map(|s| {
        let (m, v) = s.adam.moments();
        for (tag, moments) in [("adam.m", m), ("adam.v", v)] {
            for (name, buf) in model.store().names().iter().zip(moments) {
                blocks.push(BlockInfo {
                    name: format!("{tag}.{name}"),
                    shape: vec![buf.len()],
                });
                values.extend_from_slice(buf);
            }
        }
        SavedTrainState {
            epoch: s.epoch,
            weights: s.weights,
            trace: s.trace.clone(),
            lr: s.adam.lr,
            beta1: s.adam.beta1,
            beta2: s.adam.beta2,
            eps: s.adam.eps,
            step: s.adam.step_count(),
        }
    });
    let header = CheckpointHeader {
        kind: CheckpointKind::Vae,
        spec: serde_json::to_value(model.spec())?,
        normalization: Some(model.normalization().clone()),
        fingerprint: model.fingerprint(),
        predictor_fingerprint: model.predictor_fingerprint().map(str::to_owned),
        frozen: false,
        train_state,
        metrics: metrics.clone(),
        blocks,
    };
    write_file(path, &header, &values)
}

/// Loads a VAE. When `predictor` is given and the model records the
/// predictor it was trained against, the fingerprints must agree.
pub fn load_vae(path: &Path, predictor: Option<&BinaryPredictor>) -> Result<LoadedVae> {
    let (header, tensors) = read_checkpoint(path)?;
    if header.kind != CheckpointKind::Vae {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} model",
            path.display(),
            header.kind
        )));
    }
    if let (Some(p), Some(recorded)) = (predictor, &header.predictor_fingerprint) {
        let fp = p.fingerprint();
        if fp != *recorded {
            return Err(Error::Checkpoint(format!(
                "model was trained against predictor {recorded}, refusing predictor {fp}"
            )));
        }
    }
    let spec: VaeSpec = serde_json::from_value(header.spec.clone())?;
    let norm = header
        .normalization
        .clone()
        .ok_or_else(|| Error::Checkpoint("VAE checkpoint lacks normalization".into()))?;
    let mut model = CfVae::new(spec, norm)?;
    let n = model.store().len();
    let expected = if header.train_state.is_some() {
        3 * n
    } else {
        n
    };
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} blocks, expected {expected}",
            tensors.len()
        )));
    }
    restore(model.store_mut(), &header, &tensors[..n])?;
    model.set_predictor_fingerprint(header.predictor_fingerprint.clone());
    let state = match &header.train_state {
        None => None,
        Some(s) => {
            let take =
                |r: std::ops::Range<usize>| tensors[r].iter().map(|t| t.data().to_vec()).collect();
            let adam = AdamState::from_parts(
                model.store(),
                [s.lr, s.beta1, s.beta2, s.eps],
                s.step,
                take(n..2 * n),
                take(2 * n..3 * n),
            )?;
            Some(TrainState {
                epoch: s.epoch,
                adam,
                weights: s.weights,
                trace: s.trace.clone(),
            })
        }
    };
    Ok(LoadedVae {
        model,
        state,
        metrics: header.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Dataset, Layout};
    use crate::models::{
        train_vae, EncoderArch, OutputHead, PredictorArch, TrainConfig, VaeTrainConfig,
    };
    use crate::nn::OptimizerKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn predictor(seed: u64) -> BinaryPredictor {
        BinaryPredictor::new(PredictorSpec {
            input_dim: 3,
            arch: PredictorArch::Mlp { hidden: vec![6, 4] },
            init_seed: seed,
        })
        .unwrap()
    }

    fn vae() -> CfVae {
        CfVae::new(
            VaeSpec {
                input_dim: 3,
                latent_dim: 2,
                encoder: EncoderArch::Mlp { hidden: vec![5] },
                decoder_hidden: vec![5],
                head: OutputHead::Linear,
                init_seed: 2,
            },
            Normalization {
                mean: vec![0.1, 0.2, 0.3],
                std: vec![1.0, 2.0, 3.0],
            },
        )
        .unwrap()
    }

    fn random_inputs(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Tensor::new(
            vec![n, 3],
            (0..3 * n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn predictor_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut p = predictor(0);
        p.freeze();
        save_predictor(&path, &p, &serde_json::json!({"auc": 0.9})).unwrap();
        let (q, metrics) = load_predictor(&path).unwrap();
        let x = random_inputs(100);
        assert_eq!(p.predict_logits(&x).unwrap(), q.predict_logits(&x).unwrap());
        assert!(q.is_frozen());
        assert_eq!(metrics["auc"], 0.9);
    }

    #[test]
    fn truncated_and_padded_files_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_predictor(&path, &predictor(0), &serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 19, 40, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(load_predictor(&path).is_err(), "cut {cut}");
        }
        let mut padded = bytes.clone();
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        assert!(load_predictor(&path).is_err());
        let mut other = bytes;
        other[8] = 9;
        fs::write(&path, &other).unwrap();
        let err = load_predictor(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn vae_loaded_against_other_predictor_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let p = predictor(0);
        let mut m = vae();
        m.set_predictor_fingerprint(Some(p.fingerprint()));
        save_vae(&path, &m, None, &serde_json::Value::Null).unwrap();
        let loaded = load_vae(&path, Some(&p)).unwrap();
        assert_eq!(loaded.model, m);
        assert!(load_vae(&path, Some(&predictor(1))).is_err());
    }

    #[test]
    fn resumed_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let p = predictor(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            vec![40, 3],
            (0..120).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let data = Dataset::new(
            x,
            vec![0; 40],
            vec!["a".into(), "b".into(), "c".into()],
            Layout::Tabular,
        )
        .unwrap();
        let cfg = VaeTrainConfig {
            train: TrainConfig {
                epochs: 4,
                batch_size: 8,
                lr: 1e-2,
                seed: 1,
                optimizer: OptimizerKind::Adam,
            },
            weights: LossWeights::default(),
            lambda_s_auto: true,
            lambda_s_ratio: 0.1,
        };
        let mut full = vae();
        let full_state = train_vae(&mut full, &data, Some(&p), &cfg, None, None).unwrap();

        let mut part = vae();
        let state = train_vae(&mut part, &data, Some(&p), &cfg, None, Some(2)).unwrap();
        save_vae(&path, &part, Some(&state), &serde_json::Value::Null).unwrap();
        let LoadedVae {
            mut model, state, ..
        } = load_vae(&path, Some(&p)).unwrap();
        let resumed = train_vae(&mut model, &data, Some(&p), &cfg, state, None).unwrap();
        assert_eq!(resumed, full_state);
        assert_eq!(model, full);
    }
}
