use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arch::{SeqSpec, SeqTrunk};
use super::predictor::BinaryPredictor;
use super::train::{epoch_rng, shuffled_batches, TrainConfig};
use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::datasets::{Dataset, Normalization, BEAT_PARAMS};
use crate::nn::{
    loss, AdamState, Bound, Init, LinearLayer, LossWeights, Mlp, OptimizerKind, ParamStore,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderArch {
    /// ReLU layers ending in the latent heads.
    Mlp { hidden: Vec<usize> },
    /// Self-attention trunk, one ReLU layer of width `fc`, latent heads.
    Attention { seq: SeqSpec, fc: usize },
}

/// How the decoder's last layer maps to feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputHead {
    /// Unbounded outputs read directly as normalized features.
    Linear,
    /// Outputs mapped to raw beat parameters that satisfy `b > 0`,
    /// `0 < theta1 < theta2 < d`, `d > 0`, then normalized.
    PpgBeats { n_beats: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder: EncoderArch,
    /// Decoder hidden widths, from the latent side outwards.
    pub decoder_hidden: Vec<usize>,
    pub head: OutputHead,
    pub init_seed: u64,
}

/// Per-sample diagonal Gaussian `N(mu, exp(logvar))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Reparameterised draw or the posterior mean.
pub enum SampleMode<'a> {
    Deterministic,
    Sample(&'a mut dyn rand::RngCore),
}

#[derive(Debug, Clone, PartialEq)]
enum EncoderTrunk {
    Mlp(Vec<LinearLayer>),
    Attention { trunk: SeqTrunk, fc: LinearLayer },
}

/// Encoder and decoder sharing one parameter store. The same type serves
/// as the vanilla VAE and as the counterfactual VAE; the latter records the
/// fingerprint of the predictor it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct CfVae {
    spec: VaeSpec,
    store: ParamStore,
    trunk: EncoderTrunk,
    mu_head: LinearLayer,
    logvar_head: LinearLayer,
    decoder: Mlp,
    normalization: Normalization,
    predictor_fingerprint: Option<String>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct VaeOutput {
    pub x_recon: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Unweighted batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub kl: f64,
    pub cf: f64,
    pub sparsity: f64,
}

impl LossTerms {
    /// `w_recon·recon + w_kl·kl + lambda_cf·cf + lambda_s·sparsity`,
    /// evaluated left to right exactly as the training graph does.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.w_recon * self.recon
            + w.w_kl * self.kl
            + w.lambda_cf * self.cf
            + w.lambda_s * self.sparsity
    }
}

/// Loss of one evaluated batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: LossTerms,
}

/// Mean loss terms of one epoch, weighted by batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub cf: f64,
    pub sparsity: f64,
    pub total: f64,
    pub lambda_s: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub adam: AdamState,
    /// Weights in effect, including an automatically scaled `lambda_s`.
    pub weights: LossWeights,
    pub trace: Vec<EpochTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub train: TrainConfig,
    pub weights: LossWeights,
    /// After the first epoch, set `lambda_s` so the sparsity term is
    /// `lambda_s_ratio` times the reconstruction term.
    pub lambda_s_auto: bool,
    pub lambda_s_ratio: f64,
}

const THETA_MARGIN: f64 = 1e-6;
const MIN_WIDTH: f64 = 1e-4;
const MIN_DURATION: f64 = 1e-2;

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `v · scale + offset` with per-column constants.
fn affine(tape: &mut Tape, v: Var, scale: Vec<f64>, offset: Vec<f64>) -> Result<Var> {
    let scale = tape.constant(Tensor::vector(scale));
    let offset = tape.constant(Tensor::vector(offset));
    let v = tape.mul(v, scale)?;
    Ok(tape.add(v, offset)?)
}

fn relu_stack(
    store: &mut ParamStore,
    name: &str,
    dims: &[usize],
    rng: &mut impl Rng,
) -> Vec<LinearLayer> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            LinearLayer::new(
                store,
                &format!("{name}.{i}"),
                w[0],
                w[1],
                Init::HeUniform,
                rng,
            )
        })
        .collect()
}

impl CfVae {
    /// `normalization` maps raw features to the model's input space; the
    /// beat head uses it to emit normalized outputs.
    pub fn new(spec: VaeSpec, normalization: Normalization) -> Result<Self> {
        if spec.latent_dim == 0 || spec.input_dim == 0 {
            return Err(Error::Config(
                "latent and input sizes must be positive".into(),
            ));
        }
        if normalization.dim() != spec.input_dim {
            return Err(Error::Config(format!(
                "normalization has {} columns, model input {}",
                normalization.dim(),
                spec.input_dim
            )));
        }
        if let OutputHead::PpgBeats { n_beats } = spec.head {
            if n_beats * BEAT_PARAMS.len() != spec.input_dim {
                return Err(Error::Config(format!(
                    "beat head with {n_beats} beats needs {} inputs",
                    n_beats * BEAT_PARAMS.len()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut store = ParamStore::new();
        let (trunk, width) = match &spec.encoder {
            EncoderArch::Mlp { hidden } => {
                let dims: Vec<usize> = std::iter::once(spec.input_dim)
                    .chain(hidden.iter().copied())
                    .collect();
                let width = *dims.last().expect("non-empty");
                (
                    EncoderTrunk::Mlp(relu_stack(&mut store, "encoder", &dims, &mut rng)),
                    width,
                )
            }
            EncoderArch::Attention { seq, fc } => {
                let trunk = SeqTrunk::new(&mut store, "encoder.seq", seq, &mut rng)?;
                if trunk.input_dim() != spec.input_dim {
                    return Err(Error::Config(format!(
                        "attention encoder expects {} inputs, model input {}",
                        trunk.input_dim(),
                        spec.input_dim
                    )));
                }
                let fc_layer = LinearLayer::new(
                    &mut store,
                    "encoder.fc",
                    trunk.output_dim(),
                    *fc,
                    Init::HeUniform,
                    &mut rng,
                );
                (
                    EncoderTrunk::Attention {
                        trunk,
                        fc: fc_layer,
                    },
                    *fc,
                )
            }
        };
        let mu_head = LinearLayer::new(
            &mut store,
            "encoder.mu",
            width,
            spec.latent_dim,
            Init::XavierUniform,
            &mut rng,
        );
        let logvar_head = LinearLayer::new(
            &mut store,
            "encoder.logvar",
            width,
            spec.latent_dim,
            Init::XavierUniform,
            &mut rng,
        );
        let dims: Vec<usize> = std::iter::once(spec.latent_dim)
            .chain(spec.decoder_hidden.iter().copied())
            .chain([spec.input_dim])
            .collect();
        let decoder = Mlp::new(&mut store, "decoder", &dims, &mut rng);
        Ok(Self {
            spec,
            store,
            trunk,
            mu_head,
            logvar_head,
            decoder,
            normalization,
            predictor_fingerprint: None,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn predictor_fingerprint(&self) -> Option<&str> {
        self.predictor_fingerprint.as_deref()
    }

    pub(crate) fn set_predictor_fingerprint(&mut self, fp: Option<String>) {
        self.predictor_fingerprint = fp;
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    /// `(mu, logvar)`, each `[B, latent_dim]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = match &self.trunk {
            EncoderTrunk::Mlp(layers) => {
                let mut h = x;
                for layer in layers {
                    h = layer.forward(tape, bound, h)?;
                    h = tape.relu(h);
                }
                h
            }
            EncoderTrunk::Attention { trunk, fc } => {
                let h = trunk.forward(tape, bound, x)?;
                let h = fc.forward(tape, bound, h)?;
                tape.relu(h)
            }
        };
        let mu = self.mu_head.forward(tape, bound, h)?;
        let logvar = self.logvar_head.forward(tape, bound, h)?;
        Ok((mu, logvar))
    }

    /// Decoder output in normalized feature space.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let u = self.decoder.forward(tape, bound, z)?;
        match self.spec.head {
            OutputHead::Linear => Ok(u),
            OutputHead::PpgBeats { n_beats } => self.beat_head(tape, u, n_beats),
        }
    }

    fn beat_head(&self, tape: &mut Tape, u: Var, nb: usize) -> Result<Var> {
        let group = |tape: &mut Tape, i: usize| tape.slice(u, 1, i * nb, (i + 1) * nb);
        let norm = &self.normalization;
        let stat = |v: &[f64], i: usize| v[i * nb..(i + 1) * nb].to_vec();
        let (mean, std) = (&norm.mean, &norm.std);
        // amplitudes stay in normalized units
        let a1 = group(tape, 0)?;
        let a2 = group(tape, 1)?;
        let raw_a1 = self.denormalize_group(tape, a1, 0, nb)?;
        let raw_a2 = self.denormalize_group(tape, a2, 1, nb)?;
        // Constrained parameters go through softplus or sigmoid, offset so
        // that a zero pre-activation decodes to the training mean and scaled
        // so a unit step moves about one training standard deviation.
        let positive = |tape: &mut Tape, i: usize, floor: f64| -> Result<Var> {
            let (off, k): (Vec<f64>, Vec<f64>) = stat(mean, i)
                .iter()
                .zip(stat(std, i))
                .map(|(m, s)| {
                    let off = inv_softplus((m - floor).max(1e-3));
                    (off, s / sigmoid(off))
                })
                .unzip();
            let v = group(tape, i)?;
            let v = affine(tape, v, k, off)?;
            let v = tape.softplus(v);
            Ok(tape.add_scalar(v, floor))
        };
        // fraction of `outer` occupied by `inner`, per beat
        let fraction = |tape: &mut Tape, i: usize, inner: &[f64], outer: &[f64]| -> Result<Var> {
            let (off, k): (Vec<f64>, Vec<f64>) = inner
                .iter()
                .zip(outer)
                .zip(stat(std, i))
                .map(|((a, b), s)| {
                    let r = (a / b).clamp(0.05, 0.95);
                    let off = (r / (1.0 - r)).ln();
                    (off, s / (b * r * (1.0 - r)))
                })
                .unzip();
            let v = group(tape, i)?;
            let v = affine(tape, v, k, off)?;
            let v = tape.sigmoid(v);
            let v = tape.scale(v, 1.0 - 2.0 * THETA_MARGIN);
            Ok(tape.add_scalar(v, THETA_MARGIN))
        };
        let d = positive(tape, 6, MIN_DURATION)?;
        let f2 = fraction(tape, 3, &stat(mean, 3), &stat(mean, 6))?;
        let theta2 = tape.mul(d, f2)?;
        let f1 = fraction(tape, 2, &stat(mean, 2), &stat(mean, 3))?;
        let theta1 = tape.mul(theta2, f1)?;
        let b1 = positive(tape, 4, MIN_WIDTH)?;
        let b2 = positive(tape, 5, MIN_WIDTH)?;
        let raw = tape.concat(&[raw_a1, raw_a2, theta1, theta2, b1, b2, d], 1)?;
        let mean = tape.constant(Tensor::vector(norm.mean.clone()));
        let std = tape.constant(Tensor::vector(norm.std.clone()));
        let centered = tape.sub(raw, mean)?;
        Ok(tape.div(centered, std)?)
    }

    fn denormalize_group(&self, tape: &mut Tape, v: Var, i: usize, nb: usize) -> Result<Var> {
        let range = i * nb..(i + 1) * nb;
        let std = tape.constant(Tensor::vector(
            self.normalization.std[range.clone()].to_vec(),
        ));
        let mean = tape.constant(Tensor::vector(self.normalization.mean[range].to_vec()));
        let scaled = tape.mul(v, std)?;
        Ok(tape.add(scaled, mean)?)
    }

    /// Encoder, optional reparameterised draw with the given noise
    /// `eps[B, latent_dim]`, decoder.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        eps: Option<&Tensor>,
    ) -> Result<VaeOutput> {
        let (mu, logvar) = self.encode(tape, bound, x)?;
        let z = match eps {
            None => mu,
            Some(e) => {
                let half = tape.scale(logvar, 0.5);
                let sigma = tape.exp(half);
                let ev = tape.constant(e.clone());
                let noise = tape.mul(sigma, ev)?;
                tape.add(mu, noise)?
            }
        };
        let x_recon = self.decode(tape, bound, z)?;
        Ok(VaeOutput {
            x_recon,
            mu,
            logvar,
            z,
        })
    }

    /// Reconstruction and posterior for a batch of normalized rows.
    pub fn vae_forward(
        &self,
        x: &Tensor,
        mode: SampleMode<'_>,
    ) -> Result<(Tensor, LatentDistribution)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let eps = match mode {
            SampleMode::Deterministic => None,
            SampleMode::Sample(rng) => Some(standard_normal(&[x.rows(), self.latent_dim()], rng)),
        };
        let out = self.forward(&mut tape, &bound, xv, eps.as_ref())?;
        Ok((
            tape.value(out.x_recon).clone(),
            LatentDistribution {
                mu: tape.value(out.mu).clone(),
                logvar: tape.value(out.logvar).clone(),
            },
        ))
    }

    /// Posterior means `[n, latent_dim]`.
    pub fn latent_means(&self, x: &Tensor) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(x.rows() * self.latent_dim());
        for start in (0..x.rows()).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(x.rows())).collect();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(x.select_rows(&idx));
            let (mu, _) = self.encode(&mut tape, &bound, xv)?;
            rows.extend_from_slice(tape.value(mu).data());
        }
        Ok(Tensor::new(vec![x.rows(), self.latent_dim()], rows)?)
    }

    /// Decoded latent points `[n, input_dim]`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let x = self.decode(&mut tape, &bound, zv)?;
        Ok(tape.value(x).clone())
    }
}

pub(crate) fn standard_normal(shape: &[usize], rng: &mut dyn rand::RngCore) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Graph of the reconstruction and KL terms. Returns `(total, recon, kl)`.
pub fn vae_loss_graph(
    tape: &mut Tape,
    out: &VaeOutput,
    x: Var,
    weights: &LossWeights,
) -> Result<(Var, Var, Var)> {
    let recon = loss::squared_error(tape, x, out.x_recon)?;
    let kl = loss::kl_diag_gaussian(tape, out.mu, out.logvar)?;
    let a = tape.scale(recon, weights.w_recon);
    let b = tape.scale(kl, weights.w_kl);
    let total = tape.add(a, b)?;
    Ok((total, recon, kl))
}

/// Graph handles of the counterfactual objective.
#[derive(Debug, Clone, Copy)]
pub struct CfLossGraph {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub cf: Var,
    pub sparsity: Var,
    pub cf_logits: Var,
}

/// Adds the cross-entropy of the frozen predictor on the reconstruction
/// against `target` (the flipped predicted class) and the L1 perturbation
/// to the VAE objective.
pub fn cfvae_loss_graph(
    tape: &mut Tape,
    out: &VaeOutput,
    x: Var,
    target: Var,
    predictor: &BinaryPredictor,
    weights: &LossWeights,
) -> Result<CfLossGraph> {
    let (base, recon, kl) = vae_loss_graph(tape, out, x, weights)?;
    let cf_logits = predictor.logits_frozen(tape, out.x_recon)?;
    let cf = loss::bce_with_logits(tape, cf_logits, target)?;
    let sparsity = loss::l1_error(tape, x, out.x_recon)?;
    let c = tape.scale(cf, weights.lambda_cf);
    let s = tape.scale(sparsity, weights.lambda_s);
    let total = tape.add(base, c)?;
    let total = tape.add(total, s)?;
    Ok(CfLossGraph {
        total,
        recon,
        kl,
        cf,
        sparsity,
        cf_logits,
    })
}

/// Evaluates the full objective on a batch. `y` are the predictor's labels
/// on `x`; the counterfactual target is `1 - y`.
pub fn cfvae_loss(
    model: &CfVae,
    predictor: &BinaryPredictor,
    x: &Tensor,
    y: &[u8],
    weights: &LossWeights,
    eps: Option<&Tensor>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let target: Vec<f64> = y.iter().map(|&l| f64::from(1 - l)).collect();
    let tv = loss::target_column(&mut tape, &target);
    let out = model.forward(&mut tape, &bound, xv, eps)?;
    let g = cfvae_loss_graph(&mut tape, &out, xv, tv, predictor, weights)?;
    let v = |var: Var| tape.value(var).data()[0];
    Ok(LossBreakdown {
        total: v(g.total),
        terms: LossTerms {
            recon: v(g.recon),
            kl: v(g.kl),
            cf: v(g.cf),
            sparsity: v(g.sparsity),
        },
    })
}

/// Trains `model` on normalized rows. Without a predictor the objective is
/// reconstruction plus KL; with one it is the full counterfactual objective
/// against the predictor's flipped labels. `resume` continues a previous
/// state; `stop_after` ends early after that many epochs in this call.
pub fn train_vae(
    model: &mut CfVae,
    data: &Dataset,
    predictor: Option<&BinaryPredictor>,
    cfg: &VaeTrainConfig,
    resume: Option<TrainState>,
    stop_after: Option<usize>,
) -> Result<TrainState> {
    cfg.train.validate()?;
    cfg.weights.validate()?;
    if cfg.train.optimizer != OptimizerKind::Adam {
        return Err(Error::Config(
            "VAE training supports the adam optimizer only".into(),
        ));
    }
    if data.dim() != model.spec.input_dim {
        return Err(Error::Data(format!(
            "model expects {} features, data has {}",
            model.spec.input_dim,
            data.dim()
        )));
    }
    let targets: Option<Vec<f64>> = match predictor {
        Some(p) => {
            let fp = p.fingerprint();
            if let Some(recorded) = &model.predictor_fingerprint {
                if *recorded != fp {
                    return Err(Error::Checkpoint(format!(
                        "model was trained against predictor {recorded}, got {fp}"
                    )));
                }
            }
            model.predictor_fingerprint = Some(fp);
            let labels = p.predict_labels(data.features())?;
            Some(labels.iter().map(|&l| f64::from(1 - l)).collect())
        }
        None => None,
    };
    let mut state = match resume {
        Some(s) => s,
        None => TrainState {
            epoch: 0,
            adam: AdamState::new(&model.store, cfg.train.lr),
            weights: if predictor.is_some() {
                cfg.weights
            } else {
                LossWeights {
                    lambda_cf: 0.0,
                    lambda_s: 0.0,
                    ..cfg.weights
                }
            },
            trace: Vec::new(),
        },
    };
    let end = match stop_after {
        Some(k) => (state.epoch + k).min(cfg.train.epochs),
        None => cfg.train.epochs,
    };
    let n = data.len() as f64;
    while state.epoch < end {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.train.seed, epoch);
        let mut sums = [0.0f64; 5];
        for batch in shuffled_batches(data.len(), cfg.train.batch_size, &mut rng) {
            let eps = standard_normal(&[batch.len(), model.latent_dim()], &mut rng);
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, true);
            let x = tape.constant(data.features().select_rows(&batch));
            let out = model.forward(&mut tape, &bound, x, Some(&eps))?;
            let (total, terms) = match (predictor, &targets) {
                (Some(p), Some(t)) => {
                    let t: Vec<f64> = batch.iter().map(|&i| t[i]).collect();
                    let tv = loss::target_column(&mut tape, &t);
                    let g = cfvae_loss_graph(&mut tape, &out, x, tv, p, &state.weights)?;
                    (g.total, [g.recon, g.kl, g.cf, g.sparsity])
                }
                _ => {
                    let (total, recon, kl) = vae_loss_graph(&mut tape, &out, x, &state.weights)?;
                    (total, [recon, kl, recon, recon])
                }
            };
            let value = tape.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "VAE loss",
                    detail: format!("epoch {epoch}: {value}"),
                });
            }
            let b = batch.len() as f64;
            sums[0] += value * b;
            for (k, v) in terms.iter().enumerate() {
                sums[k + 1] += tape.value(*v).data()[0] * b;
            }
            tape.backward(total)?;
            let grads = model.store.grads(&tape, &bound);
            state.adam.step(&mut model.store, &grads)?;
        }
        let vanilla = predictor.is_none();
        let record = EpochTrace {
            epoch,
            total: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            cf: if vanilla { 0.0 } else { sums[3] / n },
            sparsity: if vanilla { 0.0 } else { sums[4] / n },
            lambda_s: state.weights.lambda_s,
        };
        if epoch == 0 && cfg.lambda_s_auto && !vanilla && record.sparsity > 0.0 {
            state.weights.lambda_s = cfg.lambda_s_ratio * record.recon / record.sparsity;
        }
        state.trace.push(record);
        state.epoch += 1;
    }
    Ok(state)
}
