//! Run configuration shared by the library pipeline and the command line.
//!
//! Every seed used by a run is derived from `RunConfig::seed`.

use serde::{Deserialize, Serialize};

use crate::baselines::{InputSearchConfig, LatentSearchConfig, NunConfig, SegmentMode};
use crate::datasets::{Layout, Normalization, SplitSpec, Task};
use crate::models::{
    BinaryPredictor, CfVae, EncoderArch, OutputHead, PredictorArch, PredictorSpec, SeqSpec,
    TrainConfig, VaeSpec, VaeTrainConfig,
};
use crate::nn::{LossWeights, OptimizerKind};
use crate::{Error, Result};

/// Optimisation schedule without a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Schedule {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorShape {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Needs a time-series layout.
    Attention {
        embed_dim: usize,
        layers: usize,
        heads: usize,
        fc: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderShape {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Needs a time-series layout.
    Attention {
        embed_dim: usize,
        layers: usize,
        heads: usize,
        fc: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    /// Constrained beat parameters; needs a beat layout.
    PpgBeats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub arch: PredictorShape,
    pub train: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub encoder: EncoderShape,
    pub decoder_hidden: Vec<usize>,
    pub head: HeadKind,
    pub train: Schedule,
    pub weights: LossWeights,
    pub lambda_s_auto: bool,
    pub lambda_s_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Test rows used for method comparisons (taken from the front of the
    /// already shuffled test split).
    pub max_test: usize,
    pub sweep_grid: Vec<f64>,
    /// Arrow pairs sampled per deconstruction variant.
    pub arrows: usize,
    /// A feature counts as changed when `|delta|` exceeds this fraction of
    /// its training standard deviation.
    pub changed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub data: DataConfig,
    pub predictor: PredictorConfig,
    pub vae: VaeConfig,
    pub input_search: InputSearchConfig,
    pub latent_search: LatentSearchConfig,
    pub nun: NunConfig,
    pub eval: EvalConfig,
}

/// Offsets added to the run seed for each consumer.
pub mod seeds {
    pub const PREDICTOR_INIT: u64 = 1;
    pub const PREDICTOR_TRAIN: u64 = 2;
    pub const VAE_INIT: u64 = 3;
    pub const VAE_TRAIN: u64 = 4;
    pub const ARROWS: u64 = 5;
    pub const PROBE_SHUFFLE: u64 = 6;
}

/// Loss weights for the vitals and PPG tasks.
const CF_WEIGHTS: LossWeights = LossWeights {
    w_recon: 1.0,
    w_kl: 1.0,
    lambda_cf: 10.0,
    lambda_s: 1.0,
};

/// Loss weights for moons. With a unit KL weight the VAE blurs the two arcs
/// together.
const MOONS_WEIGHTS: LossWeights = LossWeights {
    w_recon: 1.0,
    w_kl: 0.1,
    lambda_cf: 1.0,
    lambda_s: 1.0,
};

fn schedule(epochs: usize, batch_size: usize, lr: f64) -> Schedule {
    Schedule {
        epochs,
        batch_size,
        lr,
        optimizer: OptimizerKind::Adam,
    }
}

impl RunConfig {
    /// Defaults for a task. Vitals predictor and encoder widths and the VAE
    /// schedules follow the published hyperparameter tables; the decoders,
    /// latent sizes, `lambda_cf` outside the moons task, the slope-intercept
    /// predictor learning rate and the moons and PPG settings are our own.
    pub fn preset(task: Task) -> Self {
        let (predictor, vae) = match task {
            Task::Moons2d => (
                PredictorConfig {
                    arch: PredictorShape::Mlp {
                        hidden: vec![64; 4],
                    },
                    train: schedule(40, 32, 1e-3),
                },
                VaeConfig {
                    latent_dim: 2,
                    encoder: EncoderShape::Mlp {
                        hidden: vec![64, 64],
                    },
                    decoder_hidden: vec![64, 64],
                    head: HeadKind::Linear,
                    train: schedule(40, 32, 1e-3),
                    weights: MOONS_WEIGHTS,
                    lambda_s_auto: false,
                    lambda_s_ratio: 0.1,
                },
            ),
            Task::VitalsSi => (
                PredictorConfig {
                    arch: PredictorShape::Mlp {
                        hidden: vec![30, 10, 10],
                    },
                    train: schedule(50, 32, 1e-3),
                },
                VaeConfig {
                    latent_dim: 8,
                    encoder: EncoderShape::Mlp {
                        hidden: vec![40, 100, 60, 30],
                    },
                    decoder_hidden: vec![30],
                    head: HeadKind::Linear,
                    train: schedule(50, 32, 1e-3),
                    weights: CF_WEIGHTS,
                    lambda_s_auto: true,
                    lambda_s_ratio: 0.1,
                },
            ),
            Task::VitalsTs => (
                PredictorConfig {
                    arch: PredictorShape::Attention {
                        embed_dim: 30,
                        layers: 4,
                        heads: 5,
                        fc: vec![10, 20],
                    },
                    train: schedule(100, 64, 1e-4),
                },
                VaeConfig {
                    latent_dim: 8,
                    encoder: EncoderShape::Attention {
                        embed_dim: 100,
                        layers: 2,
                        heads: 2,
                        fc: 100,
                    },
                    decoder_hidden: vec![100],
                    head: HeadKind::Linear,
                    train: schedule(100, 64, 1e-5),
                    weights: CF_WEIGHTS,
                    lambda_s_auto: true,
                    lambda_s_ratio: 0.1,
                },
            ),
            Task::Ppg => (
                PredictorConfig {
                    arch: PredictorShape::Mlp {
                        hidden: vec![64, 32],
                    },
                    train: schedule(60, 32, 1e-3),
                },
                VaeConfig {
                    latent_dim: 4,
                    encoder: EncoderShape::Mlp {
                        hidden: vec![64, 32],
                    },
                    decoder_hidden: vec![32, 64],
                    head: HeadKind::PpgBeats,
                    train: schedule(60, 32, 1e-3),
                    weights: CF_WEIGHTS,
                    lambda_s_auto: true,
                    lambda_s_ratio: 0.1,
                },
            ),
        };
        Self {
            task,
            seed: 0,
            data: DataConfig {
                n: task.default_n(),
                split: SplitSpec::default(),
            },
            predictor,
            vae,
            input_search: InputSearchConfig::default(),
            latent_search: LatentSearchConfig::default(),
            nun: NunConfig {
                mode: if task == Task::VitalsTs {
                    SegmentMode::GrownSegment
                } else {
                    SegmentMode::Whole
                },
            },
            eval: EvalConfig {
                max_test: 300,
                sweep_grid: vec![1.0, 1e1, 1e2, 1e3, 1e4, 1e5],
                arrows: 20,
                changed_fraction: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.train.with_seed(0).validate()?;
        self.vae.train.with_seed(0).validate()?;
        self.vae.weights.validate()?;
        self.input_search.validate()?;
        self.latent_search.validate()?;
        if self.vae.latent_dim == 0 {
            return Err(Error::Config("vae.latent_dim must be positive".into()));
        }
        if self
            .eval
            .sweep_grid
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config(
                "eval.sweep_grid must hold finite non-negative weights".into(),
            ));
        }
        Ok(())
    }

    /// Split with the run seed applied.
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            ..self.data.split
        }
    }

    pub fn predictor_spec(&self, layout: &Layout, input_dim: usize) -> Result<PredictorSpec> {
        let arch = match &self.predictor.arch {
            PredictorShape::Mlp { hidden } => PredictorArch::Mlp {
                hidden: hidden.clone(),
            },
            PredictorShape::Attention {
                embed_dim,
                layers,
                heads,
                fc,
            } => PredictorArch::Attention {
                seq: seq_spec(layout, *embed_dim, *layers, *heads)?,
                fc: fc.clone(),
            },
        };
        Ok(PredictorSpec {
            input_dim,
            arch,
            init_seed: self.seed.wrapping_add(seeds::PREDICTOR_INIT),
        })
    }

    pub fn build_predictor(&self, layout: &Layout, input_dim: usize) -> Result<BinaryPredictor> {
        BinaryPredictor::new(self.predictor_spec(layout, input_dim)?)
    }

    pub fn predictor_train(&self) -> TrainConfig {
        self.predictor
            .train
            .with_seed(self.seed.wrapping_add(seeds::PREDICTOR_TRAIN))
    }

    pub fn vae_spec(&self, layout: &Layout, input_dim: usize) -> Result<VaeSpec> {
        let encoder = match &self.vae.encoder {
            EncoderShape::Mlp { hidden } => EncoderArch::Mlp {
                hidden: hidden.clone(),
            },
            EncoderShape::Attention {
                embed_dim,
                layers,
                heads,
                fc,
            } => EncoderArch::Attention {
                seq: seq_spec(layout, *embed_dim, *layers, *heads)?,
                fc: *fc,
            },
        };
        let head = match (self.vae.head, layout) {
            (HeadKind::Linear, _) => OutputHead::Linear,
            (HeadKind::PpgBeats, Layout::Beats { n_beats }) => {
                OutputHead::PpgBeats { n_beats: *n_beats }
            }
            (HeadKind::PpgBeats, other) => {
                return Err(Error::Config(format!(
                    "ppg_beats head needs a beat layout, got {other:?}"
                )))
            }
        };
        Ok(VaeSpec {
            input_dim,
            latent_dim: self.vae.latent_dim,
            encoder,
            decoder_hidden: self.vae.decoder_hidden.clone(),
            head,
            init_seed: self.seed.wrapping_add(seeds::VAE_INIT),
        })
    }

    pub fn build_vae(
        &self,
        layout: &Layout,
        input_dim: usize,
        normalization: Normalization,
    ) -> Result<CfVae> {
        CfVae::new(self.vae_spec(layout, input_dim)?, normalization)
    }

    /// Training settings for a VAE with the given loss weights.
    pub fn vae_train(&self, weights: LossWeights) -> VaeTrainConfig {
        VaeTrainConfig {
            train: self
                .vae
                .train
                .with_seed(self.seed.wrapping_add(seeds::VAE_TRAIN)),
            weights,
            lambda_s_auto: self.vae.lambda_s_auto,
            lambda_s_ratio: self.vae.lambda_s_ratio,
        }
    }
}

/// Layered configuration: the task preset, then a TOML document, then flat
/// `key.path=value` assignments. Later layers win.
impl RunConfig {
    pub fn layered(task: Task, file: Option<&str>, sets: &[String]) -> Result<Self> {
        Self::layered_over(Self::preset(task), file, sets)
    }

    /// As [`RunConfig::layered`] with `base` as the bottom layer.
    pub fn layered_over(base: RunConfig, file: Option<&str>, sets: &[String]) -> Result<Self> {
        let task = base.task;
        let mut root = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = file {
            let over: toml::Table =
                toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut root, over);
        }
        for s in sets {
            set_path(&mut root, s)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.task != task {
            return Err(Error::Config(format!(
                "config names task {} but the data is {task}",
                cfg.task
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `a.b.c=value` assignment. The value is read as a TOML value
/// and falls back to a bare string.
pub fn set_path(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad key path {path:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut table = root;
    for k in parents {
        table = match table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{path}: {k} is not a table"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn seq_spec(layout: &Layout, embed_dim: usize, layers: usize, heads: usize) -> Result<SeqSpec> {
    match layout {
        Layout::TimeSeries { channels, steps } => Ok(SeqSpec {
            channels: channels.len(),
            steps: *steps,
            embed_dim,
            layers,
            heads,
        }),
        other => Err(Error::Config(format!(
            "attention models need a time-series layout, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for task in Task::ALL {
            let cfg = RunConfig::preset(task);
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn attention_on_tabular_is_refused() {
        let cfg = RunConfig::preset(Task::VitalsTs);
        assert!(cfg.predictor_spec(&Layout::Tabular, 12).is_err());
        let ppg = RunConfig::preset(Task::Ppg);
        assert!(ppg.vae_spec(&Layout::Tabular, 56).is_err());
    }

    #[test]
    fn layers_apply_in_order() {
        let file = "seed = 7\n[vae]\nlatent_dim = 3\n[vae.train]\nepochs = 5\n";
        let sets = vec![
            "vae.train.epochs=9".to_string(),
            "predictor.arch.hidden=[8, 8]".to_string(),
        ];
        let cfg = RunConfig::layered(Task::Moons2d, Some(file), &sets).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.vae.latent_dim, 3);
        assert_eq!(cfg.vae.train.epochs, 9);
        assert_eq!(
            cfg.predictor.arch,
            PredictorShape::Mlp { hidden: vec![8, 8] }
        );
        assert_eq!(
            cfg.vae.decoder_hidden,
            RunConfig::preset(Task::Moons2d).vae.decoder_hidden
        );
    }

    #[test]
    fn effective_config_round_trips_through_toml() {
        for task in Task::ALL {
            let cfg = RunConfig::preset(task);
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::layered(task, Some(&text), &[]).unwrap(), cfg);
        }
    }

    #[test]
    fn bad_overrides_are_refused() {
        let t = Task::Moons2d;
        assert!(RunConfig::layered(t, None, &["seed".into()]).is_err());
        assert!(RunConfig::layered(t, None, &["vae.no_such_key=1".into()]).is_err());
        assert!(RunConfig::layered(t, None, &["task=ppg".into()]).is_err());
        assert!(RunConfig::layered(t, None, &["vae.latent_dim=0".into()]).is_err());
        assert!(RunConfig::layered(t, None, &["seed.x=1".into()]).is_err());
    }
}
