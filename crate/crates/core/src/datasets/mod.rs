//! Synthetic data generators, splitting, normalization and on-disk format.

mod io;
mod moons;
mod ppg;
mod split;
mod vitals;

use serde::{Deserialize, Serialize};

pub use io::{read_dataset_dir, write_dataset_dir, DatasetMeta, FORMAT_VERSION, META_FILE};
pub use moons::{gen_moons2d, MoonsConfig};
pub use ppg::{
    beat_feature_names, beats_from_row, gen_ppg, gen_ppg_dataset, PpgBeat, PpgConfig, PpgRecord,
    Rhythm, BEAT_PARAMS,
};
pub use split::{split, Normalization, SplitSpec, Splits};
pub use vitals::{
    gen_vitals, ols_fit, simulate_vitals, Representation, VitalsConfig, VitalsSample, CHANNELS,
    SBP_CHANNEL,
};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// How a flat feature row is organised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Tabular,
    /// Channel-major `N × T` series flattened to `N·T` columns.
    TimeSeries {
        channels: Vec<String>,
        steps: usize,
    },
    /// Parameter-major PPG beat parameters, `7 · n_beats` columns.
    Beats {
        n_beats: usize,
    },
}

/// Feature matrix `[n, F]` with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<u8>,
    feature_names: Vec<String>,
    layout: Layout,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<u8>,
        feature_names: Vec<String>,
        layout: Layout,
    ) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] != feature_names.len() {
            return Err(Error::Data(format!(
                "features {:?} do not match {} labels and {} names",
                shape,
                labels.len(),
                feature_names.len()
            )));
        }
        let expected = match &layout {
            Layout::Tabular => shape[1],
            Layout::TimeSeries { channels, steps } => channels.len() * steps,
            Layout::Beats { n_beats } => BEAT_PARAMS.len() * n_beats,
        };
        if expected != shape[1] {
            return Err(Error::Data(format!(
                "layout {layout:?} implies {expected} columns, found {}",
                shape[1]
            )));
        }
        if !features.all_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {l} is not binary")));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Same rows and labels with new feature values.
    pub fn with_features(&self, features: Tensor) -> Result<Dataset> {
        Dataset::new(
            features,
            self.labels.clone(),
            self.feature_names.clone(),
            self.layout.clone(),
        )
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            labels,
            self.feature_names.clone(),
            self.layout.clone(),
        )
    }
}

/// Experiment task, each backed by one generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Moons2d,
    VitalsSi,
    VitalsTs,
    Ppg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Moons2d, Task::VitalsSi, Task::VitalsTs, Task::Ppg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Moons2d => "moons2d",
            Task::VitalsSi => "vitals_si",
            Task::VitalsTs => "vitals_ts",
            Task::Ppg => "ppg",
        }
    }

    pub fn default_n(self) -> usize {
        match self {
            Task::Moons2d => 4000,
            Task::VitalsSi | Task::VitalsTs => 3000,
            Task::Ppg => 3000,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task {s:?}; expected one of moons2d, vitals_si, vitals_ts, ppg"
                ))
            })
    }
}

/// Output of a task generator.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub generator: serde_json::Value,
    /// Features (or, for time series, channels) that determine the label.
    pub relevant_features: Vec<String>,
}

/// Runs the task's generator with default settings and `n` samples.
pub fn generate(task: Task, n: usize, seed: u64) -> Result<Generated> {
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    Ok(match task {
        Task::Moons2d => {
            let cfg = MoonsConfig {
                n,
                ..Default::default()
            };
            Generated {
                dataset: gen_moons2d(&cfg, seed)?,
                generator: serde_json::to_value(&cfg)?,
                relevant_features: vec!["x1".into(), "x2".into()],
            }
        }
        Task::VitalsSi | Task::VitalsTs => {
            let cfg = VitalsConfig {
                n,
                ..Default::default()
            };
            let (repr, relevant) = if task == Task::VitalsSi {
                (
                    Representation::SlopeIntercept,
                    vec![
                        format!("{SBP_CHANNEL}_slope"),
                        format!("{SBP_CHANNEL}_intercept"),
                    ],
                )
            } else {
                (Representation::Temporal, vec![SBP_CHANNEL.to_string()])
            };
            Generated {
                dataset: gen_vitals(&cfg, repr, seed)?,
                generator: serde_json::to_value(&cfg)?,
                relevant_features: relevant,
            }
        }
        Task::Ppg => {
            let cfg = PpgConfig {
                n,
                ..Default::default()
            };
            Generated {
                dataset: gen_ppg_dataset(&cfg, seed)?,
                generator: serde_json::to_value(&cfg)?,
                relevant_features: vec!["d".into()],
            }
        }
    })
}
